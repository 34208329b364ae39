use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lmlcc::ingest::{read_mhd_volume, read_ratings, write_mhd_volume, ElementType, Geometry, NoduleRecord};
use lmlcc::labeling::{label_records, DatasetSplit, MalignancyLabel, Split};
use lmlcc::metrics::evaluate as evaluate_report;
use lmlcc::network::{grad_cam, train as fit, write_epoch_log, ModelConfig};
use lmlcc::phantom::generate_dataset;
use lmlcc::preprocess::{
    clip_normalize, extract_patch, read_patch_cache, resample_trilinear, rotate_augment, write_patch_cache,
    ORIGINAL_TAG, TARGET_SPACING,
};
use lmlcc::semisup::{pseudo_manifest_csv, round_history_csv, semisup_loop};
use lmlcc::{CtVolume32, Error, Network32, Patch32};
use log::info;

use crate::config::{CliError, CliResult, RunConfig};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io(path))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io(path))
}

/// `<file>.config.txt` for file outputs, `<dir>/config.txt` for directories.
fn echo_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("config.txt")
    } else {
        let mut name = output.as_os_str().to_owned();
        name.push(".config.txt");
        PathBuf::from(name)
    }
}

fn echo(rc: &RunConfig, command: &str, resolved: &[String], output: &Path, is_dir: bool) -> CliResult<()> {
    let text = rc.echo(command, resolved);
    for line in text.lines() {
        info!("config: {line}");
    }
    write_text(&echo_path(output, is_dir), &text)
}

/// Patches for every record, labeled from the manifest. Volumes are read as
/// `<volumes>/<series_id>.mhd`; train-split patches get the eight rotations
/// when `augment` is set.
pub fn build_patches(
    records: &[NoduleRecord],
    volumes: &Path,
    split: &DatasetSplit,
    side: usize,
    augment: bool,
) -> CliResult<Vec<Patch32>> {
    let mut by_series: BTreeMap<&str, Vec<&NoduleRecord>> = BTreeMap::new();
    for r in records {
        by_series.entry(r.series_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (series, recs) in by_series {
        let vol: CtVolume32 = read_mhd_volume(volumes.join(format!("{series}.mhd")))?;
        let norm = resample_trilinear(&clip_normalize(&vol), TARGET_SPACING)?;
        for r in recs {
            let which = split
                .split_of(&r.nodule_id)
                .ok_or_else(|| Error::Format(format!("nodule {} is not in the manifest", r.nodule_id)))?;
            let label = split.labels[&r.nodule_id].target();
            let p = extract_patch(&norm, &r.nodule_id, r.center_world, side)?.with_label(label);
            if augment && which == Split::Train {
                out.extend(rotate_augment(&p));
            } else {
                out.push(p);
            }
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Sets {
    train: Vec<Patch32>,
    val: Vec<Patch32>,
    test: Vec<Patch32>,
    unlabeled: Vec<Patch32>,
}

impl Sets {
    fn get(&self, split: Split) -> &[Patch32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Unlabeled => &self.unlabeled,
        }
    }
}

/// Groups cached patches by manifest split, taking labels from the manifest.
/// Rotated copies are kept for training only.
fn load_sets(rc: &RunConfig, side: Option<usize>) -> CliResult<(DatasetSplit, Sets)> {
    let split = DatasetSplit::read_manifest(rc.path("manifest")?)?;
    let patches: Vec<Patch32> = read_patch_cache(rc.path("patches")?)?;
    let mut sets = Sets::default();
    for p in patches {
        if let Some(side) = side {
            if p.side != side {
                return Err(CliError::Usage(format!(
                    "patch_side={side} but the cache holds {}-voxel patches",
                    p.side
                )));
            }
        }
        let which = split
            .split_of(&p.nodule_id)
            .ok_or_else(|| Error::Format(format!("patch {} is not in the manifest", p.nodule_id)))?;
        if which != Split::Train && p.augmentation_tag != ORIGINAL_TAG {
            continue;
        }
        let label = split.labels[&p.nodule_id].target();
        let p = p.with_label(label);
        match which {
            Split::Train => sets.train.push(p),
            Split::Val => sets.val.push(p),
            Split::Test => sets.test.push(p),
            Split::Unlabeled => sets.unlabeled.push(p),
        }
    }
    Ok((split, sets))
}

fn print_counts(split: &DatasetSplit) {
    let count = |l: MalignancyLabel| split.labels.values().filter(|&&x| x == l).count();
    println!(
        "benign={} malignant={} ambiguous={}",
        count(MalignancyLabel::Benign),
        count(MalignancyLabel::Malignant),
        count(MalignancyLabel::Ambiguous)
    );
    println!(
        "train={} val={} test={} unlabeled={}",
        split.train_ids.len(),
        split.val_ids.len(),
        split.test_ids.len(),
        split.unlabeled_ids.len()
    );
}

pub fn label(rc: &RunConfig) -> CliResult<()> {
    let ratings = rc.path("ratings")?;
    let out = rc.path("out")?;
    let seed = rc.seed()?;
    let records = read_ratings(&ratings)?;
    let split = label_records(&records, seed)?;
    split.write_manifest(&out)?;
    print_counts(&split);
    echo(rc, "label", &[format!("seed={seed}\n")], &out, false)
}

pub fn preprocess(rc: &RunConfig) -> CliResult<()> {
    let records = read_ratings(rc.path("ratings")?)?;
    let volumes = rc.path("volumes")?;
    let split = DatasetSplit::read_manifest(rc.path("manifest")?)?;
    let out = rc.path("out")?;
    let index = rc.get("index").map_or_else(|| out.with_extension("index.csv"), PathBuf::from);
    let side = rc.value("patch_side", 16usize)?;
    let augment = rc.value("augment", false)?;
    let patches = build_patches(&records, &volumes, &split, side, augment)?;
    write_patch_cache(&out, &index, &patches)?;
    println!("wrote {} patches to {}", patches.len(), out.display());
    echo(
        rc,
        "preprocess",
        &[format!("patch_side={side}\naugment={augment}\nindex={}\n", index.display())],
        &out,
        false,
    )
}

fn model_and_schedule(rc: &RunConfig) -> CliResult<(ModelConfig, lmlcc::network::TrainConfig, Vec<String>)> {
    let model = rc.model()?;
    let tc = rc.train(&model)?;
    let resolved = vec![model.to_text(), tc.to_text()];
    Ok((model, tc, resolved))
}

pub fn train(rc: &RunConfig) -> CliResult<()> {
    let (model, tc, resolved) = model_and_schedule(rc)?;
    let out = rc.path("out")?;
    let log_path = rc.get("log").map_or_else(|| out.with_extension("log.csv"), PathBuf::from);
    let (_, sets) = load_sets(rc, Some(model.backbone().patch_side))?;
    let net = Network32::new(model, tc.seed)?;
    let outcome = fit(net, &sets.train, &sets.val, &tc)?;
    outcome.best.save(&out, Some(&outcome.adam))?;
    write_epoch_log(&log_path, &outcome.log)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: val_loss={:.4} val_acc={:.4}",
        outcome.best_epoch,
        outcome.log.len(),
        best.val_loss,
        best.val_acc
    );
    if let Some(cuts) = outcome.best.cuts() {
        println!("cuts {cuts:?}");
    }
    echo(rc, "train", &resolved, &out, false)
}

pub fn pseudolabel(rc: &RunConfig) -> CliResult<()> {
    let (model, tc, mut resolved) = model_and_schedule(rc)?;
    let cfg = rc.semisup()?;
    resolved.push(format!(
        "threshold={}\nmax_rounds={}\nmin_new={}\n",
        cfg.threshold, cfg.max_rounds, cfg.min_new
    ));
    let out_dir = rc.path("out_dir")?;
    let (split, sets) = load_sets(rc, Some(model.backbone().patch_side))?;
    let outcome = semisup_loop(&model, &sets.train, &sets.val, &sets.unlabeled, &tc, &cfg)?;
    create_dir(&out_dir)?;
    outcome.network.save(out_dir.join("model.ckpt"), Some(&outcome.adam))?;
    outcome.baseline.save(out_dir.join("baseline.ckpt"), None)?;
    write_text(&out_dir.join("round_history.csv"), &round_history_csv(&outcome.rounds))?;
    write_text(
        &out_dir.join("pseudo_manifest.csv"),
        &pseudo_manifest_csv(&split, &outcome.pseudo)?,
    )?;
    for r in &outcome.rounds {
        println!(
            "round {}: train_size={} new={} remaining={}",
            r.round_index, r.train_size, r.n_newly_labeled, r.n_remaining_unlabeled
        );
    }
    echo(rc, "pseudolabel", &resolved, &out_dir, true)
}

pub fn evaluate(rc: &RunConfig) -> CliResult<()> {
    let ckpt = rc.path("checkpoint")?;
    let (net, _) = Network32::load(&ckpt)?;
    let which = Split::from_str(rc.get("split").unwrap_or("test")).map_err(|e| CliError::Usage(e.to_string()))?;
    let out_dir = match rc.get("out_dir") {
        Some(d) => PathBuf::from(d),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (_, sets) = load_sets(rc, Some(net.patch_side()))?;
    let patches = sets.get(which);
    let labels = patches
        .iter()
        .map(|p| {
            p.label
                .ok_or_else(|| Error::Config(format!("nodule {} in split {which} has no label", p.nodule_id)))
        })
        .collect::<Result<Vec<u8>, _>>()?;
    let probs: Vec<f64> = net.predict(patches)?.into_iter().map(f64::from).collect();
    let cuts = net.cuts().map(|c| c.into_iter().map(f64::from).collect());
    let report = evaluate_report(&labels, &probs, cuts)?;
    create_dir(&out_dir)?;
    report.write(out_dir.join("metrics.csv"), out_dir.join("roc.csv"))?;
    println!("split {which}: {} nodules", labels.len());
    println!("{report}");
    echo(
        rc,
        "evaluate",
        &[net.config.to_text(), format!("split={which}\n")],
        &out_dir,
        true,
    )
}

pub fn gradcam(rc: &RunConfig) -> CliResult<()> {
    let (net, _) = Network32::load(rc.path("checkpoint")?)?;
    let nodule = rc
        .get("nodule")
        .ok_or_else(|| CliError::Usage("missing required nodule (flag --nodule)".into()))?;
    let out = rc.path("out")?;
    let patches: Vec<Patch32> = read_patch_cache(rc.path("patches")?)?;
    let patch = patches
        .iter()
        .find(|p| p.nodule_id == nodule && p.augmentation_tag == ORIGINAL_TAG)
        .ok_or_else(|| Error::Format(format!("no patch for nodule {nodule}")))?;
    let cam = grad_cam(&net, patch)?;
    let prob = net.predict(std::slice::from_ref(patch))?[0];
    let s = patch.side;
    let vol = CtVolume32::new(nodule, Geometry::new([s; 3], TARGET_SPACING, [0.0; 3])?, cam)?;
    write_mhd_volume(&vol, &out, ElementType::Float)?;
    println!("nodule {nodule}: p(malignant)={prob:.4}, heatmap written to {}", out.display());
    echo(rc, "gradcam", &[], &out, false)
}

pub fn phantom(rc: &RunConfig) -> CliResult<()> {
    let out_dir = rc.path("out_dir")?;
    let side = rc.value("patch_side", 16usize)?;
    let n_benign = rc.value("benign", 40usize)?;
    let n_malignant = rc.value("malignant", 40usize)?;
    let hidden = rc.value("hidden", 0usize)?;
    let seed = rc.seed()?;
    let mut ds = generate_dataset::<f32>(n_benign, n_malignant, side, seed)?;
    if hidden > 0 {
        ds.hide_labels(hidden, seed)?;
    }
    create_dir(&out_dir)?;
    let files = ds.write(&out_dir, seed)?;

    let records = read_ratings(&files.ratings)?;
    let split = label_records(&records, seed)?;
    split.write_manifest(out_dir.join("manifest.csv"))?;
    let patches = build_patches(&records, &files.volumes, &split, side, false)?;
    write_patch_cache(out_dir.join("patches.bin"), out_dir.join("patches.index.csv"), &patches)?;
    println!("{} phantoms written to {}", ds.len(), out_dir.display());
    print_counts(&split);
    echo(
        rc,
        "phantom",
        &[format!(
            "patch_side={side}\nbenign={n_benign}\nmalignant={n_malignant}\nhidden={hidden}\nseed={seed}\n"
        )],
        &out_dir,
        true,
    )
}
