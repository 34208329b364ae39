use std::path::Path;
use std::process::{Command, Output};

use lmlcc::network::{BackboneConfig, ModelConfig};
use lmlcc::Network32;

fn lmlcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmlcc"))
        .args(args)
        .env_remove("LMLCC_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn phantom(dir: &Path, extra: &[&str]) {
    let mut args = vec!["phantom", "--out-dir", p(dir)];
    args.extend_from_slice(extra);
    let o = lmlcc(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn auc_from_metrics(path: &Path) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    row[8].parse().unwrap()
}

#[test]
fn phantom_train_evaluate_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, &[]);
    let manifest = ph.join("manifest.csv");
    let patches = ph.join("patches.bin");
    let ckpt = tmp.path().join("model.ckpt");

    let o = lmlcc(&["train", "--manifest", p(&manifest), "--patches", p(&patches), "--out", p(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(tmp.path().join("model.log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,lr,train_loss,train_acc,val_loss,val_acc"));
    assert!(std::fs::read_to_string(tmp.path().join("model.ckpt.config.txt"))
        .unwrap()
        .contains("epochs=20"));

    let o = lmlcc(&["evaluate", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--patches", p(&patches)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for key in ["TP=", "accuracy", "precision", "sensitivity", "specificity", "AUC"] {
        assert!(out.contains(key), "{out}");
    }
    assert!(tmp.path().join("metrics.csv").exists());
    assert!(tmp.path().join("roc.csv").exists());
}

#[test]
fn lmlcc_flags_shape_the_model_and_cuts_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, &["--benign", "12", "--malignant", "12"]);
    let (manifest, patches) = (ph.join("manifest.csv"), ph.join("patches.bin"));
    let ckpt = tmp.path().join("m.ckpt");
    let o = lmlcc(&[
        "train",
        "--manifest",
        p(&manifest),
        "--patches",
        p(&patches),
        "--out",
        p(&ckpt),
        "--mode",
        "lmlcc",
        "--branches",
        "3",
        "--init",
        "constant",
        "--cuts",
        "learnable",
        "--include-original",
        "false",
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (net, adam) = Network32::load(&ckpt).unwrap();
    assert!(adam.is_some());
    match &net.config {
        ModelConfig::Lmlcc(l) => {
            assert_eq!(l.n_branches, 3);
            assert!(!l.include_original);
            assert_eq!(l.n_extractors(), 3);
        }
        other => panic!("expected lmlcc, got {other:?}"),
    }
    assert_eq!(net.cuts().unwrap().len(), 2);

    let o = lmlcc(&["evaluate", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--patches", p(&patches)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cuts"));
}

#[test]
fn untrained_model_scores_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, &["--benign", "100", "--malignant", "100", "--seed", "5"]);
    let (manifest, patches) = (ph.join("manifest.csv"), ph.join("patches.bin"));
    let mut aucs = Vec::new();
    for seed in 0..5 {
        let ckpt = tmp.path().join(format!("rand{seed}.ckpt"));
        let net = Network32::new(ModelConfig::Backbone(BackboneConfig::desk(16)), seed).unwrap();
        net.save(&ckpt, None).unwrap();
        let out_dir = tmp.path().join(format!("eval{seed}"));
        let o = lmlcc(&[
            "evaluate",
            "--checkpoint",
            p(&ckpt),
            "--manifest",
            p(&manifest),
            "--patches",
            p(&patches),
            "--out-dir",
            p(&out_dir),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        aucs.push(auc_from_metrics(&out_dir.join("metrics.csv")));
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((0.3..=0.7).contains(&mean), "aucs {aucs:?}");
}

#[test]
fn label_is_deterministic_and_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, &["--benign", "20", "--malignant", "20", "--hidden", "6"]);
    let ratings = ph.join("ratings.csv");
    let out = tmp.path().join("manifest.csv");
    let o = lmlcc(&["label", "--ratings", p(&ratings), "--out", p(&out), "--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("benign=17 malignant=17 ambiguous=6"), "{}", stdout(&o));
    let first = std::fs::read(&out).unwrap();
    let o = lmlcc(&["label", "--ratings", p(&ratings), "--out", p(&out), "--seed", "11"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn malformed_ratings_report_the_row() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    std::fs::write(
        &bad,
        "series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings\n\
         s1,n1,0,0,0,5,4|5\n\
         s1,n2,0,zero,0,5,1|2\n",
    )
    .unwrap();
    let o = lmlcc(&["label", "--ratings", p(&bad), "--out", p(&tmp.path().join("m.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_ratings.csv");
    let o = lmlcc(&["label", "--ratings", p(&missing), "--out", p(&tmp.path().join("m.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_ratings.csv"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let o = lmlcc(&["train", "--branches", "3", "--manifest", "a", "--patches", "b", "--out", "c"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("branches"));

    let o = lmlcc(&["train", "--cuts", "sometimes"]);
    assert_eq!(o.status.code(), Some(1));

    let o = lmlcc(&["label", "--out", "m.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ratings"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "epochs=2\nlearning_rate=0.1\n").unwrap();
    let o = lmlcc(&["--config", p(&cfg), "label", "--ratings", "r.csv", "--out", "m.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    assert_eq!(lmlcc(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_env_seed_fill_in_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, &["--benign", "10", "--malignant", "10"]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("# label run\nratings={}\nseed=4\n", ph.join("ratings.csv").display()),
    )
    .unwrap();
    let run = |out: &Path, env_seed: Option<&str>, flag_seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lmlcc"));
        cmd.args(["--config", p(&cfg), "label", "--out", p(out)]);
        if let Some(s) = flag_seed {
            cmd.args(["--seed", s]);
        }
        match env_seed {
            Some(s) => cmd.env("LMLCC_SEED", s),
            None => cmd.env_remove("LMLCC_SEED"),
        };
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(format!("{}.config.txt", out.display())).unwrap()
    };
    let echo = run(&tmp.path().join("a.csv"), Some("9"), None);
    assert!(echo.contains("seed=4"), "{echo}");
    let echo = run(&tmp.path().join("b.csv"), Some("9"), Some("6"));
    assert!(echo.contains("seed=6"), "{echo}");
    std::fs::write(&cfg, format!("ratings={}\n", ph.join("ratings.csv").display())).unwrap();
    let echo = run(&tmp.path().join("c.csv"), Some("9"), None);
    assert!(echo.contains("seed=9"), "{echo}");
}

#[test]
fn divergent_training_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, &["--benign", "10", "--malignant", "10"]);
    let o = lmlcc(&[
        "train",
        "--manifest",
        p(&ph.join("manifest.csv")),
        "--patches",
        p(&ph.join("patches.bin")),
        "--out",
        p(&tmp.path().join("m.ckpt")),
        "--epochs",
        "3",
        "--lr",
        "1e30",
        "--min-lr",
        "1e29",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn preprocess_and_gradcam_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, &["--benign", "8", "--malignant", "8"]);
    let cache = tmp.path().join("aug.bin");
    let o = lmlcc(&[
        "preprocess",
        "--ratings",
        p(&ph.join("ratings.csv")),
        "--volumes",
        p(&ph.join("volumes")),
        "--manifest",
        p(&ph.join("manifest.csv")),
        "--out",
        p(&cache),
        "--augment",
        "true",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let index = std::fs::read_to_string(tmp.path().join("aug.index.csv")).unwrap();
    let manifest = std::fs::read_to_string(ph.join("manifest.csv")).unwrap();
    let n_train = manifest.lines().filter(|l| l.contains(",train,")).count();
    assert_eq!(index.lines().count() - 1, 8 * n_train + (16 - n_train));

    let ckpt = tmp.path().join("m.ckpt");
    Network32::new(ModelConfig::Backbone(BackboneConfig::desk(16)), 1)
        .unwrap()
        .save(&ckpt, None)
        .unwrap();
    let cam = tmp.path().join("cam.mhd");
    let o = lmlcc(&[
        "gradcam",
        "--checkpoint",
        p(&ckpt),
        "--patches",
        p(&cache),
        "--nodule",
        "PH00003",
        "--out",
        p(&cam),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let vol: lmlcc::CtVolume32 = lmlcc::ingest::read_mhd_volume(&cam).unwrap();
    assert_eq!(vol.dims(), [16, 16, 16]);
    assert!(vol.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
}
