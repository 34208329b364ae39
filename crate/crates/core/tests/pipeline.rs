use std::collections::BTreeSet;

use lmlcc::ingest::{read_mhd_volume, read_ratings};
use lmlcc::labeling::{label_records, MalignancyLabel, Split};
use lmlcc::phantom::{generate_dataset, PhantomDataset};
use lmlcc::preprocess::{clip_normalize, extract_patch, read_patch_cache, resample_trilinear, write_patch_cache, TARGET_SPACING};
use lmlcc::CtVolume32;

#[test]
fn phantom_dataset_is_balanced_and_uniquely_named() {
    let ds: PhantomDataset<f32> = generate_dataset(200, 200, 16, 9).unwrap();
    let patches = ds.patches(true).unwrap();
    assert_eq!(patches.len(), 400);
    assert_eq!(patches.iter().filter(|p| p.label == Some(1)).count(), 200);
    assert_eq!(patches.iter().filter(|p| p.label == Some(0)).count(), 200);
    let ids: BTreeSet<&str> = patches.iter().map(|p| p.nodule_id.as_str()).collect();
    assert_eq!(ids.len(), 400);
    assert!(patches.iter().all(|p| p.voxels.len() == 16 * 16 * 16));
    assert!(patches.iter().flat_map(|p| &p.voxels).all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn files_on_disk_reproduce_in_memory_patches() {
    let mut ds: PhantomDataset<f32> = generate_dataset(8, 8, 16, 10).unwrap();
    ds.hide_labels(4, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = ds.write(dir.path(), 10).unwrap();

    let records = read_ratings(&files.ratings).unwrap();
    assert_eq!(records.len(), 16);
    let split = label_records(&records, 10).unwrap();
    assert_eq!(split.ids(Split::Unlabeled).len(), 4);
    for (case, &hidden) in ds.cases.iter().zip(&ds.hidden) {
        let id = &case.volume.series_id;
        let want = if hidden {
            MalignancyLabel::Ambiguous
        } else {
            MalignancyLabel::from_target(case.label())
        };
        assert_eq!(split.labels[id], want, "{id}");
    }

    // Volumes are stored as 16-bit HU, so each voxel may move by half a
    // unit; after normalization that is 0.5 / 1500.
    let tol = 0.5 / 1500.0 + 1e-6;
    let memory = ds.patches(true).unwrap();
    for (case, want) in ds.cases.iter().zip(&memory) {
        let id = &case.volume.series_id;
        let vol: CtVolume32 = read_mhd_volume(files.volumes.join(format!("{id}.mhd"))).unwrap();
        assert_eq!(vol.geometry, case.volume.geometry);
        let norm = resample_trilinear(&clip_normalize(&vol), TARGET_SPACING).unwrap();
        let got = extract_patch(&norm, id, records.iter().find(|r| &r.nodule_id == id).unwrap().center_world, 16).unwrap();
        let worst = got
            .voxels
            .iter()
            .zip(&want.voxels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(f64::from(worst) <= tol, "{id}: {worst}");
    }

    let cache = dir.path().join("patches.bin");
    let index = dir.path().join("patches.index.csv");
    write_patch_cache(&cache, &index, &memory).unwrap();
    assert_eq!(read_patch_cache::<f32>(&cache).unwrap(), memory);
}
