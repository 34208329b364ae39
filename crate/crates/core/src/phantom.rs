//! Synthetic CT nodules with known labels.
//!
//! Benign nodules are smooth ellipsoids with a narrow intensity band; malignant
//! ones are spheres with radial spikes and a broad, bimodal band. Volumes use
//! the pipeline's target spacing, so resampling is the identity on them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest::{write_mhd_volume, write_ratings, CtVolume, ElementType, Geometry, NoduleRecord};
use crate::preprocess::{clip_normalize, extract_patch, resample_trilinear, Patch, HU_MAX, HU_MIN, TARGET_SPACING};
use crate::scalar::Scalar;

pub const BACKGROUND_HU: f64 = -1000.0;
pub const BACKGROUND_NOISE_SD: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhantomClass {
    Benign,
    Malignant,
}

impl PhantomClass {
    pub fn label(self) -> u8 {
        match self {
            PhantomClass::Benign => 0,
            PhantomClass::Malignant => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub class: PhantomClass,
    pub side: usize,
    pub radius_mm: f64,
    /// Number of radial spikes (0 for benign).
    pub spiculation: usize,
    pub core_hu_band: (f64, f64),
    pub texture_noise_sd: f64,
    pub seed: u64,
}

/// Largest nodule extent (mm) that keeps a one-voxel margin inside the patch.
fn max_extent_mm(side: usize) -> f64 {
    let min_spacing = TARGET_SPACING.iter().copied().fold(f64::INFINITY, f64::min);
    (side as f64 / 2.0 - 1.0) * min_spacing
}

const MAX_ASPECT: f64 = 1.2;
const MAX_SPIKE: f64 = 0.8;

impl PhantomSpec {
    /// Default benign spec; the radius is drawn from `seed`.
    pub fn benign(side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0);
        let ext = max_extent_mm(side) / MAX_ASPECT;
        Self {
            class: PhantomClass::Benign,
            side,
            radius_mm: rng.random_range(0.45..0.8) * ext,
            spiculation: 0,
            core_hu_band: (-100.0, 60.0),
            texture_noise_sd: 15.0,
            seed,
        }
    }

    /// Default malignant spec with 12 spikes; the radius is drawn from `seed`.
    pub fn malignant(side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA1);
        let ext = max_extent_mm(side) / (1.0 + MAX_SPIKE);
        Self {
            class: PhantomClass::Malignant,
            side,
            radius_mm: rng.random_range(0.75..1.0) * ext,
            spiculation: 12,
            core_hu_band: (-300.0, 350.0),
            texture_noise_sd: 60.0,
            seed,
        }
    }

    /// Outer radius including spikes or ellipsoid stretch.
    pub fn extent_mm(&self) -> f64 {
        match self.class {
            PhantomClass::Benign => self.radius_mm * MAX_ASPECT,
            PhantomClass::Malignant if self.spiculation > 0 => self.radius_mm * (1.0 + MAX_SPIKE),
            PhantomClass::Malignant => self.radius_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::Config("phantom side must be >= 4".into()));
        }
        if !(self.radius_mm > 0.0) || self.extent_mm() > max_extent_mm(self.side) + 1e-9 {
            return Err(Error::Config(format!(
                "nodule extent {:.2} mm does not fit a {}-voxel patch (max {:.2} mm)",
                self.extent_mm(),
                self.side,
                max_extent_mm(self.side)
            )));
        }
        let (lo, hi) = self.core_hu_band;
        if !(HU_MIN <= lo && lo <= hi && hi <= HU_MAX) {
            return Err(Error::Config(format!("HU band ({lo}, {hi}) must lie within [{HU_MIN}, {HU_MAX}]")));
        }
        if !(self.texture_noise_sd >= 0.0) {
            return Err(Error::Config("texture noise sd must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom<T> {
    pub spec: PhantomSpec,
    pub volume: CtVolume<T>,
    pub center_world: [f64; 3],
    /// Inclusive voxel bounding box of the nodule, `[min, max]` per axis.
    pub bbox: [[usize; 2]; 3],
    /// Voxel indices belonging to the nodule.
    pub nodule_voxels: Vec<usize>,
}

impl<T: Scalar> Phantom<T> {
    pub fn label(&self) -> u8 {
        self.spec.class.label()
    }

    /// Bounding box in the coordinates of the `side`³ patch centred on the nodule.
    pub fn bbox_in_patch(&self, side: usize) -> [[usize; 2]; 3] {
        let c = self.volume.geometry.world_to_voxel(self.center_world);
        std::array::from_fn(|a| {
            let start = c[a].round() as i64 - (side / 2) as i64;
            let lo = (self.bbox[a][0] as i64 - start).clamp(0, side as i64 - 1) as usize;
            let hi = (self.bbox[a][1] as i64 - start).clamp(0, side as i64 - 1) as usize;
            [lo, hi]
        })
    }

    /// Nodule HU values.
    pub fn nodule_values(&self) -> Vec<f64> {
        let v = self.volume.voxels();
        self.nodule_voxels.iter().map(|&i| v[i].to_f64_lossy()).collect()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

struct Spike {
    dir: [f64; 3],
    length: f64,
    base: f64,
}

pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec, series_id: &str) -> Result<Phantom<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let margin = spec.side / 4;
    let n = spec.side + 2 * margin;
    let geometry = Geometry::new([n; 3], TARGET_SPACING, [0.0; 3])?;
    let cvox = [(n / 2) as f64; 3];
    let center_world = geometry.voxel_to_world(cvox);

    let r = spec.radius_mm;
    let axes: [f64; 3] = std::array::from_fn(|_| r * rng.random_range(1.0 / MAX_ASPECT..MAX_ASPECT));
    let spikes: Vec<Spike> = (0..spec.spiculation)
        .map(|_| Spike {
            dir: unit_vector(&mut rng),
            length: r * rng.random_range(0.5..MAX_SPIKE),
            base: r * rng.random_range(0.25..0.4),
        })
        .collect();
    let inside = |q: [f64; 3]| -> bool {
        match spec.class {
            PhantomClass::Benign => (0..3).map(|a| (q[a] / axes[a]).powi(2)).sum::<f64>() <= 1.0,
            PhantomClass::Malignant => {
                let d2 = q.iter().map(|c| c * c).sum::<f64>();
                if d2 <= r * r {
                    return true;
                }
                spikes.iter().any(|s| {
                    let t = q[0] * s.dir[0] + q[1] * s.dir[1] + q[2] * s.dir[2];
                    let reach = r + s.length;
                    if !(0.0..=reach).contains(&t) {
                        return false;
                    }
                    let rho2 = d2 - t * t;
                    let allowed = s.base * (1.0 - t / reach);
                    rho2 <= allowed * allowed
                })
            }
        }
    };

    let (lo, hi) = spec.core_hu_band;
    let texture = Normal::new(0.0, spec.texture_noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let background = Normal::new(BACKGROUND_HU, BACKGROUND_NOISE_SD).map_err(|e| Error::Config(e.to_string()))?;
    // benign: one mean per nodule; malignant: a dark and a bright mode
    let modes = match spec.class {
        PhantomClass::Benign => {
            let m = rng.random_range(lo..=hi);
            [m, m]
        }
        PhantomClass::Malignant => {
            let mid = lo + (hi - lo) / 3.0;
            let upper = hi - (hi - lo) / 3.0;
            [rng.random_range(lo..=mid), rng.random_range(upper..=hi)]
        }
    };

    let mut voxels = Vec::with_capacity(geometry.len());
    let mut nodule_voxels = Vec::new();
    let mut bbox = [[usize::MAX, 0]; 3];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let q: [f64; 3] = std::array::from_fn(|a| ([x, y, z][a] as f64 - cvox[a]) * TARGET_SPACING[a]);
                let hu = if inside(q) {
                    nodule_voxels.push(geometry.index(x, y, z));
                    for (a, &c) in [x, y, z].iter().enumerate() {
                        bbox[a][0] = bbox[a][0].min(c);
                        bbox[a][1] = bbox[a][1].max(c);
                    }
                    let mode = modes[rng.random_range(0..2)];
                    mode + texture.sample(&mut rng)
                } else {
                    background.sample(&mut rng)
                };
                voxels.push(T::lit(hu.clamp(HU_MIN, HU_MAX)));
            }
        }
    }
    if nodule_voxels.is_empty() {
        return Err(Error::Config("nodule too small to cover any voxel".into()));
    }
    Ok(Phantom {
        spec: spec.clone(),
        volume: CtVolume::new(series_id, geometry, voxels)?,
        center_world,
        bbox,
        nodule_voxels,
    })
}

#[derive(Clone, Debug)]
pub struct PhantomDataset<T> {
    pub cases: Vec<Phantom<T>>,
    /// `true` where the label is withheld (ambiguous ratings).
    pub hidden: Vec<bool>,
}

pub fn phantom_id(i: usize) -> String {
    format!("PH{i:05}")
}

/// `n_benign` benign then `n_malignant` malignant phantoms. Per-case seeds
/// are drawn up front from `seed`, so generation order does not matter.
pub fn generate_dataset<T: Scalar>(n_benign: usize, n_malignant: usize, side: usize, seed: u64) -> Result<PhantomDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_benign + n_malignant;
    let seeds: Vec<u64> = (0..total).map(|_| rng.random()).collect();
    let cases = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let spec = if i < n_benign {
                PhantomSpec::benign(side, s)
            } else {
                PhantomSpec::malignant(side, s)
            };
            generate_phantom(&spec, &phantom_id(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomDataset {
        cases,
        hidden: vec![false; total],
    })
}

impl<T: Scalar> PhantomDataset<T> {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Withholds the labels of `n` cases, split as evenly as possible between
    /// the classes and chosen by `seed`.
    pub fn hide_labels(&mut self, n: usize, seed: u64) -> Result<()> {
        if n > self.len() {
            return Err(Error::InsufficientData {
                needed: n,
                got: self.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, c) in self.cases.iter().enumerate() {
            by_class[c.label() as usize].push(i);
        }
        for list in &mut by_class {
            list.shuffle(&mut rng);
        }
        let want0 = (n / 2).min(by_class[0].len()).max(n.saturating_sub(by_class[1].len()));
        let picks = by_class[0].iter().take(want0).chain(by_class[1].iter().take(n - want0));
        self.hidden.iter_mut().for_each(|h| *h = false);
        for &i in picks {
            self.hidden[i] = true;
        }
        Ok(())
    }

    /// Ratings that the consensus labeler maps back to the true class, or
    /// to ambiguous for hidden cases.
    pub fn ratings(&self, seed: u64) -> Vec<NoduleRecord> {
        const AMBIGUOUS: [&[u8]; 4] = [&[3, 3], &[2, 4], &[3, 3, 3], &[2, 3, 4, 3]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.cases
            .iter()
            .zip(&self.hidden)
            .map(|(c, &hidden)| {
                let readers = rng.random_range(2..=4);
                let ratings = if hidden {
                    AMBIGUOUS[rng.random_range(0..AMBIGUOUS.len())].to_vec()
                } else {
                    let range = if c.label() == 1 { 4..=5 } else { 1..=2 };
                    (0..readers).map(|_| rng.random_range(range.clone())).collect()
                };
                NoduleRecord {
                    series_id: c.volume.series_id.clone(),
                    nodule_id: c.volume.series_id.clone(),
                    center_world: c.center_world,
                    diameter_mm: 2.0 * c.spec.radius_mm,
                    ratings,
                }
            })
            .collect()
    }

    /// Ground-truth CSV: `nodule_id,label,hidden`.
    pub fn truth_csv(&self) -> String {
        let mut s = String::from("nodule_id,label,hidden\n");
        for (c, h) in self.cases.iter().zip(&self.hidden) {
            let _ = writeln!(s, "{},{},{}", c.volume.series_id, c.label(), h);
        }
        s
    }

    /// Runs every case through normalization, resampling and patch
    /// extraction. Hidden cases get `label = None` unless `reveal` is set.
    pub fn patches(&self, reveal: bool) -> Result<Vec<Patch<T>>> {
        self.cases
            .iter()
            .zip(&self.hidden)
            .map(|(c, &hidden)| {
                let norm = resample_trilinear(&clip_normalize(&c.volume), TARGET_SPACING)?;
                let p = extract_patch(&norm, &c.volume.series_id, c.center_world, c.spec.side)?;
                Ok(p.with_label((reveal || !hidden).then(|| c.label())))
            })
            .collect()
    }

    /// Writes `volumes/<id>.mhd|raw`, `ratings.csv` and `truth.csv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, seed: u64) -> Result<PhantomFiles> {
        let dir = dir.as_ref();
        let vol_dir = dir.join("volumes");
        fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
        for c in &self.cases {
            write_mhd_volume(&c.volume, vol_dir.join(format!("{}.mhd", c.volume.series_id)), ElementType::Short)?;
        }
        let files = PhantomFiles {
            volumes: vol_dir,
            ratings: dir.join("ratings.csv"),
            truth: dir.join("truth.csv"),
        };
        write_ratings(&files.ratings, &self.ratings(seed))?;
        fs::write(&files.truth, self.truth_csv()).map_err(|e| Error::io(&files.truth, e))?;
        Ok(files)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhantomFiles {
    pub volumes: PathBuf,
    pub ratings: PathBuf,
    pub truth: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{consensus_label, MalignancyLabel};

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let s = PhantomSpec::benign(16, 42);
        let a: Phantom<f32> = generate_phantom(&s, "a").unwrap();
        let b: Phantom<f32> = generate_phantom(&s, "a").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn benign_histogram_stays_in_band() {
        for seed in 0..10 {
            let s = PhantomSpec::benign(16, seed);
            let p: Phantom<f64> = generate_phantom(&s, "b").unwrap();
            let v = p.nodule_values();
            let (lo, hi) = s.core_hu_band;
            let sd = s.texture_noise_sd;
            let ok = v.iter().filter(|&&x| x >= lo - 3.0 * sd && x <= hi + 3.0 * sd).count();
            assert!(ok as f64 >= 0.95 * v.len() as f64);
        }
    }

    #[test]
    fn malignant_variance_dominates() {
        let mut mal = Vec::new();
        let mut ben = Vec::new();
        for seed in 0..100 {
            let m: Phantom<f64> = generate_phantom(&PhantomSpec::malignant(16, seed), "m").unwrap();
            let b: Phantom<f64> = generate_phantom(&PhantomSpec::benign(16, seed), "b").unwrap();
            mal.extend(m.nodule_values());
            ben.extend(b.nodule_values());
        }
        assert!(variance(&mal) >= 2.0 * variance(&ben));
    }

    #[test]
    fn voxels_are_clipped() {
        let p: Phantom<f64> = generate_phantom(&PhantomSpec::malignant(16, 3), "m").unwrap();
        assert!(p.volume.voxels().iter().all(|&v| (HU_MIN..=HU_MAX).contains(&v)));
    }

    #[test]
    fn oversized_nodule_is_rejected() {
        let mut s = PhantomSpec::malignant(16, 0);
        s.radius_mm = 10.0;
        assert!(generate_phantom::<f32>(&s, "x").is_err());
        let mut s = PhantomSpec::benign(16, 0);
        s.core_hu_band = (-1200.0, 0.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_counts_and_ratings() {
        let mut ds = generate_dataset::<f32>(6, 4, 16, 1).unwrap();
        assert_eq!(ds.len(), 10);
        ds.hide_labels(4, 2).unwrap();
        assert_eq!(ds.hidden.iter().filter(|&&h| h).count(), 4);
        for (r, (c, &h)) in ds.ratings(3).iter().zip(ds.cases.iter().zip(&ds.hidden)) {
            let l = consensus_label(&r.ratings).unwrap();
            if h {
                assert_eq!(l, MalignancyLabel::Ambiguous);
            } else {
                assert_eq!(l.target(), Some(c.label()));
            }
        }
        let p = ds.patches(false).unwrap();
        assert_eq!(p.iter().filter(|p| p.label.is_none()).count(), 4);
        assert!(p.iter().all(|p| p.side == 16));
    }

    #[test]
    fn bbox_is_centred_in_patch() {
        let p: Phantom<f32> = generate_phantom(&PhantomSpec::benign(16, 9), "b").unwrap();
        let b = p.bbox_in_patch(16);
        for axis in b {
            assert!(axis[0] <= 8 && axis[1] >= 8, "{axis:?}");
        }
    }
}
