//! Intensity normalization, resampling, patch extraction and axial rotation
//! augmentation.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{CtVolume, Geometry};
use crate::scalar::Scalar;

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 500.0;
pub const PATCH_SIDES: [usize; 4] = [16, 32, 48, 64];
/// In-plane and through-plane spacing, in mm, used for real scans.
pub const TARGET_SPACING: [f64; 3] = [0.7, 0.7, 1.0];

/// Volume with intensities mapped from the lung HU window into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVolume<T> {
    pub series_id: String,
    pub geometry: Geometry,
    voxels: Vec<T>,
}

impl<T: Scalar> NormalizedVolume<T> {
    /// Values are clamped into `[0, 1]`.
    pub fn new(series_id: impl Into<String>, geometry: Geometry, mut voxels: Vec<T>) -> Result<Self> {
        if voxels.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "expected {} voxels, got {}",
                geometry.len(),
                voxels.len()
            )));
        }
        for v in &mut voxels {
            *v = v.max(T::zero()).min(T::one());
        }
        Ok(Self {
            series_id: series_id.into(),
            geometry,
            voxels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.geometry.index(x, y, z)]
    }
}

/// Maps one HU value to `[0, 1]`.
#[inline]
pub fn normalize_hu<T: Scalar>(hu: T) -> T {
    let lo = T::lit(HU_MIN);
    let hi = T::lit(HU_MAX);
    (hu.max(lo).min(hi) - lo) / (hi - lo)
}

pub fn clip_normalize<T: Scalar>(v: &CtVolume<T>) -> NormalizedVolume<T> {
    NormalizedVolume {
        series_id: v.series_id.clone(),
        geometry: v.geometry,
        voxels: v.voxels().iter().map(|&h| normalize_hu(h)).collect(),
    }
}

/// Trilinear sample at continuous voxel coordinate `p` of a dense x-fastest grid.
/// Coordinates are clamped to the grid.
pub(crate) fn trilinear_clamped<T: Scalar>(data: &[T], dims: [usize; 3], p: [f64; 3]) -> T {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let c = p[a].clamp(0.0, max);
        let fl = c.floor();
        i0[a] = fl as usize;
        i1[a] = (i0[a] + 1).min(dims[a] - 1);
        f[a] = c - fl;
    }
    let at = |x: usize, y: usize, z: usize| data[x + dims[0] * (y + dims[1] * z)].to_f64_lossy();
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(i0[0], i0[1], i0[2]), at(i1[0], i0[1], i0[2]), f[0]);
    let c10 = lerp(at(i0[0], i1[1], i0[2]), at(i1[0], i1[1], i0[2]), f[0]);
    let c01 = lerp(at(i0[0], i0[1], i1[2]), at(i1[0], i0[1], i1[2]), f[0]);
    let c11 = lerp(at(i0[0], i1[1], i1[2]), at(i1[0], i1[1], i1[2]), f[0]);
    T::lit(lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2]))
}

/// Resamples onto a grid with `target_spacing`, keeping the world origin.
///
/// Output voxel `i` sits at source coordinate `i * target / source`; the
/// output holds every such sample that lies within the source grid.
pub fn resample_trilinear<T: Scalar>(
    v: &NormalizedVolume<T>,
    target_spacing: [f64; 3],
) -> Result<NormalizedVolume<T>> {
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("target spacing must be > 0, got {target_spacing:?}")));
    }
    let g = v.geometry;
    let dims: [usize; 3] = std::array::from_fn(|a| {
        ((g.dims[a] - 1) as f64 * g.spacing[a] / target_spacing[a] + 1e-9).floor() as usize + 1
    });
    let out_geom = Geometry::new(dims, target_spacing, g.origin)?;
    if dims == g.dims && target_spacing == g.spacing {
        return Ok(v.clone());
    }
    let scale: [f64; 3] = std::array::from_fn(|a| target_spacing[a] / g.spacing[a]);
    let mut out = Vec::with_capacity(out_geom.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 * scale[0], y as f64 * scale[1], z as f64 * scale[2]];
                out.push(trilinear_clamped(&v.voxels, g.dims, p));
            }
        }
    }
    NormalizedVolume::new(v.series_id.clone(), out_geom, out)
}

/// Cubic network input cut around a nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    pub nodule_id: String,
    pub side: usize,
    pub voxels: Vec<T>,
    pub label: Option<u8>,
    pub augmentation_tag: String,
}

impl<T: Scalar> Patch<T> {
    pub fn new(nodule_id: impl Into<String>, side: usize, voxels: Vec<T>) -> Result<Self> {
        if side == 0 || voxels.len() != side * side * side {
            return Err(Error::Shape(format!(
                "patch side {side} needs {} voxels, got {}",
                side * side * side,
                voxels.len()
            )));
        }
        Ok(Self {
            nodule_id: nodule_id.into(),
            side,
            voxels,
            label: None,
            augmentation_tag: ORIGINAL_TAG.to_string(),
        })
    }

    pub fn with_label(mut self, label: Option<u8>) -> Self {
        self.label = label;
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[x + self.side * (y + self.side * z)]
    }
}

pub const ORIGINAL_TAG: &str = "rot000";

/// Cuts a `side`³ cube centred on the voxel nearest `center_world`, padding
/// with 0 outside the volume.
pub fn extract_patch<T: Scalar>(
    v: &NormalizedVolume<T>,
    nodule_id: &str,
    center_world: [f64; 3],
    side: usize,
) -> Result<Patch<T>> {
    if side == 0 {
        return Err(Error::Config("patch side must be >= 1".into()));
    }
    let g = v.geometry;
    let c = g.world_to_voxel(center_world);
    let half = (side / 2) as i64;
    let mut start = [0i64; 3];
    for a in 0..3 {
        if !c[a].is_finite() {
            return Err(Error::OutOfBounds(format!("non-finite centre {center_world:?}")));
        }
        let center = c[a].round() as i64;
        start[a] = center - half;
        if start[a] + side as i64 <= 0 || start[a] >= g.dims[a] as i64 {
            return Err(Error::OutOfBounds(format!(
                "patch of side {side} at voxel {c:?} misses the {:?} grid on axis {a}",
                g.dims
            )));
        }
    }
    let mut out = vec![T::zero(); side * side * side];
    for z in 0..side {
        let sz = start[2] + z as i64;
        if sz < 0 || sz >= g.dims[2] as i64 {
            continue;
        }
        for y in 0..side {
            let sy = start[1] + y as i64;
            if sy < 0 || sy >= g.dims[1] as i64 {
                continue;
            }
            for x in 0..side {
                let sx = start[0] + x as i64;
                if sx < 0 || sx >= g.dims[0] as i64 {
                    continue;
                }
                out[x + side * (y + side * z)] = v.get(sx as usize, sy as usize, sz as usize);
            }
        }
    }
    Patch::new(nodule_id, side, out)
}

/// Exact quarter-turn about z: the voxel at `(i, j, k)` moves to `(j, side-1-i, k)`.
pub fn rotate90<T: Scalar>(p: &Patch<T>) -> Patch<T> {
    let s = p.side;
    let mut out = vec![T::zero(); p.voxels.len()];
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                out[x + s * (y + s * z)] = p.get(s - 1 - y, x, z);
            }
        }
    }
    Patch {
        voxels: out,
        ..p.clone()
    }
}

/// In-plane rotation by `degrees` about the patch centre with bilinear
/// interpolation and zero padding. Same sense as [`rotate90`].
pub fn rotate_bilinear<T: Scalar>(p: &Patch<T>, degrees: f64) -> Patch<T> {
    let s = p.side;
    let c = (s as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = vec![T::zero(); p.voxels.len()];
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let u = x as f64 - c;
                let v = y as f64 - c;
                let sx = cos * u - sin * v + c;
                let sy = sin * u + cos * v + c;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let mut acc = 0.0;
                for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                        let xi = x0 as i64 + dx;
                        let yi = y0 as i64 + dy;
                        if xi >= 0 && yi >= 0 && (xi as usize) < s && (yi as usize) < s {
                            acc += wx * wy * p.get(xi as usize, yi as usize, z).to_f64_lossy();
                        }
                    }
                }
                out[x + s * (y + s * z)] = T::lit(acc);
            }
        }
    }
    Patch {
        voxels: out,
        ..p.clone()
    }
}

/// The original patch followed by rotations of 45°, 90°, …, 315° about z.
pub fn rotate_augment<T: Scalar>(p: &Patch<T>) -> Vec<Patch<T>> {
    let r45 = rotate_bilinear(p, 45.0);
    let mut straight = vec![p.clone()];
    let mut diagonal = vec![r45];
    for k in 1..4 {
        straight.push(rotate90(&straight[k - 1]));
        diagonal.push(rotate90(&diagonal[k - 1]));
    }
    let mut out = Vec::with_capacity(8);
    for k in 0..4 {
        out.push(straight[k].clone());
        out.push(diagonal[k].clone());
    }
    for (i, patch) in out.iter_mut().enumerate() {
        patch.augmentation_tag = format!("rot{:03}", i * 45);
    }
    out
}

const CACHE_MAGIC: &[u8; 8] = b"LMLCCPAT";
const CACHE_VERSION: u32 = 1;

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

/// Writes patches as binary records (`nodule_id, side, augmentation_tag,
/// label, side³ f32 LE`) plus a CSV index next to the cache file.
pub fn write_patch_cache<T: Scalar>(
    path: impl AsRef<Path>,
    index_path: impl AsRef<Path>,
    patches: &[Patch<T>],
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(patches.len() as u64).to_le_bytes());
    let mut index = String::from("index,nodule_id,side,augmentation_tag,label,offset\n");
    for (i, p) in patches.iter().enumerate() {
        let label = p.label.map_or(String::new(), |l| l.to_string());
        index.push_str(&format!(
            "{i},{},{},{},{label},{}\n",
            p.nodule_id,
            p.side,
            p.augmentation_tag,
            buf.len()
        ));
        put_str(&mut buf, &p.nodule_id).map_err(io)?;
        buf.extend_from_slice(&(p.side as u32).to_le_bytes());
        put_str(&mut buf, &p.augmentation_tag).map_err(io)?;
        buf.push(p.label.map_or(0xFF, |l| l));
        for v in &p.voxels {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io)?;
    let index_path = index_path.as_ref();
    fs::write(index_path, index).map_err(|e| Error::io(index_path, e))
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("patch cache truncated".into()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

fn take_str(buf: &mut &[u8]) -> Result<String> {
    let n = take_u32(buf)? as usize;
    String::from_utf8(take(buf, n)?.to_vec()).map_err(|_| Error::Format("patch cache: invalid utf-8".into()))
}

pub fn read_patch_cache<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Patch<T>>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 8)? != CACHE_MAGIC {
        return Err(Error::Format(format!("{} is not a patch cache", path.display())));
    }
    let version = take_u32(&mut buf)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("patch cache version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut buf, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nodule_id = take_str(&mut buf)?;
        let side = take_u32(&mut buf)? as usize;
        let augmentation_tag = take_str(&mut buf)?;
        let label = match take(&mut buf, 1)?[0] {
            0xFF => None,
            l @ (0 | 1) => Some(l),
            other => return Err(Error::Format(format!("patch label byte {other}"))),
        };
        let raw = take(&mut buf, side * side * side * 4)?;
        let voxels = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let mut p = Patch::new(nodule_id, side, voxels)?;
        p.label = label;
        p.augmentation_tag = augmentation_tag;
        out.push(p);
    }
    if !buf.is_empty() {
        return Err(Error::Format("trailing bytes after last patch".into()));
    }
    Ok(out)
}
