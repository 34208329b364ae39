//! CT volume and radiologist-rating ingestion.
//!
//! Volumes are read from uncompressed MetaImage pairs (`.mhd` header plus a
//! raw data file, x-fastest voxel order, little-endian). Ratings come from a
//! flat CSV with one row per physical nodule.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Grid extent and placement of a volume in world millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// World position of the centre of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("voxel spacing must be > 0, got {spacing:?}")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| v[a] * self.spacing[a] + self.origin[a])
    }
}

/// A CT scan in Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume<T> {
    pub series_id: String,
    pub geometry: Geometry,
    voxels: Vec<T>,
}

impl<T: Scalar> CtVolume<T> {
    pub fn new(series_id: impl Into<String>, geometry: Geometry, voxels: Vec<T>) -> Result<Self> {
        if voxels.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "expected {} voxels for dims {:?}, got {}",
                geometry.len(),
                geometry.dims,
                voxels.len()
            )));
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

    pub fn voxels_mut(&mut self) -> &mut [T] {
        &mut self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.geometry.index(x, y, z)]
    }
}

/// Continuous voxel coordinate of a world point; may fall outside the grid.
pub fn world_to_voxel<T: Scalar>(v: &CtVolume<T>, p: [f64; 3]) -> [f64; 3] {
    v.geometry.world_to_voxel(p)
}

pub fn voxel_to_world<T: Scalar>(v: &CtVolume<T>, p: [f64; 3]) -> [f64; 3] {
    v.geometry.voxel_to_world(p)
}

/// Element encodings understood by the raw reader/writer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_FLOAT" => Ok(ElementType::Float),
            other => Err(Error::Unsupported(format!("ElementType {other}"))),
        }
    }
}

fn header_fields(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|line| {
            let (k, v) = line.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn triple<N: std::str::FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<[N; 3]> {
    let raw = fields
        .get(key)
        .ok_or_else(|| Error::parse(key, "missing required key"))?;
    let parts = raw
        .split_whitespace()
        .map(|p| p.parse::<N>().map_err(|_| Error::parse(key, format!("cannot parse {p:?}"))))
        .collect::<Result<Vec<_>>>()?;
    match <[N; 3]>::try_from(parts) {
        Ok(t) => Ok(t),
        Err(v) => Err(Error::parse(key, format!("expected 3 values, found {}", v.len()))),
    }
}

/// Reads a MetaImage header and its raw data file.
///
/// The series id is the header's file stem.
pub fn read_mhd_volume<T: Scalar>(header_path: impl AsRef<Path>) -> Result<CtVolume<T>> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let fields = header_fields(&text);

    if let Some(nd) = fields.get("NDims") {
        if nd.trim() != "3" {
            return Err(Error::Unsupported(format!("NDims = {nd}")));
        }
    }
    if fields
        .get("CompressedData")
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
    {
        return Err(Error::Unsupported("compressed MetaImage data".into()));
    }
    if fields
        .get("BinaryDataByteOrderMSB")
        .or_else(|| fields.get("ElementByteOrderMSB"))
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
    {
        return Err(Error::Unsupported("big-endian MetaImage data".into()));
    }

    let dims: [usize; 3] = triple(&fields, "DimSize")?;
    let spacing: [f64; 3] = triple(&fields, "ElementSpacing")?;
    let origin: [f64; 3] = if fields.contains_key("Offset") {
        triple(&fields, "Offset")?
    } else {
        [0.0; 3]
    };
    let element = ElementType::parse(
        fields
            .get("ElementType")
            .ok_or_else(|| Error::parse("ElementType", "missing required key"))?,
    )?;
    let data_file = fields
        .get("ElementDataFile")
        .ok_or_else(|| Error::parse("ElementDataFile", "missing required key"))?;
    if data_file == "LOCAL" || data_file.starts_with("LIST") || data_file.contains('%') {
        return Err(Error::Unsupported(format!("ElementDataFile = {data_file}")));
    }
    let geometry = Geometry::new(dims, spacing, origin)?;

    let data_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_file);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = (geometry.len() * element.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: data_path,
            expected,
            actual: bytes.len() as u64,
        });
    }

    let voxels = match element {
        ElementType::Short => bytes
            .chunks_exact(2)
            .map(|c| T::lit(i16::from_le_bytes([c[0], c[1]]) as f64))
            .collect(),
        ElementType::Float => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
    };
    let series_id = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    CtVolume::new(series_id, geometry, voxels)
}

/// Writes `header_path` plus a sibling `.raw` file; returns the raw path.
///
/// `MET_SHORT` rounds to the nearest integer and saturates at the i16 range.
pub fn write_mhd_volume<T: Scalar>(
    volume: &CtVolume<T>,
    header_path: impl AsRef<Path>,
    element: ElementType,
) -> Result<PathBuf> {
    let header_path = header_path.as_ref();
    let raw_path = header_path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let g = &volume.geometry;

    let mut bytes = Vec::with_capacity(g.len() * element.size());
    for &v in &volume.voxels {
        match element {
            ElementType::Short => {
                let s = v.to_f64_lossy().round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                bytes.extend_from_slice(&s.to_le_bytes());
            }
            ElementType::Float => bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
        }
    }
    fs::write(&raw_path, &bytes).map_err(|e| Error::io(&raw_path, e))?;

    let fmt3 = |a: [f64; 3]| format!("{} {} {}", a[0], a[1], a[2]);
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         CompressedData = False\nOffset = {}\nElementSpacing = {}\nDimSize = {} {} {}\n\
         ElementType = {}\nElementDataFile = {}\n",
        fmt3(g.origin),
        fmt3(g.spacing),
        g.dims[0],
        g.dims[1],
        g.dims[2],
        element.tag(),
        raw_name
    );
    let mut f = fs::File::create(header_path).map_err(|e| Error::io(header_path, e))?;
    f.write_all(header.as_bytes())
        .map_err(|e| Error::io(header_path, e))?;
    Ok(raw_path)
}

/// One annotated nodule with its per-radiologist malignancy scores.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleRecord {
    pub series_id: String,
    pub nodule_id: String,
    pub center_world: [f64; 3],
    pub diameter_mm: f64,
    pub ratings: Vec<u8>,
}

pub const RATINGS_HEADER: [&str; 7] = [
    "series_id",
    "nodule_id",
    "coordX",
    "coordY",
    "coordZ",
    "diameter_mm",
    "ratings",
];

fn parse_ratings_field(field: &str, row: usize) -> Result<Vec<u8>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split('|')
        .map(|tok| {
            let r: i64 = tok.trim().parse().map_err(|_| Error::Validation {
                row,
                message: format!("rating {tok:?} is not an integer"),
            })?;
            if !(1..=5).contains(&r) {
                return Err(Error::Validation {
                    row,
                    message: format!("rating {r} outside 1..=5"),
                });
            }
            Ok(r as u8)
        })
        .collect()
}

/// Parses the ratings CSV (`series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings`).
pub fn read_ratings(csv_path: impl AsRef<Path>) -> Result<Vec<NoduleRecord>> {
    let csv_path = csv_path.as_ref();
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    read_ratings_from(file)
}

pub fn read_ratings_from<R: std::io::Read>(reader: R) -> Result<Vec<NoduleRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse("header", e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != RATINGS_HEADER {
        return Err(Error::parse(
            "header",
            format!("expected {:?}, found {:?}", RATINGS_HEADER.join(","), headers),
        ));
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Validation {
            row,
            message: e.to_string(),
        })?;
        let num = |idx: usize| -> Result<f64> {
            rec[idx].parse::<f64>().map_err(|_| Error::Validation {
                row,
                message: format!("{} {:?} is not a number", RATINGS_HEADER[idx], &rec[idx]),
            })
        };
        let diameter_mm = num(5)?;
        if !(diameter_mm > 0.0) {
            return Err(Error::Validation {
                row,
                message: format!("diameter_mm must be > 0, got {diameter_mm}"),
            });
        }
        let record = NoduleRecord {
            series_id: rec[0].to_string(),
            nodule_id: rec[1].to_string(),
            center_world: [num(2)?, num(3)?, num(4)?],
            diameter_mm,
            ratings: parse_ratings_field(&rec[6], row)?,
        };
        if record.nodule_id.is_empty() {
            return Err(Error::Validation {
                row,
                message: "empty nodule_id".into(),
            });
        }
        if !seen.insert(record.nodule_id.clone()) {
            return Err(Error::Duplicate(record.nodule_id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_ratings(path: impl AsRef<Path>, records: &[NoduleRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(RATINGS_HEADER).map_err(io)?;
    for r in records {
        let ratings = r
            .ratings
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join("|");
        w.write_record([
            r.series_id.clone(),
            r.nodule_id.clone(),
            r.center_world[0].to_string(),
            r.center_world[1].to_string(),
            r.center_world[2].to_string(),
            r.diameter_mm.to_string(),
            ratings,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_header(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn reads_short_volume_with_expected_dims() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u8> = (0..32i16).flat_map(|v| (v * 10 - 1000).to_le_bytes()).collect();
        assert_eq!(raw.len(), 64);
        fs::write(dir.path().join("scan.raw"), &raw).unwrap();
        let hdr = write_header(
            dir.path(),
            "scan.mhd",
            "NDims = 3\nDimSize = 4 4 2\nElementSpacing = 0.7 0.7 1\nOffset = -10 -20 -30\n\
             ElementType = MET_SHORT\nElementDataFile = scan.raw\n",
        );
        let v = read_mhd_volume::<f64>(&hdr).unwrap();
        assert_eq!(v.dims(), [4, 4, 2]);
        assert_eq!(v.series_id, "scan");
        assert_eq!(v.geometry.origin, [-10.0, -20.0, -30.0]);
        assert_eq!(v.get(1, 0, 0), -990.0);
        assert_eq!(v.get(3, 3, 1), 310.0 - 1000.0);
    }

    #[test]
    fn missing_spacing_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.raw"), [0u8; 16]).unwrap();
        let hdr = write_header(
            dir.path(),
            "a.mhd",
            "DimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = a.raw\n",
        );
        let err = read_mhd_volume::<f32>(&hdr).unwrap_err();
        assert!(err.to_string().contains("ElementSpacing"), "{err}");
    }

    #[test]
    fn offset_defaults_to_zero_and_bad_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.raw"), [0u8; 15]).unwrap();
        let hdr = write_header(
            dir.path(),
            "a.mhd",
            "DimSize = 2 2 2\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = a.raw\n",
        );
        assert!(matches!(
            read_mhd_volume::<f32>(&hdr),
            Err(Error::SizeMismatch {
                expected: 16,
                actual: 15,
                ..
            })
        ));
        fs::write(dir.path().join("a.raw"), [0u8; 16]).unwrap();
        assert_eq!(read_mhd_volume::<f32>(&hdr).unwrap().geometry.origin, [0.0; 3]);
    }

    #[test]
    fn local_and_compressed_data_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = write_header(
            dir.path(),
            "l.mhd",
            "DimSize = 2 2 2\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = LOCAL\n",
        );
        assert!(matches!(read_mhd_volume::<f32>(&hdr), Err(Error::Unsupported(_))));
        let hdr = write_header(
            dir.path(),
            "c.mhd",
            "CompressedData = True\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n\
             ElementType = MET_SHORT\nElementDataFile = c.raw\n",
        );
        assert!(matches!(read_mhd_volume::<f32>(&hdr), Err(Error::Unsupported(_))));
    }

    #[test]
    fn world_voxel_conversions() {
        let g = Geometry::new([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.world_to_voxel([5.0, 6.0, 7.0]), [5.0, 6.0, 7.0]);
        let g = Geometry::new([8, 8, 8], [0.7, 0.7, 1.0], [-100.0, -100.0, -50.0]).unwrap();
        assert_eq!(g.world_to_voxel([-100.0, -100.0, -50.0]), [0.0, 0.0, 0.0]);
        let g = Geometry::new([8, 8, 8], [0.5, 0.5, 2.0], [0.0; 3]).unwrap();
        assert_eq!(g.world_to_voxel([1.0, 1.0, 4.0]), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn geometry_rejects_degenerate_grids() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn ratings_parse_and_validate() {
        let csv = "series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings\n\
                   s1,n1,1.5,2,3,6.2,4|5|3|3\n\
                   s1,n2,0,0,0,4,\n";
        let recs = read_ratings_from(csv.as_bytes()).unwrap();
        assert_eq!(recs[0].ratings, vec![4, 5, 3, 3]);
        assert_eq!(recs[0].center_world, [1.5, 2.0, 3.0]);
        assert!(recs[1].ratings.is_empty());

        let bad = "series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings\n\
                   s1,n1,0,0,0,4,2\ns1,n2,0,0,0,4,6\n";
        match read_ratings_from(bad.as_bytes()) {
            Err(Error::Validation { row: 2, message }) => assert!(message.contains('6')),
            other => panic!("unexpected {other:?}"),
        }

        let dup = "series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings\n\
                   s1,n1,0,0,0,4,2\ns2,n1,0,0,0,4,1\n";
        assert!(matches!(read_ratings_from(dup.as_bytes()), Err(Error::Duplicate(id)) if id == "n1"));
    }

    #[test]
    fn ratings_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![NoduleRecord {
            series_id: "s".into(),
            nodule_id: "n".into(),
            center_world: [1.25, -3.5, 7.0],
            diameter_mm: 5.5,
            ratings: vec![1, 2, 2],
        }];
        let p = dir.path().join("r.csv");
        write_ratings(&p, &recs).unwrap();
        assert_eq!(read_ratings(&p).unwrap(), recs);
    }
}
