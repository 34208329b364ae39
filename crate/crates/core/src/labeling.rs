//! Consensus labels from multi-reader malignancy ratings, and nodule-grouped
//! dataset splits.
//!
//! Ratings above 3 vote malignant, below 3 vote benign, and 3 is uncertain.
//! A nodule gets a definite label only when the votes form one of the
//! accepted consensus patterns for its number of readers; everything else is
//! ambiguous and feeds the pseudo-labeling pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::NoduleRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MalignancyLabel {
    Benign,
    Malignant,
    Ambiguous,
}

impl MalignancyLabel {
    /// Binary target (0 benign, 1 malignant); `None` for ambiguous.
    pub fn target(self) -> Option<u8> {
        match self {
            MalignancyLabel::Benign => Some(0),
            MalignancyLabel::Malignant => Some(1),
            MalignancyLabel::Ambiguous => None,
        }
    }

    pub fn from_target(t: u8) -> Self {
        if t == 0 {
            MalignancyLabel::Benign
        } else {
            MalignancyLabel::Malignant
        }
    }
}

impl fmt::Display for MalignancyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target() {
            Some(t) => write!(f, "{t}"),
            None => f.write_str("ambiguous"),
        }
    }
}

impl FromStr for MalignancyLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0" | "benign" => Ok(MalignancyLabel::Benign),
            "1" | "malignant" => Ok(MalignancyLabel::Malignant),
            "ambiguous" | "" => Ok(MalignancyLabel::Ambiguous),
            other => Err(Error::parse("label", format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RatingSummary {
    pub n_gt3: usize,
    pub n_eq3: usize,
    pub n_lt3: usize,
    pub n_total: usize,
}

pub fn summarize(ratings: &[u8]) -> Result<RatingSummary> {
    let mut s = RatingSummary {
        n_total: ratings.len(),
        ..Default::default()
    };
    for &r in ratings {
        match r {
            4 | 5 => s.n_gt3 += 1,
            3 => s.n_eq3 += 1,
            1 | 2 => s.n_lt3 += 1,
            _ => return Err(Error::RatingOutOfRange(r as i64)),
        }
    }
    Ok(s)
}

/// True when `votes` (the count leaning one way) reaches consensus given the
/// number of uncertain ratings and the number of readers.
fn reaches_consensus(votes: usize, uncertain: usize, readers: usize) -> bool {
    match readers {
        4 => votes >= 3 || (uncertain == 1 && votes >= 2),
        3 => votes >= 2,
        2 => votes == 2,
        // single readers (and more than four) are never decisive
        _ => false,
    }
}

pub fn consensus_label(ratings: &[u8]) -> Result<MalignancyLabel> {
    let s = summarize(ratings)?;
    let label = if reaches_consensus(s.n_gt3, s.n_eq3, s.n_total) {
        MalignancyLabel::Malignant
    } else if reaches_consensus(s.n_lt3, s.n_eq3, s.n_total) {
        MalignancyLabel::Benign
    } else {
        MalignancyLabel::Ambiguous
    };
    Ok(label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(Error::parse("split", format!("unknown split {other:?}"))),
        }
    }
}

/// Nodule-level partition of a dataset. Every id lives in exactly one split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub unlabeled_ids: BTreeSet<String>,
    pub labels: BTreeMap<String, MalignancyLabel>,
}

impl DatasetSplit {
    pub fn split_of(&self, nodule_id: &str) -> Option<Split> {
        [
            (Split::Train, &self.train_ids),
            (Split::Val, &self.val_ids),
            (Split::Test, &self.test_ids),
            (Split::Unlabeled, &self.unlabeled_ids),
        ]
        .into_iter()
        .find(|(_, ids)| ids.contains(nodule_id))
        .map(|(s, _)| s)
    }

    pub fn ids(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
            Split::Test => &self.test_ids,
            Split::Unlabeled => &self.unlabeled_ids,
        }
    }

    fn ids_mut(&mut self, split: Split) -> &mut BTreeSet<String> {
        match split {
            Split::Train => &mut self.train_ids,
            Split::Val => &mut self.val_ids,
            Split::Test => &mut self.test_ids,
            Split::Unlabeled => &mut self.unlabeled_ids,
        }
    }

    pub fn insert(&mut self, nodule_id: &str, split: Split, label: MalignancyLabel) -> Result<()> {
        if self.labels.contains_key(nodule_id) {
            return Err(Error::Duplicate(nodule_id.to_string()));
        }
        self.ids_mut(split).insert(nodule_id.to_string());
        self.labels.insert(nodule_id.to_string(), label);
        Ok(())
    }

    /// Manifest rows sorted by nodule id, so output bytes depend only on content.
    pub fn to_manifest_csv(&self) -> String {
        let mut out = String::from("nodule_id,split,label\n");
        for (id, label) in &self.labels {
            let split = self.split_of(id).expect("every labelled id is assigned a split");
            out.push_str(&format!("{id},{split},{label}\n"));
        }
        out
    }

    pub fn from_manifest_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse("header", e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != ["nodule_id", "split", "label"] {
            return Err(Error::parse("header", format!("expected nodule_id,split,label, found {header:?}")));
        }
        let mut split = DatasetSplit::default();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Validation {
                row,
                message: e.to_string(),
            })?;
            let s: Split = rec[1].parse().map_err(|e: Error| Error::Validation {
                row,
                message: e.to_string(),
            })?;
            let label: MalignancyLabel = rec[2].parse().map_err(|e: Error| Error::Validation {
                row,
                message: e.to_string(),
            })?;
            split.insert(&rec[0], s, label)?;
        }
        Ok(split)
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_manifest_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest_csv(&text)
    }
}

/// Largest-remainder allocation of `total` across groups proportional to `sizes`.
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // ties go to the earlier group
    order.sort_by_key(|&i| std::cmp::Reverse((sizes[i] * total) % n));
    let mut left = total - alloc.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

fn round_fraction(n: usize, num: usize, den: usize) -> usize {
    (n * num + den / 2) / den
}

pub const MIN_LABELED_FOR_SPLIT: usize = 5;

/// Stratified, nodule-grouped split: 20 % test, then 20 % of the rest for
/// validation, the remainder for training.
///
/// Input order does not matter; records are sorted by id before the seeded
/// shuffle.
pub fn split_by_nodule(records: &[(String, MalignancyLabel)], seed: u64) -> Result<DatasetSplit> {
    if let Some((id, _)) = records.iter().find(|(_, l)| *l == MalignancyLabel::Ambiguous) {
        return Err(Error::Config(format!("nodule {id} is ambiguous and cannot be split")));
    }
    if records.len() < MIN_LABELED_FOR_SPLIT {
        return Err(Error::InsufficientData {
            needed: MIN_LABELED_FOR_SPLIT,
            got: records.len(),
        });
    }

    let mut classes: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, label) in records {
        classes[label.target().unwrap() as usize].push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in &mut classes {
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        if ids.len() != before {
            return Err(Error::Duplicate("nodule ids repeat in split input".into()));
        }
        ids.shuffle(&mut rng);
    }

    let n = records.len();
    let sizes = [classes[0].len(), classes[1].len()];
    let n_test = round_fraction(n, 1, 5);
    let test_alloc = apportion(n_test, &sizes);
    let rest: Vec<usize> = (0..2).map(|c| sizes[c] - test_alloc[c]).collect();
    let n_val = round_fraction(n - n_test, 1, 5);
    let val_alloc = apportion(n_val, &rest);

    let mut split = DatasetSplit::default();
    for c in 0..2 {
        let label = MalignancyLabel::from_target(c as u8);
        for (k, id) in classes[c].iter().enumerate() {
            let s = if k < test_alloc[c] {
                Split::Test
            } else if k < test_alloc[c] + val_alloc[c] {
                Split::Val
            } else {
                Split::Train
            };
            split.insert(id, s, label)?;
        }
    }
    Ok(split)
}

/// Labels every record by consensus, splits the labeled nodules and files
/// the ambiguous ones under `unlabeled`.
pub fn label_records(records: &[NoduleRecord], seed: u64) -> Result<DatasetSplit> {
    let mut labeled = Vec::new();
    let mut ambiguous = Vec::new();
    for r in records {
        match consensus_label(&r.ratings)? {
            MalignancyLabel::Ambiguous => ambiguous.push(r.nodule_id.as_str()),
            l => labeled.push((r.nodule_id.clone(), l)),
        }
    }
    let mut split = split_by_nodule(&labeled, seed)?;
    for id in ambiguous {
        split.insert(id, Split::Unlabeled, MalignancyLabel::Ambiguous)?;
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use MalignancyLabel::*;

    #[test]
    fn summaries() {
        let s = summarize(&[4, 5, 3, 2]).unwrap();
        assert_eq!((s.n_gt3, s.n_eq3, s.n_lt3, s.n_total), (2, 1, 1, 4));
        assert_eq!(summarize(&[]).unwrap(), RatingSummary::default());
        let s = summarize(&[3, 3, 3]).unwrap();
        assert_eq!((s.n_gt3, s.n_eq3, s.n_lt3, s.n_total), (0, 3, 0, 3));
        assert!(summarize(&[0]).is_err());
        assert!(summarize(&[6]).is_err());
    }

    #[test]
    fn table_examples() {
        assert_eq!(consensus_label(&[4, 4, 3, 2]).unwrap(), Malignant);
        assert_eq!(consensus_label(&[5, 3, 2, 2]).unwrap(), Benign);
        assert_eq!(consensus_label(&[4, 4, 2, 2]).unwrap(), Ambiguous);
        assert_eq!(consensus_label(&[4, 4]).unwrap(), Malignant);
        assert_eq!(consensus_label(&[5]).unwrap(), Ambiguous);
        assert_eq!(consensus_label(&[]).unwrap(), Ambiguous);
        assert_eq!(consensus_label(&[5, 5, 5, 5, 5]).unwrap(), Ambiguous);
        assert_eq!(consensus_label(&[4, 3, 3, 5]).unwrap(), Ambiguous);
        assert!(consensus_label(&[4, 7]).is_err());
    }

    fn labelled(nb: usize, nm: usize) -> Vec<(String, MalignancyLabel)> {
        (0..nb)
            .map(|i| (format!("b{i:04}"), Benign))
            .chain((0..nm).map(|i| (format!("m{i:04}"), Malignant)))
            .collect()
    }

    #[test]
    fn split_sizes_follow_eighty_twenty() {
        let s = split_by_nodule(&labelled(50, 50), 7).unwrap();
        assert_eq!((s.test_ids.len(), s.val_ids.len(), s.train_ids.len()), (20, 16, 64));
        let s = split_by_nodule(&labelled(279, 279), 1).unwrap();
        assert_eq!(s.test_ids.len(), 112);
        let s = split_by_nodule(&labelled(300, 258), 1).unwrap();
        assert_eq!(s.test_ids.len(), 112);
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let recs = labelled(37, 23);
        let a = split_by_nodule(&recs, 3).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(a, split_by_nodule(&rev, 3).unwrap());
        assert_ne!(a, split_by_nodule(&recs, 4).unwrap());

        let all: BTreeSet<_> = a.train_ids.iter().chain(&a.val_ids).chain(&a.test_ids).collect();
        assert_eq!(all.len(), 60);
        let malignant_in_test = a.test_ids.iter().filter(|id| a.labels[*id] == Malignant).count();
        // 23 of 60 malignant; 12 test slots -> 4.6 expected
        assert!((4..=5).contains(&malignant_in_test));
    }

    #[test]
    fn split_rejects_small_or_ambiguous_input() {
        assert!(matches!(
            split_by_nodule(&labelled(2, 2), 0),
            Err(Error::InsufficientData { needed: 5, got: 4 })
        ));
        let mut recs = labelled(5, 5);
        recs.push(("x".into(), Ambiguous));
        assert!(split_by_nodule(&recs, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut s = split_by_nodule(&labelled(6, 6), 9).unwrap();
        s.insert("zz", Split::Unlabeled, Ambiguous).unwrap();
        let text = s.to_manifest_csv();
        assert!(text.contains("zz,unlabeled,ambiguous"));
        assert_eq!(DatasetSplit::from_manifest_csv(&text).unwrap(), s);
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(20, &[50, 50]), vec![10, 10]);
        assert_eq!(apportion(3, &[1, 1, 1]), vec![1, 1, 1]);
        assert_eq!(apportion(5, &[3, 7]).iter().sum::<usize>(), 5);
    }
}
