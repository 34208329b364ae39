//! Confidence-thresholded pseudo-labeling over the ambiguous pool.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;

use crate::diffkit::Adam;
use crate::error::{Error, Result};
use crate::labeling::{DatasetSplit, MalignancyLabel};
use crate::network::{train, ModelConfig, Network, TrainConfig};
use crate::preprocess::Patch;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub nodule_id: String,
    pub label: u8,
    /// `max(p, 1 - p)` at the round of acceptance.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelRound {
    pub round_index: usize,
    /// Training-set size used by this round's model.
    pub train_size: usize,
    pub n_newly_labeled: usize,
    pub n_remaining_unlabeled: usize,
    pub threshold: f64,
    pub accepted: Vec<PseudoLabel>,
}

impl PseudoLabelRound {
    pub fn mean_confidence(&self) -> Option<f64> {
        (!self.accepted.is_empty())
            .then(|| self.accepted.iter().map(|a| a.confidence).sum::<f64>() / self.accepted.len() as f64)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.5 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must be in (0.5, 1], got {threshold}")))
    }
}

/// `p >= threshold` gives label 1, `p <= 1 - threshold` label 0; anything in
/// between stays unlabeled.
pub fn assign_pseudo_labels(probs: &[(String, f64)], threshold: f64) -> Result<Vec<PseudoLabel>> {
    check_threshold(threshold)?;
    Ok(probs
        .iter()
        .filter_map(|(id, p)| {
            let label = if *p >= threshold {
                1
            } else if *p <= 1.0 - threshold {
                0
            } else {
                return None;
            };
            Some(PseudoLabel {
                nodule_id: id.clone(),
                label,
                confidence: p.max(1.0 - p),
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemisupConfig {
    pub threshold: f64,
    pub max_rounds: usize,
    pub min_new: usize,
    /// Initialization seed of every round's fresh model.
    pub model_seed: u64,
}

impl Default for SemisupConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            max_rounds: 10,
            min_new: 5,
            model_seed: 0,
        }
    }
}

pub struct SemisupOutcome<T> {
    /// Model of the last round.
    pub network: Network<T>,
    pub adam: Adam<T>,
    /// Model of round 1, trained on the labeled set only.
    pub baseline: Network<T>,
    pub rounds: Vec<PseudoLabelRound>,
    /// Every accepted pseudo-label, in acceptance order.
    pub pseudo: Vec<PseudoLabel>,
}

/// Each round retrains a fresh model on the labeled set plus all pseudo-labels
/// accepted so far, then labels what it can of the remaining pool. Accepted
/// labels are never revisited. Stops once a round accepts fewer than
/// `min_new` or after `max_rounds` rounds.
pub fn semisup_loop<T: Scalar>(
    model: &ModelConfig,
    labeled: &[Patch<T>],
    val: &[Patch<T>],
    unlabeled: &[Patch<T>],
    tc: &TrainConfig,
    cfg: &SemisupConfig,
) -> Result<SemisupOutcome<T>> {
    check_threshold(cfg.threshold)?;
    if labeled.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if cfg.max_rounds == 0 {
        return Err(Error::Config("max_rounds must be >= 1".into()));
    }
    let mut train_set: Vec<Patch<T>> = labeled.to_vec();
    let mut pool: Vec<&Patch<T>> = unlabeled.iter().collect();
    let mut rounds = Vec::new();
    let mut pseudo = Vec::new();
    let mut baseline = None;
    let mut last = None;

    for round_index in 1..=cfg.max_rounds {
        let net = Network::new(model.clone(), cfg.model_seed)?;
        let out = train(net, &train_set, val, tc)?;
        let accepted = if pool.is_empty() {
            Vec::new()
        } else {
            let batch: Vec<Patch<T>> = pool.iter().map(|&p| p.clone()).collect();
            let probs = out.best.predict(&batch)?;
            let scored: Vec<(String, f64)> = pool
                .iter()
                .zip(&probs)
                .map(|(p, q)| (p.nodule_id.clone(), q.to_f64_lossy()))
                .collect();
            assign_pseudo_labels(&scored, cfg.threshold)?
        };
        let by_id: BTreeMap<&str, u8> = accepted.iter().map(|a| (a.nodule_id.as_str(), a.label)).collect();
        let train_size = train_set.len();
        pool.retain(|p| match by_id.get(p.nodule_id.as_str()) {
            Some(&label) => {
                train_set.push((*p).clone().with_label(Some(label)));
                false
            }
            None => true,
        });
        let n_new = accepted.len();
        info!(
            "round {round_index}: trained on {train_size}, accepted {n_new}, {} remain",
            pool.len()
        );
        pseudo.extend(accepted.iter().cloned());
        rounds.push(PseudoLabelRound {
            round_index,
            train_size,
            n_newly_labeled: n_new,
            n_remaining_unlabeled: pool.len(),
            threshold: cfg.threshold,
            accepted,
        });
        if baseline.is_none() {
            baseline = Some(out.best.clone());
        }
        last = Some((out.best, out.adam));
        if n_new < cfg.min_new {
            break;
        }
    }
    let (network, adam) = last.expect("at least one round ran");
    Ok(SemisupOutcome {
        network,
        adam,
        baseline: baseline.expect("at least one round ran"),
        rounds,
        pseudo,
    })
}

pub const ROUND_HISTORY_HEADER: &str = "round,n_new,n_remaining,mean_confidence,train_size";

pub fn round_history_csv(rounds: &[PseudoLabelRound]) -> String {
    let mut s = format!("{ROUND_HISTORY_HEADER}\n");
    for r in rounds {
        let mc = r.mean_confidence().map_or_else(String::new, |c| format!("{c:.6}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.round_index, r.n_newly_labeled, r.n_remaining_unlabeled, mc, r.train_size
        );
    }
    s
}

/// The split manifest plus a provenance column; pseudo-labeled nodules move
/// from `unlabeled` to `train`. Radiologist labels are never replaced.
pub fn pseudo_manifest_csv(split: &DatasetSplit, pseudo: &[PseudoLabel]) -> Result<String> {
    let by_id: BTreeMap<&str, &PseudoLabel> = pseudo.iter().map(|p| (p.nodule_id.as_str(), p)).collect();
    let mut s = String::from("nodule_id,split,label,provenance\n");
    for (id, label) in &split.labels {
        let split_name = split.split_of(id).expect("labelled ids have a split");
        match by_id.get(id.as_str()) {
            Some(p) if *label == MalignancyLabel::Ambiguous => {
                let _ = writeln!(s, "{id},train,{},pseudo", MalignancyLabel::from_target(p.label));
            }
            Some(_) => {
                return Err(Error::Config(format!("pseudo-label for {id} would replace a radiologist label")));
            }
            None => {
                let _ = writeln!(s, "{id},{split_name},{label},radiologist");
            }
        }
    }
    if let Some(p) = pseudo.iter().find(|p| !split.labels.contains_key(&p.nodule_id)) {
        return Err(Error::Config(format!("pseudo-label for unknown nodule {}", p.nodule_id)));
    }
    Ok(s)
}

/// The split after pseudo-labeling: accepted nodules move from `unlabeled`
/// to `train` with their pseudo-label; everything else is untouched.
pub fn apply_pseudo_labels(split: &DatasetSplit, pseudo: &[PseudoLabel]) -> Result<DatasetSplit> {
    let mut out = split.clone();
    for p in pseudo {
        if !out.unlabeled_ids.remove(&p.nodule_id) {
            return Err(Error::Config(format!("{} is not in the unlabeled pool", p.nodule_id)));
        }
        out.train_ids.insert(p.nodule_id.clone());
        out.labels.insert(p.nodule_id.clone(), MalignancyLabel::from_target(p.label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::Split;

    fn probs(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(k, p)| (k.to_string(), *p)).collect()
    }

    #[test]
    fn threshold_rule() {
        let a = assign_pseudo_labels(&probs(&[("a", 0.95), ("b", 0.5), ("c", 0.03)]), 0.9).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].nodule_id.as_str(), a[0].label), ("a", 1));
        assert_eq!((a[1].nodule_id.as_str(), a[1].label), ("c", 0));
        assert!((a[1].confidence - 0.97).abs() < 1e-12);
    }

    #[test]
    fn boundary_is_accepted() {
        let a = assign_pseudo_labels(&probs(&[("a", 0.9)]), 0.9).unwrap();
        assert_eq!(a[0].label, 1);
        let none = assign_pseudo_labels(&probs(&[("a", 0.11), ("b", 0.89), ("c", 0.5)]), 0.9).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn invalid_threshold() {
        assert!(assign_pseudo_labels(&[], 0.5).is_err());
        assert!(assign_pseudo_labels(&[], 1.01).is_err());
        assert!(assign_pseudo_labels(&[], 1.0).is_ok());
    }

    #[test]
    fn manifest_marks_provenance() {
        let mut split = DatasetSplit::default();
        split.insert("a", Split::Train, MalignancyLabel::Benign).unwrap();
        split.insert("b", Split::Test, MalignancyLabel::Malignant).unwrap();
        split.insert("u", Split::Unlabeled, MalignancyLabel::Ambiguous).unwrap();
        split.insert("v", Split::Unlabeled, MalignancyLabel::Ambiguous).unwrap();
        let pl = vec![PseudoLabel {
            nodule_id: "u".into(),
            label: 1,
            confidence: 0.97,
        }];
        let csv = pseudo_manifest_csv(&split, &pl).unwrap();
        assert_eq!(
            csv,
            "nodule_id,split,label,provenance\na,train,0,radiologist\nb,test,1,radiologist\n\
             u,train,1,pseudo\nv,unlabeled,ambiguous,radiologist\n"
        );
        let bad = vec![PseudoLabel {
            nodule_id: "a".into(),
            label: 1,
            confidence: 0.99,
        }];
        assert!(pseudo_manifest_csv(&split, &bad).is_err());
        assert!(apply_pseudo_labels(&split, &bad).is_err());
        let moved = apply_pseudo_labels(&split, &pl).unwrap();
        assert_eq!(moved.split_of("u"), Some(Split::Train));
        assert_eq!(moved.labels["u"], MalignancyLabel::Malignant);
        assert_eq!(moved.split_of("v"), Some(Split::Unlabeled));
    }
}
