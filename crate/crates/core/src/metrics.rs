//! Confusion counts, accuracy/precision/sensitivity/specificity, ROC and AUC.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Counts with `predicted = p >= threshold`.
pub fn confusion(labels: &[u8], probs: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    if labels.len() != probs.len() {
        return Err(Error::Shape(format!("{} labels but {} scores", labels.len(), probs.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(probs) {
        match (y != 0, p >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Ratios are `None` when their denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasicMetrics {
    pub acc: Option<f64>,
    pub pre: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn basic_metrics(c: &ConfusionCounts) -> BasicMetrics {
    BasicMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        pre: ratio(c.tp, c.tp + c.fp),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
    }
}

/// ROC vertices `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// score (descending), and the trapezoidal area under them.
pub fn roc_auc(labels: &[u8], probs: &[f64]) -> Result<(Vec<(f64, f64)>, f64)> {
    if labels.len() != probs.len() {
        return Err(Error::Shape(format!("{} labels but {} scores", labels.len(), probs.len())));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::NonFinite { tensor: "scores".into() });
    }
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            got: pos.min(neg),
        });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = probs[order[i]];
        while i < order.len() && probs[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let next = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        let last = *roc.last().unwrap();
        auc += (next.0 - last.0) * (next.1 + last.1) / 2.0;
        roc.push(next);
    }
    Ok((roc, auc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub metrics: BasicMetrics,
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
    pub learned_cuts: Option<Vec<f64>>,
}

pub fn evaluate(labels: &[u8], probs: &[f64], learned_cuts: Option<Vec<f64>>) -> Result<EvalReport> {
    let counts = confusion(labels, probs, DEFAULT_THRESHOLD)?;
    let (roc, auc) = roc_auc(labels, probs)?;
    Ok(EvalReport {
        counts,
        metrics: basic_metrics(&counts),
        roc,
        auc,
        learned_cuts,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "tp,tn,fp,fn,acc,pre,sen,spe,auc,cuts";

    /// Header plus one metrics row; cuts are `;`-separated.
    pub fn metrics_csv(&self) -> String {
        let c = &self.counts;
        let m = &self.metrics;
        let cuts = self
            .learned_cuts
            .as_ref()
            .map(|v| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        format!(
            "{}\n{},{},{},{},{},{},{},{},{:.6},{}\n",
            Self::CSV_HEADER,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            opt(m.acc),
            opt(m.pre),
            opt(m.sen),
            opt(m.spe),
            self.auc,
            cuts
        )
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc {
            let _ = writeln!(s, "{f},{t}");
        }
        s
    }

    pub fn write(&self, metrics_path: impl AsRef<Path>, roc_path: impl AsRef<Path>) -> Result<()> {
        let (mp, rp) = (metrics_path.as_ref(), roc_path.as_ref());
        std::fs::write(mp, self.metrics_csv()).map_err(|e| Error::io(mp, e))?;
        std::fs::write(rp, self.roc_csv()).map_err(|e| Error::io(rp, e))
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = &self.counts;
        let pct = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{:.2}%", 100.0 * x));
        writeln!(f, "TP={} TN={} FP={} FN={}", c.tp, c.tn, c.fp, c.fn_)?;
        writeln!(f, "accuracy    {}", pct(self.metrics.acc))?;
        writeln!(f, "precision   {}", pct(self.metrics.pre))?;
        writeln!(f, "sensitivity {}", pct(self.metrics.sen))?;
        writeln!(f, "specificity {}", pct(self.metrics.spe))?;
        write!(f, "AUC         {:.4}", self.auc)?;
        if let Some(cuts) = &self.learned_cuts {
            let list: Vec<String> = cuts.iter().map(|c| format!("{c:.4}")).collect();
            write!(f, "\ncuts        {}", list.join(", "))?;
        }
        Ok(())
    }
}
