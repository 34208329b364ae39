use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::huwindow::{CutInit, CutMode, DEFAULT_TAU};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Full,
    Desk,
}

/// Layer layout of one convolutional feature extractor plus the dense head.
/// Indices in `pool_after` / `dropout_after` refer to conv layers (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub conv_channels: Vec<usize>,
    pub pool_after: Vec<usize>,
    pub dropout_after: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub patch_side: usize,
    pub scale: Scale,
    pub dropout_rate: f64,
}

impl BackboneConfig {
    pub fn full(patch_side: usize) -> Self {
        Self {
            conv_channels: vec![16, 16, 16, 32, 32, 32, 64, 64, 64, 128, 128, 128],
            pool_after: vec![2, 5, 8, 11],
            dropout_after: vec![5, 11],
            dense_widths: vec![512, 256, 128, 64, 1],
            patch_side,
            scale: Scale::Full,
            dropout_rate: 0.3,
        }
    }

    pub fn desk(patch_side: usize) -> Self {
        Self {
            conv_channels: vec![4, 4, 8, 8],
            pool_after: vec![1, 3],
            dropout_after: vec![3],
            dense_widths: vec![32, 1],
            patch_side,
            scale: Scale::Desk,
            dropout_rate: 0.3,
        }
    }

    pub fn n_pools(&self) -> usize {
        self.pool_after.len()
    }

    /// Side of the last feature map.
    pub fn feature_side(&self) -> usize {
        self.patch_side >> self.n_pools()
    }

    /// Flattened width of one extractor's output.
    pub fn feature_width(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(1) * self.feature_side().pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.conv_channels.contains(&0) {
            return Err(Error::Config("conv_channels must be non-empty and positive".into()));
        }
        for (what, list) in [("pool_after", &self.pool_after), ("dropout_after", &self.dropout_after)] {
            if list.iter().any(|&i| i >= n) {
                return Err(Error::Config(format!("{what} refers to a conv index >= {n}")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{what} must be strictly increasing")));
            }
        }
        if self.dense_widths.last() != Some(&1) || self.dense_widths.contains(&0) {
            return Err(Error::Config("dense_widths must be positive and end in 1".into()));
        }
        let div = 1usize << self.n_pools();
        if self.patch_side == 0 || !self.patch_side.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "patch_side {} is not divisible by 2^{} (number of pooling layers)",
                self.patch_side,
                self.n_pools()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmlccConfig {
    pub n_branches: usize,
    pub include_original: bool,
    pub cuts_mode: CutMode,
    pub init: CutInit,
    pub tau: f64,
    pub backbone: BackboneConfig,
}

impl LmlccConfig {
    pub fn new(n_branches: usize, backbone: BackboneConfig) -> Self {
        Self {
            n_branches,
            include_original: false,
            cuts_mode: CutMode::Learnable,
            init: CutInit::Constant,
            tau: DEFAULT_TAU,
            backbone,
        }
    }

    /// One feature extractor per branch, plus one for the original input.
    pub fn n_extractors(&self) -> usize {
        self.n_branches + self.include_original as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_branches == 0 {
            return Err(Error::Config("n_branches must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        self.backbone.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    Backbone(BackboneConfig),
    Lmlcc(LmlccConfig),
}

impl ModelConfig {
    pub fn backbone(&self) -> &BackboneConfig {
        match self {
            ModelConfig::Backbone(b) => b,
            ModelConfig::Lmlcc(l) => &l.backbone,
        }
    }

    pub fn n_extractors(&self) -> usize {
        match self {
            ModelConfig::Backbone(_) => 1,
            ModelConfig::Lmlcc(l) => l.n_extractors(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Backbone(b) => b.validate(),
            ModelConfig::Lmlcc(l) => l.validate(),
        }
    }

    /// Flat `key=value` text, one entry per line, in a fixed key order.
    pub fn to_text(&self) -> String {
        let b = self.backbone();
        let mut s = String::new();
        let kind = match self {
            ModelConfig::Backbone(_) => "backbone",
            ModelConfig::Lmlcc(_) => "lmlcc",
        };
        let scale = match b.scale {
            Scale::Full => "full",
            Scale::Desk => "desk",
        };
        let _ = writeln!(s, "mode={kind}");
        let _ = writeln!(s, "scale={scale}");
        let _ = writeln!(s, "patch_side={}", b.patch_side);
        let _ = writeln!(s, "conv_channels={}", join(&b.conv_channels));
        let _ = writeln!(s, "pool_after={}", join(&b.pool_after));
        let _ = writeln!(s, "dropout_after={}", join(&b.dropout_after));
        let _ = writeln!(s, "dense_widths={}", join(&b.dense_widths));
        let _ = writeln!(s, "dropout_rate={}", b.dropout_rate);
        if let ModelConfig::Lmlcc(l) = self {
            let _ = writeln!(s, "branches={}", l.n_branches);
            let _ = writeln!(s, "include_original={}", l.include_original);
            let _ = writeln!(s, "cuts={}", cut_mode_str(l.cuts_mode));
            let _ = writeln!(s, "init={}", cut_init_str(l.init));
            let _ = writeln!(s, "tau={}", l.tau);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        Self::from_map(&kv)
    }

    /// Builds a config from parsed keys. Missing layout keys fall back to the
    /// preset named by `scale`; unrelated keys are ignored.
    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let side = match kv.get("patch_side") {
            Some(v) => parse_value::<usize>("patch_side", v)?,
            None => 16,
        };
        let mut b = match kv.get("scale").map(String::as_str).unwrap_or("desk") {
            "desk" => BackboneConfig::desk(side),
            "full" => BackboneConfig::full(side),
            other => return Err(Error::parse("scale", format!("expected desk|full, got {other:?}"))),
        };
        if let Some(v) = kv.get("conv_channels") {
            b.conv_channels = parse_list("conv_channels", v)?;
        }
        if let Some(v) = kv.get("pool_after") {
            b.pool_after = parse_list("pool_after", v)?;
        }
        if let Some(v) = kv.get("dropout_after") {
            b.dropout_after = parse_list("dropout_after", v)?;
        }
        if let Some(v) = kv.get("dense_widths") {
            b.dense_widths = parse_list("dense_widths", v)?;
        }
        if let Some(v) = kv.get("dropout_rate") {
            b.dropout_rate = parse_value("dropout_rate", v)?;
        }
        let cfg = match kv.get("mode").map(String::as_str).unwrap_or("backbone") {
            "backbone" => ModelConfig::Backbone(b),
            "lmlcc" => {
                let mut l = LmlccConfig::new(2, b);
                if let Some(v) = kv.get("branches") {
                    l.n_branches = parse_value("branches", v)?;
                }
                if let Some(v) = kv.get("include_original") {
                    l.include_original = parse_bool("include_original", v)?;
                }
                if let Some(v) = kv.get("cuts") {
                    l.cuts_mode = parse_cut_mode(v)?;
                }
                if let Some(v) = kv.get("init") {
                    l.init = parse_cut_init(v)?;
                }
                if let Some(v) = kv.get("tau") {
                    l.tau = parse_value("tau", v)?;
                }
                ModelConfig::Lmlcc(l)
            }
            other => return Err(Error::parse("mode", format!("expected backbone|lmlcc, got {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub seed: u64,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 68,
            lr: 1e-4,
            min_lr: 1e-6,
            lr_factor: 0.5,
            lr_patience: 10,
            seed: 0,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    /// Short schedule for small synthetic sets on a CPU.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            lr_patience: 4,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.lr {
            return Err(Error::Config("need 0 < min_lr <= lr".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config("lr_factor must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Flat `key=value` lines; `early_stop` is omitted when unset.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "epochs={}\nbatch_size={}\nlr={}\nmin_lr={}\nlr_factor={}\nlr_patience={}\nseed={}\n",
            self.epochs, self.batch_size, self.lr, self.min_lr, self.lr_factor, self.lr_patience, self.seed
        );
        if let Some(p) = self.early_stop {
            let _ = writeln!(s, "early_stop={p}");
        }
        s
    }

    /// Replaces fields with any training keys present in `kv`.
    pub fn with_overrides(self, kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut tc = self;
        if let Some(v) = kv.get("epochs") {
            tc.epochs = parse_value("epochs", v)?;
        }
        if let Some(v) = kv.get("batch_size") {
            tc.batch_size = parse_value("batch_size", v)?;
        }
        if let Some(v) = kv.get("lr") {
            tc.lr = parse_value("lr", v)?;
        }
        if let Some(v) = kv.get("min_lr") {
            tc.min_lr = parse_value("min_lr", v)?;
        }
        if let Some(v) = kv.get("lr_factor") {
            tc.lr_factor = parse_value("lr_factor", v)?;
        }
        if let Some(v) = kv.get("lr_patience") {
            tc.lr_patience = parse_value("lr_patience", v)?;
        }
        if let Some(v) = kv.get("seed") {
            tc.seed = parse_value("seed", v)?;
        }
        if let Some(v) = kv.get("early_stop") {
            tc.early_stop = Some(parse_value("early_stop", v)?);
        }
        tc.validate()?;
        Ok(tc)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn cut_mode_str(m: CutMode) -> &'static str {
    match m {
        CutMode::Learnable => "learnable",
        CutMode::Fixed => "fixed",
    }
}

pub fn cut_init_str(i: CutInit) -> &'static str {
    match i {
        CutInit::Constant => "constant",
        CutInit::Random => "random",
    }
}

pub fn parse_cut_mode(v: &str) -> Result<CutMode> {
    match v {
        "learnable" => Ok(CutMode::Learnable),
        "fixed" => Ok(CutMode::Fixed),
        other => Err(Error::parse("cuts", format!("expected learnable|fixed, got {other:?}"))),
    }
}

pub fn parse_cut_init(v: &str) -> Result<CutInit> {
    match v {
        "constant" => Ok(CutInit::Constant),
        "random" => Ok(CutInit::Random),
        other => Err(Error::parse("init", format!("expected constant|random, got {other:?}"))),
    }
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::parse(key, format!("expected true|false, got {other:?}"))),
    }
}

pub fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e: V::Err| Error::parse(key, e.to_string()))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_value(key, x)).collect()
}

/// Parses flat `key=value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("line {}", i + 1), "expected key=value"))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::parse(k, "key given twice"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_layer_counts() {
        let f = BackboneConfig::full(32);
        assert_eq!((f.conv_channels.len(), f.n_pools(), f.dropout_after.len(), f.dense_widths.len()), (12, 4, 2, 5));
        let d = BackboneConfig::desk(16);
        assert_eq!((d.conv_channels.len(), d.n_pools(), d.dropout_after.len(), d.dense_widths.len()), (4, 2, 1, 2));
        assert_eq!(d.feature_width(), 8 * 4 * 4 * 4);
        f.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn indivisible_side_is_rejected() {
        assert!(BackboneConfig::desk(18).validate().is_err());
        assert!(BackboneConfig::full(40).validate().is_err());
        assert!(BackboneConfig::full(48).validate().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut l = LmlccConfig::new(3, BackboneConfig::desk(16));
        l.include_original = true;
        l.init = CutInit::Random;
        l.cuts_mode = CutMode::Fixed;
        for cfg in [ModelConfig::Lmlcc(l), ModelConfig::Backbone(BackboneConfig::full(32))] {
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn kv_rejects_duplicates_and_garbage() {
        assert!(parse_kv("a=1\na=2").is_err());
        assert!(parse_kv("novalue").is_err());
        let kv = parse_kv("# c\n\n a = 1 \n").unwrap();
        assert_eq!(kv["a"], "1");
    }
}
