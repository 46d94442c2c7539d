//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; `loss` may repeat. Later
//! occurrences of other keys override earlier ones.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::data::{IMAGENET_MEAN, IMAGENET_STD};
use crate::dcam::{AttentionMode, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::losses::LossSpec;

/// `(line number, key, value)` triples of a `key = value` text.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                offset: offset as u64,
                msg: format!("line {}: expected `key = value`", i + 1),
            })?;
            out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        offset += raw.len();
    }
    Ok(out)
}

pub fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

pub fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

/// Parameter profile selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub attention: AttentionMode,
    pub loss: LossSpec,
    pub backbone: BackboneConfig,
    pub reduction: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub data_root: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Full-scale recipe: 256×256 input, ResNet-18 widths, SGD lr 0.1,
    /// batch 32, 400 epochs, CD-channel plus 0.5·KLD-spatial.
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 32,
            lr: 0.1,
            seed: 0,
            val_fraction: 0.2,
            attention: AttentionMode::Channel,
            loss: LossSpec::headline(),
            backbone: BackboneConfig::default(),
            reduction: DEFAULT_REDUCTION,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
            data_root: None,
            checkpoint_path: None,
        }
    }
}

/// Keys that define the trained model; resuming requires them to match.
const ECHO_KEYS: [&str; 9] = [
    "batch_size",
    "lr",
    "seed",
    "val_fraction",
    "input_size",
    "attention",
    "stage_channels",
    "blocks_per_stage",
    "use_batchnorm",
];

impl TrainConfig {
    /// Laptop-scale recipe on 64×64 synthetic images.
    pub fn desk() -> Self {
        Self {
            epochs: 150,
            batch_size: 4,
            lr: 0.02,
            backbone: BackboneConfig::desk(),
            ..Self::default()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::default(),
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.backbone.input_size
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.norm_std.contains(&0.0) {
            return Err(Error::Config("normalization std must be nonzero".into()));
        }
        Ok(())
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply_text(mut self, text: &str, path: &Path) -> Result<Self> {
        let mut losses = Vec::new();
        for (line, key, value) in parse_pairs(text, path)? {
            let ctx = |e: Error| Error::Config(format!("{}:{line}: {e}", path.display()));
            match key.as_str() {
                "epochs" => self.epochs = parse_value(&key, &value).map_err(ctx)?,
                "batch_size" => self.batch_size = parse_value(&key, &value).map_err(ctx)?,
                "lr" => self.lr = parse_value(&key, &value).map_err(ctx)?,
                "seed" => self.seed = parse_value(&key, &value).map_err(ctx)?,
                "val_fraction" => self.val_fraction = parse_value(&key, &value).map_err(ctx)?,
                "input_size" => {
                    let s: usize = parse_value(&key, &value).map_err(ctx)?;
                    self.backbone.input_size = (s, s);
                }
                "attention" => self.attention = value.parse().map_err(ctx)?,
                "loss" => losses.push(value.parse().map_err(ctx)?),
                "stage_channels" => {
                    let v: Vec<usize> = parse_list(&key, &value).map_err(ctx)?;
                    let arr: [usize; 3] = v.try_into().map_err(|_| {
                        Error::Config(format!("{}:{line}: stage_channels needs three widths", path.display()))
                    })?;
                    self.backbone.stage_channels = arr;
                    self.backbone.stem_channels = arr[0];
                }
                "blocks_per_stage" => self.backbone.blocks_per_stage = parse_value(&key, &value).map_err(ctx)?,
                "use_batchnorm" => self.backbone.use_batchnorm = parse_bool(&key, &value).map_err(ctx)?,
                "data_root" => self.data_root = Some(PathBuf::from(value)),
                "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(value)),
                other => {
                    return Err(Error::Config(format!(
                        "{}:{line}: unknown key `{other}`",
                        path.display()
                    )))
                }
            }
        }
        if !losses.is_empty() {
            self.loss = LossSpec::new(losses)?;
        }
        Ok(self)
    }

    pub fn load(self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Canonical `key = value` rendering; parsing it reproduces `self`
    /// except for the normalization constants and reduction ratio.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let b = &self.backbone;
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "lr = {:?}", self.lr);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "val_fraction = {:?}", self.val_fraction);
        let _ = writeln!(out, "input_size = {}", b.input_size.0);
        let _ = writeln!(out, "attention = {}", self.attention);
        for t in &self.loss.terms {
            let _ = writeln!(out, "loss = {t}");
        }
        let _ = writeln!(
            out,
            "stage_channels = {},{},{}",
            b.stage_channels[0], b.stage_channels[1], b.stage_channels[2]
        );
        let _ = writeln!(out, "blocks_per_stage = {}", b.blocks_per_stage);
        let _ = writeln!(out, "use_batchnorm = {}", b.use_batchnorm);
        if let Some(p) = &self.data_root {
            let _ = writeln!(out, "data_root = {}", p.display());
        }
        if let Some(p) = &self.checkpoint_path {
            let _ = writeln!(out, "checkpoint_path = {}", p.display());
        }
        out
    }

    /// Differences in model-defining settings between two configs, one
    /// line per key. Epoch count and paths may differ.
    pub fn diff(&self, other: &TrainConfig) -> Vec<String> {
        let mine = model_keys(self);
        let theirs = model_keys(other);
        let mut out: Vec<String> = ECHO_KEYS
            .iter()
            .filter_map(|k| {
                let a = mine.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
                let b = theirs.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
                (a != b).then(|| format!("{k}: {} != {}", a.unwrap_or_default(), b.unwrap_or_default()))
            })
            .collect();
        let (la, lb) = (self.loss.to_string(), other.loss.to_string());
        if la != lb {
            out.push(format!("loss: {la} != {lb}"));
        }
        out
    }
}

fn model_keys(c: &TrainConfig) -> Vec<(String, String)> {
    let text = c.render();
    parse_pairs(&text, Path::new("<echo>"))
        .expect("rendered config parses")
        .into_iter()
        .map(|(_, k, v)| (k, v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{Dimension, Metric};

    #[test]
    fn defaults_match_full_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.lr), (400, 32, 0.1));
        assert_eq!(c.input_size(), (256, 256));
        assert_eq!(c.loss.terms[1].weight, 0.5);
    }

    #[test]
    fn render_round_trips() {
        let mut c = TrainConfig::desk();
        c.seed = 99;
        c.data_root = Some("corpus".into());
        let back = TrainConfig::default().apply_text(&c.render(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# desk run\nepochs = 3\nloss = mse:channel:1  # baseline\nuse_batchnorm = off\n";
        let c = TrainConfig::desk().apply_text(text, Path::new("run.cfg")).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.loss.terms.len(), 1);
        assert_eq!((c.loss.terms[0].metric, c.loss.terms[0].dimension), (Metric::Mse, Dimension::Channel));
        assert!(!c.backbone.use_batchnorm);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::desk().apply_text("momentum = 0.9", Path::new("run.cfg")).unwrap_err();
        assert!(err.to_string().contains("momentum"));
    }

    #[test]
    fn diff_ignores_epochs_but_not_loss() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        b.epochs = 99;
        assert!(a.diff(&b).is_empty());
        b.loss = LossSpec::mse();
        assert_eq!(a.diff(&b).len(), 1);
    }
}
