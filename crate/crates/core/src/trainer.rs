//! Distillation training: a frozen teacher, a trainable student whose
//! levels are refined by attention before matching, plain SGD on student
//! and attention parameters, and min-validation-loss checkpointing.

use std::path::Path;

use crate::autograd::Graph;
use crate::backbone::{build_backbone, FeaturePyramid, Level, Mode, PyramidNet, LEVELS};
use crate::config::{parse_pairs, parse_value, TrainConfig};
use crate::data::{preprocess, Dataset, Sample};
use crate::dcam::{self, build_dcam};
use crate::error::{Error, Result};
use crate::inference::Detector;
use crate::losses::{total_loss, total_loss_graph};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::weights;

const TEACHER_STREAM: u64 = 1;
const STUDENT_STREAM: u64 = 2;
const DCAM_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 4;
const EPOCH_STREAM: u64 = 1 << 20;

/// Preprocessed images are kept in memory up to this many bytes.
const CACHE_LIMIT: usize = 512 << 20;

/// Seeded per-list shuffle, then the first `max(1, floor(n·f))` samples
/// become validation and the rest training.
pub fn split_dataset(samples: &[Sample], val_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if let Some(bad) = samples.iter().find(|s| s.anomalous) {
        return Err(Error::Contract(format!(
            "training data must be anomaly-free, got {}",
            bad.path.display()
        )));
    }
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "splitting needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let n = samples.len();
    let val = ((n as f64 * val_fraction + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[val..]), pick(&order[..val])))
}

/// Per-class split of every class's training images.
pub fn split_per_class(data: &Dataset, cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let split_seed = Rng::derive(cfg.seed, SPLIT_STREAM).next_u64();
    for (i, class) in data.classes.iter().enumerate() {
        if class.train.is_empty() {
            continue;
        }
        let (t, v) = split_dataset(&class.train, cfg.val_fraction, Rng::derive(split_seed, i as u64).next_u64())
            .map_err(|e| match e {
                Error::Contract(m) => Error::Contract(format!("class `{}`: {m}", class.name)),
                other => other,
            })?;
        train.extend(t);
        val.extend(v);
    }
    if train.is_empty() {
        return Err(Error::Dataset("no training images found".into()));
    }
    Ok((train, val))
}

/// Student, attention and teacher weights plus training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub teacher: ParamStore<f32>,
    pub student: ParamStore<f32>,
    pub dcam: ParamStore<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
    /// Every stored best validation loss, oldest first.
    pub best_history: Vec<f64>,
    /// State of the shuffle stream for the next epoch.
    pub rng_digest: u64,
}

const TEACHER_PREFIX: &str = "teacher.";
const STUDENT_PREFIX: &str = "student.";

impl Checkpoint {
    pub fn detector(&self) -> Result<Detector<f32>> {
        let net = |params: &ParamStore<f32>| PyramidNet {
            config: self.config.backbone.clone(),
            params: params.clone(),
            frozen: true,
        };
        Detector::new(net(&self.teacher), net(&self.student))
    }

    fn echo(&self) -> String {
        let history: Vec<String> = self.best_history.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "{}split = per-class\nstate.epoch = {}\nstate.best_val_loss = {:?}\nstate.best_history = {}\nstate.rng_digest = {}\n",
            self.config.render(),
            self.epoch,
            self.best_val_loss,
            history.join(","),
            self.rng_digest
        )
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let mut all = ParamStore::new();
        for (n, t) in self.teacher.iter() {
            all.insert(format!("{TEACHER_PREFIX}{n}"), t.clone());
        }
        for (n, t) in self.student.iter() {
            all.insert(format!("{STUDENT_PREFIX}{n}"), t.clone());
        }
        for (n, t) in self.dcam.iter() {
            all.insert(n.clone(), t.clone());
        }
        all
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        weights::encode(&self.to_store(), Some(&self.echo()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint file not found"),
            ));
        }
        let (store, echo) = weights::load::<f32>(path)?;
        let echo = echo.ok_or_else(|| Error::Weights(format!("{} has no config echo block", path.display())))?;
        let mut config_text = String::new();
        let (mut epoch, mut best, mut history, mut digest) = (None, None, Vec::new(), None);
        for (_, key, value) in parse_pairs(&echo, path)? {
            match key.as_str() {
                "split" => {}
                "state.epoch" => epoch = Some(parse_value::<usize>(&key, &value)?),
                "state.best_val_loss" => best = Some(parse_value::<f64>(&key, &value)?),
                "state.best_history" => {
                    history = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| parse_value::<f64>(&key, s.trim()))
                        .collect::<Result<_>>()?
                }
                "state.rng_digest" => digest = Some(parse_value::<u64>(&key, &value)?),
                _ => config_text.push_str(&format!("{key} = {value}\n")),
            }
        }
        let config = TrainConfig::default().apply_text(&config_text, path)?;
        let missing = |what: &str| Error::Weights(format!("config echo lacks `{what}`"));
        let (mut teacher, mut student, mut dcam) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        for (name, t) in store.iter() {
            if let Some(n) = name.strip_prefix(TEACHER_PREFIX) {
                teacher.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix(STUDENT_PREFIX) {
                student.insert(n, t.clone());
            } else if name.starts_with("dcam.") {
                dcam.insert(name.clone(), t.clone());
            } else {
                return Err(Error::NamedTensors(vec![format!("unexpected tensor `{name}`")]));
            }
        }
        Ok(Self {
            config,
            teacher,
            student,
            dcam,
            epoch: epoch.ok_or_else(|| missing("state.epoch"))?,
            best_val_loss: best.ok_or_else(|| missing("state.best_val_loss"))?,
            best_history: history,
            rng_digest: digest.ok_or_else(|| missing("state.rng_digest"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub step_losses: Vec<f64>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Lowest-validation-loss state.
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
}

impl TrainRun {
    pub fn initial_train_loss(&self) -> Option<f64> {
        self.history.first().and_then(|e| e.step_losses.first().copied())
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.history.last().map(|e| e.train_loss)
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.history.iter().flat_map(|e| e.step_losses.iter().copied()).collect()
    }
}

/// Preprocessed input images, held in memory when they fit.
struct Images<'a> {
    samples: &'a [Sample],
    cfg: &'a TrainConfig,
    cache: Option<Vec<Tensor<f32>>>,
}

impl<'a> Images<'a> {
    fn new(samples: &'a [Sample], cfg: &'a TrainConfig) -> Result<Self> {
        let (h, w) = cfg.input_size();
        let mut images = Self {
            samples,
            cfg,
            cache: None,
        };
        if samples.len() * 3 * h * w * 4 <= CACHE_LIMIT {
            images.cache = Some(samples.iter().map(|s| images.load(s)).collect::<Result<_>>()?);
        }
        Ok(images)
    }

    fn load(&self, s: &Sample) -> Result<Tensor<f32>> {
        preprocess(&s.load_image()?, self.cfg.input_size(), self.cfg.norm_mean, self.cfg.norm_std)
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = match &self.cache {
            Some(c) => idx.iter().map(|&i| c[i].clone()).collect(),
            None => idx.iter().map(|&i| self.load(&self.samples[i])).collect::<Result<_>>()?,
        };
        Tensor::stack(&items)
    }
}

fn refine_pyramid<T: Real>(p: &FeaturePyramid<T>, cfg: &TrainConfig, attn: &ParamStore<T>) -> Result<FeaturePyramid<T>> {
    let levels = p
        .levels
        .iter()
        .map(|l| {
            Ok(Level {
                k: l.k,
                features: dcam::refine(&l.features, cfg.attention, attn, l.k)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid::new(levels))
}

/// Mean total loss over `samples` with attention refinement active and
/// the student in evaluation mode.
pub fn validation_loss(
    teacher: &PyramidNet<f32>,
    student: &PyramidNet<f32>,
    attn: &ParamStore<f32>,
    cfg: &TrainConfig,
    samples: &[Sample],
) -> Result<f64> {
    validation_loss_inner(teacher, student, attn, cfg, &Images::new(samples, cfg)?)
}

fn validation_loss_inner(
    teacher: &PyramidNet<f32>,
    student: &PyramidNet<f32>,
    attn: &ParamStore<f32>,
    cfg: &TrainConfig,
    images: &Images<'_>,
) -> Result<f64> {
    let n = images.samples.len();
    if n == 0 {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let x = images.batch(chunk)?;
        let t = teacher.forward_pyramid(&x)?;
        let s = refine_pyramid(&student.forward_pyramid(&x)?, cfg, attn)?;
        total += total_loss(&t, &s, &cfg.loss)?.f64() * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

fn initial_state(cfg: &TrainConfig, teacher: Option<ParamStore<f32>>) -> Result<Checkpoint> {
    let bb = &cfg.backbone;
    let teacher = match teacher {
        Some(params) => {
            let mut net = build_backbone::<f32>(bb, 0, true)?;
            net.params.load_from(&params)?;
            net.params
        }
        None => build_backbone::<f32>(bb, Rng::derive(cfg.seed, TEACHER_STREAM).next_u64(), true)?.params,
    };
    let student = build_backbone::<f32>(bb, Rng::derive(cfg.seed, STUDENT_STREAM).next_u64(), false)?.params;
    let levels: Vec<(usize, usize)> = LEVELS.iter().copied().zip(bb.stage_channels).collect();
    let attn = build_dcam::<f32>(
        &levels,
        cfg.reduction,
        cfg.attention,
        Rng::derive(cfg.seed, DCAM_STREAM).next_u64(),
    )?;
    Ok(Checkpoint {
        config: cfg.clone(),
        teacher,
        student,
        dcam: attn,
        epoch: 0,
        best_val_loss: f64::INFINITY,
        best_history: Vec::new(),
        rng_digest: epoch_rng(cfg.seed, 1).state(),
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::derive(seed, EPOCH_STREAM + epoch as u64)
}

/// Trains from scratch. `teacher` replaces the seeded random teacher with
/// imported weights.
pub fn train(cfg: &TrainConfig, data: &Dataset, teacher: Option<ParamStore<f32>>) -> Result<TrainRun> {
    cfg.validate()?;
    run(initial_state(cfg, teacher)?, cfg, data)
}

/// Continues from `ckpt` up to `cfg.epochs`, refusing any change of a
/// model-defining setting.
pub fn resume(ckpt: Checkpoint, cfg: &TrainConfig, data: &Dataset) -> Result<TrainRun> {
    cfg.validate()?;
    let diff = ckpt.config.diff(cfg);
    if !diff.is_empty() {
        return Err(Error::Resume(format!("config differs from checkpoint: {}", diff.join("; "))));
    }
    run(ckpt, cfg, data)
}

fn run(start: Checkpoint, cfg: &TrainConfig, data: &Dataset) -> Result<TrainRun> {
    let (train_set, val_set) = split_per_class(data, cfg)?;
    if val_set.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let train_images = Images::new(&train_set, cfg)?;
    let val_images = Images::new(&val_set, cfg)?;
    let teacher = PyramidNet {
        config: cfg.backbone.clone(),
        params: start.teacher.clone(),
        frozen: true,
    };
    let mut student = PyramidNet {
        config: cfg.backbone.clone(),
        params: start.student.clone(),
        frozen: false,
    };
    let mut attn = start.dcam.clone();
    let mut best = start;
    let lr = cfg.lr as f32;
    let mut history = Vec::new();
    let mut step = 0usize;

    for epoch in best.epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        epoch_rng(cfg.seed, epoch).shuffle(&mut order);
        let mut step_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let x = train_images.batch(chunk)?;
            let t = teacher.forward_pyramid(&x)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (levels, stats) = student.forward_graph(&mut g, xv, Mode::Train)?;
            let refined = levels
                .iter()
                .zip(LEVELS)
                .map(|(&v, k)| dcam::refine_graph(&mut g, v, cfg.attention, &attn, k, true))
                .collect::<Result<Vec<_>>>()?;
            let tv: Vec<_> = t.tensors().map(|f| g.constant(f.clone())).collect();
            let loss = total_loss_graph(&mut g, &tv, &refined, &cfg.loss)?;
            let value = g.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            step_losses.push(value);
            let grads = g.backward(loss)?.into_params();
            let (attn_grads, student_grads): (Vec<_>, Vec<_>) =
                grads.into_iter().partition(|(n, _)| n.starts_with("dcam."));
            student.params.sgd_step(&student_grads.into_iter().collect(), lr)?;
            attn.sgd_step(&attn_grads.into_iter().collect(), lr)?;
            student.update_running_stats(&stats);
        }
        let val_loss = validation_loss_inner(&teacher, &student, &attn, cfg, &val_images)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, step, loss: val_loss });
        }
        let improved = val_loss < best.best_val_loss;
        if improved {
            best.config = cfg.clone();
            best.student = student.params.clone();
            best.dcam = attn.clone();
            best.epoch = epoch;
            best.best_val_loss = val_loss;
            best.best_history.push(val_loss);
            best.rng_digest = epoch_rng(cfg.seed, epoch + 1).state();
            if let Some(path) = &cfg.checkpoint_path {
                best.save(path)?;
            }
        }
        let train_loss = step_losses.iter().sum::<f64>() / step_losses.len().max(1) as f64;
        history.push(EpochStats {
            epoch,
            step_losses,
            train_loss,
            val_loss,
            improved,
        });
    }
    Ok(TrainRun { best, history })
}
