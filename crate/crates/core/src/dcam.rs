//! Distributed convolutional attention: channel and spatial gates applied
//! to each student pyramid level during training.
//!
//! Channel gate: `σ(W1·relu(W0·avg(F)) + W1·relu(W0·max(F)))`, one value
//! per channel, from spatially pooled descriptors through a shared MLP.
//! Spatial gate: `σ(conv7x7([mean_c(F); max_c(F)]))`, one value per pixel.
//! The average map is the first input channel of the 7×7 conv.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, kaiming_uniform, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_REDUCTION: usize = 8;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    None,
    Channel,
    Spatial,
    Combined,
}

impl AttentionMode {
    pub fn uses_channel(self) -> bool {
        matches!(self, AttentionMode::Channel | AttentionMode::Combined)
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, AttentionMode::Spatial | AttentionMode::Combined)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::Channel => "channel",
            AttentionMode::Spatial => "spatial",
            AttentionMode::Combined => "combined",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(AttentionMode::None),
            "channel" => Ok(AttentionMode::Channel),
            "spatial" => Ok(AttentionMode::Spatial),
            "combined" | "channel+spatial" => Ok(AttentionMode::Combined),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

pub fn channel_names(k: usize) -> (String, String) {
    (format!("dcam.k{k}.channel.w0"), format!("dcam.k{k}.channel.w1"))
}

pub fn spatial_names(k: usize) -> (String, String) {
    (format!("dcam.k{k}.spatial.weight"), format!("dcam.k{k}.spatial.bias"))
}

/// Initializes attention parameters for each `(k, channels)` level as
/// required by `mode`.
pub fn build_dcam<T: Real>(
    levels: &[(usize, usize)],
    reduction: usize,
    mode: AttentionMode,
    seed: u64,
) -> Result<ParamStore<T>> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    for &(k, c) in levels {
        if mode.uses_channel() {
            if reduction == 0 || c % reduction != 0 {
                return Err(Error::Config(format!(
                    "reduction ratio {reduction} does not divide {c} channels at level {k}"
                )));
            }
            let hidden = c / reduction;
            let (w0, w1) = channel_names(k);
            store.insert(w0, kaiming_uniform(&mut rng, &[hidden, c], c));
            store.insert(w1, kaiming_uniform(&mut rng, &[c, hidden], hidden));
        }
        if mode.uses_spatial() {
            let fan_in = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL;
            let (w, b) = spatial_names(k);
            store.insert(
                w,
                kaiming_uniform(&mut rng, &[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], fan_in),
            );
            store.insert(b, fan_in_uniform(&mut rng, &[1], fan_in));
        }
    }
    Ok(store)
}

/// Channel gate of `f` (`N×C×H×W`) as `N×C×1×1`.
pub fn channel_attention_graph<T: Real>(g: &mut Graph<T>, f: Var, w0: Var, w1: Var) -> Result<Var> {
    let c = g.value(f).dims4()[1];
    let w0s = g.value(w0).shape().to_vec();
    let w1s = g.value(w1).shape().to_vec();
    if w0s.len() != 2 || w1s.len() != 2 || w0s[1] != c || w1s != [c, w0s[0]] {
        return Err(Error::Dimension(format!(
            "channel attention weights {:?}/{:?} do not fit {} channels",
            w0s, w1s, c
        )));
    }
    let hidden = w0s[0];
    let w0c = g.reshape(w0, &[hidden, c, 1, 1])?;
    let w1c = g.reshape(w1, &[c, hidden, 1, 1])?;
    let avg = g.global_avgpool(f);
    let max = g.global_maxpool(f);
    let branch = |x: Var, g: &mut Graph<T>| -> Result<Var> {
        let h = g.conv2d(x, w0c, None, 1, 0)?;
        let h = g.relu(h);
        g.conv2d(h, w1c, None, 1, 0)
    };
    let a = branch(avg, g)?;
    let m = branch(max, g)?;
    let s = g.add(a, m)?;
    Ok(g.sigmoid(s))
}

/// Spatial gate of `f` as `N×1×H×W`.
pub fn spatial_attention_graph<T: Real>(g: &mut Graph<T>, f: Var, w: Var, b: Var) -> Result<Var> {
    let avg = g.channel_avgpool(f);
    let max = g.channel_maxpool(f);
    let cat = g.concat_channels(avg, max)?;
    let y = g.conv2d(cat, w, Some(b), 1, SPATIAL_KERNEL / 2)?;
    Ok(g.sigmoid(y))
}

/// Gates `f` according to `mode`. Combined mode applies the channel gate
/// first, then the spatial gate computed on the channel-refined map.
pub fn refine_graph<T: Real>(
    g: &mut Graph<T>,
    f: Var,
    mode: AttentionMode,
    params: &ParamStore<T>,
    k: usize,
    trainable: bool,
) -> Result<Var> {
    let missing = |what: &str| Error::Config(format!("attention mode {mode} needs {what} parameters for level {k}"));
    let mut x = f;
    if mode.uses_channel() {
        let (n0, n1) = channel_names(k);
        let w0 = params.get(&n0).map_err(|_| missing("channel"))?.clone();
        let w1 = params.get(&n1).map_err(|_| missing("channel"))?.clone();
        let w0 = g.param(&n0, w0, trainable);
        let w1 = g.param(&n1, w1, trainable);
        let m = channel_attention_graph(g, x, w0, w1)?;
        x = g.mul_broadcast(x, m)?;
    }
    if mode.uses_spatial() {
        let (nw, nb) = spatial_names(k);
        let w = params.get(&nw).map_err(|_| missing("spatial"))?.clone();
        let b = params.get(&nb).map_err(|_| missing("spatial"))?.clone();
        let w = g.param(&nw, w, trainable);
        let b = g.param(&nb, b, trainable);
        let m = spatial_attention_graph(g, x, w, b)?;
        x = g.mul_broadcast(x, m)?;
    }
    Ok(x)
}

/// Channel attention map of a `C×H×W` feature map, as `C×1×1`.
pub fn channel_attention<T: Real>(f: &Tensor<T>, params: &ParamStore<T>, k: usize) -> Result<Tensor<T>> {
    let (n0, n1) = channel_names(k);
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let w0 = g.constant(params.get(&n0)?.clone());
    let w1 = g.constant(params.get(&n1)?.clone());
    let m = channel_attention_graph(&mut g, x, w0, w1)?;
    Ok(g.value(m).clone())
}

/// Spatial attention map of a `C×H×W` feature map, as `1×H×W`.
pub fn spatial_attention<T: Real>(f: &Tensor<T>, params: &ParamStore<T>, k: usize) -> Result<Tensor<T>> {
    let (nw, nb) = spatial_names(k);
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let w = g.constant(params.get(&nw)?.clone());
    let b = g.constant(params.get(&nb)?.clone());
    let m = spatial_attention_graph(&mut g, x, w, b)?;
    Ok(g.value(m).clone())
}

pub fn refine<T: Real>(
    f: &Tensor<T>,
    mode: AttentionMode,
    params: &ParamStore<T>,
    k: usize,
) -> Result<Tensor<T>> {
    if mode == AttentionMode::None {
        return Ok(f.clone());
    }
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let y = refine_graph(&mut g, x, mode, params, k, false)?;
    Ok(g.value(y).clone())
}
