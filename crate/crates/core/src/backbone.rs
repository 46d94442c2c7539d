//! Residual feature-pyramid CNN shared by teacher and student.
//!
//! Layout follows the first three residual stages of a ResNet-18-style
//! network: a 7×7/2 stem conv and 3×3/2 max pool (total stride 4), then
//! stages `k = 2, 3, 4`, the last two of which halve the resolution.

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{fan_in_uniform, is_buffer, kaiming_uniform, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Pyramid levels produced, in order.
pub const LEVELS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: usize,
    pub use_batchnorm: bool,
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 64,
            stage_channels: [64, 128, 256],
            blocks_per_stage: 2,
            use_batchnorm: true,
            input_size: (256, 256),
        }
    }
}

impl BackboneConfig {
    /// Laptop-scale profile: 64×64 input, widths 16/32/64, one block per
    /// stage, no batch norm.
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64],
            blocks_per_stage: 1,
            use_batchnorm: false,
            input_size: (64, 64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be positive and divisible by 16",
                h, w
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` of each level for the configured input size.
    pub fn level_shapes(&self) -> [(usize, usize, usize); 3] {
        let (h, w) = self.input_size;
        [
            (self.stage_channels[0], h / 4, w / 4),
            (self.stage_channels[1], h / 8, w / 8),
            (self.stage_channels[2], h / 16, w / 16),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level<T: Real = f32> {
    pub k: usize,
    pub features: Tensor<T>,
}

/// Feature maps of levels 2, 3, 4. Each tensor is `C×H×W` for a single
/// image or `N×C×H×W` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Real = f32> {
    pub levels: Vec<Level<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: Vec<Level<T>>) -> Self {
        Self { levels }
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        Self {
            levels: tensors
                .into_iter()
                .enumerate()
                .map(|(i, features)| Level {
                    k: LEVELS.get(i).copied().unwrap_or(i + 2),
                    features,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.levels.iter().map(|l| &l.features)
    }

    /// Pyramid of batch item `n`.
    pub fn item(&self, n: usize) -> FeaturePyramid<T> {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|l| Level {
                    k: l.k,
                    features: l.features.index_outer(n),
                })
                .collect(),
        }
    }

    pub fn check_matches(&self, other: &FeaturePyramid<T>) -> Result<()> {
        if self.levels.len() != other.levels.len() {
            return Err(dim_err!(
                "pyramids have {} and {} levels",
                self.levels.len(),
                other.levels.len()
            ));
        }
        for (a, b) in self.levels.iter().zip(&other.levels) {
            if a.features.shape() != b.features.shape() {
                return Err(dim_err!(
                    "level {} shapes differ: {:?} vs {:?}",
                    a.k,
                    a.features.shape(),
                    b.features.shape()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidNet<T: Real = f32> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    pub frozen: bool,
}

struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
}

struct BlockSpec {
    prefix: String,
    cin: usize,
    cout: usize,
    stride: usize,
}

impl BlockSpec {
    fn has_projection(&self) -> bool {
        self.stride != 1 || self.cin != self.cout
    }
}

fn blocks(cfg: &BackboneConfig) -> Vec<BlockSpec> {
    let mut out = Vec::new();
    let mut cin = cfg.stem_channels;
    for (si, &cout) in cfg.stage_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            out.push(BlockSpec {
                prefix: format!("stage{}.block{}", LEVELS[si], b),
                cin,
                cout,
                stride: if si > 0 && b == 0 { 2 } else { 1 },
            });
            cin = cout;
        }
    }
    out
}

/// Convolutions in construction order, which is also init order.
fn conv_layers(cfg: &BackboneConfig) -> Vec<ConvSpec> {
    let mut convs = vec![ConvSpec {
        name: "stem.conv".into(),
        cin: 3,
        cout: cfg.stem_channels,
        kernel: 7,
    }];
    for b in blocks(cfg) {
        convs.push(ConvSpec {
            name: format!("{}.conv1", b.prefix),
            cin: b.cin,
            cout: b.cout,
            kernel: 3,
        });
        convs.push(ConvSpec {
            name: format!("{}.conv2", b.prefix),
            cin: b.cout,
            cout: b.cout,
            kernel: 3,
        });
        if b.has_projection() {
            convs.push(ConvSpec {
                name: format!("{}.down.conv", b.prefix),
                cin: b.cin,
                cout: b.cout,
                kernel: 1,
            });
        }
    }
    convs
}

fn bn_name(conv: &str) -> String {
    match conv.strip_suffix(".conv") {
        Some(base) => format!("{base}.bn"),
        None => conv.replacen("conv", "bn", 1),
    }
}

pub fn build_backbone<T: Real>(cfg: &BackboneConfig, init_seed: u64, frozen: bool) -> Result<PyramidNet<T>> {
    cfg.validate()?;
    let mut rng = Rng::new(init_seed);
    let mut params = ParamStore::new();
    for conv in conv_layers(cfg) {
        let fan_in = conv.cin * conv.kernel * conv.kernel;
        let shape = [conv.cout, conv.cin, conv.kernel, conv.kernel];
        params.insert(
            format!("{}.weight", conv.name),
            kaiming_uniform(&mut rng, &shape, fan_in),
        );
        if cfg.use_batchnorm {
            let bn = bn_name(&conv.name);
            params.insert(format!("{bn}.weight"), Tensor::full(&[conv.cout], T::one()));
            params.insert(format!("{bn}.bias"), Tensor::zeros(&[conv.cout]));
            params.insert(format!("{bn}.running_mean"), Tensor::zeros(&[conv.cout]));
            params.insert(format!("{bn}.running_var"), Tensor::full(&[conv.cout], T::one()));
        } else {
            params.insert(
                format!("{}.bias", conv.name),
                fan_in_uniform(&mut rng, &[conv.cout], fan_in),
            );
        }
    }
    Ok(PyramidNet {
        config: cfg.clone(),
        params,
        frozen,
    })
}

impl<T: Real> PyramidNet<T> {
    /// Number of scalars that receive gradients.
    pub fn trainable_parameter_count(&self) -> usize {
        if self.frozen {
            0
        } else {
            self.params.trainable_count()
        }
    }

    pub fn cast<U: Real>(&self) -> PyramidNet<U> {
        PyramidNet {
            config: self.config.clone(),
            params: self.params.cast(),
            frozen: self.frozen,
        }
    }

    /// Records the forward pass of a `N×3×H×W` batch into `g` and returns
    /// the three level outputs plus any batch-norm statistics gathered.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        images: Var,
        mode: Mode,
    ) -> Result<(Vec<Var>, Vec<(String, BatchStats<T>)>)> {
        let [_, c, h, w] = g.value(images).dims4();
        if c != 3 {
            return Err(dim_err!("expected 3-channel images, got {}", c));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(dim_err!("input size {}x{} is not divisible by 16", h, w));
        }
        let mut fwd = Forward {
            net: self,
            g,
            mode: if self.frozen { Mode::Eval } else { mode },
            stats: Vec::new(),
        };
        let x = fwd.conv_norm("stem.conv", images, 2, 3)?;
        let x = fwd.g.relu(x);
        let mut x = fwd.g.maxpool2d(x, 3, 2, 1)?;
        let mut levels = Vec::new();
        let specs = blocks(&self.config);
        for (i, spec) in specs.iter().enumerate() {
            x = fwd.block(spec, x)?;
            if (i + 1) % self.config.blocks_per_stage == 0 {
                levels.push(x);
            }
        }
        Ok((levels, fwd.stats))
    }

    /// Graph-free forward of a single `3×H×W` image or an `N×3×H×W`
    /// batch.
    pub fn forward_pyramid(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let batched = image.rank() == 4;
        let input = if batched {
            image.clone()
        } else {
            image.clone().unsqueeze0()
        };
        let frozen = PyramidNet {
            config: self.config.clone(),
            params: self.params.clone(),
            frozen: true,
        };
        let mut g = Graph::new();
        let x = g.constant(input);
        let (levels, _) = frozen.forward_graph(&mut g, x, Mode::Eval)?;
        let tensors = levels
            .into_iter()
            .map(|v| {
                let t = g.value(v).clone();
                if batched {
                    t
                } else {
                    t.index_outer(0)
                }
            })
            .collect();
        Ok(FeaturePyramid::from_tensors(tensors))
    }

    /// Blends freshly observed batch statistics into the running buffers
    /// (momentum 0.1).
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::of(0.1);
        for (bn, s) in stats {
            if let Some(rm) = self.params.get_mut(&format!("{bn}.running_mean")) {
                for (r, &v) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
            if let Some(rv) = self.params.get_mut(&format!("{bn}.running_var")) {
                for (r, &v) in rv.data_mut().iter_mut().zip(&s.var_unbiased) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
    }
}

struct Forward<'a, T: Real> {
    net: &'a PyramidNet<T>,
    g: &'a mut Graph<T>,
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Real> Forward<'_, T> {
    fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.net.params.get(name)?.clone();
        let trainable = !self.net.frozen && !is_buffer(name);
        Ok(self.g.param(name, t, trainable))
    }

    fn conv_norm(&mut self, conv: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{conv}.weight"))?;
        if !self.net.config.use_batchnorm {
            let b = self.param(&format!("{conv}.bias"))?;
            return self.g.conv2d(x, w, Some(b), stride, padding);
        }
        let y = self.g.conv2d(x, w, None, stride, padding)?;
        let bn = bn_name(conv);
        let gamma = self.param(&format!("{bn}.weight"))?;
        let beta = self.param(&format!("{bn}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.g.batch_norm(y, gamma, beta, None)?;
                if let Some(s) = stats {
                    self.stats.push((bn, s));
                }
                Ok(out)
            }
            Mode::Eval => {
                let rm = self.net.params.get(&format!("{bn}.running_mean"))?.data().to_vec();
                let rv = self.net.params.get(&format!("{bn}.running_var"))?.data().to_vec();
                let (out, _) = self.g.batch_norm(y, gamma, beta, Some((&rm, &rv)))?;
                Ok(out)
            }
        }
    }

    fn block(&mut self, spec: &BlockSpec, x: Var) -> Result<Var> {
        let h = self.conv_norm(&format!("{}.conv1", spec.prefix), x, spec.stride, 1)?;
        let h = self.g.relu(h);
        let h = self.conv_norm(&format!("{}.conv2", spec.prefix), h, 1, 1)?;
        let shortcut = if spec.has_projection() {
            self.conv_norm(&format!("{}.down.conv", spec.prefix), x, spec.stride, 0)?
        } else {
            x
        };
        let sum = self.g.add(h, shortcut)?;
        Ok(self.g.relu(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form scalar count: conv weights, plus either conv biases or
    /// batch-norm affine pairs, per layer.
    fn expected_count(cfg: &BackboneConfig) -> usize {
        let per_out = |cout: usize| if cfg.use_batchnorm { 2 * cout } else { cout };
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + per_out(cout);
        let mut total = conv(3, cfg.stem_channels, 7);
        let mut cin = cfg.stem_channels;
        for (si, &c) in cfg.stage_channels.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if si > 0 && b == 0 { 2 } else { 1 };
                total += conv(cin, c, 3) + conv(c, c, 3);
                if stride != 1 || cin != c {
                    total += conv(cin, c, 1);
                }
                cin = c;
            }
        }
        total
    }

    #[test]
    fn default_parameter_count_closed_form() {
        let cfg = BackboneConfig::default();
        let net = build_backbone::<f32>(&cfg, 0, false).unwrap();
        // ResNet-18 conv1 + layer1..layer3 with batch norm: 9408 + 128
        // (stem) + 147968 + 525568 + 2099712 = 2782784
        assert_eq!(expected_count(&cfg), 2_782_784);
        assert_eq!(net.trainable_parameter_count(), 2_782_784);

        let desk = BackboneConfig::desk();
        let net = build_backbone::<f32>(&desk, 0, false).unwrap();
        assert_eq!(net.trainable_parameter_count(), expected_count(&desk));
    }

    #[test]
    fn frozen_has_no_trainable_parameters() {
        let net = build_backbone::<f32>(&BackboneConfig::desk(), 1, true).unwrap();
        assert_eq!(net.trainable_parameter_count(), 0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = BackboneConfig::desk();
        let a = build_backbone::<f32>(&cfg, 42, false).unwrap();
        let b = build_backbone::<f32>(&cfg, 42, false).unwrap();
        let c = build_backbone::<f32>(&cfg, 43, false).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn invalid_config() {
        let mut cfg = BackboneConfig::desk();
        cfg.stage_channels[1] = 0;
        assert!(matches!(build_backbone::<f32>(&cfg, 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn desk_shapes() {
        let cfg = BackboneConfig::desk();
        let net = build_backbone::<f32>(&cfg, 7, true).unwrap();
        let img = Tensor::<f32>::from_fn(&[3, 64, 64], |i| ((i % 97) as f32) / 97.0);
        let p = net.forward_pyramid(&img).unwrap();
        let shapes: Vec<_> = p.tensors().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4]]);
        assert_eq!(net.forward_pyramid(&img).unwrap(), p);
        let ks: Vec<_> = p.levels.iter().map(|l| l.k).collect();
        assert_eq!(ks, LEVELS);
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = build_backbone::<f32>(&BackboneConfig::desk(), 7, true).unwrap();
        let img = Tensor::<f32>::zeros(&[3, 40, 64]);
        assert!(matches!(net.forward_pyramid(&img), Err(Error::Dimension(_))));
    }
}
