//! Teacher-student feature matching losses.
//!
//! Each metric compares teacher and student vectors along one dimension:
//! `channel` takes the `C`-vector at every pixel, `spatial` takes the
//! flattened `H×W` map of every channel.
//!
//! * CD: `1 - cos(t, s)`, averaged over the vectors of a level.
//! * KLD: `Σ softmax(t)·(log softmax(t) - log softmax(s))`, summed over
//!   the vectors of a level.
//! * MSE: `½‖t/‖t‖ - s/‖s‖‖²`, averaged over the vectors of a level.
//!
//! Level values are summed over the pyramid. With a batch dimension the
//! result is the mean over batch items. The teacher side is a fixed
//! target: gradients only flow into the student features.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Guard applied to vector norms before division.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Mse,
    Cd,
    Kld,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dimension {
    Channel,
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerm {
    pub metric: Metric,
    pub dimension: Dimension,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Mse => "mse",
            Metric::Cd => "cd",
            Metric::Kld => "kld",
        })
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Channel => "channel",
            Dimension::Spatial => "spatial",
        })
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.metric, self.dimension, self.weight)
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    /// Parses `<metric>:<dimension>:<weight>`, e.g. `cd:channel:1.0`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let [m, d, w] = parts[..] else {
            return Err(Error::Config(format!(
                "loss term `{s}` must look like <metric>:<dimension>:<weight>"
            )));
        };
        let metric = match m.to_ascii_lowercase().as_str() {
            "mse" => Metric::Mse,
            "cd" => Metric::Cd,
            "kld" | "kl" => Metric::Kld,
            _ => return Err(Error::Config(format!("unknown loss metric `{m}`"))),
        };
        let dimension = match d.to_ascii_lowercase().as_str() {
            "channel" => Dimension::Channel,
            "spatial" => Dimension::Spatial,
            _ => return Err(Error::Config(format!("unknown loss dimension `{d}`"))),
        };
        let weight: f64 = w
            .parse()
            .map_err(|_| Error::Config(format!("bad loss weight `{w}`")))?;
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::Config(format!("loss weight must be finite and >= 0, got {w}")));
        }
        Ok(LossTerm {
            metric,
            dimension,
            weight,
        })
    }
}

impl LossSpec {
    pub fn new(terms: Vec<LossTerm>) -> Result<Self> {
        let spec = Self { terms };
        spec.validate()?;
        Ok(spec)
    }

    /// Channel cosine distance plus half-weighted spatial KL divergence.
    pub fn headline() -> Self {
        Self {
            terms: vec![
                LossTerm {
                    metric: Metric::Cd,
                    dimension: Dimension::Channel,
                    weight: 1.0,
                },
                LossTerm {
                    metric: Metric::Kld,
                    dimension: Dimension::Spatial,
                    weight: 0.5,
                },
            ],
        }
    }

    pub fn mse() -> Self {
        Self {
            terms: vec![LossTerm {
                metric: Metric::Mse,
                dimension: Dimension::Channel,
                weight: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("loss spec has no terms".into()));
        }
        for t in &self.terms {
            if !t.weight.is_finite() || t.weight < 0.0 {
                return Err(Error::Config(format!("invalid weight in loss term {t}")));
            }
        }
        Ok(())
    }
}

/// Per-vector loss; writes `d loss / d s` into `grad`.
fn vector_loss<T: Real>(metric: Metric, t: &[T], s: &[T], grad: &mut [T]) -> T {
    let eps = T::of(NORM_EPS);
    match metric {
        Metric::Cd => {
            let (mut dot, mut tt, mut ss) = (T::zero(), T::zero(), T::zero());
            for (&a, &b) in t.iter().zip(s) {
                dot = dot + a * b;
                tt = tt + a * a;
                ss = ss + b * b;
            }
            let nt = tt.sqrt().max(eps);
            let ns_raw = ss.sqrt();
            let ns = ns_raw.max(eps);
            let cos = dot / (nt * ns);
            let radial = if ns_raw > eps { cos / (ns * ns) } else { T::zero() };
            let inv = T::one() / (nt * ns);
            for ((g, &a), &b) in grad.iter_mut().zip(t).zip(s) {
                *g = -(a * inv - radial * b);
            }
            // identical non-degenerate vectors are at distance exactly 0
            if ns_raw > eps && t == s {
                T::zero()
            } else {
                T::one() - cos
            }
        }
        Metric::Mse => {
            let tt: T = t.iter().map(|&a| a * a).sum();
            let ss: T = s.iter().map(|&b| b * b).sum();
            let nt = tt.sqrt().max(eps);
            let ns_raw = ss.sqrt();
            let ns = ns_raw.max(eps);
            let mut loss = T::zero();
            let mut proj = T::zero();
            for ((g, &a), &b) in grad.iter_mut().zip(t).zip(s) {
                let d = a / nt - b / ns;
                loss = loss + d * d;
                proj = proj + (b / ns) * d;
                *g = d;
            }
            let keep_radial = ns_raw > eps;
            for (g, &b) in grad.iter_mut().zip(s) {
                let tangential = if keep_radial { *g - (b / ns) * proj } else { *g };
                *g = -tangential / ns;
            }
            loss * T::of(0.5)
        }
        Metric::Kld => {
            let lse = |v: &[T]| {
                let m = v.iter().copied().fold(T::neg_infinity(), T::max);
                m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
            };
            let lt = lse(t);
            let ls = lse(s);
            let mut kl = T::zero();
            for ((g, &a), &b) in grad.iter_mut().zip(t).zip(s) {
                let log_pt = a - lt;
                let log_ps = b - ls;
                let pt = log_pt.exp();
                kl = kl + pt * (log_pt - log_ps);
                *g = log_ps.exp() - pt;
            }
            kl
        }
    }
}

/// Loss of one level and its gradient with respect to `s`.
pub fn level_loss<T: Real>(
    metric: Metric,
    dimension: Dimension,
    t: &Tensor<T>,
    s: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if t.shape() != s.shape() {
        return Err(dim_err!(
            "teacher level {:?} and student level {:?} differ",
            t.shape(),
            s.shape()
        ));
    }
    let [n, c, h, w] = t.dims4();
    let hw = h * w;
    let (count, len) = match dimension {
        Dimension::Channel => (hw, c),
        Dimension::Spatial => (c, hw),
    };
    let norm = match metric {
        Metric::Kld => T::one(),
        Metric::Cd | Metric::Mse => T::one() / T::of(count as f64),
    };
    let batch = T::one() / T::of(n as f64);
    let td = t.data();
    let sd = s.data();
    let mut grad = Tensor::zeros(s.shape());
    let mut total = T::zero();
    let mut tv = vec![T::zero(); len];
    let mut sv = vec![T::zero(); len];
    let mut gv = vec![T::zero(); len];
    for b in 0..n {
        let base = b * c * hw;
        let mut item = T::zero();
        for v in 0..count {
            let index = |j: usize| match dimension {
                Dimension::Channel => base + j * hw + v,
                Dimension::Spatial => base + v * hw + j,
            };
            for j in 0..len {
                tv[j] = td[index(j)];
                sv[j] = sd[index(j)];
            }
            item = item + vector_loss(metric, &tv, &sv, &mut gv);
            let gd = grad.data_mut();
            for j in 0..len {
                gd[index(j)] = gv[j] * norm * batch;
            }
        }
        total = total + item * norm;
    }
    Ok((total * batch, grad))
}

fn pyramid_loss<T: Real>(
    metric: Metric,
    dimension: Dimension,
    t: &FeaturePyramid<T>,
    s: &FeaturePyramid<T>,
) -> Result<T> {
    t.check_matches(s)?;
    let mut total = T::zero();
    for (a, b) in t.tensors().zip(s.tensors()) {
        total = total + level_loss(metric, dimension, a, b)?.0;
    }
    Ok(total)
}

pub fn cd_channel<T: Real>(t: &FeaturePyramid<T>, s: &FeaturePyramid<T>) -> Result<T> {
    pyramid_loss(Metric::Cd, Dimension::Channel, t, s)
}

pub fn cd_spatial<T: Real>(t: &FeaturePyramid<T>, s: &FeaturePyramid<T>) -> Result<T> {
    pyramid_loss(Metric::Cd, Dimension::Spatial, t, s)
}

pub fn kld_channel<T: Real>(t: &FeaturePyramid<T>, s: &FeaturePyramid<T>) -> Result<T> {
    pyramid_loss(Metric::Kld, Dimension::Channel, t, s)
}

pub fn kld_spatial<T: Real>(t: &FeaturePyramid<T>, s: &FeaturePyramid<T>) -> Result<T> {
    pyramid_loss(Metric::Kld, Dimension::Spatial, t, s)
}

/// Normalized-feature squared error on per-pixel channel vectors.
pub fn mse_stfpm<T: Real>(t: &FeaturePyramid<T>, s: &FeaturePyramid<T>) -> Result<T> {
    pyramid_loss(Metric::Mse, Dimension::Channel, t, s)
}

/// Weighted sum of every term in `spec` over all levels.
pub fn total_loss<T: Real>(t: &FeaturePyramid<T>, s: &FeaturePyramid<T>, spec: &LossSpec) -> Result<T> {
    spec.validate()?;
    let mut total = T::zero();
    for term in &spec.terms {
        total = total + T::of(term.weight) * pyramid_loss(term.metric, term.dimension, t, s)?;
    }
    Ok(total)
}

/// Records one metric on one level as a scalar graph node.
pub fn level_loss_graph<T: Real>(
    g: &mut Graph<T>,
    metric: Metric,
    dimension: Dimension,
    t: Var,
    s: Var,
) -> Result<Var> {
    let (value, grad) = level_loss(metric, dimension, g.value(t), g.value(s))?;
    Ok(g.scalar_op(value, vec![(s, grad)]))
}

/// Records the full objective over paired level nodes.
pub fn total_loss_graph<T: Real>(g: &mut Graph<T>, t: &[Var], s: &[Var], spec: &LossSpec) -> Result<Var> {
    spec.validate()?;
    if t.len() != s.len() || t.is_empty() {
        return Err(dim_err!("pyramids have {} and {} levels", t.len(), s.len()));
    }
    let mut acc: Option<Var> = None;
    for term in &spec.terms {
        for (&tv, &sv) in t.iter().zip(s) {
            let l = level_loss_graph(g, term.metric, term.dimension, tv, sv)?;
            let l = g.scale(l, T::of(term.weight));
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
    }
    Ok(acc.expect("non-empty spec"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Level;

    fn single(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeaturePyramid<f64> {
        FeaturePyramid::new(vec![Level {
            k: 2,
            features: Tensor::new(&[c, h, w], data).unwrap(),
        }])
    }

    #[test]
    fn orthogonal_vectors() {
        let t = single(2, 1, 1, vec![1.0, 0.0]);
        let s = single(2, 1, 1, vec![0.0, 1.0]);
        assert!((cd_channel(&t, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((mse_stfpm(&t, &s).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kld_scalar_example() {
        let t = single(2, 1, 1, vec![0.0, 0.0]);
        let s = single(2, 1, 1, vec![0.0, 3f64.ln()]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let v = kld_channel(&t, &s).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn empty_spec_rejected() {
        let t = single(2, 1, 1, vec![1.0, 0.0]);
        let spec = LossSpec { terms: vec![] };
        assert!(matches!(total_loss(&t, &t, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn zero_vectors_are_guarded() {
        let t = single(2, 1, 2, vec![0.0; 4]);
        let s = single(2, 1, 2, vec![1.0, 0.0, 0.0, 0.0]);
        for v in [
            cd_channel(&t, &s).unwrap(),
            cd_spatial(&t, &s).unwrap(),
            mse_stfpm(&t, &s).unwrap(),
        ] {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn term_parsing() {
        let t: LossTerm = "kld:spatial:0.5".parse().unwrap();
        assert_eq!(t, LossSpec::headline().terms[1]);
        assert_eq!(t.to_string(), "kld:spatial:0.5");
        assert!("cd:channel".parse::<LossTerm>().is_err());
        assert!("cd:depth:1".parse::<LossTerm>().is_err());
        assert!("cd:channel:-1".parse::<LossTerm>().is_err());
        assert!("cd:channel:nan".parse::<LossTerm>().is_err());
    }

    #[test]
    fn shape_mismatch() {
        let t = single(2, 1, 1, vec![1.0, 0.0]);
        let s = single(1, 1, 2, vec![1.0, 0.0]);
        assert!(matches!(cd_channel(&t, &s), Err(Error::Dimension(_))));
    }
}
