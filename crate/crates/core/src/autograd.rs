//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one step together
//! with what its adjoint needs. It is rebuilt from scratch each step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvg(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelAvg(Var),
    Softmax {
        x: Var,
        axes: Vec<usize>,
    },
    Upsample(Var),
    Concat {
        a: Var,
        b: Var,
    },
    MulBroadcast {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    /// Scalar-valued op whose local gradients were produced alongside its
    /// value.
    Scalar {
        inputs: Vec<(Var, Tensor<T>)>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics gathered by a training-mode batch norm, for updating
/// running averages outside the graph.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An unnamed leaf that receives a gradient (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named parameter leaf. Untrainable parameters are recorded as
    /// constants and get no gradient entry.
    pub fn param(&mut self, name: &str, t: Tensor<T>, trainable: bool) -> Var {
        let v = self.push(t, Op::Leaf, trainable);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), window, stride, padding)?;
        let ng = self.needs_grad(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, ng))
    }

    pub fn avgpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let y = ops::avgpool2d(self.value(x), window, stride)?;
        let ng = self.needs_grad(x);
        Ok(self.push(y, Op::AvgPool { x, window, stride }, ng))
    }

    pub fn global_maxpool(&mut self, x: Var) -> Var {
        let (y, argmax) = ops::global_maxpool(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, Op::GlobalMax { x, argmax }, ng)
    }

    pub fn global_avgpool(&mut self, x: Var) -> Var {
        let y = ops::global_avgpool(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, Op::GlobalAvg(x), ng)
    }

    pub fn channel_maxpool(&mut self, x: Var) -> Var {
        let (y, argmax) = ops::channel_maxpool(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, Op::ChannelMax { x, argmax }, ng)
    }

    pub fn channel_avgpool(&mut self, x: Var) -> Var {
        let y = ops::channel_avgpool(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, Op::ChannelAvg(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = ops::softmax(self.value(x), axes)?;
        let ng = self.needs_grad(x);
        Ok(self.push(
            y,
            Op::Softmax {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    pub fn bilinear_upsample(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = ops::bilinear_upsample(self.value(x), h, w)?;
        let ng = self.needs_grad(x);
        Ok(self.push(y, Op::Upsample(x), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Concat { a, b }, ng))
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul_broadcast(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::MulBroadcast { a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).scale(k);
        let ng = self.needs_grad(x);
        self.push(y, Op::Scale(x, k), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.needs_grad(x);
        Ok(self.push(y, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let ng = self.needs_grad(x);
        self.push(y, Op::Sum(x), ng)
    }

    /// Batch normalization over `(N, H, W)` per channel. With
    /// `running = None` batch statistics are used and returned; otherwise
    /// the supplied `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims4();
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let xd = xt.data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Dimension(format!(
                        "batch norm running stats have {} entries, expected {}",
                        m.len(),
                        c
                    )));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        for p in 0..hw {
                            acc += xd[(b * c + ch) * hw + p].f64();
                        }
                    }
                    let m = acc / count;
                    let mut sq = 0.0;
                    for b in 0..n {
                        for p in 0..hw {
                            let d = xd[(b * c + ch) * hw + p].f64() - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = T::of(m);
                    var[ch] = T::of(sq / count);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| {
                        if count > 1.0 {
                            T::of(v.f64() * count / (count - 1.0))
                        } else {
                            v
                        }
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Tensor::zeros(xt.shape());
        let mut y = Tensor::zeros(xt.shape());
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (b * c + ch) * hw + p;
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Records a scalar computed outside the graph together with its
    /// gradient with respect to each listed input.
    pub fn scalar_op(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Var {
        let ng = inputs.iter().any(|(v, _)| self.needs_grad(*v));
        self.push(Tensor::scalar(value), Op::Scalar { inputs }, ng)
    }

    /// Reverse sweep from a scalar node. Every trainable parameter
    /// registered in this graph gets an entry; unreachable ones are zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let send = |v: Var, contrib: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let need_input = self.nodes[x.0].needs_grad;
                    let cg = ops::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *padding, need_input);
                    if let Some(gx) = cg.input {
                        send(*x, gx, &mut grads);
                    }
                    send(*w, cg.weight, &mut grads);
                    if let Some(b) = b {
                        send(*b, cg.bias, &mut grads);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = g.zip_map(xv, |g, x| if x > T::zero() { g } else { T::zero() })?;
                    send(*x, gx, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |g, y| g * y * (T::one() - y))?;
                    send(*x, gx, &mut grads);
                }
                Op::MaxPool { x, argmax }
                | Op::GlobalMax { x, argmax }
                | Op::ChannelMax { x, argmax } => {
                    let gx = ops::scatter_argmax(self.value(*x).shape(), argmax, &g);
                    send(*x, gx, &mut grads);
                }
                Op::AvgPool { x, window, stride } => {
                    let gx = ops::avgpool2d_backward(self.value(*x).shape(), &g, *window, *stride);
                    send(*x, gx, &mut grads);
                }
                Op::GlobalAvg(x) => {
                    let gx = ops::global_avgpool_backward(self.value(*x).shape(), &g);
                    send(*x, gx, &mut grads);
                }
                Op::ChannelAvg(x) => {
                    let gx = ops::channel_avgpool_backward(self.value(*x).shape(), &g);
                    send(*x, gx, &mut grads);
                }
                Op::Softmax { x, axes } => {
                    let gx = ops::softmax_backward(&node.value, &g, axes);
                    send(*x, gx, &mut grads);
                }
                Op::Upsample(x) => {
                    let gx = ops::bilinear_upsample_backward(self.value(*x).shape(), &g);
                    send(*x, gx, &mut grads);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).dims4()[1];
                    let (ga, gb) = ops::split_channels(&g, ca);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::MulBroadcast { a, b } => {
                    let (ga, gb) = ops::mul_broadcast_backward(self.value(*a), self.value(*b), &g);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Scale(x, k) => {
                    send(*x, g.scale(*k), &mut grads);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.value(*x).shape())?;
                    send(*x, gx, &mut grads);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.item());
                    send(*x, gx, &mut grads);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (gx, ggamma, gbeta) =
                        batch_norm_backward(&g, xhat, inv_std, self.value(*gamma).data(), *batch_stats);
                    send(*x, gx, &mut grads);
                    send(*gamma, ggamma, &mut grads);
                    send(*beta, gbeta, &mut grads);
                }
                Op::Scalar { inputs } => {
                    let up = g.item();
                    for (v, local) in inputs {
                        send(*v, local.scale(up), &mut grads);
                    }
                }
            }
        }

        let by_name = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            by_var: grads,
            by_name,
        })
    }
}

fn batch_norm_backward<T: Real>(
    g: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.dims4();
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let gd = g.data();
    let xd = xhat.data();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                let i = (b * c + ch) * hw + p;
                gbeta[ch] = gbeta[ch] + gd[i];
                ggamma[ch] = ggamma[ch] + gd[i] * xd[i];
            }
        }
    }
    let mut gx = Tensor::zeros(g.shape());
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                let i = (b * c + ch) * hw + p;
                let v = if batch_stats {
                    gamma[ch] * inv_std[ch] / m * (m * gd[i] - gbeta[ch] - xd[i] * ggamma[ch])
                } else {
                    gamma[ch] * inv_std[ch] * gd[i]
                };
                gx.data_mut()[i] = v;
            }
        }
    }
    (
        gx,
        Tensor::new(&[c], ggamma).expect("shape"),
        Tensor::new(&[c], gbeta).expect("shape"),
    )
}

pub struct Gradients<T: Real> {
    by_var: Vec<Option<Tensor<T>>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_name
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.mul_broadcast(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient_and_unreachable_params_get_zero() {
        let mut g = Graph::<f64>::new();
        let teacher = g.param("teacher.w", Tensor::full(&[2], 1.5), false);
        let w = g.param("student.w", Tensor::full(&[2], 2.0), true);
        let unused = g.param("student.unused", Tensor::full(&[3], 2.0), true);
        let _ = unused;
        let p = g.mul_broadcast(w, teacher).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param("teacher.w").is_none());
        assert!(grads.get(teacher).is_none());
        assert_eq!(grads.param("student.w").unwrap().data(), &[1.5, 1.5]);
        assert_eq!(grads.param("student.unused").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }
}
