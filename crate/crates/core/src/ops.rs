//! Forward kernels and their adjoints over `N×C×H×W` tensors.
//!
//! Rank-3 inputs are read as a batch of one and results keep the input
//! rank. Every kernel is a pure function. Batch items are processed in
//! parallel, but any reduction across the batch happens sequentially in
//! index order so results never depend on the thread count.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

fn shaped<T: Real>(rank: usize, dims: [usize; 4], data: Vec<T>) -> Tensor<T> {
    let shape: Vec<usize> = if rank == 4 {
        dims.to_vec()
    } else {
        dims[1..].to_vec()
    };
    Tensor::new(&shape, data).expect("kernel produced inconsistent shape")
}

fn out_rank<T: Real>(t: &Tensor<T>) -> usize {
    if t.rank() == 4 {
        4
    } else {
        3
    }
}

/// Runs `f` for every batch item, in parallel when the batch is larger
/// than one, writing into disjoint `chunk`-sized slices of `out`.
fn per_item<T: Real>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if out.len() > chunk {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(n, o)| f(n, o));
    } else {
        f(0, out);
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("stride must be >= 1"));
    }
    if kernel > input + 2 * padding {
        return Err(dim_err!(
            "kernel {} larger than padded input {}",
            kernel,
            input + 2 * padding
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Range of output positions whose tap `k` lands inside `[0, input)`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, input: usize, out: usize) -> (usize, usize) {
    // ix = o*stride + k - padding must satisfy 0 <= ix < input
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi_excl = if input + padding > k {
        ((input + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    let lo = lo.min(out);
    (lo, hi_excl.max(lo))
}

/// Geometry of one convolution.
#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// True when the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Column matrix `(cin·kh·kw) × (oh·ow)` of one `cin×h×w` item; padded
/// taps are zero.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    cols.fill(T::zero());
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.stride, g.padding, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.stride, g.padding, g.w, g.ow);
                if ox0 >= ox1 {
                    continue;
                }
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        orow[ox] = xrow[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.stride, g.padding, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.stride, g.padding, g.w, g.ow);
                if ox0 >= ox1 {
                    continue;
                }
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let xrow = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let grow = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.padding;
                        xrow[ix] = xrow[ix] + grow[ox];
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<(usize, usize, ConvGeom)> {
    let [n, cin, h, w] = input.dims4();
    if weight.rank() != 4 {
        return Err(dim_err!("conv weight must be rank 4, got {:?}", weight.shape()));
    }
    let [cout, wcin, kh, kw] = weight.dims4();
    if wcin != cin {
        return Err(dim_err!(
            "conv input has {} channels but weight expects {}",
            cin,
            wcin
        ));
    }
    let oh = conv_out_size(h, kh, stride, padding)?;
    let ow = conv_out_size(w, kw, stride, padding)?;
    Ok((
        n,
        cout,
        ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        },
    ))
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = conv_geom(input, weight, stride, padding)?;
    if let Some(b) = bias {
        b.expect_shape(&[cout])?;
    }
    let (k, p) = (g.rows(), g.cols());
    let x = input.data();
    let wt = weight.data();
    let item = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    per_item(&mut out, cout * p, |b, o| {
        let xb = &x[b * item..(b + 1) * item];
        if let Some(bias) = bias {
            for (plane, &bv) in o.chunks_mut(p).zip(bias.data()) {
                plane.fill(bv);
            }
        }
        if g.is_pointwise() {
            T::gemm(cout, k, p, wt, false, xb, false, T::one(), o);
        } else {
            let mut cols = vec![T::zero(); k * p];
            im2col(xb, &g, &mut cols);
            T::gemm(cout, k, p, wt, false, &cols, false, T::one(), o);
        }
    });
    Ok(shaped(out_rank(input), [n, cout, g.oh, g.ow], out))
}

pub struct ConvGrads<T: Real> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a convolution. Weight and bias gradients are summed over
/// the batch in item order.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> ConvGrads<T> {
    let (n, cout, g) = conv_geom(input, weight, stride, padding).expect("validated in forward");
    let (k, p) = (g.rows(), g.cols());
    let item = g.cin * g.h * g.w;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();

    let partial: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * item..(b + 1) * item];
            let gb = &go[b * cout * p..(b + 1) * cout * p];
            let cols_owned;
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                let mut c = vec![T::zero(); k * p];
                im2col(xb, &g, &mut c);
                cols_owned = c;
                &cols_owned
            };
            let mut gw = vec![T::zero(); cout * k];
            T::gemm(cout, p, k, gb, false, cols, true, T::zero(), &mut gw);
            let gbias: Vec<T> = gb.chunks(p).map(|plane| plane.iter().copied().sum()).collect();
            let mut gx = Vec::new();
            if need_input {
                let mut dcols = vec![T::zero(); k * p];
                T::gemm(k, cout, p, wt, true, gb, false, T::zero(), &mut dcols);
                if g.is_pointwise() {
                    gx = dcols;
                } else {
                    gx = vec![T::zero(); item];
                    col2im(&dcols, &g, &mut gx);
                }
            }
            (gw, gbias, gx)
        })
        .collect();
    let mut gw = vec![T::zero(); cout * k];
    let mut gbias = vec![T::zero(); cout];
    let mut gx = Vec::with_capacity(if need_input { n * item } else { 0 });
    for (pw, pb, px) in partial {
        for (a, b) in gw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in gbias.iter_mut().zip(pb) {
            *a = *a + b;
        }
        gx.extend(px);
    }
    ConvGrads {
        input: need_input.then(|| shaped(out_rank(input), [n, g.cin, g.h, g.w], gx)),
        weight: Tensor::new(weight.shape(), gw).expect("weight grad shape"),
        bias: Tensor::new(&[cout], gbias).expect("bias grad shape"),
    }
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn sigmoid<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Spatial max pooling with implicit `-inf` padding. Returns the pooled
/// tensor and, per output element, the flat input index that won.
pub fn maxpool2d<T: Real>(
    t: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = t.dims4();
    if window == 0 || padding >= window {
        return Err(dim_err!("invalid pool window {} / padding {}", window, padding));
    }
    if window > h + 2 * padding || window > w + 2 * padding {
        return Err(dim_err!(
            "pool window {} larger than input {}x{}",
            window,
            h,
            w
        ));
    }
    let oh = conv_out_size(h, window, stride, padding)?;
    let ow = conv_out_size(w, window, stride, padding)?;
    let x = t.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..window {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..window {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((shaped(out_rank(t), [n, c, oh, ow], out), arg))
}

/// Scatters `grad_out` back through a recorded argmax.
pub fn scatter_argmax<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + v;
    }
    g
}

pub fn avgpool2d<T: Real>(t: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims4();
    if window == 0 || window > h || window > w {
        return Err(dim_err!("pool window {} larger than input {}x{}", window, h, w));
    }
    let oh = conv_out_size(h, window, stride, 0)?;
    let ow = conv_out_size(w, window, stride, 0)?;
    let x = t.data();
    let inv = T::one() / T::of((window * window) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..window {
                    for kx in 0..window {
                        acc = acc + x[base + (oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Ok(shaped(out_rank(t), [n, c, oh, ow], out))
}

pub fn avgpool2d_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let [n, c, h, w] = g.dims4();
    let [_, _, oh, ow] = grad_out.dims4();
    let inv = T::one() / T::of((window * window) as f64);
    let go = grad_out.data();
    let gd = g.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = go[(plane * oh + oy) * ow + ox] * inv;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        gd[i] = gd[i] + v;
                    }
                }
            }
        }
    }
    g
}

/// Per-channel maximum over all spatial positions: `C×H×W -> C×1×1`.
pub fn global_maxpool<T: Real>(t: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = t.dims4();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for plane in t.data().chunks(hw).enumerate() {
        let (p, vals) = plane;
        let mut bi = 0;
        for (i, &v) in vals.iter().enumerate() {
            if v > vals[bi] {
                bi = i;
            }
        }
        out.push(vals[bi]);
        arg.push(p * hw + bi);
    }
    (shaped(out_rank(t), [n, c, 1, 1], out), arg)
}

pub fn global_avgpool<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.dims4();
    let inv = T::one() / T::of((h * w) as f64);
    let out = t
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    shaped(out_rank(t), [n, c, 1, 1], out)
}

/// Broadcasts a `C×1×1` gradient uniformly over the spatial plane.
pub fn global_avgpool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let [_, _, h, w] = g.dims4();
    let inv = T::one() / T::of((h * w) as f64);
    for (plane, &v) in g.data_mut().chunks_mut(h * w).zip(grad_out.data()) {
        plane.fill(v * inv);
    }
    g
}

/// Per-pixel maximum over channels: `C×H×W -> 1×H×W`.
pub fn channel_maxpool<T: Real>(t: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = t.dims4();
    let hw = h * w;
    let x = t.data();
    let mut out = Vec::with_capacity(n * hw);
    let mut arg = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut bi = b * c * hw + p;
            for ch in 1..c {
                let i = (b * c + ch) * hw + p;
                if x[i] > x[bi] {
                    bi = i;
                }
            }
            out.push(x[bi]);
            arg.push(bi);
        }
    }
    (shaped(out_rank(t), [n, 1, h, w], out), arg)
}

pub fn channel_avgpool<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.dims4();
    let hw = h * w;
    let x = t.data();
    let inv = T::one() / T::of(c as f64);
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut acc = T::zero();
            for ch in 0..c {
                acc = acc + x[(b * c + ch) * hw + p];
            }
            out.push(acc * inv);
        }
    }
    shaped(out_rank(t), [n, 1, h, w], out)
}

pub fn channel_avgpool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let [n, c, h, w] = g.dims4();
    let hw = h * w;
    let inv = T::one() / T::of(c as f64);
    let go = grad_out.data();
    let gd = g.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                gd[(b * c + ch) * hw + p] = go[b * hw + p] * inv;
            }
        }
    }
    g
}

/// Groups of flat indices that share every coordinate outside `axes`.
fn softmax_groups(shape: &[usize], axes: &[usize]) -> Result<Vec<Vec<usize>>> {
    if axes.is_empty() {
        return Err(dim_err!("softmax needs at least one axis"));
    }
    if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(dim_err!("softmax axis {} out of range for rank {}", a, shape.len()));
    }
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let total: usize = shape.iter().product();
    let kept: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for flat in 0..total {
        let key = kept
            .iter()
            .map(|&a| (flat / strides[a]) % shape[a] * strides[a])
            .sum::<usize>();
        groups.entry(key).or_default().push(flat);
    }
    Ok(groups.into_values().collect())
}

/// Max-subtracted softmax over the given axes.
pub fn softmax<T: Real>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let mut out = t.clone();
    let x = t.data();
    for group in softmax_groups(t.shape(), axes)? {
        let m = group.iter().map(|&i| x[i]).fold(T::neg_infinity(), T::max);
        let z: T = group.iter().map(|&i| (x[i] - m).exp()).sum();
        for &i in &group {
            out.data_mut()[i] = (x[i] - m).exp() / z;
        }
    }
    Ok(out)
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let mut g = Tensor::zeros(y.shape());
    let yd = y.data();
    let go = grad_out.data();
    for group in softmax_groups(y.shape(), axes).expect("validated in forward") {
        let dot: T = group.iter().map(|&i| yd[i] * go[i]).sum();
        for &i in &group {
            g.data_mut()[i] = yd[i] * (go[i] - dot);
        }
    }
    g
}

/// Source taps for one output coordinate under the half-pixel
/// (align-corners = false) convention, clamped to the input edge.
#[inline]
pub fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

pub fn bilinear_upsample<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = t.dims4();
    if out_h < h || out_w < w {
        return Err(dim_err!(
            "upsample target {}x{} smaller than input {}x{}",
            out_h,
            out_w,
            h,
            w
        ));
    }
    resize_bilinear(t, out_h, out_w)
}

/// Bilinear resampling to any size (used for image preprocessing, where
/// downscaling is allowed).
pub fn resize_bilinear<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims4();
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!("resize target must be non-empty"));
    }
    let ys: Vec<_> = (0..out_h).map(|d| bilinear_taps(d, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|d| bilinear_taps(d, w, out_w)).collect();
    let x = t.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &xs {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Ok(shaped(out_rank(t), [n, c, out_h, out_w], out))
}

pub fn bilinear_upsample_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let [_, _, h, w] = g.dims4();
    let [_, _, oh, ow] = grad_out.dims4();
    let ys: Vec<_> = (0..oh).map(|d| bilinear_taps(d, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|d| bilinear_taps(d, w, ow)).collect();
    for (plane, gplane) in g.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let v = gplane[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + top * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + bot * fx;
            }
        }
    }
    g
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4();
    let [nb, cb, hb, wb] = b.dims4();
    if (n, h, w) != (nb, hb, wb) {
        return Err(dim_err!("cannot concat {:?} with {:?}", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * h * w..(i + 1) * ca * h * w]);
        out.extend_from_slice(&b.data()[i * cb * h * w..(i + 1) * cb * h * w]);
    }
    Ok(shaped(out_rank(a), [n, ca + cb, h, w], out))
}

pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.dims4();
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * h * w);
    let mut b = Vec::with_capacity(n * cb * h * w);
    for i in 0..n {
        let item = &g.data()[i * c * h * w..(i + 1) * c * h * w];
        a.extend_from_slice(&item[..ca * h * w]);
        b.extend_from_slice(&item[ca * h * w..]);
    }
    let r = out_rank(g);
    (shaped(r, [n, ca, h, w], a), shaped(r, [n, cb, h, w], b))
}

fn broadcast_index(dims_a: [usize; 4], dims_b: [usize; 4]) -> Result<impl Fn(usize) -> usize> {
    for i in 0..4 {
        if dims_b[i] != 1 && dims_b[i] != dims_a[i] {
            return Err(dim_err!("cannot broadcast {:?} onto {:?}", dims_b, dims_a));
        }
    }
    let [_, c, h, w] = dims_a;
    let [_, bc, bh, bw] = dims_b;
    Ok(move |flat: usize| {
        let x = flat % w;
        let y = (flat / w) % h;
        let ch = (flat / (w * h)) % c;
        let n = flat / (w * h * c);
        let bn = if dims_b[0] == 1 { 0 } else { n };
        let bch = if bc == 1 { 0 } else { ch };
        let by = if bh == 1 { 0 } else { y };
        let bx = if bw == 1 { 0 } else { x };
        ((bn * bc + bch) * bh + by) * bw + bx
    })
}

/// Elementwise `a * b` where each dimension of `b` is 1 or equal to `a`'s.
pub fn mul_broadcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let idx = broadcast_index(a.dims4(), b.dims4())?;
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * bd[idx(i)])
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn mul_broadcast_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let idx = broadcast_index(a.dims4(), b.dims4()).expect("validated in forward");
    let bd = b.data();
    let go = grad_out.data();
    let ga = Tensor::new(
        a.shape(),
        go.iter().enumerate().map(|(i, &g)| g * bd[idx(i)]).collect(),
    )
    .expect("same shape");
    let mut gb = Tensor::zeros(b.shape());
    {
        let gbd = gb.data_mut();
        for (i, (&g, &av)) in go.iter().zip(a.data()).enumerate() {
            let j = idx(i);
            gbd[j] = gbd[j] + g * av;
        }
    }
    (ga, gb)
}
