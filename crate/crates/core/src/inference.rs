//! Anomaly maps from teacher/student disagreement.
//!
//! Each level contributes a per-pixel cosine distance map; the maps are
//! bilinearly upsampled to the input resolution and summed. Only backbone
//! weights participate: a [`Detector`] holds the two pyramid networks and
//! nothing else.

use std::time::{Duration, Instant};

use crate::backbone::{FeaturePyramid, PyramidNet};
use crate::error::{dim_err, Result};
use crate::losses::NORM_EPS;
use crate::ops;
use crate::tensor::{Real, Tensor};

/// `H×W` field of summed cosine distances. Values lie in `[0, 2K]` for a
/// `K`-level pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T: Real = f32> {
    pub scores: Tensor<T>,
}

impl<T: Real> AnomalyMap<T> {
    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// Per-pixel `1 - cos(T[:, y, x], S[:, y, x])` of two `C×h×w` maps, as `h×w`.
pub fn level_loss_map<T: Real>(t: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    if t.shape() != s.shape() || t.rank() != 3 {
        return Err(dim_err!(
            "level maps must be matching C×h×w tensors, got {:?} and {:?}",
            t.shape(),
            s.shape()
        ));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let eps = T::of(NORM_EPS);
    let (td, sd) = (t.data(), s.data());
    let (mut dot, mut tt, mut ss) = (vec![T::zero(); hw], vec![T::zero(); hw], vec![T::zero(); hw]);
    for ch in 0..c {
        let tp = &td[ch * hw..(ch + 1) * hw];
        let sp = &sd[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            dot[p] = dot[p] + tp[p] * sp[p];
            tt[p] = tt[p] + tp[p] * tp[p];
            ss[p] = ss[p] + sp[p] * sp[p];
        }
    }
    Ok(Tensor::from_fn(&[h, w], |p| {
        let cos = dot[p] / (tt[p].sqrt().max(eps) * ss[p].sqrt().max(eps));
        (T::one() - cos).max(T::zero())
    }))
}

/// Sum over levels of each level map upsampled to `h×w`.
pub fn anomaly_map<T: Real>(
    t: &FeaturePyramid<T>,
    s: &FeaturePyramid<T>,
    h: usize,
    w: usize,
) -> Result<AnomalyMap<T>> {
    t.check_matches(s)?;
    if t.is_empty() {
        return Err(dim_err!("anomaly map needs at least one pyramid level"));
    }
    let mut total = Tensor::zeros(&[h, w]);
    for (a, b) in t.tensors().zip(s.tensors()) {
        let m = level_loss_map(a, b)?;
        let (lh, lw) = (m.shape()[0], m.shape()[1]);
        let up = ops::bilinear_upsample(&m.reshape(&[1, lh, lw])?, h, w)?;
        total.add_assign(&up.reshape(&[h, w])?);
    }
    Ok(AnomalyMap { scores: total })
}

/// Image-level score: the largest pixel of the map.
pub fn image_score<T: Real>(m: &AnomalyMap<T>) -> T {
    m.scores.max_value()
}

#[derive(Clone, Debug)]
pub struct Inference<T: Real = f32> {
    pub map: AnomalyMap<T>,
    pub score: T,
    pub elapsed: Duration,
}

/// Teacher and student backbones; the only state inference reads.
#[derive(Clone, Debug)]
pub struct Detector<T: Real = f32> {
    pub teacher: PyramidNet<T>,
    pub student: PyramidNet<T>,
}

impl<T: Real> Detector<T> {
    pub fn new(teacher: PyramidNet<T>, student: PyramidNet<T>) -> Result<Self> {
        if teacher.config != student.config {
            return Err(crate::Error::Config(
                "teacher and student backbone configs differ".into(),
            ));
        }
        Ok(Self { teacher, student })
    }

    /// Map and score of one preprocessed `3×H×W` image at the network
    /// input resolution.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Inference<T>> {
        if image.rank() != 3 {
            return Err(dim_err!("expected a 3×H×W image, got {:?}", image.shape()));
        }
        let start = Instant::now();
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let tp = self.teacher.forward_pyramid(image)?;
        let sp = self.student.forward_pyramid(image)?;
        let map = anomaly_map(&tp, &sp, h, w)?;
        let score = image_score(&map);
        Ok(Inference {
            map,
            score,
            elapsed: start.elapsed(),
        })
    }

    /// Maps of an `N×3×H×W` batch, one per item in order.
    pub fn infer_batch(&self, images: &Tensor<T>) -> Result<Vec<AnomalyMap<T>>> {
        if images.rank() != 4 {
            return Err(dim_err!("expected an N×3×H×W batch, got {:?}", images.shape()));
        }
        let [n, _, h, w] = images.dims4();
        let tp = self.teacher.forward_pyramid(images)?;
        let sp = self.student.forward_pyramid(images)?;
        (0..n)
            .map(|i| anomaly_map(&tp.item(i), &sp.item(i), h, w))
            .collect()
    }
}
