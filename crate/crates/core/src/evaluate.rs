//! Per-class evaluation of a detector on a dataset's test split.

use crate::data::{preprocess, Dataset, Sample};
use crate::error::{Error, Result};
use crate::inference::{Detector, Inference};
use crate::metrics::{auroc, pro, ClassMetrics, EvalReport, Mask};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub input_size: (usize, usize),
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub fpr_limit: f64,
}

/// Nearest-neighbor resampling of a mask to `h×w`.
pub fn resize_mask(m: &Mask, h: usize, w: usize) -> Mask {
    if (m.height, m.width) == (h, w) {
        return m.clone();
    }
    let data = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let sy = ((y as f64 + 0.5) * m.height as f64 / h as f64) as usize;
            let sx = ((x as f64 + 0.5) * m.width as f64 / w as f64) as usize;
            m.data[sy.min(m.height - 1) * m.width + sx.min(m.width - 1)]
        })
        .collect();
    Mask {
        height: h,
        width: w,
        data,
    }
}

/// Runs one test sample: returns its inference and ground truth at the
/// network resolution.
pub fn run_sample(det: &Detector<f32>, s: &Sample, opts: &EvalOptions) -> Result<(Inference<f32>, Mask)> {
    let raw = s.load_image()?;
    let (h, w) = opts.input_size;
    let x = preprocess(&raw, opts.input_size, opts.mean, opts.std)?;
    let out = det.infer(&x)?;
    let mask = s.load_mask(raw.shape()[1], raw.shape()[2])?;
    Ok((out, resize_mask(&mask, h, w)))
}

/// Image AUROC, pixel AUROC, PRO and mean latency for every class with
/// test images. Metrics undefined for a class (for example a class
/// without anomalies) are reported as `None`.
pub fn evaluate(det: &Detector<f32>, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let mut classes = Vec::new();
    for class in data.classes.iter().filter(|c| !c.test.is_empty()) {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut maps: Vec<Vec<f64>> = Vec::new();
        let mut masks = Vec::new();
        let mut seconds = 0.0;
        for s in &class.test {
            let (out, mask) = run_sample(det, s, opts)?;
            seconds += out.elapsed.as_secs_f64();
            scores.push(out.score as f64);
            labels.push(s.anomalous);
            maps.push(out.map.scores.data().iter().map(|&v| v as f64).collect());
            masks.push(mask);
        }
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let pixel_scores: Vec<f64> = maps.iter().flatten().copied().collect();
        let pixel_labels: Vec<bool> = masks.iter().flat_map(|m| m.data.iter().copied()).collect();
        let map_refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        classes.push(ClassMetrics {
            class: class.name.clone(),
            auroc_image: defined(auroc(&scores, &labels))?,
            auroc_pixel: defined(auroc(&pixel_scores, &pixel_labels))?,
            pro: defined(pro(&map_refs, &masks, opts.fpr_limit))?,
            latency: seconds / class.test.len() as f64,
            images: class.test.len(),
        });
    }
    if classes.is_empty() {
        return Err(Error::Dataset("dataset has no test images".into()));
    }
    Ok(EvalReport { classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_resize_nearest() {
        let m = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let r = resize_mask(&m, 4, 4);
        assert_eq!(r.count(), 8);
        assert!(r.data[0] && r.data[5] && r.data[15] && !r.data[3]);
        assert_eq!(resize_mask(&m, 2, 2), m);
    }
}
