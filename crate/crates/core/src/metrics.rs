//! Ranking and localization metrics: AUROC, connected components, PRO and
//! per-class latency summaries, plus the report tables built from them.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Area under the ROC curve via the Mann–Whitney statistic with midranks
/// for tied scores.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(dim_err!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both normal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the group i..=j shares the average rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Binary `H×W` ground-truth mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!(
                "mask of {}x{} needs {} pixels, got {}",
                height,
                width,
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// 8-connected regions of a mask. `regions[i]` holds row-major pixel
/// indices; regions are ordered by their first pixel in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    pub regions: Vec<Vec<usize>>,
}

pub fn connected_components(mask: &Mask) -> RegionSet {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut region = Vec::new();
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    RegionSet { regions }
}

/// One operating point: global false-positive rate on normal pixels and
/// mean per-region overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub overlap: f64,
}

/// Exact PRO curve over every distinct pooled score, thresholds
/// descending. A pixel is predicted anomalous when `score >= threshold`.
pub fn pro_curve(maps: &[&[f64]], masks: &[Mask]) -> Result<Vec<ProPoint>> {
    if maps.len() != masks.len() {
        return Err(dim_err!("{} maps but {} masks", maps.len(), masks.len()));
    }
    // region id per pixel (usize::MAX for normal pixels)
    let mut region_size = Vec::new();
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut normal_total = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != mask.data.len() {
            return Err(dim_err!(
                "map of {} pixels paired with a {}x{} mask",
                map.len(),
                mask.height,
                mask.width
            ));
        }
        let mut owner = vec![usize::MAX; map.len()];
        for region in connected_components(mask).regions {
            let id = region_size.len();
            region_size.push(region.len());
            for p in region {
                owner[p] = id;
            }
        }
        normal_total += owner.iter().filter(|&&o| o == usize::MAX).count();
        pixels.extend(map.iter().zip(owner).map(|(&s, o)| (s, o)));
    }
    if region_size.is_empty() {
        return Err(Error::UndefinedMetric(
            "PRO needs at least one anomalous region".into(),
        ));
    }
    if pixels.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::UndefinedMetric("anomaly maps contain non-finite scores".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let regions = region_size.len() as f64;
    let mut overlap_sum = 0.0;
    let mut false_pos = 0usize;
    let mut curve = Vec::new();
    let mut i = 0;
    while i < pixels.len() {
        let threshold = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == threshold {
            match pixels[i].1 {
                usize::MAX => false_pos += 1,
                r => overlap_sum += 1.0 / region_size[r] as f64,
            }
            i += 1;
        }
        let fpr = if normal_total == 0 {
            0.0
        } else {
            false_pos as f64 / normal_total as f64
        };
        curve.push(ProPoint {
            threshold,
            fpr,
            overlap: overlap_sum / regions,
        });
    }
    Ok(curve)
}

/// Normalized area under a PRO curve on `[0, fpr_limit]`.
///
/// The trapezoid rule runs over the curve points; the value at the limit
/// is linearly interpolated, and the curve is extended flat to the left of
/// its first point.
pub fn integrate_pro(curve: &[ProPoint], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr limit {fpr_limit} outside (0, 1]")));
    }
    let Some(first) = curve.first() else {
        return Err(Error::UndefinedMetric("empty PRO curve".into()));
    };
    let mut area = first.fpr.min(fpr_limit) * first.overlap;
    for pair in curve.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.fpr >= fpr_limit {
            break;
        }
        if b.fpr <= fpr_limit {
            area += (b.fpr - a.fpr) * (a.overlap + b.overlap) / 2.0;
        } else {
            let frac = (fpr_limit - a.fpr) / (b.fpr - a.fpr);
            let at_limit = a.overlap + frac * (b.overlap - a.overlap);
            area += (fpr_limit - a.fpr) * (a.overlap + at_limit) / 2.0;
        }
    }
    let last = curve[curve.len() - 1];
    if last.fpr < fpr_limit {
        area += (fpr_limit - last.fpr) * last.overlap;
    }
    Ok(area / fpr_limit)
}

pub fn pro(maps: &[&[f64]], masks: &[Mask], fpr_limit: f64) -> Result<f64> {
    integrate_pro(&pro_curve(maps, masks)?, fpr_limit)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassLatency {
    pub class: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub classes: Vec<ClassLatency>,
    /// Class means weighted by class image counts.
    pub weighted_mean: f64,
}

pub fn latency_report(per_class: &[(String, Vec<f64>)]) -> Result<LatencyReport> {
    let mut classes = Vec::with_capacity(per_class.len());
    for (class, times) in per_class {
        if times.is_empty() {
            return Err(Error::UndefinedMetric(format!("no timed images for class {class}")));
        }
        classes.push(ClassLatency {
            class: class.clone(),
            mean: times.iter().sum::<f64>() / times.len() as f64,
            count: times.len(),
        });
    }
    let weighted_mean = weighted_mean_latency(
        &classes.iter().map(|c| (c.mean, c.count)).collect::<Vec<_>>(),
    )?;
    Ok(LatencyReport { classes, weighted_mean })
}

/// `Σ mean_i · count_i / Σ count_i`.
pub fn weighted_mean_latency(means_and_counts: &[(f64, usize)]) -> Result<f64> {
    let total: usize = means_and_counts.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("no timed images".into()));
    }
    let weighted: f64 = means_and_counts.iter().map(|&(m, n)| m * n as f64).sum();
    Ok(weighted / total as f64)
}

/// Metrics of one class; `None` marks a metric undefined for the class's
/// test data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub auroc_image: Option<f64>,
    pub auroc_pixel: Option<f64>,
    pub pro: Option<f64>,
    pub latency: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn mean_auroc_image(&self) -> Option<f64> {
        mean_defined(self.classes.iter().map(|c| c.auroc_image))
    }

    pub fn mean_auroc_pixel(&self) -> Option<f64> {
        mean_defined(self.classes.iter().map(|c| c.auroc_pixel))
    }

    pub fn mean_pro(&self) -> Option<f64> {
        mean_defined(self.classes.iter().map(|c| c.pro))
    }

    pub fn weighted_latency(&self) -> Option<f64> {
        let pairs: Vec<(f64, usize)> = self.classes.iter().map(|c| (c.latency, c.images)).collect();
        weighted_mean_latency(&pairs).ok()
    }

    /// Aligned per-class table with a closing MEAN row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let width = self
            .classes
            .iter()
            .map(|c| c.class.len())
            .chain(["CATEGORY".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>15}  {:>15}  {:>8}  {:>11}",
            "CATEGORY", "AUC-ROC (image)", "AUC-ROC (pixel)", "PRO", "Latency (s)"
        );
        let mut row = |name: &str, img: Option<f64>, px: Option<f64>, pro: Option<f64>, lat: Option<f64>| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>15}  {:>15}  {:>8}  {:>11}",
                name,
                fmt(img),
                fmt(px),
                fmt(pro),
                fmt(lat)
            );
        };
        for c in &self.classes {
            row(&c.class, c.auroc_image, c.auroc_pixel, c.pro, Some(c.latency));
        }
        row(
            "MEAN",
            self.mean_auroc_image(),
            self.mean_auroc_pixel(),
            self.mean_pro(),
            self.weighted_latency(),
        );
        out
    }

    /// `class<TAB>metric<TAB>value` lines, MEAN last.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        let mut emit = |class: &str, metric: &str, v: Option<f64>| {
            if let Some(v) = v {
                let _ = writeln!(out, "{class}\t{metric}\t{v}");
            }
        };
        for c in &self.classes {
            emit(&c.class, "auroc_image", c.auroc_image);
            emit(&c.class, "auroc_pixel", c.auroc_pixel);
            emit(&c.class, "pro", c.pro);
            emit(&c.class, "latency", Some(c.latency));
        }
        emit("MEAN", "auroc_image", self.mean_auroc_image());
        emit("MEAN", "auroc_pixel", self.mean_auroc_pixel());
        emit("MEAN", "pro", self.mean_pro());
        emit("MEAN", "latency", self.weighted_latency());
        out
    }
}
