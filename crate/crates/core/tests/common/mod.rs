//! Independent scalar oracles and random instance generators shared by the
//! integration tests. Nothing here calls into the library's numerical
//! kernels.
#![allow(dead_code)]

use adkd::backbone::FeaturePyramid;
use adkd::metrics::Mask;
use adkd::rng::Rng;
use adkd::Tensor;

pub const EPS: f64 = 1e-8;

/// One level as nested vectors `[c][y][x]`.
pub type Level = Vec<Vec<Vec<f64>>>;

pub fn random_level(rng: &mut Rng, c: usize, h: usize, w: usize) -> Level {
    (0..c)
        .map(|_| (0..h).map(|_| (0..w).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect())
        .collect()
}

/// Pyramid of 1 to 3 levels with `C <= 4`, `H, W <= 6`.
pub fn random_pyramid_shape(rng: &mut Rng) -> Vec<(usize, usize, usize)> {
    (0..rng.range(1, 3))
        .map(|_| (rng.range(1, 4), rng.range(1, 6), rng.range(1, 6)))
        .collect()
}

pub fn random_pyramid(rng: &mut Rng, shape: &[(usize, usize, usize)]) -> Vec<Level> {
    shape.iter().map(|&(c, h, w)| random_level(rng, c, h, w)).collect()
}

pub fn to_tensor(l: &Level) -> Tensor<f64> {
    let (c, h, w) = (l.len(), l[0].len(), l[0][0].len());
    let flat: Vec<f64> = l.iter().flatten().flatten().copied().collect();
    Tensor::new(&[c, h, w], flat).unwrap()
}

pub fn to_pyramid(levels: &[Level]) -> FeaturePyramid<f64> {
    FeaturePyramid::from_tensors(levels.iter().map(to_tensor).collect())
}

pub fn map_level(l: &Level, f: impl Fn(usize, usize, usize, f64) -> f64) -> Level {
    l.iter()
        .enumerate()
        .map(|(c, plane)| {
            plane
                .iter()
                .enumerate()
                .map(|(y, row)| row.iter().enumerate().map(|(x, &v)| f(c, y, x, v)).collect())
                .collect()
        })
        .collect()
}

fn dims(l: &Level) -> (usize, usize, usize) {
    (l.len(), l[0].len(), l[0][0].len())
}

fn channel_vector(l: &Level, y: usize, x: usize) -> Vec<f64> {
    l.iter().map(|plane| plane[y][x]).collect()
}

fn spatial_vector(l: &Level, c: usize) -> Vec<f64> {
    l[c].iter().flatten().copied().collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (norm(a).max(EPS) * norm(b).max(EPS))
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn kl(t: &[f64], s: &[f64]) -> f64 {
    let (p, q) = (softmax(t), softmax(s));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn half_normalized_sq(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a).max(EPS), norm(b).max(EPS));
    0.5 * a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>()
}

/// Sum over levels of the mean over pixels of `f(t_vec, s_vec)`.
fn per_pixel_mean(t: &[Level], s: &[Level], f: fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut total = 0.0;
    for (lt, ls) in t.iter().zip(s) {
        let (_, h, w) = dims(lt);
        let mut level = 0.0;
        for y in 0..h {
            for x in 0..w {
                level += f(&channel_vector(lt, y, x), &channel_vector(ls, y, x));
            }
        }
        total += level / (h * w) as f64;
    }
    total
}

pub fn oracle_cd_channel(t: &[Level], s: &[Level]) -> f64 {
    per_pixel_mean(t, s, cosine_distance)
}

pub fn oracle_cd_spatial(t: &[Level], s: &[Level]) -> f64 {
    let mut total = 0.0;
    for (lt, ls) in t.iter().zip(s) {
        let c = lt.len();
        let level: f64 = (0..c).map(|d| cosine_distance(&spatial_vector(lt, d), &spatial_vector(ls, d))).sum();
        total += level / c as f64;
    }
    total
}

pub fn oracle_kld_channel(t: &[Level], s: &[Level]) -> f64 {
    let mut total = 0.0;
    for (lt, ls) in t.iter().zip(s) {
        let (_, h, w) = dims(lt);
        for y in 0..h {
            for x in 0..w {
                total += kl(&channel_vector(lt, y, x), &channel_vector(ls, y, x));
            }
        }
    }
    total
}

pub fn oracle_kld_spatial(t: &[Level], s: &[Level]) -> f64 {
    let mut total = 0.0;
    for (lt, ls) in t.iter().zip(s) {
        for d in 0..lt.len() {
            total += kl(&spatial_vector(lt, d), &spatial_vector(ls, d));
        }
    }
    total
}

pub fn oracle_mse(t: &[Level], s: &[Level]) -> f64 {
    per_pixel_mean(t, s, half_normalized_sq)
}

/// Per-pixel cosine distance map `[y][x]` of one level.
pub fn oracle_level_map(t: &Level, s: &Level) -> Vec<Vec<f64>> {
    let (_, h, w) = dims(t);
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| cosine_distance(&channel_vector(t, y, x), &channel_vector(s, y, x)).max(0.0))
                .collect()
        })
        .collect()
}

/// Half-pixel bilinear resampling of a 2-D grid, edges clamped.
pub fn oracle_bilinear(grid: &[Vec<f64>], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
    let (h, w) = (grid.len(), grid[0].len());
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let src = src.max(0.0).min((n_in - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), src - lo as f64)
    };
    (0..out_h)
        .map(|oy| {
            let (y0, y1, fy) = coord(oy, h, out_h);
            (0..out_w)
                .map(|ox| {
                    let (x0, x1, fx) = coord(ox, w, out_w);
                    let v00 = grid[y0][x0];
                    let v01 = grid[y0][x1];
                    let v10 = grid[y1][x0];
                    let v11 = grid[y1][x1];
                    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
                })
                .collect()
        })
        .collect()
}

/// Ω: upsample every level map to `h×w`, then add.
pub fn oracle_anomaly_map(t: &[Level], s: &[Level], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for (lt, ls) in t.iter().zip(s) {
        let up = oracle_bilinear(&oracle_level_map(lt, ls), h, w);
        for (o, v) in out.iter_mut().zip(up.iter().flatten()) {
            *o += v;
        }
    }
    out
}

/// Mann-Whitney AUROC by counting every positive/negative pair.
pub fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// 8-connected components by iterative flood fill, as sorted pixel lists
/// in order of their first pixel.
pub fn oracle_components(m: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (m.height as i64, m.width as i64);
    let mut label = vec![usize::MAX; m.data.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..m.data.len() {
        if !m.data[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = Vec::new();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = ((p as i64) / w, (p as i64) % w);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if (0..h).contains(&ny) && (0..w).contains(&nx) {
                        let q = (ny * w + nx) as usize;
                        if m.data[q] && label[q] == usize::MAX {
                            label[q] = id;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// PRO by evaluating every distinct score as a threshold from scratch and
/// integrating the resulting piecewise-linear curve on `[0, limit]`, flat
/// beyond its end points.
pub fn oracle_pro(maps: &[Vec<f64>], masks: &[Mask], limit: f64) -> f64 {
    let comps: Vec<Vec<Vec<usize>>> = masks.iter().map(oracle_components).collect();
    let regions: usize = comps.iter().map(Vec::len).sum();
    let normal: usize = masks.iter().map(|m| m.data.iter().filter(|&&b| !b).count()).sum();
    let mut thresholds: Vec<f64> = maps.iter().flatten().copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &th in &thresholds {
        let mut fp = 0usize;
        let mut overlap = 0.0;
        for ((map, mask), cs) in maps.iter().zip(masks).zip(&comps) {
            fp += map.iter().zip(&mask.data).filter(|(&s, &m)| !m && s >= th).count();
            for c in cs {
                overlap += c.iter().filter(|&&p| map[p] >= th).count() as f64 / c.len() as f64;
            }
        }
        let fpr = if normal == 0 { 0.0 } else { fp as f64 / normal as f64 };
        points.push((fpr, overlap / regions as f64));
    }
    let mut area = 0.0;
    let (f0, o0) = points[0];
    area += f0.min(limit) * o0;
    for pair in points.windows(2) {
        let ((xa, ya), (xb, yb)) = (pair[0], pair[1]);
        let lo = xa.min(limit);
        let hi = xb.min(limit);
        if hi <= lo {
            continue;
        }
        let at = |x: f64| ya + (yb - ya) * (x - xa) / (xb - xa);
        area += (hi - lo) * (at(lo) + at(hi)) / 2.0;
    }
    let (fl, ol) = points[points.len() - 1];
    if fl < limit {
        area += (limit - fl) * ol;
    }
    area / limit
}

pub fn random_mask(rng: &mut Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.next_f64() < density).collect()).unwrap()
}

/// Scores drawn from a small set so that ties are common.
pub fn tied_scores(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.below(6) as f64 / 5.0).collect()
}
