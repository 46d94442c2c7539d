//! Deterministic synthetic texture corpus in the MVTec directory layout.
//!
//! Every image is a function of `(seed, class index, split, index)` only:
//! normal images are periodic textures with seeded jitter, anomalous ones
//! add a rectangle or ellipse defect whose pixels move away from the base
//! by at least the configured minimum intensity delta.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{parse_list, parse_pairs, parse_value};
use crate::data::{save_mask, write_raster, Raster};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::rng::Rng;

/// Largest allowed defect delta; keeps the shifted intensity inside
/// `[0, 255]` with headroom for texture perturbation.
pub const MAX_DEFECT_DELTA: f64 = 0.4;
const TEXTURE_PERTURBATION: u64 = 26;
const PIXEL_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Stripes,
    Checker,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Palette {
    Warm,
    Cool,
    Earth,
    Gray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectShape {
    Rectangle,
    Ellipse,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

named_enum!(Pattern, "pattern", Pattern::Stripes => "stripes", Pattern::Checker => "checker", Pattern::Blobs => "blobs");
named_enum!(Palette, "palette", Palette::Warm => "warm", Palette::Cool => "cool", Palette::Earth => "earth", Palette::Gray => "gray");
named_enum!(DefectShape, "defect shape", DefectShape::Rectangle => "rectangle", DefectShape::Ellipse => "ellipse");

impl Palette {
    fn colors(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Palette::Warm => ([0.72, 0.33, 0.20], [0.95, 0.80, 0.55]),
            Palette::Cool => ([0.15, 0.30, 0.55], [0.60, 0.80, 0.90]),
            Palette::Earth => ([0.33, 0.27, 0.17], [0.72, 0.64, 0.42]),
            Palette::Gray => ([0.25, 0.25, 0.25], [0.78, 0.78, 0.78]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub pattern: Pattern,
    pub period: usize,
    pub palette: Palette,
}

impl fmt::Display for ClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.name, self.pattern, self.period, self.palette)
    }
}

impl FromStr for ClassSpec {
    type Err = Error;

    /// `<name>:<pattern>:<period>:<palette>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [name, pattern, period, palette] = parts[..] else {
            return Err(Error::Config(format!(
                "class `{s}` must look like <name>:<pattern>:<period>:<palette>"
            )));
        };
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid class name `{name}`")));
        }
        Ok(Self {
            name: name.to_string(),
            pattern: pattern.parse()?,
            period: parse_value("period", period)?,
            palette: palette.parse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub defect_shapes: Vec<DefectShape>,
    /// Inclusive side-length range in pixels.
    pub defect_size: (usize, usize),
    /// Inclusive intensity shift range on the `[0, 1]` scale.
    pub defect_delta: (f64, f64),
}

impl Default for CorpusSpec {
    /// Four texture classes at 64×64.
    fn default() -> Self {
        let class = |name: &str, pattern, period, palette| ClassSpec {
            name: name.into(),
            pattern,
            period,
            palette,
        };
        Self {
            seed: 2024,
            image_size: 64,
            classes: vec![
                class("stripes", Pattern::Stripes, 8, Palette::Warm),
                class("checker", Pattern::Checker, 8, Palette::Cool),
                class("blobs", Pattern::Blobs, 12, Palette::Earth),
                class("bands", Pattern::Stripes, 16, Palette::Gray),
            ],
            train: 40,
            test_normal: 8,
            test_anomalous: 8,
            defect_shapes: vec![DefectShape::Rectangle, DefectShape::Ellipse],
            defect_size: (10, 20),
            defect_delta: (0.25, 0.4),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("corpus needs at least one class".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.period < 2 {
                return Err(Error::Config(format!("class `{}` period must be >= 2", c.name)));
            }
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Config(format!("duplicate class `{}`", c.name)));
            }
        }
        let (lo, hi) = self.defect_size;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid defect size range {lo}..{hi}")));
        }
        if hi > self.image_size {
            return Err(Error::Config(format!(
                "defect size {hi} exceeds image size {}",
                self.image_size
            )));
        }
        let (dlo, dhi) = self.defect_delta;
        if !(dlo > 0.0 && dlo <= dhi && dhi <= MAX_DEFECT_DELTA) {
            return Err(Error::Config(format!(
                "defect delta range {dlo}..{dhi} must lie in (0, {MAX_DEFECT_DELTA}]"
            )));
        }
        if self.test_anomalous > 0 && self.defect_shapes.is_empty() {
            return Err(Error::Config("anomalous samples requested without defect shapes".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut spec = CorpusSpec::default();
        let mut classes = Vec::new();
        for (line, key, value) in parse_pairs(text, path)? {
            let ctx = |e: Error| Error::Config(format!("{}:{line}: {e}", path.display()));
            let range = |key: &str| -> Result<Vec<String>> {
                let v: Vec<String> = parse_list(key, &value)?;
                if v.len() == 2 {
                    Ok(v)
                } else {
                    Err(Error::Config(format!("`{key}` needs two comma-separated values")))
                }
            };
            match key.as_str() {
                "seed" => spec.seed = parse_value(&key, &value).map_err(ctx)?,
                "image_size" => spec.image_size = parse_value(&key, &value).map_err(ctx)?,
                "class" => classes.push(value.parse().map_err(ctx)?),
                "train" => spec.train = parse_value(&key, &value).map_err(ctx)?,
                "test_normal" => spec.test_normal = parse_value(&key, &value).map_err(ctx)?,
                "test_anomalous" => spec.test_anomalous = parse_value(&key, &value).map_err(ctx)?,
                "defect_shapes" => spec.defect_shapes = parse_list(&key, &value).map_err(ctx)?,
                "defect_size" => {
                    let v = range(&key).map_err(ctx)?;
                    spec.defect_size = (
                        parse_value(&key, &v[0]).map_err(ctx)?,
                        parse_value(&key, &v[1]).map_err(ctx)?,
                    );
                }
                "defect_delta" => {
                    let v = range(&key).map_err(ctx)?;
                    spec.defect_delta = (
                        parse_value(&key, &v[0]).map_err(ctx)?,
                        parse_value(&key, &v[1]).map_err(ctx)?,
                    );
                }
                other => {
                    return Err(Error::Config(format!(
                        "{}:{line}: unknown corpus key `{other}`",
                        path.display()
                    )))
                }
            }
        }
        if !classes.is_empty() {
            spec.classes = classes;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn render(&self) -> String {
        let mut out = format!("seed = {}\nimage_size = {}\n", self.seed, self.image_size);
        for c in &self.classes {
            out.push_str(&format!("class = {c}\n"));
        }
        let shapes: Vec<String> = self.defect_shapes.iter().map(ToString::to_string).collect();
        out.push_str(&format!(
            "train = {}\ntest_normal = {}\ntest_anomalous = {}\ndefect_shapes = {}\ndefect_size = {},{}\ndefect_delta = {:?},{:?}\n",
            self.train,
            self.test_normal,
            self.test_anomalous,
            shapes.join(","),
            self.defect_size.0,
            self.defect_size.1,
            self.defect_delta.0,
            self.defect_delta.1
        ));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    TestNormal,
    TestAnomalous,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::TestNormal => 1,
            Split::TestAnomalous => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    pub image: Raster,
    /// The defect-free texture the image was derived from.
    pub base: Raster,
    pub defect: Option<(DefectShape, Mask)>,
}

fn class_seed(spec: &CorpusSpec, class: usize) -> u64 {
    Rng::derive(spec.seed, class as u64).next_u64()
}

fn texture(spec: &CorpusSpec, class: usize, rng: &mut Rng) -> Raster {
    let c = &spec.classes[class];
    let n = spec.image_size;
    let p = c.period as f64;
    // orientation is fixed per class
    let theta = Rng::derive(class_seed(spec, class), u64::MAX).uniform(0.0, std::f64::consts::PI);
    let (ox, oy) = (rng.uniform(0.0, p), rng.uniform(0.0, p));
    let gain = rng.uniform(0.94, 1.06);
    let t_at: Box<dyn Fn(f64, f64) -> f64> = match c.pattern {
        Pattern::Stripes => {
            let (ct, st) = (theta.cos(), theta.sin());
            Box::new(move |x, y| 0.5 + 0.5 * (std::f64::consts::TAU * ((x + ox) * ct + (y + oy) * st) / p).sin())
        }
        Pattern::Checker => Box::new(move |x, y| {
            let cell = ((x + ox) / p).floor() as i64 + ((y + oy) / p).floor() as i64;
            if cell.rem_euclid(2) == 0 {
                0.15
            } else {
                0.85
            }
        }),
        Pattern::Blobs => {
            let cells = n / c.period + 3;
            let sigma = p / 4.0;
            let centers: Vec<(f64, f64)> = (0..cells * cells)
                .map(|i| {
                    let (gx, gy) = ((i % cells) as f64 - 1.0, (i / cells) as f64 - 1.0);
                    (
                        (gx + 0.5) * p + rng.uniform(-p / 4.0, p / 4.0),
                        (gy + 0.5) * p + rng.uniform(-p / 4.0, p / 4.0),
                    )
                })
                .collect();
            Box::new(move |x, y| {
                centers
                    .iter()
                    .map(|&(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .fold(0.0, f64::max)
            })
        }
    };
    let (a, b) = c.palette.colors();
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let t = t_at(x as f64, y as f64);
            for ch in 0..3 {
                let v = (a[ch] * (1.0 - t) + b[ch] * t) * gain + rng.uniform(-PIXEL_NOISE, PIXEL_NOISE);
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Raster {
        width: n,
        height: n,
        channels: 3,
        pixels,
    }
}

fn defect(spec: &CorpusSpec, base: &Raster, rng: &mut Rng) -> (Raster, DefectShape, Mask) {
    let n = spec.image_size;
    let shape = spec.defect_shapes[rng.below(spec.defect_shapes.len() as u64) as usize];
    let (lo, hi) = spec.defect_size;
    let (w, h) = (rng.range(lo, hi), rng.range(lo, hi));
    let (x0, y0) = (rng.range(0, n - w), rng.range(0, n - h));
    let delta = rng.uniform(spec.defect_delta.0, spec.defect_delta.1);
    let step = (delta * 255.0).ceil() as u64;
    let mut mask = Mask::empty(n, n);
    let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = match shape {
                DefectShape::Rectangle => true,
                DefectShape::Ellipse => {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    dx * dx + dy * dy <= 1.0
                }
            };
            mask.data[y * n + x] = inside;
        }
    }
    let mut image = base.clone();
    for p in (0..n * n).filter(|&p| mask.data[p]) {
        for ch in 0..3 {
            let v = &mut image.pixels[p * 3 + ch];
            let shift = (step + rng.below(TEXTURE_PERTURBATION + 1)).min(128) as u8;
            *v = if *v >= 128 { *v - shift } else { *v + shift };
        }
    }
    (image, shape, mask)
}

/// Renders one sample without touching the file system.
pub fn generate_sample(spec: &CorpusSpec, class: usize, split: Split, index: usize) -> Generated {
    let mut rng = Rng::derive(class_seed(spec, class), split.tag() << 32 | index as u64);
    let base = texture(spec, class, &mut rng);
    if split == Split::TestAnomalous {
        let (image, shape, mask) = defect(spec, &base, &mut rng);
        Generated {
            image,
            base,
            defect: Some((shape, mask)),
        }
    } else {
        Generated {
            image: base.clone(),
            base,
            defect: None,
        }
    }
}

/// Writes the full corpus under `root` in the MVTec layout.
pub fn generate_corpus(spec: &CorpusSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    (0..spec.classes.len()).into_par_iter().try_for_each(|ci| {
        let dir = root.join(&spec.classes[ci].name);
        for i in 0..spec.train {
            let g = generate_sample(spec, ci, Split::Train, i);
            write_raster(&dir.join("train/good").join(format!("{i:03}.ppm")), &g.image)?;
        }
        for i in 0..spec.test_normal {
            let g = generate_sample(spec, ci, Split::TestNormal, i);
            write_raster(&dir.join("test/good").join(format!("{i:03}.ppm")), &g.image)?;
        }
        for i in 0..spec.test_anomalous {
            let g = generate_sample(spec, ci, Split::TestAnomalous, i);
            let (shape, mask) = g.defect.expect("anomalous sample has a defect");
            let name = shape.to_string();
            write_raster(&dir.join("test").join(&name).join(format!("{i:03}.ppm")), &g.image)?;
            save_mask(&dir.join("ground_truth").join(&name).join(format!("{i:03}_mask.pgm")), &mask)?;
        }
        Ok::<(), Error>(())
    })
}
