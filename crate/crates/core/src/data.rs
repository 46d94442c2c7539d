//! Binary PNM codecs (P5 grayscale, P6 color), MVTec-style dataset
//! layout scanning and input preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::ops;
use crate::tensor::Tensor;

/// ImageNet per-channel statistics, the default input normalization.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Decoded 8-bit raster, `channels` is 1 or 3, samples interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(self.path, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(self.path, start, format!("{what} out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(path, 0, "expected P5 or P6 magic")),
    };
    let mut h = Header { bytes, pos: 2, path };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(
            path,
            maxval_at,
            format!("unsupported maxval {maxval}, only 255 is accepted"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(path, 2, "image dimensions must be positive"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(path, h.pos, "expected whitespace after header")),
    }
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: payload[..need].to_vec(),
    })
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_pnm(r)).map_err(|e| Error::io(path, e))
}

/// `3×H×W` tensor in `[0, 1]`; grayscale is replicated to three channels.
pub fn raster_to_tensor(r: &Raster) -> Tensor<f32> {
    let hw = r.width * r.height;
    Tensor::from_fn(&[3, r.height, r.width], |i| {
        let (c, p) = (i / hw, i % hw);
        let c = if r.channels == 1 { 0 } else { c };
        r.pixels[p * r.channels + c] as f32 / 255.0
    })
}

/// Quantizes a `3×H×W` tensor in `[0, 1]` to an 8-bit color raster.
pub fn tensor_to_raster(t: &Tensor<f32>) -> Result<Raster> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::Dimension(format!("expected 3×H×W image, got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let mut pixels = vec![0u8; 3 * hw];
    for c in 0..3 {
        for p in 0..hw {
            pixels[p * 3 + c] = (t.data()[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        pixels,
    })
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(raster_to_tensor(&read_raster(path)?))
}

pub fn save_ppm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_raster(path, &tensor_to_raster(t)?)
}

pub fn save_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_raster(
        path,
        &Raster {
            width,
            height,
            channels: 1,
            pixels: gray.to_vec(),
        },
    )
}

/// Mask from a PNM file: any nonzero sample marks the pixel foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let r = read_raster(path)?;
    let data = r.pixels.chunks(r.channels).map(|px| px.iter().any(|&v| v != 0)).collect();
    Mask::new(r.height, r.width, data)
}

pub fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    let gray: Vec<u8> = m.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_pgm(path, m.width, m.height, &gray)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub class_name: String,
    pub path: PathBuf,
    pub anomalous: bool,
    /// Defect folder name (`good` for normal samples).
    pub defect: String,
    pub mask_path: Option<PathBuf>,
}

impl Sample {
    pub fn load_image(&self) -> Result<Tensor<f32>> {
        load_image(&self.path)
    }

    /// Ground truth at image resolution; normal samples get an empty mask.
    pub fn load_mask(&self, height: usize, width: usize) -> Result<Mask> {
        match &self.mask_path {
            Some(p) => load_mask(p),
            None => Ok(Mask::empty(height, width)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassData {
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<ClassData>,
}

impl Dataset {
    pub fn train_count(&self) -> usize {
        self.classes.iter().map(|c| c.train.len()).sum()
    }

    pub fn test_count(&self) -> usize {
        self.classes.iter().map(|c| c.test.len()).sum()
    }
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("ppm" | "pgm" | "pnm")
        )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect())
}

fn find_mask(root: &Path, defect: &str, image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_str()?;
    ["pgm", "ppm", "pnm"]
        .iter()
        .map(|ext| root.join("ground_truth").join(defect).join(format!("{stem}_mask.{ext}")))
        .find(|p| p.is_file())
}

/// Walks `root/<class>/{train/good, test/<defect>, ground_truth/<defect>}`.
pub fn scan_layout(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut classes = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("non UTF-8 class directory {}", class_dir.display())))?
            .to_string();
        let train_dir = class_dir.join("train").join("good");
        let train: Vec<Sample> = if train_dir.is_dir() {
            images_in(&train_dir)?
                .into_iter()
                .map(|path| Sample {
                    class_name: name.clone(),
                    path,
                    anomalous: false,
                    defect: "good".into(),
                    mask_path: None,
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut test = Vec::new();
        let test_dir = class_dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
                let defect = defect_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let anomalous = defect != "good";
                for path in images_in(&defect_dir)? {
                    let mask_path = if anomalous {
                        Some(find_mask(&class_dir, &defect, &path).ok_or_else(|| {
                            Error::Dataset(format!("anomalous image {} has no mask", path.display()))
                        })?)
                    } else {
                        None
                    };
                    test.push(Sample {
                        class_name: name.clone(),
                        path,
                        anomalous,
                        defect: defect.clone(),
                        mask_path,
                    });
                }
            }
        }
        if train.is_empty() && test.is_empty() {
            return Err(Error::Dataset(format!("class `{name}` contains no images")));
        }
        classes.push(ClassData { name, train, test });
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        classes,
    })
}

/// Bilinear resize of a `3×H×W` image to `size`, then per-channel
/// `(x - mean) / std`.
pub fn preprocess(image: &Tensor<f32>, size: (usize, usize), mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<f32>> {
    if std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::Config(format!("normalization std {std:?} must be finite and nonzero")));
    }
    let (h, w) = size;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Dimension(format!("input size {h}x{w} is not divisible by 16")));
    }
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Dimension(format!("expected 3×H×W image, got {:?}", image.shape())));
    }
    let resized = if image.shape()[1..] == [h, w] {
        image.clone()
    } else {
        ops::resize_bilinear(image, h, w)?
    };
    let hw = h * w;
    let mut out = resized;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / hw;
        *v = ((*v as f64 - mean[c]) / std[c]) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_gray_pixel() {
        let bytes = b"P5\n1 1\n255\n\xff";
        let t = raster_to_tensor(&decode_pnm(bytes, Path::new("x.pgm")).unwrap());
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6 # comment\n2 1\n# more\n255\n\x00\x01\x02\x03\x04\x05";
        let r = decode_pnm(bytes, Path::new("x.ppm")).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 3));
        assert_eq!(r.pixels, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn wide_maxval_rejected() {
        let err = decode_pnm(b"P6\n1 1\n65535\n\0\0\0\0\0\0", Path::new("x.ppm")).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 7),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let err = decode_pnm(b"P5\n2 2\n255\n\x01\x02", Path::new("x.pgm")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 13, .. }), "{err}");
        assert!(matches!(
            decode_pnm(b"P3\n1 1\n255\n", Path::new("x")),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn quantized_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let t = Tensor::<f32>::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f32 / 255.0);
        save_ppm(&path, &t).unwrap();
        assert_eq!(load_image(&path).unwrap(), t);
    }

    #[test]
    fn identity_preprocess() {
        let t = Tensor::<f32>::from_fn(&[3, 16, 16], |i| (i % 7) as f32 / 7.0);
        let p = preprocess(&t, (16, 16), [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(p, t);
    }

    #[test]
    fn constant_image_stays_constant() {
        let t = Tensor::<f32>::full(&[3, 20, 12], 0.5);
        let p = preprocess(&t, (32, 16), IMAGENET_MEAN, IMAGENET_STD).unwrap();
        for c in 0..3 {
            let want = ((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f32;
            assert!(p.data()[c * 512..(c + 1) * 512].iter().all(|&v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_std_is_config_error() {
        let t = Tensor::<f32>::full(&[3, 16, 16], 0.5);
        assert!(matches!(
            preprocess(&t, (16, 16), [0.0; 3], [1.0, 0.0, 1.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_class_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hollow")).unwrap();
        let err = scan_layout(dir.path()).unwrap_err().to_string();
        assert!(err.contains("hollow"), "{err}");
    }

    #[test]
    fn missing_mask_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::full(&[3, 2, 2], 0.2);
        save_ppm(&dir.path().join("c/train/good/0.ppm"), &img).unwrap();
        save_ppm(&dir.path().join("c/test/scratch/0.ppm"), &img).unwrap();
        let err = scan_layout(dir.path()).unwrap_err().to_string();
        assert!(err.contains("no mask"), "{err}");
    }
}
