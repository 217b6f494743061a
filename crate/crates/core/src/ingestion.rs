//! Loading real video from directories of pre-extracted frames.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use regex::Regex;

use crate::error::{Error, Result};
use crate::imaging::{FrameSequence, GrayImage, ImageSequence};

/// Frame size real video is resized to unless configured otherwise.
pub const DEFAULT_VIDEO_SIZE: (u32, u32) = (224, 224);
/// Mean absolute inter-frame difference above which a cut is reported.
pub const DEFAULT_CUT_THRESHOLD: f64 = 0.1;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Pixel rectangle `(x, y, w, h)`.
pub type Crop = (u32, u32, u32, u32);

/// Where and how to read one frame directory.
///
/// `pattern` is a file-name template: `{n}` captures the frame number,
/// `*` matches any run of characters. `"{n}.png"` matches `000.png`, `017.png`…
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSource {
    pub root_path: PathBuf,
    pub pattern: String,
    pub stride: usize,
    pub crop: Option<Crop>,
    pub resize_to: Option<(u32, u32)>,
}

impl FrameSource {
    pub fn new(root_path: impl Into<PathBuf>, pattern: impl Into<String>) -> Self {
        Self {
            root_path: root_path.into(),
            pattern: pattern.into(),
            stride: 1,
            crop: None,
            resize_to: None,
        }
    }

    /// Real-video defaults: any numbered PNG/JPEG, resized to 224×224.
    pub fn video(root_path: impl Into<PathBuf>) -> Self {
        Self {
            resize_to: Some(DEFAULT_VIDEO_SIZE),
            ..Self::new(root_path, "*{n}.*")
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_crop(mut self, crop: Crop) -> Self {
        self.crop = Some(crop);
        self
    }

    pub fn with_resize(mut self, w: u32, h: u32) -> Self {
        self.resize_to = Some((w, h));
        self
    }

    fn regex(&self) -> Result<Regex> {
        let parts: Vec<&str> = self.pattern.split("{n}").collect();
        if parts.len() != 2 {
            return Err(Error::invalid(format!(
                "frame pattern {:?} must contain exactly one {{n}}",
                self.pattern
            )));
        }
        let glob = |s: &str| {
            s.split('*')
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join(".*?")
        };
        Regex::new(&format!("^{}(\\d+){}$", glob(parts[0]), glob(parts[1])))
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Decodes an image file to luma in `[0, 1]`.
///
/// Single-channel files are taken as-is; color files are weighted
/// 0.299 R + 0.587 G + 0.114 B.
pub fn decode_gray(path: &Path) -> Result<ImageBuffer<Luma<f32>, Vec<f32>>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width(), img.height());
    let pixels: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        _ => img
            .to_rgb32f()
            .pixels()
            .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
            .collect(),
    };
    Ok(ImageBuffer::from_raw(w, h, pixels).expect("buffer sized from decoded image"))
}

fn to_gray_image(buf: ImageBuffer<Luma<f32>, Vec<f32>>) -> Result<GrayImage> {
    let (w, h) = buf.dimensions();
    let pixels = buf
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GrayImage::new(w as usize, h as usize, pixels)
}

/// Reads, sorts by frame number, subsamples, crops and resizes one directory.
pub fn load_sequence(src: &FrameSource) -> Result<ImageSequence> {
    if src.stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let re = src.regex()?;
    let root = &src.root_path;
    if !root.is_dir() {
        return Err(Error::invalid(format!(
            "frame directory {} does not exist",
            root.display()
        )));
    }
    let mut numbered: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let Some(caps) = re.captures(name) else {
            continue;
        };
        let n: usize = caps[1]
            .parse()
            .map_err(|_| Error::invalid(format!("frame number in {name} is too large")))?;
        if let Some(prev) = numbered.insert(n, path.clone()) {
            // keep the error independent of directory listing order
            let (a, b) = if prev < path {
                (prev, path)
            } else {
                (path, prev)
            };
            return Err(Error::invalid(format!(
                "duplicate frame number {n}: {} and {}",
                a.display(),
                b.display()
            )));
        }
    }
    let picked: Vec<(usize, PathBuf)> = numbered.into_iter().step_by(src.stride).collect();
    if picked.len() < 2 {
        return Err(Error::invalid(format!(
            "{} yields {} frame(s) with pattern {:?} and stride {}; need at least 2",
            root.display(),
            picked.len(),
            src.pattern,
            src.stride
        )));
    }
    let mut frames = Vec::with_capacity(picked.len());
    let mut indices = Vec::with_capacity(picked.len());
    for (n, path) in picked {
        let mut buf = decode_gray(&path)?;
        if let Some((x, y, w, h)) = src.crop {
            let (fw, fh) = buf.dimensions();
            if w == 0 || h == 0 || x.saturating_add(w) > fw || y.saturating_add(h) > fh {
                return Err(Error::invalid(format!(
                    "crop ({x}, {y}, {w}, {h}) exceeds {fw}x{fh} frame {}",
                    path.display()
                )));
            }
            buf = imageops::crop_imm(&buf, x, y, w, h).to_image();
        }
        if let Some((w, h)) = src.resize_to {
            if w == 0 || h == 0 {
                return Err(Error::invalid("resize target must be non-empty"));
            }
            if buf.dimensions() != (w, h) {
                buf = imageops::resize(&buf, w, h, FilterType::Triangle);
            }
        }
        frames.push(to_gray_image(buf)?);
        indices.push(n);
    }
    let id = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string());
    ImageSequence::new(frames, id, indices)
}

/// Positions `i` where the mean absolute difference between frames `i` and
/// `i + 1` exceeds `threshold`.
pub fn detect_cuts(seq: &dyn FrameSequence, threshold: f64) -> Result<Vec<usize>> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::invalid(format!(
            "cut threshold must be positive, got {threshold}"
        )));
    }
    let mut cuts = Vec::new();
    if seq.len() < 2 {
        return Ok(cuts);
    }
    let mut prev = seq.frame(0)?.into_owned();
    for i in 1..seq.len() {
        let cur = seq.frame(i)?.into_owned();
        if prev.mean_abs_diff(&cur)? > threshold {
            cuts.push(i - 1);
        }
        prev = cur;
    }
    Ok(cuts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage as Gray8, Rgb, RgbImage};

    fn write_frames(dir: &Path, names: &[&str]) {
        for (k, name) in names.iter().enumerate() {
            let img = Gray8::from_fn(6, 5, |x, y| {
                image::Luma([(x * 10 + y * 3 + k as u32) as u8])
            });
            img.save(dir.join(name)).unwrap();
        }
    }

    #[test]
    fn pattern_captures_frame_number() {
        let re = FrameSource::new("x", "frame_{n}.png").regex().unwrap();
        assert_eq!(&re.captures("frame_0012.png").unwrap()[1], "0012");
        assert!(re.captures("frame_12.jpg").is_none());
        let re = FrameSource::video("x").regex().unwrap();
        assert_eq!(&re.captures("img_00042.jpg").unwrap()[1], "00042");
        assert!(FrameSource::new("x", "*.png").regex().is_err());
    }

    #[test]
    fn sorts_numerically_not_lexically() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &["10.png", "9.png", "100.png"]);
        let seq = load_sequence(&FrameSource::new(dir.path(), "{n}.png")).unwrap();
        assert_eq!(seq.frame_indices(), &[9, 10, 100]);
    }

    #[test]
    fn duplicate_numbers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &["1.png", "01.png", "2.png"]);
        let err = load_sequence(&FrameSource::new(dir.path(), "{n}.png")).unwrap_err();
        assert!(
            err.to_string().contains("duplicate frame number 1"),
            "{err}"
        );
    }

    #[test]
    fn missing_directory_rejected() {
        let err = load_sequence(&FrameSource::new("/nonexistent/frames", "{n}.png")).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn gray_input_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &["0.png", "1.png"]);
        let seq = load_sequence(&FrameSource::new(dir.path(), "{n}.png")).unwrap();
        let f = &seq.frames()[1];
        for y in 0..5 {
            for x in 0..6 {
                let expected = (x * 10 + y * 3 + 1) as f32 / 255.0;
                assert!((f.get(x, y) - expected).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn color_uses_luma_weights() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..2 {
            RgbImage::from_pixel(4, 4, Rgb([255, 0, 0]))
                .save(dir.path().join(format!("{k}.png")))
                .unwrap();
        }
        let seq = load_sequence(&FrameSource::new(dir.path(), "{n}.png")).unwrap();
        assert!((seq.frames()[0].get(0, 0) - 0.299).abs() < 1e-6);
    }

    #[test]
    fn crop_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &["0.png", "1.png", "2.png"]);
        let src = FrameSource::new(dir.path(), "{n}.png").with_crop((1, 1, 4, 3));
        let seq = load_sequence(&src).unwrap();
        assert_eq!(seq.frames()[0].size(), (4, 3));
        assert!((seq.frames()[0].get(0, 0) - 13.0 / 255.0).abs() < 1e-6);
        let seq = load_sequence(&src.clone().with_resize(8, 6)).unwrap();
        assert_eq!(seq.frames()[2].size(), (8, 6));
        let bad = FrameSource::new(dir.path(), "{n}.png").with_crop((3, 0, 4, 2));
        assert!(load_sequence(&bad).is_err());
    }

    #[test]
    fn cut_threshold_validated() {
        let seq =
            ImageSequence::from_frames(vec![GrayImage::zeros(2, 2).unwrap(); 3], "c").unwrap();
        assert!(detect_cuts(&seq, 0.0).is_err());
        assert!(detect_cuts(&seq, f64::NAN).is_err());
        assert!(detect_cuts(&seq, 0.05).unwrap().is_empty());
        assert!(detect_cuts(&seq, f64::INFINITY).unwrap().is_empty());
    }
}
