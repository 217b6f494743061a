use std::borrow::Cow;

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    /// Builds an image from `f(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Mean absolute pixel difference. Sizes must match.
    pub fn mean_abs_diff(&self, other: &GrayImage) -> Result<f64> {
        if self.size() != other.size() {
            return Err(Error::invalid(format!(
                "size mismatch: {:?} vs {:?}",
                self.size(),
                other.size()
            )));
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.pixels.len() as f64)
    }

    /// Centers this image on a zero canvas of the given size.
    pub fn pad_to(&self, width: usize, height: usize) -> Result<GrayImage> {
        if width < self.width || height < self.height {
            return Err(Error::invalid(format!(
                "canvas {width}x{height} is smaller than image {}x{}",
                self.width, self.height
            )));
        }
        let ox = (width - self.width) / 2;
        let oy = (height - self.height) / 2;
        let mut pixels = vec![0.0; width * height];
        for y in 0..self.height {
            let dst = (y + oy) * width + ox;
            pixels[dst..dst + self.width]
                .copy_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
        }
        GrayImage::new(width, height, pixels)
    }
}

/// Read access to an ordered run of equally sized frames.
///
/// Implemented by materialized [`ImageSequence`]s and by synthetic clips
/// that render frames on demand.
pub trait FrameSequence: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(width, height)` shared by every frame.
    fn frame_size(&self) -> (usize, usize);

    fn frame(&self, i: usize) -> Result<Cow<'_, GrayImage>>;

    fn source_id(&self) -> &str;
}

/// An ordered list of frames from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    frames: Vec<GrayImage>,
    source_id: String,
    frame_indices: Vec<usize>,
}

impl ImageSequence {
    /// A raw sequence: indices must be strictly increasing.
    pub fn new(
        frames: Vec<GrayImage>,
        source_id: impl Into<String>,
        frame_indices: Vec<usize>,
    ) -> Result<Self> {
        if frames.len() != frame_indices.len() {
            return Err(Error::invalid(format!(
                "{} frames but {} frame indices",
                frames.len(),
                frame_indices.len()
            )));
        }
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.size() != first.size()) {
                return Err(Error::invalid("frames differ in size"));
            }
        }
        if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("frame indices must be strictly increasing"));
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
            frame_indices,
        })
    }

    /// Frames numbered `0..n`.
    pub fn from_frames(frames: Vec<GrayImage>, source_id: impl Into<String>) -> Result<Self> {
        let n = frames.len();
        Self::new(frames, source_id, (0..n).collect())
    }

    pub fn frames(&self) -> &[GrayImage] {
        &self.frames
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn id(&self) -> &str {
        &self.source_id
    }
}

impl FrameSequence for ImageSequence {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame_size(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.size()).unwrap_or((0, 0))
    }

    fn frame(&self, i: usize) -> Result<Cow<'_, GrayImage>> {
        self.frames.get(i).map(Cow::Borrowed).ok_or_else(|| {
            Error::invalid(format!(
                "frame {i} out of range for sequence of length {}",
                self.frames.len()
            ))
        })
    }

    fn source_id(&self) -> &str {
        &self.source_id
    }
}
