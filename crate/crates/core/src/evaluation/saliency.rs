//! Input-gradient saliency maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::store::write_atomic;
use crate::imaging::GrayImage;
use crate::model::{BatchBuilder, InputMode, Mode, Model};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaliencySource {
    /// Gradient of one CNN input's squared feature norm.
    Spatial,
    /// Gradient of the squared sequence embedding norm.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Signed gradient, row-major.
    pub values: Vec<f64>,
    pub source: SaliencySource,
    /// Frame of the input sequence this map belongs to.
    pub frame: usize,
    /// For spatial maps, the CNN step (frame pair) that produced it.
    pub step: Option<usize>,
}

impl SaliencyMap {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Saliency of `frames` under `model`, in evaluation mode.
///
/// Spatial maps come one per frame per CNN step (two per step for image-pair
/// input); temporal maps one per frame.
pub fn saliency<T: Real>(
    model: &Model<T>,
    frames: &[&GrayImage],
    source: SaliencySource,
) -> Result<Vec<SaliencyMap>> {
    let spec = model.spec();
    let mut b = BatchBuilder::new(spec);
    b.push_unique(frames)?;
    let batch = b.finish::<T>();
    let pass = model.forward(&batch, Mode::Eval)?;
    let mut grads = model.params.zeros_like();
    let two = T::of(2.0);
    let input_grad = match source {
        SaliencySource::Spatial => {
            let d_feat: Vec<T> = pass.features.iter().map(|&v| two * v).collect();
            model.backward_features(&pass, &d_feat, &mut grads, true)
        }
        SaliencySource::Temporal => {
            let d_emb: Vec<T> = pass.embeddings.iter().map(|&v| two * v).collect();
            model.backward(&pass, &d_emb, &mut grads, true)
        }
    }
    .ok_or_else(|| Error::invalid("model returned no input gradient"))?;

    let (h, w) = spec.input_size;
    let plane = h * w;
    let ch = spec.input_mode.channels();
    // sample-major rows in step order: push_unique never shares inputs
    let step_plane = |step: usize, c: usize| &input_grad[(step * ch + c) * plane..][..plane];
    let to_map = |vals: Vec<f64>, frame, step| SaliencyMap {
        width: w,
        height: h,
        values: vals,
        source,
        frame,
        step,
    };
    let steps = pass.n;
    let maps = match source {
        SaliencySource::Spatial => (0..steps)
            .flat_map(|s| (0..ch).map(move |c| (s, c)))
            .map(|(s, c)| {
                to_map(
                    step_plane(s, c).iter().map(|v| v.f64()).collect(),
                    s + c,
                    Some(s),
                )
            })
            .collect(),
        SaliencySource::Temporal => {
            let mut acc = vec![vec![0.0f64; plane]; frames.len()];
            for s in 0..steps {
                for c in 0..ch {
                    let frame = match spec.input_mode {
                        InputMode::ImagePair => s + c,
                        InputMode::SingleImage => s,
                    };
                    for (a, v) in acc[frame].iter_mut().zip(step_plane(s, c)) {
                        *a += v.f64();
                    }
                }
            }
            acc.into_iter()
                .enumerate()
                .map(|(f, v)| to_map(v, f, None))
                .collect()
        }
    };
    Ok(maps)
}

/// Pixels brighter than `threshold` in `frame`, grown by `radius` pixels.
///
/// On synthetic clips (a digit on a black canvas) this is the dilated digit mask.
pub fn ink_mask(frame: &GrayImage, threshold: f32, radius: usize) -> Vec<bool> {
    let (w, h) = frame.size();
    let ink: Vec<bool> = frame.pixels().iter().map(|&v| v > threshold).collect();
    let r = radius as isize;
    let mut out = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0
                        && sy >= 0
                        && sx < w as isize
                        && sy < h as isize
                        && ink[sy as usize * w + sx as usize]
                    {
                        out[y as usize * w + x as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

/// Share of the map's absolute mass on masked pixels; 0 for an all-zero map.
pub fn mass_in_mask(map: &SaliencyMap, mask: &[bool]) -> Result<f64> {
    if mask.len() != map.values.len() {
        return Err(Error::invalid("mask and saliency map differ in size"));
    }
    let total: f64 = map.values.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = map
        .values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.abs())
        .sum();
    Ok(inside / total)
}

/// Flat binary: `u32` width, `u32` height, then row-major `f32` values, all
/// little-endian.
pub fn write_saliency_bin(map: &SaliencyMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * map.values.len());
    bytes.extend_from_slice(&(map.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.height as u32).to_le_bytes());
    for &v in &map.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Diverging visualization: white at zero, red positive, blue negative,
/// scaled symmetrically by the largest magnitude.
pub fn write_saliency_png(map: &SaliencyMap, path: &Path) -> Result<()> {
    let s = map.max_abs();
    let img = image::RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let v = map.values[y as usize * map.width + x as usize];
        let u = if s > 0.0 {
            (v / s).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let fade = (255.0 * (1.0 - u.abs())).round() as u8;
        if u >= 0.0 {
            image::Rgb([255, fade, fade])
        } else {
            image::Rgb([fade, fade, 255])
        }
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ink_mask_grows_by_radius() {
        let img =
            GrayImage::from_fn(9, 9, |x, y| if (x, y) == (4, 4) { 1.0 } else { 0.0 }).unwrap();
        let m = ink_mask(&img, 0.5, 2);
        assert_eq!(m.iter().filter(|&&b| b).count(), 13);
        assert!(m[4 * 9 + 6] && !m[4 * 9 + 7] && !m[6 * 9 + 6]);
    }

    #[test]
    fn mass_share() {
        let map = SaliencyMap {
            width: 2,
            height: 1,
            values: vec![-3.0, 1.0],
            source: SaliencySource::Spatial,
            frame: 0,
            step: Some(0),
        };
        assert_eq!(mass_in_mask(&map, &[true, false]).unwrap(), 0.75);
        assert!(mass_in_mask(&map, &[true]).is_err());
    }
}
