use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    /// Consecutive frames are channel-stacked; a length-T sequence makes T−1 steps.
    ImagePair,
    /// Each frame is encoded alone; a length-T sequence makes T steps.
    SingleImage,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            Self::ImagePair => 2,
            Self::SingleImage => 1,
        }
    }

    pub fn min_frames(self) -> usize {
        match self {
            Self::ImagePair => 2,
            Self::SingleImage => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub const fn new(out_channels: usize, kernel: usize, dilation: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            dilation,
            stride,
        }
    }
}

/// Architecture of the pairwise CNN, recurrent composer and linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_mode: InputMode,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub recurrent_hidden: usize,
    pub head_dim: usize,
    /// `(height, width)` of input frames.
    pub input_size: (usize, usize),
}

impl ModelSpec {
    /// 64×64 synthetic clips: four dilated 3×3 layers, strided early.
    pub fn se2mnist_64(input_mode: InputMode) -> Self {
        Self {
            input_mode,
            conv_layers: vec![
                ConvLayerSpec::new(16, 3, 1, 2),
                ConvLayerSpec::new(32, 3, 2, 2),
                ConvLayerSpec::new(32, 3, 4, 1),
                ConvLayerSpec::new(64, 3, 8, 1),
            ],
            recurrent_hidden: 256,
            head_dim: 256,
            input_size: (64, 64),
        }
    }

    /// 224×224 real-video crops.
    pub fn real_video_224(input_mode: InputMode) -> Self {
        Self {
            input_mode,
            conv_layers: vec![
                ConvLayerSpec::new(16, 3, 1, 2),
                ConvLayerSpec::new(32, 3, 1, 2),
                ConvLayerSpec::new(64, 3, 2, 1),
                ConvLayerSpec::new(64, 3, 4, 1),
                ConvLayerSpec::new(128, 3, 8, 1),
                ConvLayerSpec::new(128, 3, 16, 1),
            ],
            recurrent_hidden: 256,
            head_dim: 256,
            input_size: (224, 224),
        }
    }

    /// Two conv layers, 8 hidden units, 8×8 frames; used for gradient checks.
    pub fn miniature(input_mode: InputMode) -> Self {
        Self {
            input_mode,
            conv_layers: vec![
                ConvLayerSpec::new(4, 3, 1, 1),
                ConvLayerSpec::new(4, 3, 2, 1),
            ],
            recurrent_hidden: 8,
            head_dim: 8,
            input_size: (8, 8),
        }
    }

    /// Length of the pooled CNN feature vector.
    pub fn feature_dim(&self) -> usize {
        self.conv_layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    pub fn embedding_dim(&self) -> usize {
        self.head_dim
    }

    /// Receptive field, in input pixels, of one final-layer unit.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.conv_layers {
            rf += (l.kernel.saturating_sub(1)) * l.dilation * jump;
            jump *= l.stride;
        }
        rf
    }

    pub fn geometries(&self) -> Result<Vec<ConvGeom>> {
        let (mut h, mut w) = self.input_size;
        let mut cin = self.input_mode.channels();
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.out_channels == 0 {
                return Err(Error::Config(format!(
                    "conv layer {i} has no output channels"
                )));
            }
            if l.kernel % 2 == 0 {
                return Err(Error::Config(format!("conv layer {i} kernel must be odd")));
            }
            let g = ConvGeom::new(cin, l.out_channels, l.kernel, l.dilation, l.stride, h, w)
                .ok_or_else(|| {
                    Error::Config(format!("conv layer {i} does not fit a {h}x{w} input"))
                })?;
            h = g.oh;
            w = g.ow;
            cin = l.out_channels;
            out.push(g);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::Config("model needs at least one conv layer".into()));
        }
        if self.recurrent_hidden == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "recurrent_hidden and head_dim must be positive".into(),
            ));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("input_size must be non-empty".into()));
        }
        self.geometries()?;
        let rf = self.receptive_field();
        if 2 * rf < h.max(w) {
            return Err(Error::Config(format!(
                "receptive field {rf} covers less than half of the {h}x{w} input"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for mode in [InputMode::ImagePair, InputMode::SingleImage] {
            for spec in [
                ModelSpec::se2mnist_64(mode),
                ModelSpec::real_video_224(mode),
                ModelSpec::miniature(mode),
            ] {
                spec.validate().unwrap();
            }
        }
        assert_eq!(
            ModelSpec::se2mnist_64(InputMode::ImagePair).feature_dim(),
            64
        );
    }

    #[test]
    fn receptive_fields() {
        // 1 + 2·1 + 2·2·2 + 2·4·4 + 2·8·4
        assert_eq!(
            ModelSpec::se2mnist_64(InputMode::ImagePair).receptive_field(),
            107
        );
        assert_eq!(
            ModelSpec::miniature(InputMode::ImagePair).receptive_field(),
            7
        );
    }

    #[test]
    fn small_receptive_field_rejected() {
        let mut s = ModelSpec::se2mnist_64(InputMode::ImagePair);
        s.conv_layers = vec![ConvLayerSpec::new(8, 3, 1, 1)];
        assert!(s.validate().is_err());
    }
}
