//! Run configuration, read from TOML.
//!
//! Every section and key is optional; missing keys take the defaults listed
//! in [`DOCUMENTED_DEFAULTS`]. Unknown keys are rejected.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{build_se2_clips, synthetic_digits, GrayImage, SyntheticClip};
use crate::model::{ConvLayerSpec, InputMode, ModelSpec};
use crate::recomposer::SamplerConfig;
use crate::training::TrainConfig;

/// Synthetic dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub num_base_images: usize,
    pub num_frames: usize,
    pub canvas: usize,
    pub glyph_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 5000,
            num_base_images: 1000,
            num_frames: 20,
            canvas: 64,
            glyph_size: 28,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        if self.num_base_images == 0 {
            return Err(Error::Config(
                "data.num_base_images must be at least 1".into(),
            ));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("data.num_frames must be at least 2".into()));
        }
        if self.glyph_size == 0 || self.glyph_size > self.canvas {
            return Err(Error::Config(
                "data.glyph_size must fit inside data.canvas".into(),
            ));
        }
        Ok(())
    }

    /// The synthetic clips this config describes, rendered lazily. Depends
    /// only on the config, so equal configs yield identical clips.
    pub fn build_clips(&self) -> Result<Vec<SyntheticClip>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let bases: Vec<Arc<GrayImage>> =
            synthetic_digits(self.num_base_images, self.glyph_size, self.canvas, &mut rng)?
                .into_iter()
                .map(Arc::new)
                .collect();
        build_se2_clips(&bases, self.count, &mut rng)?
            .into_iter()
            .map(|c| c.with_num_frames(self.num_frames))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Se2mnist64,
    RealVideo224,
    Miniature,
}

/// A preset architecture with optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: ModelPreset,
    pub input_mode: InputMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_layers: Option<Vec<ConvLayerSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recurrent_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_size: Option<(usize, usize)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: ModelPreset::Se2mnist64,
            input_mode: InputMode::ImagePair,
            conv_layers: None,
            recurrent_hidden: None,
            head_dim: None,
            input_size: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        let mut spec = match self.preset {
            ModelPreset::Se2mnist64 => ModelSpec::se2mnist_64(self.input_mode),
            ModelPreset::RealVideo224 => ModelSpec::real_video_224(self.input_mode),
            ModelPreset::Miniature => ModelSpec::miniature(self.input_mode),
        };
        if let Some(l) = &self.conv_layers {
            spec.conv_layers = l.clone();
        }
        if let Some(h) = self.recurrent_hidden {
            spec.recurrent_hidden = h;
        }
        if let Some(d) = self.head_dim {
            spec.head_dim = d;
        }
        if let Some(s) = self.input_size {
            spec.input_size = s;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
}

/// The default configuration with a comment on every key.
pub const DOCUMENTED_DEFAULTS: &str = r#"[data]
count = 5000              # sequences to generate
num_base_images = 1000    # distinct digit glyphs the sequences are drawn from
num_frames = 20           # frames per generated sequence
canvas = 64               # frame width and height in pixels
glyph_size = 28           # digit glyph box, centered on the canvas
seed = 0                  # generator seed

[model]
preset = "se2mnist64"     # se2mnist64 | real_video224 | miniature
input_mode = "ImagePair"  # ImagePair (consecutive frames stacked) | SingleImage
# optional overrides of the preset:
# conv_layers = [{ out_channels = 16, kernel = 3, dilation = 1, stride = 2 }, ...]
# recurrent_hidden = 256
# head_dim = 256
# input_size = [64, 64]   # [height, width]

[sampler]
min_len = 3               # shortest recomposed sequence (frames)
max_len = 5               # longest recomposed sequence (frames)
configs_enabled = ["SameStartSameSub", "SameStartAdjacent", "DiffStartAdjacent"]
negatives_per_tuple = 6   # negative pairs per tuple, 1..=12
seed = 0                  # selects the random stream used for sampling

[train]
margin = 0.5              # hinge margin on negative pairs
distance = "Cosine"       # Cosine | Euclidean
lr = 0.01                 # initial Adam learning rate
decay_epochs = 30         # epochs between learning-rate decays
decay_factor = 0.1        # learning-rate multiplier at each decay
batch_sequences = 50      # source sequences (tuples) per minibatch
epochs = 10               # total epochs
seed = 0                  # initialization, data order and sampling seed
holdout_fraction = 0.1    # share of source sequences held out for validation
validation_tuples = 500   # held-out tuples scored after every epoch
threads = 1               # worker threads for batch assembly
"#;

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.spec()?;
        self.sampler.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_match_code_defaults() {
        assert_eq!(
            RunConfig::from_toml_str(DOCUMENTED_DEFAULTS).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["[train]\nlearning_rate = 0.1\n", "[bogus]\n", "top = 1\n"] {
            assert!(
                matches!(RunConfig::from_toml_str(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml_str(
            "[model]\ninput_mode = \"SingleImage\"\nhead_dim = 32\n[train]\nepochs = 3\n",
        )
        .unwrap();
        let spec = c.model.spec().unwrap();
        assert_eq!(spec.head_dim, 32);
        assert_eq!(spec.input_mode, InputMode::SingleImage);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = RunConfig::default();
        c.model.head_dim = Some(64);
        c.train.margin = 0.25;
        assert_eq!(
            RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(),
            c
        );
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nmargin = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nbatch_sequences = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[sampler]\nmin_len = 2\n").is_err());
        assert!(RunConfig::from_toml_str("[data]\ncount = 0\n").is_err());
    }
}
