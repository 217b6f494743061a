//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"MREC0001"
//! u32 schema version
//! u32 len, ModelSpec as JSON
//! parameter section, buffer section, optimizer section:
//!     u32 count, then per array: u32 name len, name, u32 ndim, u64 dims…, f32 values
//! u64 optimizer step
//! u64 epoch
//! u32 len, rng state bytes
//! ```

use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::imaging::store::write_atomic;
use crate::nn::{NamedArray, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MREC0001";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Adam moment estimates; names mirror the model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: ParamSet<f32>,
    pub second_moment: ParamSet<f32>,
}

impl OptimizerState {
    pub fn for_params(params: &ParamSet<f32>) -> Self {
        Self {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub spec: ModelSpec,
    pub params: ParamSet<f32>,
    pub buffers: ParamSet<f32>,
    pub optimizer: OptimizerState,
    /// Epochs completed.
    pub epoch: u64,
    pub rng_state: Vec<u8>,
}

impl CheckpointState {
    pub fn from_model(
        model: &Model<f32>,
        optimizer: OptimizerState,
        epoch: u64,
        rng_state: Vec<u8>,
    ) -> Self {
        Self {
            spec: model.spec().clone(),
            params: model.params.clone(),
            buffers: model.buffers.clone(),
            optimizer,
            epoch,
            rng_state,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_parts(self.spec.clone(), self.params.clone(), self.buffers.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec)?;
        put_bytes(&mut out, &spec);
        let mut moments = self.optimizer.first_moment.arrays.clone();
        for a in &mut moments {
            a.name = format!("adam.m.{}", a.name);
        }
        for a in &self.optimizer.second_moment.arrays {
            moments.push(NamedArray {
                name: format!("adam.v.{}", a.name),
                ..a.clone()
            });
        }
        for section in [&self.params.arrays, &self.buffers.arrays, &moments] {
            put_arrays(&mut out, section);
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_bytes(&mut out, &self.rng_state);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor {
            buf: bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::corrupt(path, "bad magic, expected MREC0001"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: CHECKPOINT_SCHEMA_VERSION,
                found: version,
            });
        }
        let spec_len = r.u32()? as usize;
        let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| Error::corrupt(path, format!("model spec: {e}")))?;
        let params = r.arrays()?;
        let buffers = r.arrays()?;
        let moments = r.arrays()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let rng_len = r.u32()? as usize;
        let rng_state = r.take(rng_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes after checkpoint"));
        }
        let mut first_moment = ParamSet::default();
        let mut second_moment = ParamSet::default();
        for mut a in moments.arrays {
            if let Some(n) = a.name.strip_prefix("adam.m.") {
                a.name = n.to_string();
                first_moment.push(a);
            } else if let Some(n) = a.name.strip_prefix("adam.v.") {
                a.name = n.to_string();
                second_moment.push(a);
            } else {
                return Err(Error::corrupt(
                    path,
                    format!("unknown optimizer array {}", a.name),
                ));
            }
        }
        let state = Self {
            spec,
            params,
            buffers,
            optimizer: OptimizerState {
                step,
                first_moment,
                second_moment,
            },
            epoch,
            rng_state,
        };
        state
            .model()
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        let opt = &state.optimizer;
        if !(opt.first_moment.is_empty() && opt.second_moment.is_empty())
            && !(opt.first_moment.same_layout(&state.params)
                && opt.second_moment.same_layout(&state.params))
        {
            return Err(Error::corrupt(
                path,
                "optimizer state does not match parameters",
            ));
        }
        Ok(state)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[NamedArray<f32>]) {
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        put_bytes(out, a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn arrays(&mut self) -> Result<ParamSet<f32>> {
        let count = self.u32()?;
        let mut set = ParamSet::default();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::corrupt(self.path, "array name is not UTF-8"))?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::corrupt(self.path, format!("array {name} is too large")))?;
            let data = self
                .take(numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.push(NamedArray { name, shape, data });
        }
        Ok(set)
    }
}

pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<()> {
    write_atomic(path, &state.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CheckpointState::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> CheckpointState {
        let model: Model<f32> = Model::new(
            ModelSpec::miniature(InputMode::ImagePair),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let mut opt = OptimizerState::for_params(&model.params);
        opt.step = 17;
        opt.first_moment.arrays[0].data[3] = -0.25;
        CheckpointState::from_model(&model, opt, 5, vec![1, 2, 3, 250])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, s);
        let bits = |p: &ParamSet<f32>| p.iter_values().map(f32::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&s.params));
    }

    #[test]
    fn truncation_and_magic_detected() {
        let bytes = state().to_bytes().unwrap();
        let p = Path::new("c");
        for cut in [4, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                CheckpointState::from_bytes(&bytes[..cut], p),
                Err(Error::Corrupt { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(
            CheckpointState::from_bytes(&bad, p),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn version_mismatch_refused() {
        let mut bytes = state().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            CheckpointState::from_bytes(&bytes, Path::new("c")),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }
}
