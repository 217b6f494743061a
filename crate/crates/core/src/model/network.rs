use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::spec::{InputMode, ModelSpec};
use super::EmbeddingVector;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::nn::conv::ConvGeom;
use crate::nn::{gemm, lane_sum, lstm, norm, Mat, NamedArray, ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; items in a batch do not interact.
    Eval,
}

/// Identifies a frame across a batch: `(source, frame index)`.
pub type FrameKey = (usize, usize);

const PARAMS_PER_CONV: usize = 3;
const BUFFERS_PER_CONV: usize = 2;

/// Embedding network: per-step CNN features → LSTM → linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    geoms: Vec<ConvGeom>,
    /// Trainable arrays.
    pub params: ParamSet<T>,
    /// Normalization running statistics.
    pub buffers: ParamSet<T>,
}

/// CNN inputs plus, per sequence, the ordered input rows it steps through.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[n, channels, h, w]`
    pub input: Vec<T>,
    pub n: usize,
    pub channels: usize,
    pub size: (usize, usize),
    pub sequences: Vec<Vec<usize>>,
}

/// Assembles a [`Batch`], sharing CNN inputs that occur in several sequences.
pub struct BatchBuilder {
    mode: InputMode,
    size: (usize, usize),
    index: HashMap<(FrameKey, Option<FrameKey>), usize>,
    input: Vec<f32>,
    sequences: Vec<Vec<usize>>,
}

impl BatchBuilder {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            mode: spec.input_mode,
            size: spec.input_size,
            index: HashMap::new(),
            input: Vec::new(),
            sequences: Vec::new(),
        }
    }

    fn check(&self, img: &GrayImage) -> Result<()> {
        let (h, w) = self.size;
        if img.size() != (w, h) {
            return Err(Error::invalid(format!(
                "frame is {}x{} but the model expects {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn input_row(
        &mut self,
        first: (FrameKey, &GrayImage),
        second: Option<(FrameKey, &GrayImage)>,
    ) -> usize {
        let key = (first.0, second.map(|s| s.0));
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.index.len();
        self.input.extend_from_slice(first.1.pixels());
        if let Some((_, img)) = second {
            self.input.extend_from_slice(img.pixels());
        }
        self.index.insert(key, i);
        i
    }

    /// Adds one sequence; returns its position in the batch.
    ///
    /// Frames with equal keys must have equal content.
    pub fn push(&mut self, frames: &[(FrameKey, &GrayImage)]) -> Result<usize> {
        let min = self.mode.min_frames();
        if frames.len() < min {
            return Err(Error::invalid(format!(
                "sequence of {} frame(s) is too short; {:?} input needs at least {min}",
                frames.len(),
                self.mode
            )));
        }
        for (_, img) in frames {
            self.check(img)?;
        }
        let steps = match self.mode {
            InputMode::ImagePair => frames
                .windows(2)
                .map(|w| self.input_row(w[0], Some(w[1])))
                .collect(),
            InputMode::SingleImage => frames.iter().map(|&f| self.input_row(f, None)).collect(),
        };
        self.sequences.push(steps);
        Ok(self.sequences.len() - 1)
    }

    /// Adds a sequence whose frames are not shared with any other.
    pub fn push_unique(&mut self, frames: &[&GrayImage]) -> Result<usize> {
        let slot = usize::MAX - self.sequences.len();
        let keyed: Vec<(FrameKey, &GrayImage)> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| ((slot, i), *f))
            .collect();
        self.push(&keyed)
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.index.len()
    }

    pub fn finish<T: Real>(self) -> Batch<T> {
        let (h, w) = self.size;
        Batch {
            n: self.index.len(),
            input: self.input.iter().map(|&v| T::of(v as f64)).collect(),
            channels: self.mode.channels(),
            size: (h, w),
            sequences: self.sequences,
        }
    }
}

/// Everything one forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub mode: Mode,
    pub n: usize,
    /// Channel-major input of each conv layer.
    layer_inputs: Vec<Vec<T>>,
    pre_norm: Vec<Vec<T>>,
    stats: Vec<norm::NormStats<T>>,
    last_activation: Vec<T>,
    /// `[n, feature_dim]`
    pub features: Vec<T>,
    lstm: Vec<lstm::LstmCache<T>>,
    sequences: Vec<Vec<usize>>,
    /// `[sequences, head_dim]`
    pub embeddings: Vec<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn embedding(&self, i: usize, dim: usize) -> &[T] {
        &self.embeddings[i * dim..(i + 1) * dim]
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    /// Which rectified units are active, across all conv layers. Two passes
    /// with equal patterns lie on the same linear piece of every rectifier.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.layer_inputs[1..]
            .iter()
            .chain(std::iter::once(&self.last_activation))
            .flat_map(|a| a.iter().map(|&v| v > T::zero()))
            .collect()
    }

    /// Steps the recurrent unit took for sequence `i`.
    pub fn recurrent_steps(&self, i: usize) -> usize {
        self.lstm[i].steps
    }
}

impl<T: Real> Model<T> {
    /// Correctly shaped arrays: unit normalization scales, everything else zero.
    fn zeroed(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let geoms = spec.geometries()?;
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        for (l, g) in geoms.iter().enumerate() {
            params.push(NamedArray::zeros(
                format!("conv{l}.weight"),
                vec![g.cout, g.cin, g.kernel, g.kernel],
            ));
            params.push(NamedArray::filled(
                format!("conv{l}.bn.gamma"),
                vec![g.cout],
                T::one(),
            ));
            params.push(NamedArray::zeros(format!("conv{l}.bn.beta"), vec![g.cout]));
            buffers.push(NamedArray::zeros(
                format!("conv{l}.bn.running_mean"),
                vec![g.cout],
            ));
            buffers.push(NamedArray::filled(
                format!("conv{l}.bn.running_var"),
                vec![g.cout],
                T::one(),
            ));
        }
        let (f, h, d) = (spec.feature_dim(), spec.recurrent_hidden, spec.head_dim);
        params.push(NamedArray::zeros("lstm.w_ih", vec![4 * h, f]));
        params.push(NamedArray::zeros("lstm.w_hh", vec![4 * h, h]));
        params.push(NamedArray::zeros("lstm.bias", vec![4 * h]));
        params.push(NamedArray::zeros("head.weight", vec![d, h]));
        params.push(NamedArray::zeros("head.bias", vec![d]));
        Ok(Self {
            spec,
            geoms,
            params,
            buffers,
        })
    }

    /// Fresh weights: He-normal convolutions, unit-scale normalization,
    /// `U(±1/√hidden)` recurrent and head weights.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeroed(spec)?;
        let bound = 1.0 / (model.spec.recurrent_hidden as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("valid range");
        for (l, g) in model.geoms.iter().enumerate() {
            let normal =
                Normal::new(0.0, (2.0 / g.patch_len() as f64).sqrt()).expect("positive std");
            for v in &mut model.params.arrays[PARAMS_PER_CONV * l].data {
                *v = T::of(normal.sample(rng));
            }
        }
        let li = model.lstm_index();
        for a in &mut model.params.arrays[li..] {
            for v in &mut a.data {
                *v = T::of(uni.sample(rng));
            }
        }
        Ok(model)
    }

    /// Rebuilds a model from stored arrays, checking them against `spec`.
    pub fn from_parts(spec: ModelSpec, params: ParamSet<T>, buffers: ParamSet<T>) -> Result<Self> {
        let reference = Self::zeroed(spec)?;
        if !reference.params.same_layout(&params) || !reference.buffers.same_layout(&buffers) {
            return Err(Error::invalid(
                "stored arrays do not match the model spec's names and shapes",
            ));
        }
        Ok(Self {
            params,
            buffers,
            ..reference
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Same weights in another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            geoms: self.geoms.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    fn p(&self, i: usize) -> &[T] {
        &self.params.arrays[i].data
    }

    fn lstm_index(&self) -> usize {
        PARAMS_PER_CONV * self.geoms.len()
    }

    pub fn forward(&self, batch: &Batch<T>, mode: Mode) -> Result<ForwardPass<T>> {
        self.forward_impl(batch, mode, None)
    }

    /// Forward pass with every rectifier fixed to the on/off state in
    /// `pattern` (as returned by [`ForwardPass::activation_pattern`]) instead
    /// of the sign of its input. Near a reference pass this evaluates the
    /// smooth piece of the network that backpropagation differentiates, which
    /// is what finite-difference gradient checks need.
    pub fn forward_on_piece(
        &self,
        batch: &Batch<T>,
        mode: Mode,
        pattern: &[bool],
    ) -> Result<ForwardPass<T>> {
        self.forward_impl(batch, mode, Some(pattern))
    }

    fn forward_impl(
        &self,
        batch: &Batch<T>,
        mode: Mode,
        pattern: Option<&[bool]>,
    ) -> Result<ForwardPass<T>> {
        let (h, w) = self.spec.input_size;
        if batch.size != (h, w) || batch.channels != self.spec.input_mode.channels() {
            return Err(Error::invalid(
                "batch does not match the model's input shape",
            ));
        }
        let n = batch.n;
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        // sample-major input → channel-major
        let cin = batch.channels;
        let plane = h * w;
        let mut x = vec![T::zero(); cin * n * plane];
        for s in 0..n {
            for c in 0..cin {
                let src = &batch.input[(s * cin + c) * plane..][..plane];
                x[(c * n + s) * plane..][..plane].copy_from_slice(src);
            }
        }

        if let Some(p) = pattern {
            let units: usize = self.geoms.iter().map(|g| g.cout * n * g.out_plane()).sum();
            if p.len() != units {
                return Err(Error::invalid(format!(
                    "activation pattern has {} entries, the network has {units} units",
                    p.len()
                )));
            }
        }
        let mut offset = 0;
        let mut layer_inputs = Vec::with_capacity(self.geoms.len());
        let mut pre_norm = Vec::with_capacity(self.geoms.len());
        let mut stats = Vec::with_capacity(self.geoms.len());
        for (l, g) in self.geoms.iter().enumerate() {
            let mut z = vec![T::zero(); g.cout * n * g.out_plane()];
            g.forward(self.p(PARAMS_PER_CONV * l), &x, n, &mut z);
            let gamma = self.p(PARAMS_PER_CONV * l + 1);
            let beta = self.p(PARAMS_PER_CONV * l + 2);
            let mut a = vec![T::zero(); z.len()];
            let st = match mode {
                Mode::Train => norm::forward_train(&z, g.cout, gamma, beta, &mut a),
                Mode::Eval => norm::forward_eval(
                    &z,
                    g.cout,
                    gamma,
                    beta,
                    &self.buffers.arrays[BUFFERS_PER_CONV * l].data,
                    &self.buffers.arrays[BUFFERS_PER_CONV * l + 1].data,
                    &mut a,
                ),
            };
            match pattern {
                None => {
                    for v in &mut a {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                Some(p) => {
                    for (v, &on) in a.iter_mut().zip(&p[offset..]) {
                        if !on {
                            *v = T::zero();
                        }
                    }
                }
            }
            offset += a.len();
            layer_inputs.push(std::mem::replace(&mut x, a));
            pre_norm.push(z);
            stats.push(st);
        }
        let last_activation = x;

        let g = self.geoms.last().expect("validated non-empty");
        let (f, p) = (g.cout, g.out_plane());
        let mut features = vec![T::zero(); n * f];
        let inv_p = T::of(1.0 / p as f64);
        for c in 0..f {
            for s in 0..n {
                let row = &last_activation[(c * n + s) * p..][..p];
                features[s * f + c] = lane_sum(row) * inv_p;
            }
        }

        let li = self.lstm_index();
        let (hid, d) = (self.spec.recurrent_hidden, self.spec.head_dim);
        let seqs: Vec<Vec<T>> = batch
            .sequences
            .iter()
            .map(|steps| {
                let mut xs = Vec::with_capacity(steps.len() * f);
                for &r in steps {
                    xs.extend_from_slice(&features[r * f..(r + 1) * f]);
                }
                xs
            })
            .collect();
        let caches = lstm::forward_many(self.p(li), self.p(li + 1), self.p(li + 2), seqs, f, hid);
        let ns = caches.len();
        let mut last = Vec::with_capacity(ns * hid);
        for c in &caches {
            last.extend_from_slice(c.last_hidden());
        }
        let mut embeddings = Vec::with_capacity(ns * d);
        for _ in 0..ns {
            embeddings.extend_from_slice(self.p(li + 4));
        }
        gemm(
            T::one(),
            Mat::new(&last, ns, hid),
            Mat::new(self.p(li + 3), d, hid).t(),
            T::one(),
            &mut embeddings,
            d,
        );
        Ok(ForwardPass {
            mode,
            n,
            layer_inputs,
            pre_norm,
            stats,
            last_activation,
            features,
            lstm: caches,
            sequences: batch.sequences.clone(),
            embeddings,
        })
    }

    /// Folds a training pass's batch statistics into the running estimates.
    pub fn commit_running_stats(&mut self, pass: &ForwardPass<T>) {
        if pass.mode != Mode::Train {
            return;
        }
        for (l, st) in pass.stats.iter().enumerate() {
            let (m, v) = self.buffers.arrays.split_at_mut(BUFFERS_PER_CONV * l + 1);
            norm::update_running(st, &mut m[BUFFERS_PER_CONV * l].data, &mut v[0].data);
        }
    }

    /// Backpropagates `d_emb` (`[sequences, head_dim]`), accumulating into
    /// `grads`. Returns the sample-major input gradient when asked.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        d_emb: &[T],
        grads: &mut ParamSet<T>,
        input_grad: bool,
    ) -> Option<Vec<T>> {
        let li = self.lstm_index();
        let (f, hid, d) = (
            self.spec.feature_dim(),
            self.spec.recurrent_hidden,
            self.spec.head_dim,
        );
        let ns = pass.lstm.len();
        let mut last = Vec::with_capacity(ns * hid);
        for c in &pass.lstm {
            last.extend_from_slice(c.last_hidden());
        }
        let d_emb = &d_emb[..ns * d];
        {
            let (_, rest) = grads.arrays.split_at_mut(li + 3);
            let (hw, hb) = rest.split_at_mut(1);
            gemm(
                T::one(),
                Mat::new(d_emb, ns, d).t(),
                Mat::new(&last, ns, hid),
                T::one(),
                &mut hw[0].data,
                hid,
            );
            for row in d_emb.chunks_exact(d) {
                for (b, &g) in hb[0].data.iter_mut().zip(row) {
                    *b += g;
                }
            }
        }
        let mut dh = vec![T::zero(); ns * hid];
        gemm(
            T::one(),
            Mat::new(d_emb, ns, d),
            Mat::new(self.p(li + 3), d, hid),
            T::zero(),
            &mut dh,
            hid,
        );
        let refs: Vec<&lstm::LstmCache<T>> = pass.lstm.iter().collect();
        let dxs = {
            let (_, rest) = grads.arrays.split_at_mut(li);
            let (wi, rest) = rest.split_at_mut(1);
            let (wh, rest) = rest.split_at_mut(1);
            lstm::backward_many(
                &refs,
                self.p(li),
                self.p(li + 1),
                &dh,
                &mut wi[0].data,
                &mut wh[0].data,
                &mut rest[0].data,
            )
        };
        let mut d_feat = vec![T::zero(); pass.n * f];
        let mut t_off = 0;
        for steps in &pass.sequences {
            for &r in steps {
                for (a, &b) in d_feat[r * f..(r + 1) * f]
                    .iter_mut()
                    .zip(&dxs[t_off * f..(t_off + 1) * f])
                {
                    *a += b;
                }
                t_off += 1;
            }
        }
        self.backward_features(pass, &d_feat, grads, input_grad)
    }

    /// Backpropagates a gradient on the pooled CNN features (`[n, feature_dim]`).
    pub fn backward_features(
        &self,
        pass: &ForwardPass<T>,
        d_feat: &[T],
        grads: &mut ParamSet<T>,
        input_grad: bool,
    ) -> Option<Vec<T>> {
        let n = pass.n;
        let last = self.geoms.last().expect("validated non-empty");
        let (f, p) = (last.cout, last.out_plane());
        let inv_p = T::of(1.0 / p as f64);
        let mut d_act = vec![T::zero(); f * n * p];
        for c in 0..f {
            for s in 0..n {
                let g = d_feat[s * f + c] * inv_p;
                d_act[(c * n + s) * p..][..p].fill(g);
            }
        }
        let mut result = None;
        for l in (0..self.geoms.len()).rev() {
            let g = &self.geoms[l];
            let act = if l + 1 < self.geoms.len() {
                &pass.layer_inputs[l + 1]
            } else {
                &pass.last_activation
            };
            for (dv, &a) in d_act.iter_mut().zip(act) {
                if a <= T::zero() {
                    *dv = T::zero();
                }
            }
            let mut dz = vec![T::zero(); d_act.len()];
            {
                let base = PARAMS_PER_CONV * l;
                let (_, rest) = grads.arrays.split_at_mut(base + 1);
                let (dg, rest) = rest.split_at_mut(1);
                norm::backward(
                    &pass.pre_norm[l],
                    &d_act,
                    g.cout,
                    self.p(base + 1),
                    &pass.stats[l],
                    &mut dg[0].data,
                    &mut rest[0].data,
                    &mut dz,
                );
            }
            let need_dx = l > 0 || input_grad;
            let mut dx = need_dx.then(|| vec![T::zero(); g.cin * n * g.in_plane()]);
            g.backward(
                self.p(PARAMS_PER_CONV * l),
                &pass.layer_inputs[l],
                &dz,
                n,
                &mut grads.arrays[PARAMS_PER_CONV * l].data,
                dx.as_deref_mut(),
            );
            match dx {
                Some(dx) if l > 0 => d_act = dx,
                Some(dx) => {
                    // channel-major → sample-major
                    let (cin, plane) = (g.cin, g.in_plane());
                    let mut out = vec![T::zero(); dx.len()];
                    for c in 0..cin {
                        for s in 0..n {
                            out[(s * cin + c) * plane..][..plane]
                                .copy_from_slice(&dx[(c * n + s) * plane..][..plane]);
                        }
                    }
                    result = Some(out);
                }
                None => {}
            }
        }
        result
    }

    /// Embeds each sequence in evaluation mode, `chunk` sequences per pass.
    pub fn embed_all(
        &self,
        sequences: &[Vec<&GrayImage>],
        chunk: usize,
    ) -> Result<Vec<EmbeddingVector>> {
        let d = self.spec.head_dim;
        let mut out = Vec::with_capacity(sequences.len());
        for part in sequences.chunks(chunk.max(1)) {
            let mut b = BatchBuilder::new(&self.spec);
            for s in part {
                b.push_unique(s)?;
            }
            let pass = self.forward(&b.finish(), Mode::Eval)?;
            for i in 0..part.len() {
                out.push(EmbeddingVector::from_reals(pass.embedding(i, d)));
            }
        }
        Ok(out)
    }

    /// Embeds one sequence in evaluation mode.
    pub fn embed(&self, frames: &[&GrayImage]) -> Result<EmbeddingVector> {
        let mut v = self.embed_all(&[frames.to_vec()], 1)?;
        Ok(v.pop().expect("one sequence in, one embedding out"))
    }
}
