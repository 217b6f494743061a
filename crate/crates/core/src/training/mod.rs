//! Siamese hinge-loss training over recomposition tuples.

mod loss;
mod optim;

pub use loss::{
    cosine_distance, distance, distance_with_grad, embedding_loss, euclidean_distance, hinge,
    pair_loss, CategoryTotal, Distance, LossBreakdown, PairCategory, TuplePairs,
};
pub use optim::{adam_step, learning_rate, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

use std::borrow::Cow;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FrameSequence, GrayImage};
use crate::model::{
    save_checkpoint, BatchBuilder, CheckpointState, EmbeddingVector, Mode, Model, ModelSpec,
    OptimizerState,
};
use crate::nn::Real;
use crate::recomposer::{
    enumerate_pairs, sample_indices, select_pairs, RecompositionTuple, Relation, SamplerConfig,
    TupleIndices,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margin: f64,
    pub distance: Distance,
    pub lr: f64,
    pub decay_epochs: u64,
    pub decay_factor: f64,
    pub batch_sequences: usize,
    pub epochs: u64,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub validation_tuples: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            distance: Distance::Cosine,
            lr: 1e-2,
            decay_epochs: 30,
            decay_factor: 0.1,
            batch_sequences: 50,
            epochs: 10,
            seed: 0,
            holdout_fraction: 0.1,
            validation_tuples: 500,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("train.margin must be positive");
        }
        // zero is accepted so a run can be checked for parameter stability
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be non-negative and finite");
        }
        if self.decay_epochs == 0 {
            return bad("train.decay_epochs must be at least 1");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad("train.decay_factor must be positive");
        }
        if self.batch_sequences == 0 {
            return bad("train.batch_sequences must be at least 1");
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("train.holdout_fraction must be in [0, 1)");
        }
        if self.threads == 0 {
            return bad("train.threads must be at least 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        learning_rate(self.lr, self.decay_factor, self.decay_epochs, epoch)
    }
}

/// Sequences to train on, with optional shot boundaries per sequence.
pub struct TrainingSet<'a> {
    pub sequences: Vec<&'a dyn FrameSequence>,
    /// Empty, or one cut list per sequence.
    pub cuts: Vec<Vec<usize>>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(sequences: Vec<&'a dyn FrameSequence>) -> Self {
        Self {
            sequences,
            cuts: Vec::new(),
        }
    }

    pub fn with_cuts(mut self, cuts: Vec<Vec<usize>>) -> Result<Self> {
        if cuts.len() != self.sequences.len() {
            return Err(Error::invalid(format!(
                "{} cut lists for {} sequences",
                cuts.len(),
                self.sequences.len()
            )));
        }
        self.cuts = cuts;
        Ok(self)
    }

    fn cuts_of(&self, i: usize) -> &[usize] {
        self.cuts.get(i).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Source sequence indices used for optimization and for validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Deterministic split reserving `fraction` of the sequences (at least one
/// when there are two or more and the fraction is positive).
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> DataSplit {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let mut k = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut holdout = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    DataSplit { train, holdout }
}

const SPLIT_STREAM: u64 = u64::MAX;
const VALIDATION_STREAM: u64 = u64::MAX - 1;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub lr: f64,
    /// Mean pair loss over the epoch.
    pub loss: f64,
    pub loss_total: f64,
    pub pairs: usize,
    pub breakdown: LossBreakdown,
    pub val_equiv: Option<f64>,
    pub val_ineq: Option<f64>,
    pub val_gap: Option<f64>,
    pub skipped_sequences: usize,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    /// The log line without wall-clock time, for reproducibility comparisons.
    pub fn without_time(&self) -> Self {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from this state; epochs already completed are skipped.
    pub resume: Option<CheckpointState>,
    /// Written after every epoch; a divergence writes `<stem>.diverged.ckpt`
    /// next to it.
    pub checkpoint_path: Option<PathBuf>,
    /// Receives one JSON line per epoch.
    pub metrics_log: Option<&'a mut dyn Write>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

pub struct TrainOutcome {
    pub state: CheckpointState,
    pub metrics: Vec<EpochMetrics>,
    pub split: DataSplit,
}

/// Serializes a ChaCha stream position: seed, stream id, word position.
pub fn rng_state_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn rng_from_state_bytes(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 56 {
        return Err(Error::invalid(format!(
            "rng state has {} bytes, expected 56",
            bytes.len()
        )));
    }
    let seed: [u8; 32] = bytes[..32].try_into().expect("length checked");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(
        bytes[32..40].try_into().expect("length checked"),
    ));
    rng.set_word_pos(u128::from_le_bytes(
        bytes[40..56].try_into().expect("length checked"),
    ));
    Ok(rng)
}

/// A minibatch ready for the network: inputs plus pair labels per tuple.
struct TupleBatch {
    batch: crate::model::Batch<f32>,
    tuples: Vec<TuplePairs>,
}

/// Renders every frame a tuple list needs, in parallel when `threads > 1`.
fn render_frames<'a>(
    jobs: &[(&'a dyn FrameSequence, usize)],
    threads: usize,
) -> Result<Vec<Cow<'a, GrayImage>>> {
    if threads <= 1 || jobs.len() < 2 * threads {
        return jobs.iter().map(|(s, i)| s.frame(*i)).collect();
    }
    let per = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(per)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|(s, i)| s.frame(*i))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(jobs.len());
        for h in handles {
            out.extend(h.join().expect("frame rendering thread panicked")?);
        }
        Ok(out)
    })
}

fn assemble(
    spec: &ModelSpec,
    items: &[(
        &dyn FrameSequence,
        TupleIndices,
        Vec<crate::recomposer::PairLabel>,
    )],
    threads: usize,
) -> Result<TupleBatch> {
    let mut jobs = Vec::new();
    let mut frame_pos = Vec::with_capacity(items.len());
    for (seq, idx, _) in items {
        let mut needed: Vec<usize> = idx.members.iter().flatten().copied().collect();
        needed.sort_unstable();
        needed.dedup();
        let start = jobs.len();
        jobs.extend(needed.iter().map(|&i| (*seq, i)));
        frame_pos.push((start, needed));
    }
    let frames = render_frames(&jobs, threads)?;
    let mut b = BatchBuilder::new(spec);
    let mut tuples = Vec::with_capacity(items.len());
    for (slot, ((_, idx, pairs), (start, needed))) in items.iter().zip(&frame_pos).enumerate() {
        let mut rows = [0usize; 6];
        for (m, row) in rows.iter_mut().enumerate() {
            let keyed: Vec<_> = idx.members[m]
                .iter()
                .map(|&fi| {
                    let k = needed.binary_search(&fi).expect("frame was rendered");
                    ((slot, fi), frames[start + k].as_ref())
                })
                .collect();
            *row = b.push(&keyed)?;
        }
        tuples.push(TuplePairs {
            rows,
            pairs: pairs.clone(),
        });
    }
    Ok(TupleBatch {
        batch: b.finish(),
        tuples,
    })
}

/// Mean pair loss of a set of tuples under `model`.
///
/// Frames shared between members of one tuple are encoded once. In
/// [`Mode::Train`] normalization uses the statistics of the whole batch.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    tuples: &[RecompositionTuple],
    labels: &[Vec<crate::recomposer::PairLabel>],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(f64, LossBreakdown)> {
    if tuples.is_empty() {
        return Err(Error::invalid("batch_loss needs at least one tuple"));
    }
    if labels.len() != tuples.len() {
        return Err(Error::invalid("one label list per tuple is required"));
    }
    let mut b = BatchBuilder::new(model.spec());
    let mut tp = Vec::with_capacity(tuples.len());
    for (slot, (t, pairs)) in tuples.iter().zip(labels).enumerate() {
        let mut rows = [0usize; 6];
        for (m, row) in rows.iter_mut().enumerate() {
            let member = &t.members[m];
            let keyed: Vec<_> = member
                .source_indices
                .iter()
                .zip(&member.frames)
                .map(|(&fi, f)| ((slot, fi), f))
                .collect();
            *row = b.push(&keyed)?;
        }
        tp.push(TuplePairs {
            rows,
            pairs: pairs.clone(),
        });
    }
    let pass = model.forward(&b.finish(), mode)?;
    let (mean, breakdown, _) = embedding_loss(
        &pass.embeddings,
        model.spec().head_dim,
        &tp,
        cfg.margin,
        cfg.distance,
    )?;
    Ok((mean, breakdown))
}

/// Mean positive and negative distances over held-out tuples.
fn validate(
    model: &Model<f32>,
    data: &TrainingSet<'_>,
    tuples: &[(usize, TupleIndices)],
    cfg: &TrainConfig,
) -> Result<Option<(f64, f64)>> {
    if tuples.is_empty() {
        return Ok(None);
    }
    let labels = enumerate_pairs();
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for chunk in tuples.chunks(cfg.batch_sequences.max(1)) {
        let items: Vec<_> = chunk
            .iter()
            .map(|(s, idx)| (data.sequences[*s], idx.clone(), labels.clone()))
            .collect();
        let tb = assemble(model.spec(), &items, cfg.threads)?;
        let pass = model.forward(&tb.batch, Mode::Eval)?;
        let d = model.spec().head_dim;
        for t in &tb.tuples {
            for p in &t.pairs {
                let dist = distance(
                    EmbeddingVector::from_reals(pass.embedding(t.rows[p.a.index()], d)).values(),
                    EmbeddingVector::from_reals(pass.embedding(t.rows[p.b.index()], d)).values(),
                    cfg.distance,
                )?;
                match p.relation {
                    Relation::Positive => {
                        pos += dist;
                        npos += 1;
                    }
                    Relation::Negative => {
                        neg += dist;
                        nneg += 1;
                    }
                }
            }
        }
    }
    Ok(Some((pos / npos.max(1) as f64, neg / nneg.max(1) as f64)))
}

fn diverged_path(p: &Path) -> PathBuf {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    p.with_file_name(format!("{stem}.diverged.ckpt"))
}

/// Trains `spec` on `data` with Adam and the step-decay schedule.
///
/// Everything random — initialization, the holdout split, data order, tuple
/// sampling — derives from `cfg.seed` and `sampler.seed`, so two runs with
/// equal inputs produce identical metrics and parameters regardless of
/// `cfg.threads`.
pub fn train(
    data: &TrainingSet<'_>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sampler.validate()?;
    spec.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !data.cuts.is_empty() && data.cuts.len() != data.sequences.len() {
        return Err(Error::invalid("cut lists do not match the sequences"));
    }
    let split = split_holdout(data.sequences.len(), cfg.holdout_fraction, cfg.seed);
    if split.train.is_empty() {
        return Err(Error::invalid(
            "no sequences left for training after the holdout split",
        ));
    }

    let (mut model, mut opt, mut rng, start_epoch) = match opts.resume.take() {
        Some(state) => {
            if &state.spec != spec {
                return Err(Error::invalid(
                    "checkpoint model spec differs from the requested spec",
                ));
            }
            let rng = rng_from_state_bytes(&state.rng_state)?;
            (state.model()?, state.optimizer.clone(), rng, state.epoch)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(sampler.seed);
            let model = Model::<f32>::new(spec.clone(), &mut rng)?;
            let opt = OptimizerState::for_params(&model.params);
            (model, opt, rng, 0)
        }
    };

    // fixed validation tuples, identical every epoch
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(VALIDATION_STREAM);
    let mut val_tuples = Vec::new();
    if !split.holdout.is_empty() {
        let mut misses = 0;
        let mut k = 0usize;
        while val_tuples.len() < cfg.validation_tuples && misses < split.holdout.len() {
            let s = split.holdout[k % split.holdout.len()];
            k += 1;
            match sample_indices(
                data.sequences[s].len(),
                data.cuts_of(s),
                sampler,
                &mut val_rng,
            ) {
                Some(idx) => {
                    misses = 0;
                    val_tuples.push((s, idx));
                }
                None => misses += 1,
            }
        }
    }

    let mut metrics = Vec::new();
    let started = Instant::now();
    let mut order = split.train.clone();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.clone_from(&split.train);
        order.shuffle(&mut rng);
        let mut breakdown = LossBreakdown::default();
        let mut skipped = 0usize;
        for chunk in order.chunks(cfg.batch_sequences) {
            let mut items = Vec::with_capacity(chunk.len());
            for &s in chunk {
                let seq = data.sequences[s];
                match sample_indices(seq.len(), data.cuts_of(s), sampler, &mut rng) {
                    Some(idx) => {
                        let pairs = select_pairs(sampler.negatives_per_tuple, &mut rng);
                        items.push((seq, idx, pairs));
                    }
                    None => skipped += 1,
                }
            }
            if items.is_empty() {
                continue;
            }
            let tb = assemble(spec, &items, cfg.threads)?;
            let pass = model.forward(&tb.batch, Mode::Train)?;
            let (mean, b, d_emb) = embedding_loss(
                &pass.embeddings,
                spec.head_dim,
                &tb.tuples,
                cfg.margin,
                cfg.distance,
            )
            .or_else(|e| match e {
                Error::UndefinedDistance => Ok((f64::NAN, LossBreakdown::default(), vec![])),
                e => Err(e),
            })?;
            let mut grads = model.params.zeros_like();
            if mean.is_finite() {
                model.backward(&pass, &d_emb, &mut grads, false);
            }
            if !mean.is_finite() || !grads.all_finite() {
                let ckpt = match &opts.checkpoint_path {
                    Some(p) => {
                        let path = diverged_path(p);
                        let state = CheckpointState::from_model(
                            &model,
                            opt.clone(),
                            epoch,
                            rng_state_bytes(&rng),
                        );
                        save_checkpoint(&state, &path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(Error::Divergence {
                    epoch,
                    loss: mean,
                    checkpoint: ckpt,
                });
            }
            adam_step(&mut model.params, &grads, &mut opt, lr)?;
            model.commit_running_stats(&pass);
            breakdown.merge(&b);
        }
        let val = validate(&model, data, &val_tuples, cfg)?;
        let m = EpochMetrics {
            epoch,
            lr,
            loss: breakdown.mean(),
            loss_total: breakdown.total(),
            pairs: breakdown.count(),
            breakdown,
            val_equiv: val.map(|v| v.0),
            val_ineq: val.map(|v| v.1),
            val_gap: val.map(|v| v.1 - v.0),
            skipped_sequences: skipped,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if m.pairs == 0 {
            return Err(Error::invalid(
                "no sequence is long enough for the sampler; nothing to train on",
            ));
        }
        if let Some(w) = opts.metrics_log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            writeln!(w).map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
            w.flush()
                .map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
        }
        if let Some(f) = opts.on_epoch.as_deref_mut() {
            f(&m);
        }
        if let Some(p) = &opts.checkpoint_path {
            let state =
                CheckpointState::from_model(&model, opt.clone(), epoch + 1, rng_state_bytes(&rng));
            save_checkpoint(&state, p)?;
        }
        metrics.push(m);
    }
    let state = CheckpointState::from_model(
        &model,
        opt,
        cfg.epochs.max(start_epoch),
        rng_state_bytes(&rng),
    );
    Ok(TrainOutcome {
        state,
        metrics,
        split,
    })
}

/// Default pair labels for every member, handy for callers building tuples.
pub fn default_labels(n: usize) -> Vec<Vec<crate::recomposer::PairLabel>> {
    vec![enumerate_pairs(); n]
}
