//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recomp::imaging::{GrayImage, ImageSequence};
use recomp::model::{Batch, BatchBuilder, InputMode, Mode, Model, ModelSpec};
use recomp::recomposer::{
    enumerate_pairs, sample_indices, sample_tuple, MemberId, SamplerConfig, SamplingConfig,
    TupleIndices,
};
use recomp::training::{embedding_loss, Distance, TuplePairs};

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn strictly_decreasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] > w[1])
}

/// A loop leaves its start, moves monotonically to one turning frame on a
/// single side, and returns monotonically to the start.
fn is_loop(v: &[usize]) -> bool {
    let (s, e) = (v[0], v[v.len() - 1]);
    if s != e || v.len() < 3 {
        return false;
    }
    let side: Vec<isize> = v.iter().map(|&x| x as isize - s as isize).collect();
    let interior = &side[1..side.len() - 1];
    let up = interior.iter().all(|&d| d > 0);
    let down = interior.iter().all(|&d| d < 0);
    if !(up || down) {
        return false;
    }
    let mag: Vec<isize> = side.iter().map(|d| d.abs()).collect();
    let peak = (0..mag.len()).max_by_key(|&i| mag[i]).unwrap();
    mag[..=peak].windows(2).all(|w| w[0] < w[1]) && mag[peak..].windows(2).all(|w| w[0] > w[1])
}

pub fn check_tuple(
    t: &TupleIndices,
    seq_len: usize,
    cuts: &[usize],
    cfg: &SamplerConfig,
) -> Result<(), String> {
    let m = |id: MemberId| t.member(id);
    for id in MemberId::ALL {
        let v = m(id);
        if v.len() < cfg.min_len || v.len() > cfg.max_len {
            return Err(format!("{id:?} has length {}", v.len()));
        }
        if v.iter().any(|&i| i >= seq_len) {
            return Err(format!("{id:?} leaves the sequence"));
        }
    }
    let (f1, f2, b1, b2, i1, i2) = (
        m(MemberId::F1),
        m(MemberId::F2),
        m(MemberId::B1),
        m(MemberId::B2),
        m(MemberId::I1),
        m(MemberId::I2),
    );
    if !(strictly_increasing(f1) && strictly_increasing(f2)) {
        return Err("forward members must increase".into());
    }
    if !(strictly_decreasing(b1) && strictly_decreasing(b2)) {
        return Err("backward members must decrease".into());
    }
    let ends = |v: &[usize]| (v[0], v[v.len() - 1]);
    if ends(f1) != ends(f2) || f1 == f2 {
        return Err("forward members must share endpoints and differ".into());
    }
    if ends(b1) != ends(b2) || b1 == b2 {
        return Err("backward members must share endpoints and differ".into());
    }
    if !(is_loop(i1) && is_loop(i2)) || i1[0] != i2[0] {
        return Err("identity members must be loops from one start".into());
    }
    // the frame every member passes through, by layout
    let shared = match t.config {
        SamplingConfig::SameStartSameSub => {
            if ends(b1) != (f1[f1.len() - 1], f1[0]) {
                return Err("backward must retrace the forward window".into());
            }
            if i1[0] != f1[0] {
                return Err("loops start where forward starts".into());
            }
            f1[0]
        }
        SamplingConfig::SameStartAdjacent => {
            if f1[0] != b1[0] || i1[0] != f1[0] {
                return Err("all members start at the shared boundary".into());
            }
            f1[0]
        }
        SamplingConfig::DiffStartAdjacent => {
            let c = f1[f1.len() - 1];
            if b1[b1.len() - 1] != c || i1[0] != c {
                return Err("forward and backward meet at the loop start".into());
            }
            c
        }
    };
    for id in MemberId::ALL {
        if !m(id).contains(&shared) {
            return Err(format!("{id:?} misses the shared frame {shared}"));
        }
    }
    let (lo, hi) = t.span();
    if cuts.iter().any(|&c| c >= lo && c < hi) {
        return Err(format!("a cut falls inside the span {lo}..={hi}"));
    }
    if !cfg.configs_enabled.contains(&t.config) {
        return Err(format!("{:?} is not enabled", t.config));
    }
    // reversing a forward member is a valid backward traversal of its window
    let rev: Vec<usize> = f1.iter().rev().copied().collect();
    if !strictly_decreasing(&rev) || ends(&rev) != (f1[f1.len() - 1], f1[0]) {
        return Err("reversed forward member is not backward".into());
    }
    Ok(())
}

/// Draws `n` tuples under random sampler settings, sequence lengths and cuts,
/// checking each against [`check_tuple`]. Returns how often each sampling
/// configuration was drawn.
pub fn fuzz_sampler(n: usize, seed: u64) -> Result<HashMap<SamplingConfig, usize>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashMap<SamplingConfig, usize> = HashMap::new();
    let mut sampled = 0usize;
    let mut attempts = 0usize;
    while sampled < n {
        attempts += 1;
        let min_len = rng.random_range(3..=5);
        let max_len = rng.random_range(min_len..=7);
        let mut configs: Vec<SamplingConfig> = SamplingConfig::ALL
            .into_iter()
            .filter(|_| rng.random_bool(0.7))
            .collect();
        if configs.is_empty() {
            configs.push(SamplingConfig::ALL[rng.random_range(0..3)]);
        }
        let cfg = SamplerConfig {
            min_len,
            max_len,
            configs_enabled: configs,
            ..SamplerConfig::default()
        };
        let seq_len = rng.random_range(cfg.min_sequence_len()..=40);
        let n_cuts = if rng.random_bool(0.3) {
            rng.random_range(1..=3)
        } else {
            0
        };
        let cuts: Vec<usize> = (0..n_cuts)
            .map(|_| rng.random_range(0..seq_len - 1))
            .collect();
        match sample_indices(seq_len, &cuts, &cfg, &mut rng) {
            Some(t) => {
                check_tuple(&t, seq_len, &cuts, &cfg).map_err(|e| {
                    format!("seq_len {seq_len}, cuts {cuts:?}, cfg {cfg:?}: {e}\n{t:?}")
                })?;
                *seen.entry(t.config).or_default() += 1;
                sampled += 1;
            }
            None if cuts.is_empty() => {
                return Err(format!("uncut sequence of length {seq_len} rejected"))
            }
            None => {}
        }
    }
    if attempts >= 2 * sampled {
        return Err(format!("{attempts} attempts for {sampled} tuples"));
    }
    Ok(seen)
}

pub fn smooth_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    let (cx, cy) = (
        rng.random_range(0.0..w as f64),
        rng.random_range(0.0..h as f64),
    );
    let s = rng.random_range(1.5..3.0);
    GrayImage::from_fn(w, h, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        ((-d2 / (2.0 * s * s)).exp() * 0.9 + 0.05) as f32
    })
    .unwrap()
}

pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, w: usize, h: usize) -> ImageSequence {
    let frames = (0..len).map(|_| smooth_frame(rng, w, h)).collect();
    ImageSequence::from_frames(frames, "rand").unwrap()
}

/// A batch of `n` tuples plus the row/label structure of their pairs.
pub fn tuple_batch(
    spec: &ModelSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Batch<f64>, Vec<TuplePairs>) {
    let (h, w) = spec.input_size;
    let cfg = SamplerConfig::default();
    let mut b = BatchBuilder::new(spec);
    let mut tuples = Vec::new();
    for slot in 0..n {
        let seq = random_sequence(rng, cfg.min_sequence_len() + 2, w, h);
        let t = sample_tuple(&seq, &[], &cfg, rng).unwrap().unwrap();
        let mut rows = [0; 6];
        for (m, row) in rows.iter_mut().enumerate() {
            let mem = &t.members[m];
            let keyed: Vec<_> = mem
                .source_indices
                .iter()
                .zip(&mem.frames)
                .map(|(&i, f)| ((slot, i), f))
                .collect();
            *row = b.push(&keyed).unwrap();
        }
        tuples.push(TuplePairs {
            rows,
            pairs: enumerate_pairs(),
        });
    }
    (b.finish(), tuples)
}

/// Loss on the smooth piece of the network selected by `pattern`.
fn loss(model: &Model<f64>, batch: &Batch<f64>, tuples: &[TuplePairs], pattern: &[bool]) -> f64 {
    let pass = model.forward_on_piece(batch, Mode::Train, pattern).unwrap();
    embedding_loss(
        &pass.embeddings,
        model.spec().head_dim,
        tuples,
        0.5,
        Distance::Cosine,
    )
    .unwrap()
    .0
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub const STEP: f64 = 1e-3;

/// Central differences at `STEP`, taken with every rectifier held in its
/// state at the unperturbed point: a quotient straddling a ReLU kink would
/// otherwise average two linear pieces, which no gradient describes.
/// Returns the relative error of every parameter tensor, by name.
pub fn parameter_gradient_errors(input_mode: InputMode, seed: u64) -> Vec<(String, f64)> {
    let spec = ModelSpec::miniature(input_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(spec.clone(), &mut rng).unwrap();
    let (batch, tuples) = tuple_batch(&spec, 3, &mut rng);

    let pass = model.forward(&batch, Mode::Train).unwrap();
    let piece = pass.activation_pattern();
    let (base, _, d_emb) = embedding_loss(
        &pass.embeddings,
        spec.head_dim,
        &tuples,
        0.5,
        Distance::Cosine,
    )
    .unwrap();
    assert_eq!(loss(&model, &batch, &tuples, &piece), base);
    let mut grads = model.params.zeros_like();
    model.backward(&pass, &d_emb, &mut grads, false);

    let mut errors = Vec::new();
    for (k, analytic) in grads.arrays.iter().enumerate() {
        let numeric: Vec<f64> = (0..analytic.data.len())
            .map(|j| {
                let mut m = model.clone();
                m.params.arrays[k].data[j] += STEP;
                let up = loss(&m, &batch, &tuples, &piece);
                m.params.arrays[k].data[j] -= 2.0 * STEP;
                let down = loss(&m, &batch, &tuples, &piece);
                (up - down) / (2.0 * STEP)
            })
            .collect();
        errors.push((
            analytic.name.clone(),
            relative_error(&analytic.data, &numeric),
        ));
    }
    errors
}

/// Relative error of the input gradient of the squared embedding norm,
/// checked the same way as the parameter gradients.
pub fn input_gradient_error(seed: u64) -> f64 {
    let spec = ModelSpec::miniature(InputMode::ImagePair);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(spec.clone(), &mut rng).unwrap();
    let frames: Vec<GrayImage> = (0..4).map(|_| smooth_frame(&mut rng, 8, 8)).collect();
    let refs: Vec<&GrayImage> = frames.iter().collect();
    let mut b = BatchBuilder::new(&spec);
    b.push_unique(&refs).unwrap();
    let batch: Batch<f64> = b.finish();
    let pass = model.forward(&batch, Mode::Eval).unwrap();
    let piece = pass.activation_pattern();
    let sq_norm = |batch: &Batch<f64>| -> f64 {
        let p = model.forward_on_piece(batch, Mode::Eval, &piece).unwrap();
        p.embeddings.iter().map(|v| v * v).sum()
    };
    let d_emb: Vec<f64> = pass.embeddings.iter().map(|v| 2.0 * v).collect();
    let mut grads = model.params.zeros_like();
    let analytic = model.backward(&pass, &d_emb, &mut grads, true).unwrap();
    assert_eq!(analytic.len(), batch.input.len());
    let numeric: Vec<f64> = (0..batch.input.len())
        .map(|j| {
            let mut p = batch.clone();
            p.input[j] += STEP;
            let up = sq_norm(&p);
            p.input[j] -= 2.0 * STEP;
            (up - sq_norm(&p)) / (2.0 * STEP)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

/// Largest absolute difference between `batch_loss` in evaluation mode and a
/// brute-force mean of `pair_loss` over separately embedded members.
pub fn loss_oracle_error(seed: u64) -> f64 {
    use recomp::training::{batch_loss, default_labels, pair_loss, TrainConfig};
    let spec = ModelSpec::miniature(InputMode::ImagePair);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(spec, &mut rng).unwrap();
    let cfg = SamplerConfig::default();
    let tcfg = TrainConfig::default();
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        let seqs: Vec<ImageSequence> = (0..n)
            .map(|_| random_sequence(&mut rng, cfg.min_sequence_len() + 3, 8, 8))
            .collect();
        let tuples: Vec<_> = seqs
            .iter()
            .map(|s| sample_tuple(s, &[], &cfg, &mut rng).unwrap().unwrap())
            .collect();
        let labels = default_labels(n);
        let (got, _) = batch_loss(&model, &tuples, &labels, &tcfg, Mode::Eval).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for (t, pairs) in tuples.iter().zip(&labels) {
            let emb: Vec<_> = t
                .members
                .iter()
                .map(|m| model.embed(&m.frames.iter().collect::<Vec<_>>()).unwrap())
                .collect();
            for p in pairs {
                total += pair_loss(
                    &emb[p.a.index()],
                    &emb[p.b.index()],
                    p.relation,
                    tcfg.margin,
                    tcfg.distance,
                )
                .unwrap();
                count += 1;
            }
        }
        worst = worst.max((got - total / count as f64).abs());
    }
    worst
}

/// Tiny synthetic clips at full frame size, for end-to-end runs.
pub fn small_clips(count: usize, seed: u64) -> Vec<recomp::imaging::SyntheticClip> {
    recomp::config::DataConfig {
        count,
        num_base_images: 10,
        seed,
        ..Default::default()
    }
    .build_clips()
    .unwrap()
}
