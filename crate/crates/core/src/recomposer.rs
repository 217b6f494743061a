//! Recomposed subsequences and the positive/negative pair structure they induce.
//!
//! From one source clip we draw six subsequences: two forward, two backward
//! and two loops. Members of the same type share their net motion but differ
//! in how that motion is split into steps; that is what makes the embedding
//! learn associativity (equal compositions) and invertibility (loops).

use std::fmt;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FrameSequence, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompositionType {
    Forward,
    Backward,
    Identity,
}

impl CompositionType {
    pub const ALL: [CompositionType; 3] = [Self::Forward, Self::Backward, Self::Identity];

    pub fn reversed(self) -> Self {
        match self {
            Self::Forward => Self::Backward,
            Self::Backward => Self::Forward,
            Self::Identity => Self::Identity,
        }
    }
}

/// How the forward and backward windows of a tuple are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingConfig {
    /// One window; forward runs start→end, backward end→start.
    SameStartSameSub,
    /// Two windows sharing a boundary frame; both directions start there.
    SameStartAdjacent,
    /// Two adjacent windows; forward and backward start at opposite ends.
    DiffStartAdjacent,
}

impl SamplingConfig {
    pub const ALL: [SamplingConfig; 3] = [
        Self::SameStartSameSub,
        Self::SameStartAdjacent,
        Self::DiffStartAdjacent,
    ];
}

impl fmt::Display for SamplingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Slot of a member inside a [`RecompositionTuple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemberId {
    F1,
    F2,
    B1,
    B2,
    I1,
    I2,
}

impl MemberId {
    pub const ALL: [MemberId; 6] = [Self::F1, Self::F2, Self::B1, Self::B2, Self::I1, Self::I2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn ctype(self) -> CompositionType {
        match self {
            Self::F1 | Self::F2 => CompositionType::Forward,
            Self::B1 | Self::B2 => CompositionType::Backward,
            Self::I1 | Self::I2 => CompositionType::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairLabel {
    pub a: MemberId,
    pub b: MemberId,
    pub relation: Relation,
}

impl PairLabel {
    fn new(a: MemberId, b: MemberId) -> Self {
        let relation = if a.ctype() == b.ctype() {
            Relation::Positive
        } else {
            Relation::Negative
        };
        Self { a, b, relation }
    }
}

/// Sampler settings, as read from the training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub configs_enabled: Vec<SamplingConfig>,
    /// Negative pairs drawn per tuple, 1..=12. The default 6 pairs every
    /// first member with the differently-typed second members.
    pub negatives_per_tuple: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 5,
            configs_enabled: SamplingConfig::ALL.to_vec(),
            negatives_per_tuple: 6,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 3 {
            return Err(Error::Config(format!(
                "min_len must be at least 3 so equivalent members can differ, got {}",
                self.min_len
            )));
        }
        if self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "max_len {} is below min_len {}",
                self.max_len, self.min_len
            )));
        }
        if self.configs_enabled.is_empty() {
            return Err(Error::Config("configs_enabled is empty".into()));
        }
        if !(1..=12).contains(&self.negatives_per_tuple) {
            return Err(Error::Config(format!(
                "negatives_per_tuple must be in 1..=12, got {}",
                self.negatives_per_tuple
            )));
        }
        Ok(())
    }

    /// Shortest source sequence the sampler accepts.
    pub fn min_sequence_len(&self) -> usize {
        2 * self.max_len + 1
    }
}

/// Frame indices of the six members, in [`MemberId`] order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TupleIndices {
    pub config: SamplingConfig,
    pub members: [Vec<usize>; 6],
}

impl TupleIndices {
    pub fn member(&self, id: MemberId) -> &[usize] {
        &self.members[id.index()]
    }

    /// Lowest and highest frame index touched.
    pub fn span(&self) -> (usize, usize) {
        let all = self.members.iter().flatten();
        let lo = all.clone().copied().min().unwrap_or(0);
        let hi = all.copied().max().unwrap_or(0);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecomposedSequence {
    pub frames: Vec<GrayImage>,
    pub source_indices: Vec<usize>,
    pub ctype: CompositionType,
}

impl RecomposedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecompositionTuple {
    /// In [`MemberId`] order: f1, f2, b1, b2, i1, i2.
    pub members: [RecomposedSequence; 6],
    pub config: SamplingConfig,
}

impl RecompositionTuple {
    pub fn member(&self, id: MemberId) -> &RecomposedSequence {
        &self.members[id.index()]
    }
}

/// Reverses frame order; forward and backward swap, loops stay loops.
pub fn reverse(seq: &RecomposedSequence) -> RecomposedSequence {
    RecomposedSequence {
        frames: seq.frames.iter().rev().cloned().collect(),
        source_indices: seq.source_indices.iter().rev().copied().collect(),
        ctype: seq.ctype.reversed(),
    }
}

/// `len` strictly monotone indices from `from` to `to` inclusive, interior random.
fn decomposition<R: Rng + ?Sized>(rng: &mut R, from: usize, to: usize, len: usize) -> Vec<usize> {
    let (lo, hi) = (from.min(to), from.max(to));
    debug_assert!(hi - lo >= len - 1);
    let mut inner: Vec<usize> = index::sample(rng, hi - lo - 1, len - 2)
        .into_iter()
        .map(|k| lo + 1 + k)
        .collect();
    inner.sort_unstable();
    let mut v = Vec::with_capacity(len);
    v.push(lo);
    v.extend(inner);
    v.push(hi);
    if from > to {
        v.reverse();
    }
    v
}

/// Two decompositions of the same run that differ somewhere in the interior.
fn equivalent_pair<R: Rng + ?Sized>(
    rng: &mut R,
    from: usize,
    to: usize,
    len1: usize,
    len2: usize,
) -> (Vec<usize>, Vec<usize>) {
    let a = decomposition(rng, from, to, len1);
    loop {
        let b = decomposition(rng, from, to, len2);
        if a != b {
            return (a, b);
        }
    }
}

/// Out-and-back traversal of `len` frames starting and ending at `start`,
/// staying within `extent` frames on one side (`dir` = ±1).
fn loop_member<R: Rng + ?Sized>(
    rng: &mut R,
    start: usize,
    dir: isize,
    extent: usize,
    len: usize,
) -> Vec<usize> {
    debug_assert!(extent >= len - 2);
    let mut offsets: Vec<usize> = index::sample(rng, extent, len - 2)
        .into_iter()
        .map(|k| k + 1)
        .collect();
    offsets.sort_unstable();
    let peak = offsets
        .pop()
        .expect("loops have at least one turning frame");
    let (mut out, mut back) = (Vec::new(), Vec::new());
    for o in offsets {
        if rng.random_bool(0.5) {
            out.push(o);
        } else {
            back.push(o);
        }
    }
    let at = |o: usize| (start as isize + dir * o as isize) as usize;
    let mut v = Vec::with_capacity(len);
    v.push(start);
    v.extend(out.iter().map(|&o| at(o)));
    v.push(at(peak));
    v.extend(back.iter().rev().map(|&o| at(o)));
    v.push(start);
    v
}

/// Minimal window width that lets two members of lengths `a` and `b` share
/// endpoints while differing in their interior.
fn width_for(a: usize, b: usize) -> usize {
    if a == b {
        a
    } else {
        a.max(b) - 1
    }
}

/// Samples the index structure of one tuple, placed at a random origin that
/// keeps the whole tuple inside `[0, seq_len)` and clear of `cuts`.
///
/// A cut at `i` separates frames `i` and `i + 1`. Returns `None` when no
/// placement fits.
pub fn sample_indices<R: Rng + ?Sized>(
    seq_len: usize,
    cuts: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Option<TupleIndices> {
    if seq_len < cfg.min_sequence_len() {
        return None;
    }
    let config = *cfg.configs_enabled.choose(rng)?;
    let mut lens = [0usize; 6];
    for l in &mut lens {
        *l = rng.random_range(cfg.min_len..=cfg.max_len);
    }
    let w_min = width_for(lens[0], lens[1])
        .max(width_for(lens[2], lens[3]))
        .max(lens[4].max(lens[5]) - 2);
    let w = rng.random_range(w_min..=w_min.max(cfg.max_len));
    // tuple span in frames beyond the origin
    let span = match config {
        SamplingConfig::SameStartSameSub => w,
        _ => 2 * w,
    };
    let origin = pick_origin(seq_len, span, cuts, rng)?;

    let (f, b, loop_start) = match config {
        SamplingConfig::SameStartSameSub => ((origin, origin + w), (origin + w, origin), origin),
        SamplingConfig::SameStartAdjacent => {
            let c = origin + w;
            ((c, c + w), (c, c - w), c)
        }
        SamplingConfig::DiffStartAdjacent => {
            let c = origin + w;
            ((origin, c), (c + w, c), c)
        }
    };
    let (f1, f2) = equivalent_pair(rng, f.0, f.1, lens[0], lens[1]);
    let (b1, b2) = equivalent_pair(rng, b.0, b.1, lens[2], lens[3]);
    let loop_dir = |rng: &mut R| -> isize {
        match config {
            SamplingConfig::SameStartSameSub => 1,
            _ => {
                if rng.random_bool(0.5) {
                    1
                } else {
                    -1
                }
            }
        }
    };
    let d1 = loop_dir(rng);
    let i1 = loop_member(rng, loop_start, d1, w, lens[4]);
    let d2 = loop_dir(rng);
    let i2 = loop_member(rng, loop_start, d2, w, lens[5]);
    Some(TupleIndices {
        config,
        members: [f1, f2, b1, b2, i1, i2],
    })
}

/// Uniform origin `o` with `[o, o + span]` inside the sequence and cut-free.
fn pick_origin<R: Rng + ?Sized>(
    seq_len: usize,
    span: usize,
    cuts: &[usize],
    rng: &mut R,
) -> Option<usize> {
    if span >= seq_len {
        return None;
    }
    let valid: Vec<usize> = (0..seq_len - span)
        .filter(|&o| !cuts.iter().any(|&c| c >= o && c < o + span))
        .collect();
    valid.choose(rng).copied()
}

/// Samples and materializes one tuple from `seq`.
///
/// `None` means the sequence is too short (or too fragmented by cuts) and
/// should be skipped.
pub fn sample_tuple<R: Rng + ?Sized>(
    seq: &dyn FrameSequence,
    cuts: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Option<RecompositionTuple>> {
    let Some(idx) = sample_indices(seq.len(), cuts, cfg, rng) else {
        return Ok(None);
    };
    materialize(seq, &idx).map(Some)
}

/// Pulls the frames named by `idx` out of `seq`.
pub fn materialize(seq: &dyn FrameSequence, idx: &TupleIndices) -> Result<RecompositionTuple> {
    let build = |id: MemberId| -> Result<RecomposedSequence> {
        let source_indices = idx.member(id).to_vec();
        let frames = source_indices
            .iter()
            .map(|&i| seq.frame(i).map(|f| f.into_owned()))
            .collect::<Result<Vec<_>>>()?;
        Ok(RecomposedSequence {
            frames,
            source_indices,
            ctype: id.ctype(),
        })
    };
    Ok(RecompositionTuple {
        members: [
            build(MemberId::F1)?,
            build(MemberId::F2)?,
            build(MemberId::B1)?,
            build(MemberId::B2)?,
            build(MemberId::I1)?,
            build(MemberId::I2)?,
        ],
        config: idx.config,
    })
}

const POSITIVES: [(MemberId, MemberId); 3] = [
    (MemberId::F1, MemberId::F2),
    (MemberId::B1, MemberId::B2),
    (MemberId::I1, MemberId::I2),
];

/// First members against differently typed second members.
const CROSS_NEGATIVES: [(MemberId, MemberId); 6] = [
    (MemberId::F1, MemberId::B2),
    (MemberId::F1, MemberId::I2),
    (MemberId::B1, MemberId::F2),
    (MemberId::B1, MemberId::I2),
    (MemberId::I1, MemberId::F2),
    (MemberId::I1, MemberId::B2),
];

/// Differently typed pairs within the first members and within the second.
const SAME_SLOT_NEGATIVES: [(MemberId, MemberId); 6] = [
    (MemberId::F1, MemberId::B1),
    (MemberId::F1, MemberId::I1),
    (MemberId::B1, MemberId::I1),
    (MemberId::F2, MemberId::B2),
    (MemberId::F2, MemberId::I2),
    (MemberId::B2, MemberId::I2),
];

/// The default labeling: 3 positives and 6 cross-type negatives.
pub fn enumerate_pairs() -> Vec<PairLabel> {
    POSITIVES
        .iter()
        .chain(&CROSS_NEGATIVES)
        .map(|&(a, b)| PairLabel::new(a, b))
        .collect()
}

/// All positives plus `negatives` negative pairs.
///
/// Up to 6 negatives are drawn from the cross-type set; beyond that the
/// same-slot pairs are added. Exactly 6 consumes no randomness.
pub fn select_pairs<R: Rng + ?Sized>(negatives: usize, rng: &mut R) -> Vec<PairLabel> {
    let mut out: Vec<PairLabel> = POSITIVES
        .iter()
        .map(|&(a, b)| PairLabel::new(a, b))
        .collect();
    let pick = |set: &[(MemberId, MemberId)], k: usize, rng: &mut R| -> Vec<PairLabel> {
        if k >= set.len() {
            return set.iter().map(|&(a, b)| PairLabel::new(a, b)).collect();
        }
        let mut chosen: Vec<usize> = index::sample(rng, set.len(), k).into_vec();
        chosen.sort_unstable();
        chosen
            .into_iter()
            .map(|i| PairLabel::new(set[i].0, set[i].1))
            .collect()
    };
    let negatives = negatives.min(12);
    out.extend(pick(&CROSS_NEGATIVES, negatives.min(6), rng));
    if negatives > 6 {
        out.extend(pick(&SAME_SLOT_NEGATIVES, negatives - 6, rng));
    }
    out
}
