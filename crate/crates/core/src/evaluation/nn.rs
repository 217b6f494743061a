//! Nearest-neighbor sequence completion: which frame best fills the gap
//! between a start frame A and an end frame C?

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FrameSequence, GrayImage};
use crate::model::Model;
use crate::nn::Real;
use crate::training::{distance, Distance};

/// A query `A = start`, true middle `B = start + skip`, end `C = start + 2·skip`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub id: usize,
    pub sequence: usize,
    pub start: usize,
    pub skip: usize,
}

impl Probe {
    pub fn middle(&self) -> usize {
        self.start + self.skip
    }

    pub fn end(&self) -> usize {
        self.start + 2 * self.skip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnCompletionResult {
    pub probe_id: usize,
    pub skip: usize,
    pub distance_true_middle: f64,
    pub min_distance_same_sequence_others: f64,
    pub min_distance_out_of_sequence: f64,
    /// 1 + number of candidates strictly closer than the true middle.
    pub rank_of_true: usize,
    pub candidates: usize,
    /// Mean absolute pixel difference of the true middle to A.
    pub pixel_true_middle: f64,
    pub pixel_min_same_sequence_others: f64,
    pub pixel_min_out_of_sequence: f64,
}

/// `per_sequence` probes per sequence with distinct uniformly drawn starts.
pub fn make_probes<R: Rng + ?Sized>(
    sequences: &[&dyn FrameSequence],
    per_sequence: usize,
    skip: usize,
    rng: &mut R,
) -> Result<Vec<Probe>> {
    if skip == 0 {
        return Err(Error::invalid("skip must be positive"));
    }
    let mut out = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        if seq.len() <= 2 * skip {
            continue;
        }
        let starts = seq.len() - 2 * skip;
        let mut picked = index::sample(rng, starts, per_sequence.min(starts)).into_vec();
        picked.sort_unstable();
        for start in picked {
            out.push(Probe {
                id: out.len(),
                sequence: s,
                start,
                skip,
            });
        }
    }
    Ok(out)
}

/// Distances of `embed([A, B′, C])` to `embed([A, C])` for every candidate
/// `B′`: the true middle, every other frame of the probe's sequence, and
/// `out_per_sequence` random frames of each other sequence.
pub fn nn_complete<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    sequences: &[&dyn FrameSequence],
    probes: &[Probe],
    out_per_sequence: usize,
    kind: Distance,
    rng: &mut R,
) -> Result<Vec<NnCompletionResult>> {
    let mut results = Vec::with_capacity(probes.len());
    for probe in probes {
        let seq = *sequences.get(probe.sequence).ok_or_else(|| {
            Error::invalid(format!("probe {} names a missing sequence", probe.id))
        })?;
        if probe.skip == 0 || probe.end() >= seq.len() {
            return Err(Error::invalid(format!(
                "probe {} does not fit its sequence",
                probe.id
            )));
        }
        let a = seq.frame(probe.start)?;
        let c = seq.frame(probe.end())?;
        if a.size() != c.size() {
            return Err(Error::invalid("probe frames differ in size"));
        }
        // (frame, same sequence?)
        let mut pool: Vec<(std::borrow::Cow<'_, GrayImage>, bool)> = Vec::new();
        pool.push((seq.frame(probe.middle())?, true));
        for i in (0..seq.len()).filter(|&i| i != probe.middle()) {
            pool.push((seq.frame(i)?, true));
        }
        for (s, other) in sequences.iter().enumerate() {
            if s == probe.sequence || other.is_empty() {
                continue;
            }
            let k = out_per_sequence.min(other.len());
            for i in index::sample(rng, other.len(), k).into_iter() {
                pool.push((other.frame(i)?, false));
            }
        }
        for (f, _) in &pool {
            if f.size() != a.size() {
                return Err(Error::invalid(
                    "candidate frame size differs from the probe",
                ));
            }
        }
        let query = model.embed(&[a.as_ref(), c.as_ref()])?;
        let seqs: Vec<Vec<&GrayImage>> = pool
            .iter()
            .map(|(b, _)| vec![a.as_ref(), b.as_ref(), c.as_ref()])
            .collect();
        let embs = model.embed_all(&seqs, 64)?;
        let dists = embs
            .iter()
            .map(|e| distance(e.values(), query.values(), kind))
            .collect::<Result<Vec<_>>>()?;
        let pixel = pool
            .iter()
            .map(|(b, _)| b.mean_abs_diff(&a))
            .collect::<Result<Vec<_>>>()?;
        let d_true = dists[0];
        let min_where = |v: &[f64], same: bool| {
            v.iter()
                .zip(&pool)
                .skip(1)
                .filter(|(_, (_, s))| *s == same)
                .map(|(d, _)| *d)
                .fold(f64::INFINITY, f64::min)
        };
        results.push(NnCompletionResult {
            probe_id: probe.id,
            skip: probe.skip,
            distance_true_middle: d_true,
            min_distance_same_sequence_others: min_where(&dists, true),
            min_distance_out_of_sequence: min_where(&dists, false),
            rank_of_true: 1 + dists[1..].iter().filter(|&&d| d < d_true).count(),
            candidates: pool.len(),
            pixel_true_middle: pixel[0],
            pixel_min_same_sequence_others: min_where(&pixel, true),
            pixel_min_out_of_sequence: min_where(&pixel, false),
        });
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnSummary {
    pub skip: usize,
    pub probes: usize,
    pub rank1_fraction: f64,
    pub median_rank: f64,
    pub median_distance_true_middle: f64,
    pub median_min_distance_same_sequence_others: f64,
    pub median_min_distance_out_of_sequence: f64,
    /// `median_distance_true_middle / median_min_distance_out_of_sequence`.
    pub true_to_out_ratio: f64,
    /// Pixel-space analogue: true middle vs closest other same-sequence frame.
    pub pixel_true_to_same_ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize_nn(results: &[NnCompletionResult]) -> Result<NnSummary> {
    let Some(first) = results.first() else {
        return Err(Error::invalid("no completion results to summarize"));
    };
    let col = |f: fn(&NnCompletionResult) -> f64| median(results.iter().map(f).collect());
    let med_true = col(|r| r.distance_true_middle);
    let med_out = col(|r| r.min_distance_out_of_sequence);
    Ok(NnSummary {
        skip: first.skip,
        probes: results.len(),
        rank1_fraction: results.iter().filter(|r| r.rank_of_true == 1).count() as f64
            / results.len() as f64,
        median_rank: col(|r| r.rank_of_true as f64),
        median_distance_true_middle: med_true,
        median_min_distance_same_sequence_others: col(|r| r.min_distance_same_sequence_others),
        median_min_distance_out_of_sequence: med_out,
        true_to_out_ratio: med_true / med_out,
        pixel_true_to_same_ratio: col(|r| r.pixel_true_middle)
            / col(|r| r.pixel_min_same_sequence_others),
    })
}
