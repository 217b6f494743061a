//! Measurement protocols for trained embeddings.

mod export;
mod nn;
mod saliency;

pub use export::{
    export_embeddings, magnitude_r2, octant_accuracy, octant_of, read_embeddings, EmbeddingRow,
    ExportItem, MotionSummary,
};
pub use nn::{make_probes, nn_complete, summarize_nn, NnCompletionResult, NnSummary, Probe};
pub use saliency::{
    ink_mask, mass_in_mask, saliency, write_saliency_bin, write_saliency_png, SaliencyMap,
    SaliencySource,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::FrameSequence;
use crate::model::{BatchBuilder, EmbeddingVector, Mode, Model};
use crate::nn::Real;
use crate::recomposer::{
    enumerate_pairs, sample_indices, CompositionType, Relation, SamplerConfig, TupleIndices,
};
use crate::training::{distance, hinge, Distance};

/// Mean embedding distances over labeled pairs of held-out tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupErrorReport {
    pub n_tuples: usize,
    /// Mean distance over all positive pairs.
    pub equiv_error: f64,
    pub equiv_forward: f64,
    pub equiv_backward: f64,
    pub equiv_identity: f64,
    /// Mean raw distance over negative pairs.
    pub ineq_error: f64,
    /// Mean `max(0, m − d)` over negative pairs.
    pub ineq_violation: f64,
    pub margin: f64,
    /// Mean distance between members of different source sequences.
    pub chance_baseline: f64,
    pub chance_pairs: usize,
    /// `equiv_error / ineq_error`.
    pub ratio: f64,
}

impl GroupErrorReport {
    /// Equivalent and inequivalent compositions are not told apart.
    pub fn no_separation(&self) -> bool {
        (0.5..=2.0).contains(&self.ratio)
    }
}

/// Embeds every member of every tuple in evaluation mode, `chunk` tuples at a time.
pub fn embed_tuples<T: Real>(
    model: &Model<T>,
    tuples: &[(&dyn FrameSequence, TupleIndices)],
    chunk: usize,
) -> Result<Vec<[EmbeddingVector; 6]>> {
    let d = model.spec().head_dim;
    let mut out = Vec::with_capacity(tuples.len());
    for part in tuples.chunks(chunk.max(1)) {
        let mut b = BatchBuilder::new(model.spec());
        let mut rows = Vec::with_capacity(part.len());
        for (slot, (seq, idx)) in part.iter().enumerate() {
            let mut needed: Vec<usize> = idx.members.iter().flatten().copied().collect();
            needed.sort_unstable();
            needed.dedup();
            let frames = needed
                .iter()
                .map(|&i| seq.frame(i))
                .collect::<Result<Vec<_>>>()?;
            let mut r = [0usize; 6];
            for (m, row) in r.iter_mut().enumerate() {
                let keyed: Vec<_> = idx.members[m]
                    .iter()
                    .map(|&fi| {
                        let k = needed.binary_search(&fi).expect("frame collected");
                        ((slot, fi), frames[k].as_ref())
                    })
                    .collect();
                *row = b.push(&keyed)?;
            }
            rows.push(r);
        }
        let pass = model.forward(&b.finish(), Mode::Eval)?;
        for r in rows {
            out.push(r.map(|i| EmbeddingVector::from_reals(pass.embedding(i, d))));
        }
    }
    Ok(out)
}

/// Draws `n_tuples` tuples from uniformly chosen sequences, skipping those
/// too short for the sampler.
pub fn sample_eval_tuples<'a, R: Rng + ?Sized>(
    sequences: &[&'a dyn FrameSequence],
    n_tuples: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<(&'a dyn FrameSequence, TupleIndices)>> {
    if sequences.is_empty() {
        return Err(Error::invalid("no test sequences"));
    }
    let mut out = Vec::with_capacity(n_tuples);
    let mut misses = 0usize;
    while out.len() < n_tuples {
        let s = sequences[rng.random_range(0..sequences.len())];
        match sample_indices(s.len(), &[], sampler, rng) {
            Some(idx) => out.push((s, idx)),
            None => {
                misses += 1;
                if misses > 100 * sequences.len() + 1000 {
                    return Err(Error::invalid(
                        "test sequences are too short for the sampler",
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Mean distance between `n_pairs` random pairs of embeddings from different
/// groups (source sequences), with the number of pairs actually drawn. Gives
/// `(0, 0)` when every embedding shares one group.
pub fn chance_baseline<R: Rng + ?Sized>(
    items: &[(usize, &[f64])],
    n_pairs: usize,
    kind: Distance,
    rng: &mut R,
) -> Result<(f64, usize)> {
    if items
        .iter()
        .all(|(g, _)| Some(*g) == items.first().map(|f| f.0))
    {
        return Ok((0.0, 0));
    }
    let (mut total, mut count) = (0.0, 0usize);
    while count < n_pairs {
        let (ga, a) = items[rng.random_range(0..items.len())];
        let (gb, b) = items[rng.random_range(0..items.len())];
        if ga == gb {
            continue;
        }
        total += distance(a, b, kind)?;
        count += 1;
    }
    Ok((
        if count == 0 {
            0.0
        } else {
            total / count as f64
        },
        count,
    ))
}

/// Group-property embedding errors on `n_tuples` tuples from `sequences`.
pub fn group_error<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    sequences: &[&dyn FrameSequence],
    n_tuples: usize,
    sampler: &SamplerConfig,
    margin: f64,
    kind: Distance,
    rng: &mut R,
) -> Result<GroupErrorReport> {
    if n_tuples == 0 {
        return Err(Error::invalid(
            "group_error needs at least one tuple; the report would be empty",
        ));
    }
    let tuples = sample_eval_tuples(sequences, n_tuples, sampler, rng)?;
    let emb = embed_tuples(model, &tuples, 32)?;
    let mut pos = [(0.0, 0usize); 3];
    let (mut neg, mut viol, mut nneg) = (0.0, 0.0, 0usize);
    for e in &emb {
        for p in enumerate_pairs() {
            let d = distance(e[p.a.index()].values(), e[p.b.index()].values(), kind)?;
            match p.relation {
                Relation::Positive => {
                    let k = match p.a.ctype() {
                        CompositionType::Forward => 0,
                        CompositionType::Backward => 1,
                        CompositionType::Identity => 2,
                    };
                    pos[k].0 += hinge(d, Relation::Positive, margin);
                    pos[k].1 += 1;
                }
                Relation::Negative => {
                    neg += d;
                    viol += hinge(d, Relation::Negative, margin);
                    nneg += 1;
                }
            }
        }
    }
    // chance: members of tuples drawn from different source sequences
    let mut sources: Vec<*const ()> = Vec::new();
    let mut items = Vec::with_capacity(6 * emb.len());
    for ((seq, _), e) in tuples.iter().zip(&emb) {
        let ptr = *seq as *const dyn FrameSequence as *const ();
        let g = match sources.iter().position(|&p| p == ptr) {
            Some(g) => g,
            None => {
                sources.push(ptr);
                sources.len() - 1
            }
        };
        items.extend(e.iter().map(|v| (g, v.values())));
    }
    let (chance, chance_pairs) = chance_baseline(&items, (4 * emb.len()).max(1000), kind, rng)?;
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    let npos: usize = pos.iter().map(|p| p.1).sum();
    let equiv = pos.iter().map(|p| p.0).sum::<f64>() / npos.max(1) as f64;
    let ineq = mean((neg, nneg));
    Ok(GroupErrorReport {
        n_tuples: emb.len(),
        equiv_error: equiv,
        equiv_forward: mean(pos[0]),
        equiv_backward: mean(pos[1]),
        equiv_identity: mean(pos[2]),
        ineq_error: ineq,
        ineq_violation: mean((viol, nneg)),
        margin,
        chance_baseline: chance,
        chance_pairs,
        ratio: if ineq > 0.0 {
            equiv / ineq
        } else {
            f64::INFINITY
        },
    })
}
