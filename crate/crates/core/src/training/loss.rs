//! Distances between embeddings and the margin hinge loss over labeled pairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingVector;
use crate::nn::Real;
use crate::recomposer::{CompositionType, MemberId, PairLabel, Relation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    Cosine,
    Euclidean,
}

/// `1 − a·b / (‖a‖‖b‖)`, in `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    distance(a.values(), b.values(), Distance::Cosine)
}

pub fn euclidean_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    distance(a.values(), b.values(), Distance::Euclidean)
}

pub fn distance(a: &[f64], b: &[f64], kind: Distance) -> Result<f64> {
    distance_with_grad(a, b, kind).map(|(d, _, _)| d)
}

/// Distance with its gradients with respect to both arguments.
pub fn distance_with_grad<T: Real>(
    a: &[T],
    b: &[T],
    kind: Distance,
) -> Result<(T, Vec<T>, Vec<T>)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    match kind {
        Distance::Cosine => {
            let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
            if na.is_zero() || nb.is_zero() {
                return Err(Error::UndefinedDistance);
            }
            let cos = dot / (na * nb);
            let d = (T::one() - cos).max(T::zero()).min(T::of(2.0));
            let ga = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| -(y / (na * nb) - cos * x / (na * na)))
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| -(x / (na * nb) - cos * y / (nb * nb)))
                .collect();
            Ok((d, ga, gb))
        }
        Distance::Euclidean => {
            let d = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>()
                .sqrt();
            if d.is_zero() {
                let z = vec![T::zero(); a.len()];
                return Ok((d, z.clone(), z));
            }
            let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| (x - y) / d).collect();
            let gb = ga.iter().map(|&g| -g).collect();
            Ok((d, ga, gb))
        }
    }
}

/// Margin hinge: `d` for positives, `max(0, margin − d)` for negatives.
pub fn hinge(d: f64, relation: Relation, margin: f64) -> f64 {
    match relation {
        Relation::Positive => d,
        Relation::Negative => (margin - d).max(0.0),
    }
}

pub fn pair_loss(
    r1: &EmbeddingVector,
    r2: &EmbeddingVector,
    relation: Relation,
    margin: f64,
    kind: Distance,
) -> Result<f64> {
    Ok(hinge(
        distance(r1.values(), r2.values(), kind)?,
        relation,
        margin,
    ))
}

/// Loss bucket a labeled pair contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCategory {
    PositiveForward,
    PositiveBackward,
    PositiveIdentity,
    NegativeForwardBackward,
    NegativeForwardIdentity,
    NegativeBackwardIdentity,
}

impl PairCategory {
    pub fn of(a: MemberId, b: MemberId) -> Self {
        use CompositionType::*;
        match (a.ctype(), b.ctype()) {
            (Forward, Forward) => Self::PositiveForward,
            (Backward, Backward) => Self::PositiveBackward,
            (Identity, Identity) => Self::PositiveIdentity,
            (Forward, Backward) | (Backward, Forward) => Self::NegativeForwardBackward,
            (Forward, Identity) | (Identity, Forward) => Self::NegativeForwardIdentity,
            (Backward, Identity) | (Identity, Backward) => Self::NegativeBackwardIdentity,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(
            self,
            Self::PositiveForward | Self::PositiveBackward | Self::PositiveIdentity
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryTotal {
    pub total: f64,
    pub count: usize,
}

/// Loss sums and pair counts per [`PairCategory`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub categories: BTreeMap<PairCategory, CategoryTotal>,
}

impl LossBreakdown {
    pub fn add(&mut self, cat: PairCategory, loss: f64) {
        let e = self.categories.entry(cat).or_default();
        e.total += loss;
        e.count += 1;
    }

    pub fn merge(&mut self, other: &LossBreakdown) {
        for (cat, t) in &other.categories {
            let e = self.categories.entry(*cat).or_default();
            e.total += t.total;
            e.count += t.count;
        }
    }

    pub fn total(&self) -> f64 {
        self.categories.values().map(|t| t.total).sum()
    }

    pub fn count(&self) -> usize {
        self.categories.values().map(|t| t.count).sum()
    }

    /// Mean loss per pair; 0 for an empty breakdown.
    pub fn mean(&self) -> f64 {
        match self.count() {
            0 => 0.0,
            n => self.total() / n as f64,
        }
    }

    pub fn get(&self, cat: PairCategory) -> CategoryTotal {
        self.categories.get(&cat).copied().unwrap_or_default()
    }
}

/// Labeled pairs of one tuple, with the batch rows holding its six members.
#[derive(Debug, Clone)]
pub struct TuplePairs {
    pub rows: [usize; 6],
    pub pairs: Vec<PairLabel>,
}

/// Mean hinge loss over all pairs of all tuples, its breakdown, and the
/// gradient with respect to the embedding rows (`[rows, dim]`).
pub fn embedding_loss<T: Real>(
    embeddings: &[T],
    dim: usize,
    tuples: &[TuplePairs],
    margin: f64,
    kind: Distance,
) -> Result<(f64, LossBreakdown, Vec<T>)> {
    let mut grad = vec![T::zero(); embeddings.len()];
    let mut breakdown = LossBreakdown::default();
    let n_pairs: usize = tuples.iter().map(|t| t.pairs.len()).sum();
    if n_pairs == 0 {
        return Err(Error::invalid("no labeled pairs in batch"));
    }
    let scale = T::of(1.0 / n_pairs as f64);
    let row = |r: usize| &embeddings[r * dim..(r + 1) * dim];
    for t in tuples {
        for p in &t.pairs {
            let (ra, rb) = (t.rows[p.a.index()], t.rows[p.b.index()]);
            let (d, ga, gb) = distance_with_grad(row(ra), row(rb), kind)?;
            let loss = hinge(d.f64(), p.relation, margin);
            breakdown.add(PairCategory::of(p.a, p.b), loss);
            let coef = match p.relation {
                Relation::Positive => scale,
                Relation::Negative if d.f64() < margin => -scale,
                Relation::Negative => continue,
            };
            for (g, v) in grad[ra * dim..(ra + 1) * dim].iter_mut().zip(&ga) {
                *g += coef * *v;
            }
            for (g, v) in grad[rb * dim..(rb + 1) * dim].iter_mut().zip(&gb) {
                *g += coef * *v;
            }
        }
    }
    Ok((breakdown.mean(), breakdown, grad))
}
