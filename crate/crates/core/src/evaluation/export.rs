//! Embedding export and simple readouts of motion from exported embeddings.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, MotionParams, Pose2};
use crate::model::Model;
use crate::nn::Real;

/// Ground-truth motion of a sequence in export-friendly units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSummary {
    /// Total translation magnitude in pixels.
    pub translation: f64,
    /// Direction of translation in degrees, `[0, 360)`, x right and y down.
    pub direction: f64,
    /// Total rotation in degrees.
    pub rotation: f64,
}

impl From<&MotionParams> for MotionSummary {
    fn from(p: &MotionParams) -> Self {
        Self::from_pose(&p.total_pose())
    }
}

impl MotionSummary {
    /// Summary of a net displacement given as a pose.
    pub fn from_pose(p: &Pose2) -> Self {
        Self {
            translation: p.tx.hypot(p.ty),
            direction: p.ty.atan2(p.tx).to_degrees().rem_euclid(360.0),
            rotation: p.theta,
        }
    }
}

pub struct ExportItem<'a> {
    pub id: String,
    pub frames: Vec<&'a GrayImage>,
    pub motion: Option<MotionSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub motion: Option<MotionSummary>,
    pub embedding: Vec<f64>,
}

/// Embeds each item and writes one CSV row per sequence:
/// `sequence_id, translation_px, direction_deg, rotation_deg, e0, …`.
/// Motion columns are empty when unknown. Returns the number of rows.
pub fn export_embeddings<T: Real>(
    model: &Model<T>,
    items: &[ExportItem<'_>],
    path: &Path,
) -> Result<usize> {
    let d = model.spec().head_dim;
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec![
            "sequence_id".to_string(),
            "translation_px".into(),
            "direction_deg".into(),
            "rotation_deg".into(),
        ];
        header.extend((0..d).map(|i| format!("e{i}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for part in items.chunks(32) {
            let seqs: Vec<Vec<&GrayImage>> = part.iter().map(|i| i.frames.clone()).collect();
            let embs = model.embed_all(&seqs, 32)?;
            for (item, e) in part.iter().zip(embs) {
                let mut rec = vec![item.id.clone()];
                match &item.motion {
                    Some(m) => {
                        rec.extend([m.translation, m.direction, m.rotation].map(|v| v.to_string()))
                    }
                    None => rec.extend(std::iter::repeat_n(String::new(), 3)),
                }
                rec.extend(e.values().iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    crate::imaging::store::write_atomic(path, &out)?;
    Ok(items.len())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::corrupt(path, e.to_string())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() < 4 {
            return Err(Error::corrupt(
                path,
                "embedding row has fewer than 4 columns",
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::corrupt(path, format!("not a number: {s:?}")))
        };
        let motion = if rec[1].is_empty() {
            None
        } else {
            Some(MotionSummary {
                translation: num(&rec[1])?,
                direction: num(&rec[2])?,
                rotation: num(&rec[3])?,
            })
        };
        rows.push(EmbeddingRow {
            id: rec[0].to_string(),
            motion,
            embedding: rec.iter().skip(4).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Octant index of a direction in degrees: bin `k` covers `[45k, 45k + 45)`.
pub fn octant_of(direction: f64) -> usize {
    ((direction.rem_euclid(360.0) / 45.0) as usize).min(7)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn labeled(rows: &[EmbeddingRow]) -> Result<Vec<(&EmbeddingRow, MotionSummary)>> {
    let out: Vec<_> = rows
        .iter()
        .filter_map(|r| r.motion.map(|m| (r, m)))
        .collect();
    if out.len() < 4 {
        return Err(Error::invalid("need at least 4 rows with known motion"));
    }
    Ok(out)
}

/// Held-out accuracy of a nearest-centroid classifier over translation
/// direction octants. Even-indexed labeled rows fit the centroids (of
/// unit-normalized embeddings), odd-indexed rows are scored.
pub fn octant_accuracy(rows: &[EmbeddingRow]) -> Result<f64> {
    let data = labeled(rows)?;
    let d = data[0].0.embedding.len();
    let mut sums = vec![vec![0.0; d]; 8];
    let mut counts = [0usize; 8];
    for (r, m) in data.iter().step_by(2) {
        let k = octant_of(m.direction);
        for (s, v) in sums[k].iter_mut().zip(unit(&r.embedding)) {
            *s += v;
        }
        counts[k] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let (mut right, mut total) = (0usize, 0usize);
    for (r, m) in data.iter().skip(1).step_by(2) {
        let e = unit(&r.embedding);
        let best = centroids
            .iter()
            .enumerate()
            .filter_map(|(k, c)| {
                c.as_ref().map(|c| {
                    (
                        k,
                        c.iter()
                            .zip(&e)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>(),
                    )
                })
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k);
        right += usize::from(best == Some(octant_of(m.direction)));
        total += 1;
    }
    Ok(right as f64 / total as f64)
}

/// Held-out R² of a ridge-regularized linear readout of translation
/// magnitude, fit on even-indexed labeled rows and scored on odd-indexed.
///
/// Embeddings usually have about as many dimensions as there are fit rows,
/// so the ridge strength matters; it is chosen from a log-spaced grid by
/// leave-one-out error on the fit rows alone.
pub fn magnitude_r2(rows: &[EmbeddingRow]) -> Result<f64> {
    let data = labeled(rows)?;
    let d = data[0].0.embedding.len();
    let design = |set: &[&(&EmbeddingRow, MotionSummary)]| {
        DMatrix::from_fn(set.len(), d + 1, |i, j| {
            if j == d {
                1.0
            } else {
                set[i].0.embedding[j]
            }
        })
    };
    let fit: Vec<_> = data.iter().step_by(2).collect();
    let test: Vec<_> = data.iter().skip(1).step_by(2).collect();
    let x = design(&fit);
    let y = DVector::from_iterator(fit.len(), fit.iter().map(|(_, m)| m.translation));
    let gram = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let scale = (gram.trace() / (d + 1) as f64).max(1e-12);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for k in -6..=3 {
        let lambda = scale * 10f64.powi(k);
        let mut a = gram.clone();
        for i in 0..d {
            a[(i, i)] += lambda;
        }
        // the intercept is not shrunk
        a[(d, d)] += 1e-12 * scale;
        let Some(chol) = a.cholesky() else {
            continue;
        };
        let w = chol.solve(&xty);
        let inv = chol.inverse();
        let mut loo = 0.0;
        for i in 0..fit.len() {
            let xi = x.row(i).transpose();
            let h = (xi.transpose() * &inv * &xi)[(0, 0)];
            let resid = y[i] - (xi.transpose() * &w)[(0, 0)];
            loo += (resid / (1.0 - h).max(1e-9)).powi(2);
        }
        if best.as_ref().is_none_or(|(e, _)| loo < *e) {
            best = Some((loo, w));
        }
    }
    let (_, w) = best.ok_or_else(|| Error::invalid("readout system is singular"))?;
    let xt = design(&test);
    let pred = xt * w;
    let truth: Vec<f64> = test.iter().map(|(_, m)| m.translation).collect();
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = truth
        .iter()
        .zip(pred.iter())
        .map(|(t, p)| (t - p).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("translation magnitudes are constant"));
    }
    Ok(1.0 - ss_res / ss_tot)
}
