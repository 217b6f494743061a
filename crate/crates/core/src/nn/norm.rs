//! Per-channel batch normalization over `[channels, m]` rows.

use super::real::{lane_sum, Real};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Statistics a normalization used on one forward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, for the running estimate.
    pub var_unbiased: Vec<T>,
    pub from_batch: bool,
}

/// Normalizes each channel row with batch statistics.
pub fn forward_train<T: Real>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
) -> NormStats<T> {
    let m = x.len() / channels;
    let mf = T::of(m as f64);
    let mut stats = NormStats {
        mean: Vec::with_capacity(channels),
        inv_std: Vec::with_capacity(channels),
        var_unbiased: Vec::with_capacity(channels),
        from_batch: true,
    };
    for c in 0..channels {
        let row = &x[c * m..(c + 1) * m];
        let mean = lane_sum(row) / mf;
        let mut acc = [T::zero(); 8];
        let chunks = row.chunks_exact(8);
        let mut ss = T::zero();
        for &v in chunks.remainder() {
            ss += (v - mean) * (v - mean);
        }
        for c in chunks {
            for (a, &v) in acc.iter_mut().zip(c) {
                *a += (v - mean) * (v - mean);
            }
        }
        ss += lane_sum(&acc);
        let var = ss / mf;
        let inv_std = T::one() / (var + T::of(BN_EPS)).sqrt();
        let out = &mut y[c * m..(c + 1) * m];
        let (scale, shift) = (gamma[c] * inv_std, beta[c] - gamma[c] * mean * inv_std);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = scale * v + shift;
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
        stats.var_unbiased.push(if m > 1 {
            ss / T::of((m - 1) as f64)
        } else {
            var
        });
    }
    stats
}

/// Normalizes with stored running statistics; items are independent.
pub fn forward_eval<T: Real>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    y: &mut [T],
) -> NormStats<T> {
    let m = x.len() / channels;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt())
        .collect();
    for c in 0..channels {
        let row = &x[c * m..(c + 1) * m];
        let out = &mut y[c * m..(c + 1) * m];
        for (o, &v) in out.iter_mut().zip(row) {
            *o = gamma[c] * (v - running_mean[c]) * inv_std[c] + beta[c];
        }
    }
    NormStats {
        mean: running_mean.to_vec(),
        inv_std,
        var_unbiased: running_var.to_vec(),
        from_batch: false,
    }
}

/// Backward pass. Accumulates into `dgamma`/`dbeta`, overwrites `dx`.
pub fn backward<T: Real>(
    x: &[T],
    dy: &[T],
    channels: usize,
    gamma: &[T],
    stats: &NormStats<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let m = x.len() / channels;
    let mf = T::of(m as f64);
    for c in 0..channels {
        let row = &x[c * m..(c + 1) * m];
        let drow = &dy[c * m..(c + 1) * m];
        let (mean, inv_std) = (stats.mean[c], stats.inv_std[c]);
        let sum_dy = lane_sum(drow);
        let mut acc = [T::zero(); 8];
        let mut sum_dx = T::zero();
        let (rc, dc) = (row.chunks_exact(8), drow.chunks_exact(8));
        for (&v, &d) in rc.remainder().iter().zip(dc.remainder()) {
            sum_dx += d * v;
        }
        for (r, dd) in rc.zip(dc) {
            for ((a, &v), &d) in acc.iter_mut().zip(r).zip(dd) {
                *a += d * v;
            }
        }
        sum_dx += lane_sum(&acc);
        // Σ dy·(x − μ)·σ⁻¹ expanded so the loop needs no per-element centering
        let sum_dy_xhat = (sum_dx - mean * sum_dy) * inv_std;
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let out = &mut dx[c * m..(c + 1) * m];
        if stats.from_batch {
            let k = gamma[c] * inv_std / mf;
            let (a, b) = (k * mf, k * sum_dy_xhat * inv_std);
            let c0 = -k * sum_dy + b * mean;
            for ((o, &v), &d) in out.iter_mut().zip(row).zip(drow) {
                *o = a * d - b * v + c0;
            }
        } else {
            let k = gamma[c] * inv_std;
            for (o, &d) in out.iter_mut().zip(drow) {
                *o = k * d;
            }
        }
    }
}

/// Exponential update of running statistics from one training batch.
pub fn update_running<T: Real>(
    stats: &NormStats<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
) {
    let mom = T::of(BN_MOMENTUM);
    for c in 0..running_mean.len() {
        running_mean[c] = (T::one() - mom) * running_mean[c] + mom * stats.mean[c];
        running_var[c] = (T::one() - mom) * running_var[c] + mom * stats.var_unbiased[c];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardized() {
        let x: Vec<f64> = (0..20)
            .map(|i| (i as f64 * 1.3).cos() * 4.0 + 2.0)
            .collect();
        let mut y = vec![0.0; 20];
        forward_train(&x, 2, &[1.0, 1.0], &[0.0, 0.0], &mut y);
        for c in 0..2 {
            let row = &y[c * 10..(c + 1) * 10];
            let mean: f64 = row.iter().sum::<f64>() / 10.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.77).sin() * 2.0).collect();
        let dy: Vec<f64> = (0..12).map(|i| (i as f64 * 1.9).cos()).collect();
        let gamma = [1.3, -0.4];
        let beta = [0.2, 0.5];
        let loss = |x: &[f64], g: &[f64]| -> f64 {
            let mut y = vec![0.0; 12];
            forward_train(x, 2, g, &beta, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let mut y = vec![0.0; 12];
        let stats = forward_train(&x, 2, &gamma, &beta, &mut y);
        let mut dg = [0.0; 2];
        let mut db = [0.0; 2];
        let mut dx = vec![0.0; 12];
        backward(&x, &dy, 2, &gamma, &stats, &mut dg, &mut db, &mut dx);
        let h = 1e-6;
        for i in 0..12 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp, &gamma) - loss(&xm, &gamma)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx[i]);
        }
        for c in 0..2 {
            let mut gp = gamma;
            gp[c] += h;
            let mut gm = gamma;
            gm[c] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            assert!((fd - dg[c]).abs() < 1e-6);
        }
        assert!((db[0] - dy[..6].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_affine_per_item() {
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 3];
        let s = forward_eval(&x, 1, &[2.0], &[1.0], &[2.0], &[4.0], &mut y);
        let k = 2.0 / (4.0 + BN_EPS).sqrt();
        assert!((y[0] - (1.0 - k)).abs() < 1e-12);
        let mut dx = [0.0; 3];
        let (mut dg, mut db) = ([0.0], [0.0]);
        backward(
            &x,
            &[1.0, 1.0, 1.0],
            1,
            &[2.0],
            &s,
            &mut dg,
            &mut db,
            &mut dx,
        );
        assert!(dx.iter().all(|&d| (d - k).abs() < 1e-12));
    }
}
