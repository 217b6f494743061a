//! Single-layer LSTM over one sequence, gate order (input, forget, cell, output).

use super::real::{gemm, Mat, Real};

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    pub steps: usize,
    pub hidden: usize,
    pub input_dim: usize,
    /// `[steps, input_dim]`
    pub xs: Vec<T>,
    /// `[steps + 1, hidden]`, row 0 is the zero initial state.
    pub hs: Vec<T>,
    pub cs: Vec<T>,
    /// Post-activation gates, `[steps, 4·hidden]`.
    pub gates: Vec<T>,
}

impl<T: Real> LstmCache<T> {
    pub fn last_hidden(&self) -> &[T] {
        &self.hs[self.steps * self.hidden..]
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn forward<T: Real>(
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
    xs: Vec<T>,
    input_dim: usize,
    hidden: usize,
) -> LstmCache<T> {
    forward_many(w_ih, w_hh, bias, vec![xs], input_dim, hidden)
        .pop()
        .expect("one sequence in, one cache out")
}

/// Runs several independent sequences, sharing the matrix products of
/// each time step across all sequences still running.
pub fn forward_many<T: Real>(
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
    seqs: Vec<Vec<T>>,
    input_dim: usize,
    hidden: usize,
) -> Vec<LstmCache<T>> {
    let g4 = 4 * hidden;
    let steps: Vec<usize> = seqs.iter().map(|x| x.len() / input_dim).collect();
    let offsets: Vec<usize> = steps
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let total: usize = steps.iter().sum();
    let max_steps = steps.iter().copied().max().unwrap_or(0);
    let xs_all: Vec<T> = seqs.iter().flatten().copied().collect();
    let mut gates = vec![T::zero(); total * g4];
    for row in gates.chunks_exact_mut(g4) {
        row.copy_from_slice(bias);
    }
    gemm(
        T::one(),
        Mat::new(&xs_all, total, input_dim),
        Mat::new(w_ih, g4, input_dim).t(),
        T::one(),
        &mut gates,
        g4,
    );
    let n = seqs.len();
    let mut hs: Vec<Vec<T>> = steps
        .iter()
        .map(|&s| vec![T::zero(); (s + 1) * hidden])
        .collect();
    let mut cs: Vec<Vec<T>> = steps
        .iter()
        .map(|&s| vec![T::zero(); (s + 1) * hidden])
        .collect();
    let mut h_prev = Vec::with_capacity(n * hidden);
    let mut rec = Vec::with_capacity(n * g4);
    for t in 0..max_steps {
        let active: Vec<usize> = (0..n).filter(|&s| steps[s] > t).collect();
        h_prev.clear();
        for &s in &active {
            h_prev.extend_from_slice(&hs[s][t * hidden..(t + 1) * hidden]);
        }
        rec.clear();
        rec.resize(active.len() * g4, T::zero());
        gemm(
            T::one(),
            Mat::new(&h_prev, active.len(), hidden),
            Mat::new(w_hh, g4, hidden).t(),
            T::zero(),
            &mut rec,
            g4,
        );
        for (a, &s) in active.iter().enumerate() {
            let pre = &mut gates[(offsets[s] + t) * g4..(offsets[s] + t + 1) * g4];
            for (p, &r) in pre.iter_mut().zip(&rec[a * g4..(a + 1) * g4]) {
                *p += r;
            }
            let (c_prev, c_next) = cs[s].split_at_mut((t + 1) * hidden);
            let c_prev = &c_prev[t * hidden..];
            let h_next = &mut hs[s][(t + 1) * hidden..(t + 2) * hidden];
            for j in 0..hidden {
                let i = sigmoid(pre[j]);
                let f = sigmoid(pre[hidden + j]);
                let g = pre[2 * hidden + j].tanh();
                let o = sigmoid(pre[3 * hidden + j]);
                let c = f * c_prev[j] + i * g;
                pre[j] = i;
                pre[hidden + j] = f;
                pre[2 * hidden + j] = g;
                pre[3 * hidden + j] = o;
                c_next[j] = c;
                h_next[j] = o * c.tanh();
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for (s, ((xs, h), c)) in seqs.into_iter().zip(hs).zip(cs).enumerate() {
        out.push(LstmCache {
            steps: steps[s],
            hidden,
            input_dim,
            xs,
            hs: h,
            cs: c,
            gates: gates[offsets[s] * g4..(offsets[s] + steps[s]) * g4].to_vec(),
        });
    }
    out
}

/// Backpropagates a gradient on the final hidden state through all steps.
///
/// Parameter gradients are accumulated; `dxs` (`[steps, input_dim]`) is overwritten.
pub fn backward<T: Real>(
    cache: &LstmCache<T>,
    w_ih: &[T],
    w_hh: &[T],
    dh_last: &[T],
    dw_ih: &mut [T],
    dw_hh: &mut [T],
    dbias: &mut [T],
    dxs: &mut [T],
) {
    let d = backward_many(&[cache], w_ih, w_hh, dh_last, dw_ih, dw_hh, dbias);
    dxs.copy_from_slice(&d);
}

/// Backward pass of [`forward_many`]. `dh_last` is `[sequences, hidden]`.
///
/// Parameter gradients are accumulated. Returns the input gradients of all
/// sequences stacked in order (`[total steps, input_dim]`).
pub fn backward_many<T: Real>(
    caches: &[&LstmCache<T>],
    w_ih: &[T],
    w_hh: &[T],
    dh_last: &[T],
    dw_ih: &mut [T],
    dw_hh: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let Some(first) = caches.first() else {
        return Vec::new();
    };
    let (h, input_dim) = (first.hidden, first.input_dim);
    let g4 = 4 * h;
    let n = caches.len();
    let offsets: Vec<usize> = caches
        .iter()
        .scan(0, |acc, c| {
            let o = *acc;
            *acc += c.steps;
            Some(o)
        })
        .collect();
    let total: usize = caches.iter().map(|c| c.steps).sum();
    let max_steps = caches.iter().map(|c| c.steps).max().unwrap_or(0);
    let mut dh = dh_last.to_vec();
    let mut dc = vec![T::zero(); n * h];
    let mut dpre = vec![T::zero(); total * g4];
    let mut gathered = Vec::with_capacity(n * g4);
    let mut dh_prev = Vec::with_capacity(n * h);
    for t in (0..max_steps).rev() {
        let active: Vec<usize> = (0..n).filter(|&s| caches[s].steps > t).collect();
        gathered.clear();
        for &s in &active {
            let cache = caches[s];
            let gate = &cache.gates[t * g4..(t + 1) * g4];
            let c = &cache.cs[(t + 1) * h..(t + 2) * h];
            let c_prev = &cache.cs[t * h..(t + 1) * h];
            let d = &mut dpre[(offsets[s] + t) * g4..(offsets[s] + t + 1) * g4];
            let dh_s = &dh[s * h..(s + 1) * h];
            let dc_s = &mut dc[s * h..(s + 1) * h];
            for j in 0..h {
                let (i, f, g, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                let tc = c[j].tanh();
                let dcj = dc_s[j] + dh_s[j] * o * (T::one() - tc * tc);
                d[j] = dcj * g * i * (T::one() - i);
                d[h + j] = dcj * c_prev[j] * f * (T::one() - f);
                d[2 * h + j] = dcj * i * (T::one() - g * g);
                d[3 * h + j] = dh_s[j] * tc * o * (T::one() - o);
                dc_s[j] = dcj * f;
            }
            gathered.extend_from_slice(d);
        }
        // dh_{t-1} = dpre_t · W_hh
        dh_prev.clear();
        dh_prev.resize(active.len() * h, T::zero());
        gemm(
            T::one(),
            Mat::new(&gathered, active.len(), g4),
            Mat::new(w_hh, g4, h),
            T::zero(),
            &mut dh_prev,
            h,
        );
        for (a, &s) in active.iter().enumerate() {
            dh[s * h..(s + 1) * h].copy_from_slice(&dh_prev[a * h..(a + 1) * h]);
        }
    }
    let mut xs_all = Vec::with_capacity(total * input_dim);
    let mut hs_prev = Vec::with_capacity(total * h);
    for c in caches {
        xs_all.extend_from_slice(&c.xs);
        hs_prev.extend_from_slice(&c.hs[..c.steps * h]);
    }
    gemm(
        T::one(),
        Mat::new(&dpre, total, g4).t(),
        Mat::new(&xs_all, total, input_dim),
        T::one(),
        dw_ih,
        input_dim,
    );
    gemm(
        T::one(),
        Mat::new(&dpre, total, g4).t(),
        Mat::new(&hs_prev, total, h),
        T::one(),
        dw_hh,
        h,
    );
    for row in dpre.chunks_exact(g4) {
        for (b, &d) in dbias.iter_mut().zip(row) {
            *b += d;
        }
    }
    let mut dxs = vec![T::zero(); total * input_dim];
    gemm(
        T::one(),
        Mat::new(&dpre, total, g4),
        Mat::new(w_ih, g4, input_dim),
        T::zero(),
        &mut dxs,
        input_dim,
    );
    dxs
}
