//! Dilated 2-D convolution over channel-major batches.
//!
//! Activations are laid out `[channels, batch, height, width]` so that a
//! whole batch is one matrix product against the unfolded input.

use super::real::{gemm, Mat, Real};

/// Upper bound on unfolded-input elements materialized at once.
const COLS_BUDGET: usize = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// "Same"-style padding of `dilation·(kernel−1)/2`.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        h: usize,
        w: usize,
    ) -> Option<Self> {
        if kernel == 0 || dilation == 0 || stride == 0 {
            return None;
        }
        let pad = dilation * (kernel - 1) / 2;
        let span = dilation * (kernel - 1) + 1;
        if h + 2 * pad < span || w + 2 * pad < span {
            return None;
        }
        let oh = (h + 2 * pad - span) / stride + 1;
        let ow = (w + 2 * pad - span) / stride + 1;
        Some(Self {
            cin,
            cout,
            kernel,
            dilation,
            stride,
            pad,
            h,
            w,
            oh,
            ow,
        })
    }

    /// Rows of the unfolded input.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn chunk(&self, n: usize) -> usize {
        (COLS_BUDGET / (self.patch_len() * self.out_plane()).max(1)).clamp(1, n.max(1))
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    /// Output coordinates `lo..hi` whose tap `k` reads inside `[0, limit)`.
    #[inline]
    fn valid_range(&self, k: usize, limit: usize, out_len: usize) -> (usize, usize) {
        let offset = (k * self.dilation) as isize - self.pad as isize;
        let st = self.stride as isize;
        let lo = if offset >= 0 {
            0
        } else {
            ((-offset + st - 1) / st) as usize
        };
        let last = limit as isize - 1 - offset;
        let hi = if last < 0 {
            0
        } else {
            ((last / st) as usize + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }

    /// Unfolds samples `n0..n0+nc` of `input` (`[cin, n, h, w]`) into
    /// `cols` (`[patch_len, nc·oh·ow]`).
    fn im2col<T: Real>(&self, input: &[T], n: usize, n0: usize, nc: usize, cols: &mut [T]) {
        let p = self.out_plane();
        let row_len = nc * p;
        for ci in 0..self.cin {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let (lo, hi) = self.valid_range(kx, self.w, self.ow);
                    let row = (ci * self.kernel + ky) * self.kernel + kx;
                    let dst_row = &mut cols[row * row_len..(row + 1) * row_len];
                    for s in 0..nc {
                        let plane =
                            &input[(ci * n + n0 + s) * self.in_plane()..][..self.in_plane()];
                        let dst = &mut dst_row[s * p..(s + 1) * p];
                        for oy in 0..self.oh {
                            let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                            let Some(iy) = self.src(oy, ky, self.h) else {
                                d.fill(T::zero());
                                continue;
                            };
                            let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                            d[..lo].fill(T::zero());
                            d[hi..].fill(T::zero());
                            if lo == hi {
                                continue;
                            }
                            let first = lo * self.stride + kx * self.dilation - self.pad;
                            if self.stride == 1 {
                                d[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                            } else {
                                for (j, v) in d[lo..hi].iter_mut().enumerate() {
                                    *v = src_row[first + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `cols` back onto `dinput`.
    fn col2im<T: Real>(&self, cols: &[T], n: usize, n0: usize, nc: usize, dinput: &mut [T]) {
        let p = self.out_plane();
        let row_len = nc * p;
        let in_plane = self.in_plane();
        for ci in 0..self.cin {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let (lo, hi) = self.valid_range(kx, self.w, self.ow);
                    let row = (ci * self.kernel + ky) * self.kernel + kx;
                    let src_row = &cols[row * row_len..(row + 1) * row_len];
                    for s in 0..nc {
                        let plane = &mut dinput[(ci * n + n0 + s) * in_plane..][..in_plane];
                        let src = &src_row[s * p..(s + 1) * p];
                        for oy in 0..self.oh {
                            let Some(iy) = self.src(oy, ky, self.h) else {
                                continue;
                            };
                            if lo == hi {
                                continue;
                            }
                            let s_row = &src[oy * self.ow + lo..oy * self.ow + hi];
                            let d_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                            let first = lo * self.stride + kx * self.dilation - self.pad;
                            for (j, &v) in s_row.iter().enumerate() {
                                d_row[first + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out` (`[cout, n, oh, ow]`) ← `weight` (`[cout, cin, k, k]`) ⊛ `input`.
    pub fn forward<T: Real>(&self, weight: &[T], input: &[T], n: usize, out: &mut [T]) {
        debug_assert_eq!(input.len(), self.cin * n * self.in_plane());
        debug_assert_eq!(out.len(), self.cout * n * self.out_plane());
        let k = self.patch_len();
        let p = self.out_plane();
        let chunk = self.chunk(n);
        let mut cols = vec![T::zero(); k * chunk * p];
        let mut n0 = 0;
        while n0 < n {
            let nc = chunk.min(n - n0);
            let cols = &mut cols[..k * nc * p];
            self.im2col(input, n, n0, nc, cols);
            gemm(
                T::one(),
                Mat::new(weight, self.cout, k),
                Mat::new(cols, k, nc * p),
                T::zero(),
                &mut out[n0 * p..],
                n * p,
            );
            n0 += nc;
        }
    }

    /// Accumulates the weight gradient into `dweight` and, when requested,
    /// writes the input gradient into `dinput` (overwriting it).
    pub fn backward<T: Real>(
        &self,
        weight: &[T],
        input: &[T],
        dout: &[T],
        n: usize,
        dweight: &mut [T],
        mut dinput: Option<&mut [T]>,
    ) {
        let k = self.patch_len();
        let p = self.out_plane();
        let chunk = self.chunk(n);
        let mut cols = vec![T::zero(); k * chunk * p];
        if let Some(d) = dinput.as_deref_mut() {
            d.fill(T::zero());
        }
        let mut n0 = 0;
        while n0 < n {
            let nc = chunk.min(n - n0);
            let cols = &mut cols[..k * nc * p];
            let dout_view = Mat {
                data: &dout[n0 * p..],
                rows: self.cout,
                cols: nc * p,
                ld: n * p,
                transposed: false,
            };
            self.im2col(input, n, n0, nc, cols);
            gemm(
                T::one(),
                dout_view,
                Mat::new(cols, k, nc * p).t(),
                T::one(),
                dweight,
                k,
            );
            if let Some(d) = dinput.as_deref_mut() {
                gemm(
                    T::one(),
                    Mat::new(weight, self.cout, k).t(),
                    dout_view,
                    T::zero(),
                    cols,
                    nc * p,
                );
                self.col2im(cols, n, n0, nc, d);
            }
            n0 += nc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution, sample-major-agnostic via the same layout.
    fn naive(g: &ConvGeom, wt: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * n * g.out_plane()];
        for co in 0..g.cout {
            for s in 0..n {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy =
                                        (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                    let ix =
                                        (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ci * n + s) * g.h + iy as usize) * g.w + ix as usize;
                                    let wi = ((co * g.cin + ci) * g.kernel + ky) * g.kernel + kx;
                                    acc += wt[wi] * x[xi];
                                }
                            }
                        }
                        out[((co * n + s) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn data(len: usize, seed: f64) -> Vec<f64> {
        (0..len)
            .map(|i| ((i as f64 + seed) * 0.731).sin())
            .collect()
    }

    #[test]
    fn output_sizes() {
        let g = ConvGeom::new(2, 16, 3, 1, 2, 64, 64).unwrap();
        assert_eq!((g.oh, g.ow), (32, 32));
        let g = ConvGeom::new(16, 32, 3, 8, 1, 16, 16).unwrap();
        assert_eq!((g.oh, g.ow, g.pad), (16, 16, 8));
        assert!(ConvGeom::new(1, 1, 3, 1, 0, 8, 8).is_none());
    }

    #[test]
    fn forward_matches_naive() {
        for (stride, dil) in [(1, 1), (1, 2), (2, 1), (2, 3)] {
            let g = ConvGeom::new(3, 4, 3, dil, stride, 7, 9).unwrap();
            let n = 2;
            let w = data(4 * 3 * 9, 1.0);
            let x = data(3 * n * 63, 2.0);
            let mut out = vec![0.0; 4 * n * g.out_plane()];
            g.forward(&w, &x, n, &mut out);
            let expect = naive(&g, &w, &x, n);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride {stride} dil {dil}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <dout, conv(x)> is bilinear in (w, x): its gradients are exact.
        let g = ConvGeom::new(2, 3, 3, 2, 2, 8, 7).unwrap();
        let n = 3;
        let w = data(3 * 2 * 9, 0.3);
        let x = data(2 * n * 56, 0.9);
        let dout = data(3 * n * g.out_plane(), 4.0);
        let mut dw = vec![0.0; w.len()];
        let mut dx = vec![0.0; x.len()];
        g.backward(&w, &x, &dout, n, &mut dw, Some(&mut dx));
        let f = |w: &[f64], x: &[f64]| -> f64 {
            naive(&g, w, x, n)
                .iter()
                .zip(&dout)
                .map(|(a, b)| a * b)
                .sum()
        };
        let base = f(&w, &x);
        for i in [0, 7, 20, w.len() - 1] {
            let mut w2 = w.clone();
            w2[i] += 1.0;
            assert!((f(&w2, &x) - base - dw[i]).abs() < 1e-9);
        }
        for i in [0, 13, 55, x.len() - 1] {
            let mut x2 = x.clone();
            x2[i] += 1.0;
            assert!((f(&w, &x2) - base - dx[i]).abs() < 1e-9);
        }
    }
}
