use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Geometry of a stride-1 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Validates `x` as `[C,H,W]` or `[B,C,H,W]` against `kernel` `[Co,Ci,kh,kw]`.
    pub fn new(x: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        let (batch, c_in, h, w) = match *x {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be rank 3 or 4, got {x:?}"))),
        };
        let [c_out, k_in, kh, kw] = *kernel else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {kernel:?}")));
        };
        if k_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {k_in}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            pad,
            h_out: h + 2 * pad - kh + 1,
            w_out: w + 2 * pad - kw + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.col_cols()
    }

    /// Output columns `lo..hi` whose input column `oj + dj - pad` is in range.
    fn valid_cols(&self, dj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(dj).min(self.w_out);
        let hi = (self.w + self.pad).saturating_sub(dj).min(self.w_out).max(lo);
        (lo, hi)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n = self.col_cols();
        for c in 0..self.c_in {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (c * self.kh + di) * self.kw + dj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..self.h_out {
                        let ii = (oi + di) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.w_out..(oi + 1) * self.w_out];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        let (lo, hi) = self.valid_cols(dj);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let start = lo + dj - self.pad;
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let n = self.col_cols();
        for c in 0..self.c_in {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (c * self.kh + di) * self.kw + dj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..self.h_out {
                        let ii = (oi + di) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ii as usize) * self.w..][..self.w];
                        let (lo, hi) = self.valid_cols(dj);
                        if lo < hi {
                            let start = lo + dj - self.pad;
                            let row = &src[oi * self.w_out + lo..oi * self.w_out + hi];
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (rows, n) = (self.col_rows(), self.col_cols());
        let mut cols = vec![0.0; rows * n];
        let mut out = vec![0.0; self.out_len()];
        let in_len = self.c_in * self.h * self.w;
        let out_per = self.c_out * n;
        for b in 0..self.batch {
            self.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(
                self.c_out,
                rows,
                n,
                kernel,
                false,
                &cols,
                false,
                &mut out[b * out_per..(b + 1) * out_per],
                0.0,
            );
        }
        out
    }

    /// Returns `(dx, dkernel)`; either may be skipped.
    pub fn backward(
        &self,
        x: &[f64],
        kernel: &[f64],
        dout: &[f64],
        want_dx: bool,
        want_dk: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (rows, n) = (self.col_rows(), self.col_cols());
        let in_len = self.c_in * self.h * self.w;
        let out_per = self.c_out * n;
        let mut cols = vec![0.0; rows * n];
        let mut dx = want_dx.then(|| vec![0.0; self.batch * in_len]);
        let mut dk = want_dk.then(|| vec![0.0; kernel.len()]);
        for b in 0..self.batch {
            let dy = &dout[b * out_per..(b + 1) * out_per];
            if let Some(dk) = dk.as_mut() {
                self.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
                // dK[Co, rows] += dY[Co, n] * cols[rows, n]^T
                gemm(self.c_out, n, rows, dy, false, &cols, true, dk, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[rows, n] = K[Co, rows]^T * dY[Co, n]
                gemm(rows, self.c_out, n, kernel, true, dy, false, &mut cols, 0.0);
                self.col2im_add(&cols, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
        (dx, dk)
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.c_out, self.h_out, self.w_out]
        }
    }
}

/// Stride-1 cross-correlation of `x` (`[C_in,H,W]` or `[B,C_in,H,W]`) with
/// `kernel` (`[C_out,C_in,k,k]`), zero padding `padding` on each side.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(x.shape(), kernel.shape(), padding)?;
    let out = geom.forward(x.data(), kernel.data());
    Tensor::new(geom.out_shape(x.ndim() == 4), out)
}
