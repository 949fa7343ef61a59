use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
}

/// Interpolation kernel. `BoxAverage` is the block mean when going down and
/// piecewise-constant replication when going up; `Nearest` picks the
/// top-left sample of each block when going down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Nearest,
    BoxAverage,
}

/// Shape bookkeeping shared by the plain function and the graph op.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ResampleGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub factor: usize,
    pub direction: Direction,
    pub mode: ResampleMode,
}

impl ResampleGeom {
    pub fn new(shape: &[usize], factor: usize, direction: Direction, mode: ResampleMode) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape("resample", format!("need rank >= 2, got {shape:?}")));
        }
        if factor == 0 {
            return Err(Error::Invalid("resample factor must be positive".into()));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if direction == Direction::Down && (h % factor != 0 || w % factor != 0) {
            return Err(Error::shape(
                "resample",
                format!("{h}x{w} not divisible by factor {factor}"),
            ));
        }
        Ok(ResampleGeom {
            planes: shape[..shape.len() - 2].iter().product(),
            h,
            w,
            factor,
            direction,
            mode,
        })
    }

    pub fn out_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut out = shape.to_vec();
        let n = out.len();
        match self.direction {
            Direction::Down => {
                out[n - 2] /= self.factor;
                out[n - 1] /= self.factor;
            }
            Direction::Up => {
                out[n - 2] *= self.factor;
                out[n - 1] *= self.factor;
            }
        }
        out
    }

    /// Small-grid and large-grid sizes for this op.
    fn grids(&self) -> ((usize, usize), (usize, usize)) {
        let f = self.factor;
        match self.direction {
            Direction::Down => ((self.h / f, self.w / f), (self.h, self.w)),
            Direction::Up => ((self.h, self.w), (self.h * f, self.w * f)),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let f = self.factor;
        let ((sh, sw), (bh, bw)) = self.grids();
        match self.direction {
            Direction::Down => {
                let mut out = vec![0.0; self.planes * sh * sw];
                let norm = 1.0 / (f * f) as f64;
                for p in 0..self.planes {
                    let src = &x[p * bh * bw..(p + 1) * bh * bw];
                    let dst = &mut out[p * sh * sw..(p + 1) * sh * sw];
                    for i in 0..sh {
                        for j in 0..sw {
                            dst[i * sw + j] = match self.mode {
                                ResampleMode::BoxAverage => {
                                    // summed relative to the first pixel so constant
                                    // blocks average to themselves exactly
                                    let base = src[(i * f) * bw + j * f];
                                    let mut acc = 0.0;
                                    for di in 0..f {
                                        for dj in 0..f {
                                            acc += src[(i * f + di) * bw + j * f + dj] - base;
                                        }
                                    }
                                    base + acc * norm
                                }
                                ResampleMode::Nearest => src[(i * f) * bw + j * f],
                            };
                        }
                    }
                }
                out
            }
            Direction::Up => {
                let mut out = vec![0.0; self.planes * bh * bw];
                for p in 0..self.planes {
                    let src = &x[p * sh * sw..(p + 1) * sh * sw];
                    let dst = &mut out[p * bh * bw..(p + 1) * bh * bw];
                    for i in 0..bh {
                        for j in 0..bw {
                            dst[i * bw + j] = src[(i / f) * sw + j / f];
                        }
                    }
                }
                out
            }
        }
    }

    /// Adjoint of [`Self::forward`].
    pub fn backward(&self, dout: &[f64]) -> Vec<f64> {
        let f = self.factor;
        let ((sh, sw), (bh, bw)) = self.grids();
        match self.direction {
            Direction::Down => {
                let mut dx = vec![0.0; self.planes * bh * bw];
                let norm = 1.0 / (f * f) as f64;
                for p in 0..self.planes {
                    let g = &dout[p * sh * sw..(p + 1) * sh * sw];
                    let dst = &mut dx[p * bh * bw..(p + 1) * bh * bw];
                    for i in 0..sh {
                        for j in 0..sw {
                            match self.mode {
                                ResampleMode::BoxAverage => {
                                    for di in 0..f {
                                        for dj in 0..f {
                                            dst[(i * f + di) * bw + j * f + dj] = g[i * sw + j] * norm;
                                        }
                                    }
                                }
                                ResampleMode::Nearest => dst[(i * f) * bw + j * f] = g[i * sw + j],
                            }
                        }
                    }
                }
                dx
            }
            Direction::Up => {
                let mut dx = vec![0.0; self.planes * sh * sw];
                for p in 0..self.planes {
                    let g = &dout[p * bh * bw..(p + 1) * bh * bw];
                    let dst = &mut dx[p * sh * sw..(p + 1) * sh * sw];
                    for i in 0..bh {
                        for j in 0..bw {
                            dst[(i / f) * sw + j / f] += g[i * bw + j];
                        }
                    }
                }
                dx
            }
        }
    }
}

/// Resample the trailing two (spatial) axes of `x` by an integer factor.
pub fn resample(x: &Tensor, factor: usize, direction: Direction, mode: ResampleMode) -> Result<Tensor> {
    let geom = ResampleGeom::new(x.shape(), factor, direction, mode)?;
    Tensor::new(geom.out_shape(x.shape()), geom.forward(x.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_block_mean() {
        let x = Tensor::new([2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = resample(&x, 2, Direction::Down, ResampleMode::BoxAverage).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn constant_round_trip() {
        let x = Tensor::full([3, 8, 8], 0.25);
        for f in [1, 2, 4, 8] {
            let d = resample(&x, f, Direction::Down, ResampleMode::BoxAverage).unwrap();
            let u = resample(&d, f, Direction::Up, ResampleMode::BoxAverage).unwrap();
            assert_eq!(u, x);
        }
    }

    #[test]
    fn non_divisible_down_is_an_error() {
        let x = Tensor::zeros([6, 6]);
        assert!(resample(&x, 4, Direction::Down, ResampleMode::BoxAverage).is_err());
        assert!(resample(&x, 4, Direction::Up, ResampleMode::Nearest).is_ok());
    }
}
