//! Procedural datasets: 2-D toy distributions and paired LR/HR shape
//! sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{resample, Direction, ResampleMode, Tensor};

/// Every 2-D point lies in `[-BOX, BOX]^2`.
pub const BOX: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    TwoMoons,
    EightGaussians,
    Checkerboard,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(ToyKind::TwoMoons),
            "eight_gaussians" => Ok(ToyKind::EightGaussians),
            "checkerboard" => Ok(ToyKind::Checkerboard),
            other => Err(Error::Invalid(format!("unknown distribution `{other}`"))),
        }
    }
}

impl ToyKind {
    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::TwoMoons => "two_moons",
            ToyKind::EightGaussians => "eight_gaussians",
            ToyKind::Checkerboard => "checkerboard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDistribution {
    pub kind: ToyKind,
    pub n: usize,
    pub seed: u64,
}

/// Sample `n` points as an `[n, 2]` array.
pub fn gen_2d(dist: &ToyDistribution) -> Result<Tensor> {
    if dist.n == 0 {
        return Err(Error::Invalid("sample count must be positive".into()));
    }
    let mut rng = SeededRng::new(dist.seed);
    let mut data = Vec::with_capacity(2 * dist.n);
    for _ in 0..dist.n {
        let (x, y) = match dist.kind {
            ToyKind::TwoMoons => {
                let theta = std::f64::consts::PI * rng.uniform();
                let (x, y) = if rng.below(2) == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let x = x + 0.05 * rng.normal();
                let y = y + 0.05 * rng.normal();
                (1.5 * (x - 0.5), 1.5 * (y - 0.25))
            }
            ToyKind::EightGaussians => {
                let a = std::f64::consts::FRAC_PI_4 * rng.below(8) as f64;
                (2.0 * a.cos() + 0.15 * rng.normal(), 2.0 * a.sin() + 0.15 * rng.normal())
            }
            ToyKind::Checkerboard => {
                let x = 4.0 * rng.uniform() - 2.0;
                let y = rng.uniform() - 2.0 * rng.below(2) as f64 + (x.floor().rem_euclid(2.0));
                (x, y)
            }
        };
        data.push(x.clamp(-BOX, BOX));
        data.push(y.clamp(-BOX, BOX));
    }
    Tensor::new([dist.n, 2], data)
}

/// Moving discs and bars rendered at high resolution, with the low
/// resolution sequence defined as its exact block mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSequence {
    #[serde(default = "ShapeSequence::default_frames")]
    pub frames: usize,
    #[serde(default = "ShapeSequence::default_lr")]
    pub lr_h: usize,
    #[serde(default = "ShapeSequence::default_lr")]
    pub lr_w: usize,
    #[serde(default = "ShapeSequence::default_factor")]
    pub factor: usize,
    #[serde(default = "ShapeSequence::default_shapes")]
    pub n_shapes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ShapeSequence {
    fn default() -> Self {
        ShapeSequence {
            frames: 3,
            lr_h: 8,
            lr_w: 8,
            factor: 4,
            n_shapes: 2,
            seed: 0,
        }
    }
}

impl ShapeSequence {
    fn default_frames() -> usize {
        3
    }
    fn default_lr() -> usize {
        8
    }
    fn default_factor() -> usize {
        4
    }
    fn default_shapes() -> usize {
        2
    }

    pub fn hr_h(&self) -> usize {
        self.lr_h * self.factor
    }

    pub fn hr_w(&self) -> usize {
        self.lr_w * self.factor
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.factor) {
            return Err(Error::Invalid(format!("resize factor must be 2, 4 or 8, got {}", self.factor)));
        }
        if self.frames == 0 || self.lr_h == 0 || self.lr_w == 0 {
            return Err(Error::Invalid("frames and resolution must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Disc { cx: f64, cy: f64, r: f64 },
    Bar { cx: f64, cy: f64, half_len: f64, half_wid: f64, angle: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Mover {
    shape: Primitive,
    vx: f64,
    vy: f64,
    intensity: f64,
}

impl Mover {
    fn random(rng: &mut SeededRng) -> Self {
        let cx = 0.2 + 0.6 * rng.uniform();
        let cy = 0.2 + 0.6 * rng.uniform();
        let shape = if rng.below(2) == 0 {
            Primitive::Disc { cx, cy, r: 0.1 + 0.12 * rng.uniform() }
        } else {
            Primitive::Bar {
                cx,
                cy,
                half_len: 0.15 + 0.2 * rng.uniform(),
                half_wid: 0.05 + 0.05 * rng.uniform(),
                angle: std::f64::consts::PI * rng.uniform(),
            }
        };
        Mover {
            shape,
            vx: 0.08 * (2.0 * rng.uniform() - 1.0),
            vy: 0.08 * (2.0 * rng.uniform() - 1.0),
            intensity: 0.5 + 0.5 * rng.uniform(),
        }
    }

    fn covers(&self, frame: usize, x: f64, y: f64) -> bool {
        let (dx, dy) = (self.vx * frame as f64, self.vy * frame as f64);
        match self.shape {
            Primitive::Disc { cx, cy, r } => {
                let (px, py) = (x - cx - dx, y - cy - dy);
                px * px + py * py <= r * r
            }
            Primitive::Bar { cx, cy, half_len, half_wid, angle } => {
                let (px, py) = (x - cx - dx, y - cy - dy);
                let (s, c) = angle.sin_cos();
                let along = px * c + py * s;
                let across = -px * s + py * c;
                along.abs() <= half_len && across.abs() <= half_wid
            }
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Render one sequence; returns `(lr [F,h,w], hr [F,H,W])` in `[0, 1]`.
pub fn gen_shapes(spec: &ShapeSequence) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let movers: Vec<Mover> = (0..spec.n_shapes).map(|_| Mover::random(&mut rng)).collect();
    let (h, w) = (spec.hr_h(), spec.hr_w());
    let mut hr = Tensor::zeros([spec.frames, h, w]);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for f in 0..spec.frames {
        for i in 0..h {
            for j in 0..w {
                let mut value: f64 = 0.0;
                for m in &movers {
                    let mut hits = 0;
                    for si in 0..SUPERSAMPLE {
                        for sj in 0..SUPERSAMPLE {
                            let y = (i as f64 + (si as f64 + 0.5) / SUPERSAMPLE as f64) / h as f64;
                            let x = (j as f64 + (sj as f64 + 0.5) / SUPERSAMPLE as f64) / w as f64;
                            hits += usize::from(m.covers(f, x, y));
                        }
                    }
                    value = value.max(m.intensity * hits as f64 * inv);
                }
                hr.data_mut()[(f * h + i) * w + j] = value;
            }
        }
    }
    let lr = resample(&hr, spec.factor, Direction::Down, ResampleMode::BoxAverage)?;
    Ok((lr, hr))
}

/// `count` sequences with seeds derived from `spec.seed`, stacked as
/// `([count,F,h,w], [count,F,H,W])`.
pub fn gen_shape_corpus(spec: &ShapeSequence, count: usize) -> Result<(Tensor, Tensor)> {
    if count == 0 {
        return Err(Error::Invalid("corpus size must be positive".into()));
    }
    let mut lrs = Vec::with_capacity(count);
    let mut hrs = Vec::with_capacity(count);
    let mut seeds = SeededRng::derived(spec.seed, 0x5eed);
    for _ in 0..count {
        let item = ShapeSequence { seed: seeds.next_u64(), ..*spec };
        let (lr, hr) = gen_shapes(&item)?;
        lrs.push(lr);
        hrs.push(hr);
    }
    Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_is_deterministic_and_bounded() {
        let d = ToyDistribution { kind: ToyKind::TwoMoons, n: 1000, seed: 7 };
        let a = gen_2d(&d).unwrap();
        assert_eq!(a, gen_2d(&d).unwrap());
        assert!(a.data().iter().all(|v| v.abs() <= BOX));
    }

    #[test]
    fn eight_gaussians_centered() {
        let d = ToyDistribution { kind: ToyKind::EightGaussians, n: 10_000, seed: 3 };
        let a = gen_2d(&d).unwrap();
        let (mut mx, mut my) = (0.0, 0.0);
        for r in a.data().chunks(2) {
            mx += r[0];
            my += r[1];
        }
        assert!((mx / 1e4f64).abs() < 0.1 && (my / 1e4f64).abs() < 0.1);
    }

    #[test]
    fn checkerboard_in_box() {
        let d = ToyDistribution { kind: ToyKind::Checkerboard, n: 5000, seed: 1 };
        let a = gen_2d(&d).unwrap();
        assert!(a.data().iter().all(|v| v.abs() <= 2.0));
        assert!("mystery".parse::<ToyKind>().is_err());
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let spec = ShapeSequence { n_shapes: 0, ..Default::default() };
        let (lr, hr) = gen_shapes(&spec).unwrap();
        assert_eq!(lr.shape(), &[3, 8, 8]);
        assert_eq!(hr.shape(), &[3, 32, 32]);
        assert!(lr.data().iter().chain(hr.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_are_deterministic_and_in_range() {
        let spec = ShapeSequence { seed: 42, ..Default::default() };
        let (lr, hr) = gen_shapes(&spec).unwrap();
        assert_eq!((lr.clone(), hr.clone()), gen_shapes(&spec).unwrap());
        assert!(hr.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(hr.max_abs() > 0.0);
    }

    #[test]
    fn invalid_factor_rejected() {
        let spec = ShapeSequence { factor: 3, ..Default::default() };
        assert!(gen_shapes(&spec).is_err());
    }
}
