use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{resample, Direction, ResampleMode, Tensor};

/// Blur, downsample and noise settings used to manufacture training
/// anchors from ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeConfig {
    #[serde(default = "DegradeConfig::default_blur")]
    pub blur_sigma: f64,
    #[serde(default = "DegradeConfig::default_factor")]
    pub resize_factor: usize,
    #[serde(default = "DegradeConfig::default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            blur_sigma: 1.0,
            resize_factor: 4,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl DegradeConfig {
    fn default_blur() -> f64 {
        1.0
    }
    fn default_factor() -> usize {
        4
    }
    fn default_noise() -> f64 {
        0.05
    }

    /// Every stage disabled.
    pub fn identity() -> Self {
        DegradeConfig {
            blur_sigma: 0.0,
            resize_factor: 1,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("degrade sigmas must be >= 0".into()));
        }
        if self.resize_factor == 0 {
            return Err(Error::Config("degrade.resize_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur over the trailing two axes, replicating edge
/// pixels so constants are fixed points.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::shape("gaussian_blur", format!("need rank >= 2, got {:?}", x.shape())));
    }
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut tmp = x.clone();
    let mut out = x.clone();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for (src, dst) in x.data().chunks(h * w).zip(tmp.data_mut().chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * src[i * w + clamp(j as isize + k as isize - r, w)])
                    .sum();
            }
        }
    }
    for (src, dst) in tmp.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * src[clamp(i as isize + k as isize - r, h) * w + j])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Gaussian blur, box-average downsample by `resize_factor`, then additive
/// Gaussian noise of standard deviation `noise_sigma`.
pub fn degrade(x_hr: &Tensor, cfg: &DegradeConfig, rng: &mut SeededRng) -> Result<Tensor> {
    cfg.validate()?;
    let blurred = gaussian_blur(x_hr, cfg.blur_sigma)?;
    let mut out = resample(&blurred, cfg.resize_factor, Direction::Down, ResampleMode::BoxAverage)?;
    if cfg.noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    }
    Ok(out)
}
