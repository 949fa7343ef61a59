//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{consistency_target, noisy_states, VelocityModel};
use crate::rng::SeededRng;
use crate::schedule::{candidate_steps, NoiseSchedule, StepSampler};
use crate::tensor::{resample, Direction, Graph, ResampleMode, Tensor};

/// One evaluated metric with enough context to recompute it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    /// Metric settings, e.g. `kset=1,2,3`.
    pub config: String,
    /// Input paths or descriptions.
    pub inputs: String,
    pub seeds: String,
    pub note: String,
}

/// Default scale exponents: block sizes 8, 16 and 32.
pub const DEFAULT_KSET: [u32; 3] = [3, 4, 5];

/// Multi-scale high-detail MSE.
///
/// For each `k` the video is box-averaged down by `2^k`, replicated back up,
/// and compared with the original; the per-scale mean squared errors are
/// averaged. Spatial axes are the trailing two, so `[F,C,H,W]`, `[F,H,W]`
/// and `[H,W]` inputs all work.
pub fn mhd_mse(video: &Tensor, kset: &[u32]) -> Result<f64> {
    if kset.is_empty() {
        return Err(Error::Invalid("k-set must be non-empty".into()));
    }
    let mut total = 0.0;
    for &k in kset {
        let f = 1usize
            .checked_shl(k)
            .ok_or_else(|| Error::Invalid(format!("scale exponent {k} too large")))?;
        let down = resample(video, f, Direction::Down, ResampleMode::BoxAverage)?;
        let up = resample(&down, f, Direction::Up, ResampleMode::Nearest)?;
        let sq: f64 = video
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq / video.len() as f64;
    }
    Ok(total / kset.len() as f64)
}

/// Squared 1-D Wasserstein-2 distance between two sorted samples with
/// uniform weights, integrating the quantile functions exactly.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    // positions measured in units of 1 / (n m)
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0usize;
    let total = n * m;
    let mut acc = 0.0;
    while pos < total {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += d * d * (next - pos) as f64;
        pos = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    acc / total as f64
}

/// Monte-Carlo sliced Wasserstein-2 distance between point clouds
/// `[n, d]` and `[m, d]`: the square root of the mean over `n_proj` random
/// unit directions of the squared 1-D distance between projections.
pub fn sliced_w2(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("sliced_w2", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if n_proj == 0 {
        return Err(Error::Invalid("projection count must be positive".into()));
    }
    let d = a.shape()[1];
    let mut rng = SeededRng::new(seed);
    let project = |t: &Tensor, dir: &[f64]| -> Vec<f64> {
        let mut v: Vec<f64> = t
            .data()
            .chunks(d)
            .map(|r| r.iter().zip(dir).map(|(x, y)| x * y).sum())
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let mut acc = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        acc += w2_sq_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok((acc / n_proj as f64).sqrt())
}

/// Unweighted self-consistency residual over every anchor index and
/// candidate step: mean of `||s(x, T, 2h) - target(x, T, h)||^2` with
/// `h = floor(dT_k / 2)`, skipping `h = 0`.
pub fn sc_residual<M: VelocityModel>(
    model: &M,
    sched: &NoiseSchedule,
    sampler: &StepSampler,
    noise: &Tensor,
    data: &Tensor,
    cond: Option<&Tensor>,
) -> Result<f64> {
    let mut pairs = Vec::new();
    for &t in &sampler.anchors {
        for dt in candidate_steps(t, sampler.k, sampler.min_step)? {
            if dt / 2 > 0 {
                pairs.push((t, dt / 2));
            }
        }
    }
    sc_residual_at(model, sched, &pairs, noise, data, cond)
}

/// [`sc_residual`] over an explicit list of `(T, half_step)` pairs.
pub fn sc_residual_at<M: VelocityModel>(
    model: &M,
    sched: &NoiseSchedule,
    pairs: &[(usize, usize)],
    noise: &Tensor,
    data: &Tensor,
    cond: Option<&Tensor>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no consistency pairs to evaluate".into()));
    }
    let b = data.shape()[0];
    let mut total = 0.0;
    for &(t, half) in pairs {
        let ts = vec![t; b];
        let hs = vec![half; b];
        let doubles = vec![2 * half; b];
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let xt = g.constant(noisy_states(sched, noise, data, &ts)?);
        let target = consistency_target(&mut g, model, &p, sched, xt, &ts, &hs, cond)?;
        let pred = model.forward(&mut g, &p, xt, &ts, &doubles, cond)?;
        let diff = g.sub(pred, target)?;
        let per_row = g.row_sq_norm(diff)?;
        total += g.value(per_row).mean();
    }
    Ok(total / pairs.len() as f64)
}

/// Latency normalized per pixel and per frame.
pub fn latency_metrics(latency_s: f64, frames: usize, h: usize, w: usize) -> Result<(f64, f64)> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid("frames and resolution must be positive".into()));
    }
    if !(latency_s >= 0.0 && latency_s.is_finite()) {
        return Err(Error::Invalid(format!("latency must be finite and >= 0, got {latency_s}")));
    }
    let per_pixel = latency_s / (frames as f64 * h as f64 * w as f64);
    Ok((per_pixel, latency_s / frames as f64))
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid("pearson needs two equal samples of length >= 2".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}
