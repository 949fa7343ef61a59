//! Flow-matching and self-consistency objectives.
//!
//! The probability path is `x = sigma * noise + (1 - sigma) * data` with
//! `sigma = sigma(T)`, so the flow velocity toward data is `data - noise`.
//! A step of size `dT` from index `T` moves the state by
//! `noise_span(T, dT) * s(x, T, dT)`.

use super::net::VelocityModel;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::{NoiseSchedule, StepSampler};
use crate::tensor::{Graph, Tensor, Var};

/// Linear path between `x0` and `x1`: `((1-t) x0 + t x1, x1 - x0)`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    x0.expect_same_shape(x1, "interpolate")?;
    let xt = x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)?;
    let ut = x1.sub(x0)?;
    Ok((xt, ut))
}

/// Row-wise noisy states at the given indices: row `b` is the path point
/// at `t = 1 - sigma(T_b)`.
pub fn noisy_states(sched: &NoiseSchedule, noise: &Tensor, data: &Tensor, t: &[usize]) -> Result<Tensor> {
    noise.expect_same_shape(data, "noisy_states")?;
    let n = noise.row_len();
    let mut out = Vec::with_capacity(noise.len());
    for (b, &ti) in t.iter().enumerate() {
        let s = sched.sigma(ti)?;
        out.extend(
            noise.data()[b * n..(b + 1) * n]
                .iter()
                .zip(&data.data()[b * n..(b + 1) * n])
                .map(|(&z, &x)| s * z + (1.0 - s) * x),
        );
    }
    Tensor::new(noise.shape().to_vec(), out)
}

fn check_batch(x0: &Tensor, x1: &Tensor) -> Result<usize> {
    x0.expect_same_shape(x1, "batch")?;
    let b = x0.shape()[0];
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    Ok(b)
}

/// `mean_b ||pred_b - target_b||^2`, optionally weighted per row.
fn weighted_sq_error(g: &mut Graph, pred: Var, target: Var, weights: Option<&[f64]>) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let per_row = g.row_sq_norm(diff)?;
    let per_row = match weights {
        Some(w) => {
            let wv = g.constant(Tensor::from_vec(w.to_vec()));
            g.mul(per_row, wv)?
        }
        None => per_row,
    };
    g.mean(per_row)
}

/// Flow-matching loss at step size zero with `T` uniform on `1..=N`.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    sched: &NoiseSchedule,
    x0: &Tensor,
    x1: &Tensor,
    cond: Option<&Tensor>,
    rng: &mut SeededRng,
) -> Result<Var> {
    let b = check_batch(x0, x1)?;
    let t: Vec<usize> = (0..b).map(|_| rng.int_inclusive(1, sched.n)).collect();
    fm_loss_at(g, model, p, sched, x0, x1, cond, &t)
}

/// [`fm_loss`] at caller-chosen indices.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss_at<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    sched: &NoiseSchedule,
    x0: &Tensor,
    x1: &Tensor,
    cond: Option<&Tensor>,
    t: &[usize],
) -> Result<Var> {
    let b = check_batch(x0, x1)?;
    if t.len() != b {
        return Err(Error::shape("fm_loss", format!("{b} rows vs {} indices", t.len())));
    }
    let xt = g.constant(noisy_states(sched, x0, x1, t)?);
    let target = g.constant(x1.sub(x0)?);
    let pred = model.forward(g, p, xt, t, &vec![0; b], cond)?;
    weighted_sq_error(g, pred, target, None)
}

fn spans(sched: &NoiseSchedule, t: &[usize], dt: &[usize]) -> Result<Vec<f64>> {
    t.iter().zip(dt).map(|(&ti, &di)| sched.noise_span(ti, di)).collect()
}

/// One shortcut update on the graph: `x + noise_span(T, dT) * s(x, T, dT)`.
#[allow(clippy::too_many_arguments)]
pub fn shortcut_update<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    sched: &NoiseSchedule,
    x: Var,
    t: &[usize],
    dt: &[usize],
    cond: Option<&Tensor>,
) -> Result<Var> {
    let h = g.constant(Tensor::from_vec(spans(sched, t, dt)?));
    let v = model.forward(g, p, x, t, dt, cond)?;
    let step = g.scale_rows(v, h)?;
    g.add(x, step)
}

/// Gradient-free shortcut step on tensors; the new index is `T - dT`.
pub fn shortcut_step<M: VelocityModel>(
    model: &M,
    sched: &NoiseSchedule,
    x: &Tensor,
    t: &[usize],
    dt: &[usize],
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = shortcut_update(&mut g, model, &p, sched, xv, t, dt, cond)?;
    Ok(g.value(out).clone())
}

/// Span-weighted average velocity of two half steps, detached from the tape:
/// `SG[(h1 s(x, T, d) + h2 s(x', T - d, d)) / (h1 + h2)]` where `x'` is the
/// first half step and `h1`, `h2` are the two noise spans. Chaining the two
/// half steps then lands exactly where one step of the combined span does.
/// Under a linear schedule the weights are both 1/2.
#[allow(clippy::too_many_arguments)]
pub fn consistency_target<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    sched: &NoiseSchedule,
    x: Var,
    t: &[usize],
    dt: &[usize],
    cond: Option<&Tensor>,
) -> Result<Var> {
    for (&ti, &di) in t.iter().zip(dt) {
        if 2 * di > ti {
            return Err(Error::OutOfRange(format!("two steps of {di} overshoot T={ti}")));
        }
    }
    let h = g.constant(Tensor::from_vec(spans(sched, t, dt)?));
    let v1 = model.forward(g, p, x, t, dt, cond)?;
    let step = g.scale_rows(v1, h)?;
    let x_mid = g.add(x, step)?;
    let t_mid: Vec<usize> = t.iter().zip(dt).map(|(a, b)| a - b).collect();
    let v2 = model.forward(g, p, x_mid, &t_mid, dt, cond)?;
    let h2 = spans(sched, &t_mid, dt)?;
    let w2: Vec<f64> = g
        .value(h)
        .data()
        .iter()
        .zip(&h2)
        .map(|(&a, &b)| if a + b > 0.0 { b / (a + b) } else { 0.5 })
        .collect();
    // v1 + w2 (v2 - v1): exact when both half steps agree
    let w2 = g.constant(Tensor::from_vec(w2));
    let delta = g.sub(v2, v1)?;
    let delta = g.scale_rows(delta, w2)?;
    let avg = g.add(v1, delta)?;
    Ok(g.stop_gradient(avg))
}

/// Settings for the weighted self-consistency objective.
#[derive(Clone, Debug, PartialEq)]
pub struct AncSettings {
    pub sampler: StepSampler,
    /// Sensitivity exponent of the noise-span weight; `None` disables
    /// calibration (unit weights).
    pub calibration: Option<f64>,
}

/// Result of [`anc_loss`].
#[derive(Clone, Copy, Debug)]
pub struct AncLoss {
    pub loss: Var,
    pub lambda_mean: f64,
}

/// One self-consistency pair: index, half step, and weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyPair {
    pub t: usize,
    pub half: usize,
    pub weight: f64,
}

/// Draw `(T, dT)` and convert to a supervised double step `2 * floor(dT/2)`.
/// Draws whose half step rounds to zero are redrawn.
pub fn draw_pair(settings: &AncSettings, sched: &NoiseSchedule, rng: &mut SeededRng) -> Result<ConsistencyPair> {
    for _ in 0..10_000 {
        let d = settings.sampler.sample(rng)?;
        let half = d.dt / 2;
        if half == 0 {
            continue;
        }
        let weight = match settings.calibration {
            Some(p) => sched.calibration_weight(d.t, 2 * half, p)?,
            None => 1.0,
        };
        return Ok(ConsistencyPair { t: d.t, half, weight });
    }
    Err(Error::Invalid("sampler never produced a step of at least 2".into()))
}

/// Weighted self-consistency loss at the given pairs.
#[allow(clippy::too_many_arguments)]
pub fn anc_loss_at<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    sched: &NoiseSchedule,
    x0: &Tensor,
    x1: &Tensor,
    cond: Option<&Tensor>,
    pairs: &[ConsistencyPair],
) -> Result<AncLoss> {
    anc_loss_split(g, model, p, p, sched, x0, x1, cond, pairs)
}

/// [`anc_loss_at`] with the target evaluated on its own parameter handles
/// `target_p`. Passing constant handles bound to the current weights gives
/// the frozen-target objective whose gradient the stop-gradient defines,
/// which is what a finite-difference check has to perturb.
#[allow(clippy::too_many_arguments)]
pub fn anc_loss_split<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    target_p: &[Var],
    sched: &NoiseSchedule,
    x0: &Tensor,
    x1: &Tensor,
    cond: Option<&Tensor>,
    pairs: &[ConsistencyPair],
) -> Result<AncLoss> {
    let b = check_batch(x0, x1)?;
    if pairs.len() != b {
        return Err(Error::shape("anc_loss", format!("{b} rows vs {} pairs", pairs.len())));
    }
    let t: Vec<usize> = pairs.iter().map(|q| q.t).collect();
    let half: Vec<usize> = pairs.iter().map(|q| q.half).collect();
    let double: Vec<usize> = half.iter().map(|h| 2 * h).collect();
    let weights: Vec<f64> = pairs.iter().map(|q| q.weight).collect();

    let xt = g.constant(noisy_states(sched, x0, x1, &t)?);
    let target = consistency_target(g, model, target_p, sched, xt, &t, &half, cond)?;
    let pred = model.forward(g, p, xt, &t, &double, cond)?;
    let loss = weighted_sq_error(g, pred, target, Some(&weights))?;
    Ok(AncLoss {
        loss,
        lambda_mean: weights.iter().sum::<f64>() / b as f64,
    })
}

/// Adaptive noise-span consistency loss on a data/noise batch.
#[allow(clippy::too_many_arguments)]
pub fn anc_loss<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    sched: &NoiseSchedule,
    settings: &AncSettings,
    x0: &Tensor,
    x1: &Tensor,
    cond: Option<&Tensor>,
    rng: &mut SeededRng,
) -> Result<AncLoss> {
    let b = check_batch(x0, x1)?;
    let pairs = (0..b)
        .map(|_| draw_pair(settings, sched, rng))
        .collect::<Result<Vec<_>>>()?;
    anc_loss_at(g, model, p, sched, x0, x1, cond, &pairs)
}
