use super::net::VelocityModel;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Integrate from `x` along the given `(T, dT)` spans.
///
/// With `condition_on_span` the network sees each span as its step size
/// (shortcut sampling); otherwise it sees `dT = 0` and the loop is plain
/// explicit Euler on the velocity field.
pub fn integrate<M: VelocityModel>(
    model: &M,
    sched: &NoiseSchedule,
    mut x: Tensor,
    spans: &[(usize, usize)],
    condition_on_span: bool,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let b = x.shape()[0];
    for &(t, dt) in spans {
        let ts = vec![t; b];
        let cond_dt = if condition_on_span { dt } else { 0 };
        let step = model.predict(&x, &ts, &vec![cond_dt; b], cond)?;
        let h = sched.noise_span(t, dt)?;
        for (xv, v) in x.data_mut().iter_mut().zip(step.data()) {
            *xv += h * v;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler at T={t}")));
        }
    }
    Ok(x)
}

fn initial_noise<M: VelocityModel>(model: &M, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be positive".into()));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(model.state_shape());
    Ok(rng.normal_tensor(shape))
}

/// Few-step shortcut sampling: `n_steps` equal index spans from `T = N`
/// to `T = 0`, each step conditioned on its own span.
pub fn sample_fewstep<M: VelocityModel>(
    model: &M,
    n_steps: usize,
    sched: &NoiseSchedule,
    n_samples: usize,
    rng: &mut SeededRng,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let x = initial_noise(model, n_samples, rng)?;
    integrate(model, sched, x, &sched.equal_spans(n_steps)?, true, cond)
}

/// Explicit Euler on the step-size-zero velocity field with `n_steps`
/// equal index spans.
pub fn sample_euler<M: VelocityModel>(
    model: &M,
    n_steps: usize,
    sched: &NoiseSchedule,
    n_samples: usize,
    rng: &mut SeededRng,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let x = initial_noise(model, n_samples, rng)?;
    integrate(model, sched, x, &sched.equal_spans(n_steps)?, false, cond)
}
