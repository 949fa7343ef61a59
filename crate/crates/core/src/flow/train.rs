//! Alternating flow-matching / self-consistency training loop.

use serde::{Deserialize, Serialize};

use super::net::VelocityModel;
use super::objective::{anc_loss, fm_loss, AncSettings};
use crate::error::{Error, Result};
use crate::optim::{ema_update, AdamW, AdamWConfig};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor};

/// How updates are scheduled across objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Even updates flow matching, odd updates self-consistency.
    Alternating,
    /// Flow matching only; the plain baseline.
    Flow,
    /// Flow matching plus weighted self-consistency in every update.
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_steps")]
    pub steps: usize,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch: usize,
    #[serde(default = "TrainConfig::default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "TrainConfig::default_ema")]
    pub ema_decay: f64,
    #[serde(default = "TrainConfig::default_objective")]
    pub objective: Objective,
    /// Balancing weight of the consistency term in `combined` mode.
    #[serde(default = "TrainConfig::default_sc_weight")]
    pub sc_weight: f64,
    /// Noise-span sensitivity exponent.
    #[serde(default = "TrainConfig::default_p")]
    pub p: f64,
    /// Weight consistency pairs by `noise_span^p`.
    #[serde(default = "TrainConfig::default_calibrate")]
    pub calibrate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: Self::default_steps(),
            batch: Self::default_batch(),
            lr: Self::default_lr(),
            weight_decay: 0.0,
            ema_decay: Self::default_ema(),
            objective: Self::default_objective(),
            sc_weight: Self::default_sc_weight(),
            p: Self::default_p(),
            calibrate: true,
        }
    }
}

impl TrainConfig {
    fn default_steps() -> usize {
        4000
    }
    fn default_batch() -> usize {
        256
    }
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_ema() -> f64 {
        0.999
    }
    fn default_objective() -> Objective {
        Objective::Alternating
    }
    fn default_sc_weight() -> f64 {
        1.0
    }
    fn default_p() -> f64 {
        0.5
    }
    fn default_calibrate() -> bool {
        true
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("train.ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if self.p.is_nan() || self.p <= 0.0 {
            return Err(Error::Config(format!("train.p must be positive, got {}", self.p)));
        }
        if self.weight_decay < 0.0 || self.sc_weight < 0.0 {
            return Err(Error::Config("train.weight_decay and train.sc_weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Which objective produced a logged loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fm,
    Anc,
    Combined,
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    /// Mean calibration weight of the consistency batch, if there was one.
    pub lambda_mean: Option<f64>,
}

/// Supplies training rows and their optional conditioning.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Rows at `idx`, plus conditioning derived for update number `step`.
    fn batch(&self, idx: &[usize], step: u64) -> Result<(Tensor, Option<Tensor>)>;
}

/// Plain row store with no conditioning.
#[derive(Clone, Debug)]
pub struct TensorSource {
    pub data: Tensor,
}

impl BatchSource for TensorSource {
    fn len(&self) -> usize {
        self.data.shape()[0]
    }

    fn batch(&self, idx: &[usize], _step: u64) -> Result<(Tensor, Option<Tensor>)> {
        Ok((self.data.gather_rows(idx), None))
    }
}

/// Model, optimizer moments, EMA weights, RNG and loss history.
#[derive(Clone, Debug)]
pub struct TrainState<M> {
    pub model: M,
    pub opt: AdamW,
    pub ema: Vec<Tensor>,
    pub step: u64,
    pub rng: SeededRng,
    pub history: Vec<LossRecord>,
}

impl<M: VelocityModel + Clone> TrainState<M> {
    pub fn new(model: M, opt: AdamWConfig, rng: SeededRng) -> Self {
        let params = model.params().tensors().to_vec();
        TrainState {
            opt: AdamW::new(opt, &params),
            ema: params,
            model,
            step: 0,
            rng,
            history: Vec::new(),
        }
    }

    /// Copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> M {
        let mut m = self.model.clone();
        m.params_mut()
            .assign(self.ema.clone())
            .expect("EMA tensors mirror the parameters");
        m
    }
}

/// Run `cfg.steps` updates.
///
/// In alternating mode update `s` (counted from zero over the state's
/// lifetime) minimizes the flow loss when `s` is even and the calibrated
/// consistency loss when `s` is odd.
pub fn train_alternating<M, S>(
    state: &mut TrainState<M>,
    data: &S,
    sched: &NoiseSchedule,
    anc: &AncSettings,
    cfg: &TrainConfig,
) -> Result<()>
where
    M: VelocityModel + Clone,
    S: BatchSource + ?Sized,
{
    cfg.validate()?;
    anc.sampler.validate(sched)?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    for _ in 0..cfg.steps {
        train_step(state, data, sched, anc, cfg)?;
    }
    Ok(())
}

/// A single optimizer update.
pub fn train_step<M, S>(
    state: &mut TrainState<M>,
    data: &S,
    sched: &NoiseSchedule,
    anc: &AncSettings,
    cfg: &TrainConfig,
) -> Result<()>
where
    M: VelocityModel + Clone,
    S: BatchSource + ?Sized,
{
    let step = state.step;
    let idx: Vec<usize> = (0..cfg.batch).map(|_| state.rng.below(data.len())).collect();
    let (x1, cond) = data.batch(&idx, step)?;
    let x0 = state.rng.normal_tensor(x1.shape().to_vec());
    let phase = match cfg.objective {
        Objective::Flow => Phase::Fm,
        Objective::Combined => Phase::Combined,
        Objective::Alternating if step.is_multiple_of(2) => Phase::Fm,
        Objective::Alternating => Phase::Anc,
    };

    let mut g = Graph::new();
    let model = &state.model;
    let p = model.params().bind(&mut g, true);
    let rng = &mut state.rng;
    let (loss, lambda_mean) = match phase {
        Phase::Fm => (fm_loss(&mut g, model, &p, sched, &x0, &x1, cond.as_ref(), rng)?, None),
        Phase::Anc => {
            let r = anc_loss(&mut g, model, &p, sched, anc, &x0, &x1, cond.as_ref(), rng)?;
            (r.loss, Some(r.lambda_mean))
        }
        Phase::Combined => {
            let f = fm_loss(&mut g, model, &p, sched, &x0, &x1, cond.as_ref(), rng)?;
            let r = anc_loss(&mut g, model, &p, sched, anc, &x0, &x1, cond.as_ref(), rng)?;
            let sc = g.scale(r.loss, cfg.sc_weight)?;
            (g.add(f, sc)?, Some(r.lambda_mean))
        }
    };
    let loss_value = g.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss at update {step}")));
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor> = p
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at update {step}")));
    }

    state.opt.step(state.model.params_mut().tensors_mut(), &grads)?;
    ema_update(&mut state.ema, state.model.params().tensors(), cfg.ema_decay, step);
    state.history.push(LossRecord {
        step,
        phase,
        loss: loss_value,
        lambda_mean,
    });
    state.step += 1;
    Ok(())
}
