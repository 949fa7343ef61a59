use serde::{Deserialize, Serialize};

use super::degrade::{degrade, DegradeConfig};
use super::injector::{gate_graph, inject_graph, refine_graph, scale_factor, InjectorParams, InjectorVars};
use crate::error::{Error, Result};
use crate::flow::{
    embed_batch, init_matrix, sample_fewstep, train_alternating, AncSettings, BatchSource, ParamSet, TrainConfig,
    TrainState, VelocityModel,
};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor, Var};

/// Which hidden layers receive the injected anchor features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectAt {
    First,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrConfig {
    /// Channels of every hidden feature map.
    #[serde(default = "HrConfig::default_hidden")]
    pub hidden: usize,
    /// Hidden 3x3 layers, at least one.
    #[serde(default = "HrConfig::default_layers")]
    pub layers: usize,
    /// Channels between the 1x1 and 3x3 refinement convolutions.
    #[serde(default = "HrConfig::default_refine")]
    pub refine: usize,
    #[serde(default = "HrConfig::default_emb_dim")]
    pub emb_dim: usize,
    #[serde(default = "HrConfig::default_gate_width")]
    pub gate_width: usize,
    #[serde(default = "HrConfig::default_inject")]
    pub inject: InjectAt,
    #[serde(default = "HrConfig::default_dt_embed")]
    pub dt_embed: bool,
}

impl Default for HrConfig {
    fn default() -> Self {
        HrConfig {
            hidden: Self::default_hidden(),
            layers: Self::default_layers(),
            refine: Self::default_refine(),
            emb_dim: Self::default_emb_dim(),
            gate_width: Self::default_gate_width(),
            inject: Self::default_inject(),
            dt_embed: true,
        }
    }
}

impl HrConfig {
    fn default_hidden() -> usize {
        16
    }
    fn default_layers() -> usize {
        2
    }
    fn default_refine() -> usize {
        8
    }
    fn default_emb_dim() -> usize {
        32
    }
    fn default_gate_width() -> usize {
        16
    }
    fn default_inject() -> InjectAt {
        InjectAt::First
    }
    fn default_dt_embed() -> bool {
        true
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.refine == 0 || self.gate_width == 0 {
            return Err(Error::Config("hr.hidden, hr.layers, hr.refine and hr.gate_width must be positive".into()));
        }
        if self.emb_dim == 0 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("hr.emb_dim must be even, got {}", self.emb_dim)));
        }
        Ok(())
    }
}

/// Convolutional velocity network with a gated anchor injector.
///
/// Each layer is a 3x3 convolution plus a per-channel bias predicted from
/// the time embedding; hidden layers use `tanh`. With a conditioning
/// anchor `[B,C,h,w]` the refined anchor features are injected after the
/// first (or every) hidden layer; without one the injector is bypassed.
#[derive(Clone, Debug)]
pub struct HrNet {
    cfg: HrConfig,
    state_shape: Vec<usize>,
    anchor_channels: usize,
    grid: usize,
    params: ParamSet,
}

const INJECTOR_SLOTS: usize = 6;

impl HrNet {
    /// `state_shape` is `[C,H,W]`.
    pub fn new(
        cfg: HrConfig,
        state_shape: &[usize],
        anchor_channels: usize,
        grid: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let &[c, h, w] = state_shape else {
            return Err(Error::Invalid(format!("HR state must be [C,H,W], got {state_shape:?}")));
        };
        if c == 0 || h == 0 || w == 0 || anchor_channels == 0 {
            return Err(Error::Invalid(format!("bad HR state shape {state_shape:?}")));
        }
        let mut params = ParamSet::new();
        let mut fan_in = c;
        for i in 0..cfg.layers {
            push_layer(&mut params, &format!("conv{i}"), fan_in, cfg.hidden, cfg.emb_dim, rng);
            fan_in = cfg.hidden;
        }
        push_layer(&mut params, "out", cfg.hidden, c, cfg.emb_dim, rng);
        let inj = InjectorParams::new(anchor_channels, cfg.refine, cfg.hidden, cfg.emb_dim, cfg.gate_width, rng);
        let names = ["refine_k1", "refine_k3", "gate_w1", "gate_b1", "gate_w2", "gate_b2"];
        for (n, t) in names.iter().zip(inj.tensors()) {
            params.push(format!("injector.{n}"), t.clone());
        }
        Ok(HrNet {
            cfg,
            state_shape: state_shape.to_vec(),
            anchor_channels,
            grid,
            params,
        })
    }

    pub fn config(&self) -> &HrConfig {
        &self.cfg
    }

    pub fn anchor_channels(&self) -> usize {
        self.anchor_channels
    }

    fn injector_offset(&self) -> usize {
        self.params.len() - INJECTOR_SLOTS
    }

    /// Copy of the injector tensors.
    pub fn injector(&self) -> InjectorParams {
        let t = &self.params.tensors()[self.injector_offset()..];
        InjectorParams {
            refine_k1: t[0].clone(),
            refine_k3: t[1].clone(),
            gate_w1: t[2].clone(),
            gate_b1: t[3].clone(),
            gate_w2: t[4].clone(),
            gate_b2: t[5].clone(),
        }
    }

    /// Indices of the injector tensors within [`VelocityModel::params`].
    pub fn injector_slots(&self) -> std::ops::Range<usize> {
        self.injector_offset()..self.params.len()
    }
}

fn push_layer(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, emb_dim: usize, rng: &mut SeededRng) {
    let std = 1.0 / ((c_in * 9) as f64).sqrt();
    params.push(format!("{name}.k"), rng.normal_tensor([c_out, c_in, 3, 3]).scale(std));
    params.push(format!("{name}.w_emb"), init_matrix(rng, emb_dim, c_out));
    params.push(format!("{name}.b"), Tensor::zeros([c_out]));
}

/// `conv(x) + (emb W + b)` broadcast over space.
fn layer(g: &mut Graph, p: &[Var], x: Var, emb: Var) -> Result<Var> {
    let y = g.conv2d(x, p[0], 1)?;
    let bias = g.matmul(emb, p[1])?;
    let bias = g.add_bias(bias, p[2])?;
    g.add_channel_bias(y, bias)
}

impl VelocityModel for HrNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn state_shape(&self) -> &[usize] {
        &self.state_shape
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        t: &[usize],
        dt: &[usize],
        cond: Option<&Tensor>,
    ) -> Result<Var> {
        let b = g.shape(x)[0];
        if t.len() != b || g.shape(x)[1..] != self.state_shape[..] {
            return Err(Error::shape(
                "hr_net",
                format!("input {:?}, {} indices, state {:?}", g.shape(x), t.len(), self.state_shape),
            ));
        }
        let emb = embed_batch(t, dt, self.grid, self.cfg.emb_dim, self.cfg.dt_embed)?;
        let emb = g.constant(emb);

        let injected = match cond {
            None => None,
            Some(a) => {
                let s = a.shape();
                if s.len() != 4 || s[0] != b || s[1] != self.anchor_channels {
                    return Err(Error::shape(
                        "hr_net",
                        format!("anchor {s:?} for {b} rows of {} channels", self.anchor_channels),
                    ));
                }
                let hw = (self.state_shape[1], self.state_shape[2]);
                scale_factor((s[2], s[3]), hw)?;
                let v = InjectorVars::from_slice(&p[self.injector_offset()..]);
                let av = g.constant(a.clone());
                let refined = refine_graph(g, &v, av, hw)?;
                let alpha = gate_graph(g, &v, emb)?;
                Some((refined, alpha))
            }
        };

        let mut h = x;
        for i in 0..self.cfg.layers {
            let z = layer(g, &p[3 * i..3 * i + 3], h, emb)?;
            h = g.tanh(z)?;
            if let Some((refined, alpha)) = injected {
                if i == 0 || self.cfg.inject == InjectAt::All {
                    h = inject_graph(g, h, refined, alpha)?;
                }
            }
        }
        let o = 3 * self.cfg.layers;
        layer(g, &p[o..o + 3], h, emb)
    }
}

/// HR training rows with anchors manufactured by [`degrade`].
///
/// The degradation noise for update `step` is drawn from a stream derived
/// from `(dcfg.seed, step)`, so it never perturbs the training RNG. A
/// severed source yields no anchor at all.
#[derive(Clone, Debug)]
pub struct HrSource {
    pub hr: Tensor,
    pub dcfg: DegradeConfig,
    pub severed: bool,
}

impl HrSource {
    pub fn new(hr: Tensor, dcfg: DegradeConfig) -> Result<Self> {
        dcfg.validate()?;
        if hr.ndim() != 4 {
            return Err(Error::shape("hr_source", format!("need [N,C,H,W], got {:?}", hr.shape())));
        }
        Ok(HrSource { hr, dcfg, severed: false })
    }

    pub fn severed(mut self) -> Self {
        self.severed = true;
        self
    }
}

impl BatchSource for HrSource {
    fn len(&self) -> usize {
        self.hr.shape()[0]
    }

    fn batch(&self, idx: &[usize], step: u64) -> Result<(Tensor, Option<Tensor>)> {
        let rows = self.hr.gather_rows(idx);
        if self.severed {
            return Ok((rows, None));
        }
        let mut rng = SeededRng::derived(self.dcfg.seed, step);
        let anchor = degrade(&rows, &self.dcfg, &mut rng)?;
        Ok((rows, Some(anchor)))
    }
}

/// Joint backbone and injector training on degraded-anchor pairs, with the
/// same update schedule as the unconditional loop.
pub fn train_stage2(
    state: &mut TrainState<HrNet>,
    data: &HrSource,
    sched: &NoiseSchedule,
    anc: &AncSettings,
    cfg: &TrainConfig,
) -> Result<()> {
    let s = data.hr.shape();
    if s[1..] != state.model.state_shape[..] {
        return Err(Error::shape(
            "train_stage2",
            format!("data {s:?} vs model state {:?}", state.model.state_shape),
        ));
    }
    train_alternating(state, data, sched, anc, cfg)
}

/// Few-step HR sampling guided by a given `[B,C,h,w]` anchor batch.
pub fn sample_hr(
    hr_model: &HrNet,
    sched: &NoiseSchedule,
    anchor: &Tensor,
    n_steps: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    sample_fewstep(hr_model, n_steps, sched, anchor.shape()[0], rng, Some(anchor))
}

/// Stage I draws `n_samples` low-resolution anchors; Stage II samples HR
/// states with the injector active at every step. Returns `(anchors, hr)`.
pub fn two_stage_sample<A: VelocityModel>(
    anchor_model: &A,
    hr_model: &HrNet,
    sched: &NoiseSchedule,
    n_steps_anchor: usize,
    n_steps_hr: usize,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<(Tensor, Tensor)> {
    let a = anchor_model.state_shape();
    let h = hr_model.state_shape();
    if a.len() != 3 || a[0] != hr_model.anchor_channels {
        return Err(Error::shape(
            "two_stage_sample",
            format!("anchor state {a:?} vs {} anchor channels", hr_model.anchor_channels),
        ));
    }
    scale_factor((a[1], a[2]), (h[1], h[2]))?;
    let anchors = sample_fewstep(anchor_model, n_steps_anchor, sched, n_samples, rng, None)?;
    let hr = sample_hr(hr_model, sched, &anchors, n_steps_hr, rng)?;
    Ok((anchors, hr))
}
