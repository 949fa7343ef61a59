//! Anchor refinement and gated feature injection.
//!
//! The anchor is nearest-upsampled to the target grid and passed through a
//! 1x1 then a 3x3 convolution. A two-layer gate over the summed time
//! embeddings yields `alpha = tanh(..)`, and features are fused as
//! `z + (1 + alpha) * z_refined`.

use crate::error::{Error, Result};
use crate::flow::{embed_time, init_matrix};
use crate::rng::SeededRng;
use crate::tensor::{Direction, Graph, ResampleMode, Tensor, Var};

/// Refinement kernels and gate weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectorParams {
    /// `[C_refine, C_anchor, 1, 1]`
    pub refine_k1: Tensor,
    /// `[C_out, C_refine, 3, 3]`
    pub refine_k3: Tensor,
    /// `[D, G]`, `[G]`, `[G, 1]`, `[1]`
    pub gate_w1: Tensor,
    pub gate_b1: Tensor,
    pub gate_w2: Tensor,
    pub gate_b2: Tensor,
}

impl InjectorParams {
    /// Random refinement and first gate layer; the final gate layer is zero
    /// so the initial gain is exactly one.
    pub fn new(
        anchor_channels: usize,
        refine_channels: usize,
        out_channels: usize,
        emb_dim: usize,
        gate_width: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let k1_std = 1.0 / (anchor_channels as f64).sqrt();
        let k3_std = 1.0 / ((refine_channels * 9) as f64).sqrt();
        InjectorParams {
            refine_k1: rng.normal_tensor([refine_channels, anchor_channels, 1, 1]).scale(k1_std),
            refine_k3: rng.normal_tensor([out_channels, refine_channels, 3, 3]).scale(k3_std),
            gate_w1: init_matrix(rng, emb_dim, gate_width),
            gate_b1: Tensor::zeros([gate_width]),
            gate_w2: Tensor::zeros([gate_width, 1]),
            gate_b2: Tensor::zeros([1]),
        }
    }

    pub fn emb_dim(&self) -> usize {
        self.gate_w1.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.refine_k1,
            &self.refine_k3,
            &self.gate_w1,
            &self.gate_b1,
            &self.gate_w2,
            &self.gate_b2,
        ]
    }
}

/// Graph handles for the six injector tensors, in [`InjectorParams::tensors`] order.
#[derive(Clone, Copy, Debug)]
pub struct InjectorVars {
    pub refine_k1: Var,
    pub refine_k3: Var,
    pub gate_w1: Var,
    pub gate_b1: Var,
    pub gate_w2: Var,
    pub gate_b2: Var,
}

impl InjectorVars {
    pub fn from_slice(v: &[Var]) -> Self {
        InjectorVars {
            refine_k1: v[0],
            refine_k3: v[1],
            gate_w1: v[2],
            gate_b1: v[3],
            gate_w2: v[4],
            gate_b2: v[5],
        }
    }

    pub fn bind(p: &InjectorParams, g: &mut Graph, trainable: bool) -> Self {
        let vars: Vec<Var> = p
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Self::from_slice(&vars)
    }
}

/// Integer upsampling factor from an anchor grid to a target grid.
pub fn scale_factor(anchor_hw: (usize, usize), target_hw: (usize, usize)) -> Result<usize> {
    let (h, w) = anchor_hw;
    let (th, tw) = target_hw;
    if h == 0 || w == 0 || th % h != 0 || tw % w != 0 || th / h != tw / w {
        return Err(Error::Invalid(format!(
            "target {th}x{tw} is not a uniform integer multiple of anchor {h}x{w}"
        )));
    }
    Ok(th / h)
}

/// Upsample then 1x1 and 3x3 convolutions; `anchor` is `[B,C,h,w]`.
pub fn refine_graph(g: &mut Graph, v: &InjectorVars, anchor: Var, target_hw: (usize, usize)) -> Result<Var> {
    let s = g.shape(anchor);
    let f = scale_factor((s[s.len() - 2], s[s.len() - 1]), target_hw)?;
    let up = g.resample(anchor, f, Direction::Up, ResampleMode::Nearest)?;
    let mid = g.conv2d(up, v.refine_k1, 0)?;
    g.conv2d(mid, v.refine_k3, 1)
}

/// `alpha = tanh(W2 tanh(W1 e + b1) + b2)` per row of the `[B,D]` embedding.
pub fn gate_graph(g: &mut Graph, v: &InjectorVars, emb: Var) -> Result<Var> {
    let h = g.matmul(emb, v.gate_w1)?;
    let h = g.add_bias(h, v.gate_b1)?;
    let h = g.tanh(h)?;
    let o = g.matmul(h, v.gate_w2)?;
    let o = g.add_bias(o, v.gate_b2)?;
    g.tanh(o)
}

/// `z + (1 + alpha) * z_refined` with one `alpha` per row.
pub fn inject_graph(g: &mut Graph, z: Var, z_refined: Var, alpha: Var) -> Result<Var> {
    let gain = g.add_scalar(alpha, 1.0)?;
    let scaled = g.scale_rows(z_refined, gain)?;
    g.add(z, scaled)
}

/// Refined condition for a single `[C,h,w]` anchor or a `[B,C,h,w]` batch.
pub fn refine_anchor(anchor: &Tensor, target_hw: (usize, usize), params: &InjectorParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = InjectorVars::bind(params, &mut g, false);
    let a = g.constant(anchor.clone());
    let out = refine_graph(&mut g, &v, a, target_hw)?;
    Ok(g.value(out).clone())
}

/// Gate value at one `(T, dT)`.
pub fn injector_gate(t: usize, dt: usize, grid: usize, params: &InjectorParams) -> Result<f64> {
    let mut g = Graph::new();
    let v = InjectorVars::bind(params, &mut g, false);
    let emb = embed_time(t, dt, grid, params.emb_dim())?;
    let d = emb.len();
    let e = g.constant(Tensor::new([1, d], emb)?);
    let a = gate_graph(&mut g, &v, e)?;
    Ok(g.scalar(a))
}

/// `z + (1 + alpha) * z_refined` on plain tensors.
pub fn inject(z: &Tensor, z_refined: &Tensor, alpha: f64) -> Result<Tensor> {
    z.zip_map(z_refined, |a, b| a + (1.0 + alpha) * b)
}
