use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace every tensor, checking names and shapes line up.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            old.expect_same_shape(new, "assign")?;
        }
        self.tensors = tensors;
        Ok(())
    }

    /// SHA-256 over shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Register every tensor on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Anything that predicts a step-size-conditioned velocity.
///
/// `x` has shape `[B, ..state_shape]`; `t` and `dt` carry one step index
/// and one step size per row. `cond` is an optional per-row conditioning
/// tensor that only conditional models accept.
pub trait VelocityModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Shape of a single state, without the batch axis.
    fn state_shape(&self) -> &[usize];
    /// Index grid size used to normalize time embeddings.
    fn grid(&self) -> usize;

    fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        t: &[usize],
        dt: &[usize],
        cond: Option<&Tensor>,
    ) -> Result<Var>;

    /// Gradient-free forward pass on the current parameters.
    fn predict(&self, x: &Tensor, t: &[usize], dt: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, t, dt, cond)?;
        Ok(g.value(out).clone())
    }
}

/// Sinusoid angle multiplier applied to the normalized index `T/N`.
pub const TIME_SCALE: f64 = 1000.0;

fn sinusoid(u: f64, dim: usize, phase_offset: f64, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * (i as f64 + phase_offset) / half as f64).exp();
        let a = TIME_SCALE * u * freq;
        out[i] += a.sin();
        out[half + i] += a.cos();
    }
}

/// Summed sinusoidal embedding of `T/N` and `dT/N`.
///
/// The first `D/2` entries are sines, the rest cosines. The step-size
/// embedding uses frequencies offset by half a band from the index
/// embedding, so `(T, dT)` and `(dT, T)` embed differently.
pub fn embed_time(t: usize, dt: usize, n: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("embedding dimension must be even, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    sinusoid(t as f64 / n as f64, dim, 0.0, &mut out);
    sinusoid(dt as f64 / n as f64, dim, 0.5, &mut out);
    Ok(out)
}

/// Row-stacked embeddings for a batch of `(T, dT)` pairs.
pub fn embed_batch(t: &[usize], dt: &[usize], n: usize, dim: usize, with_dt: bool) -> Result<Tensor> {
    if t.len() != dt.len() {
        return Err(Error::shape("embed_batch", format!("{} indices vs {} steps", t.len(), dt.len())));
    }
    let mut data = Vec::with_capacity(t.len() * dim);
    for (&ti, &di) in t.iter().zip(dt) {
        data.extend(embed_time(ti, if with_dt { di } else { 0 }, n, dim)?);
    }
    if !with_dt {
        // remove the constant dT=0 contribution: cos(0) = 1 in the cosine half
        for row in data.chunks_mut(dim) {
            row[dim / 2..].iter_mut().for_each(|v| *v -= 1.0);
        }
    }
    Tensor::new([t.len(), dim], data)
}

/// Architecture of the fully connected [`VelocityNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "NetConfig::default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "NetConfig::default_emb_dim")]
    pub emb_dim: usize,
    /// Feed the step size to the network. Off gives a plain velocity field.
    #[serde(default = "NetConfig::default_dt_embed")]
    pub dt_embed: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: Self::default_widths(),
            emb_dim: Self::default_emb_dim(),
            dt_embed: true,
        }
    }
}

impl NetConfig {
    fn default_widths() -> Vec<usize> {
        vec![128, 128]
    }
    fn default_emb_dim() -> usize {
        64
    }
    fn default_dt_embed() -> bool {
        true
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("net.widths must be non-empty and positive".into()));
        }
        if self.emb_dim == 0 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("net.emb_dim must be even, got {}", self.emb_dim)));
        }
        Ok(())
    }
}

pub(crate) fn init_matrix(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    rng.normal_tensor([fan_in, fan_out]).scale(std)
}

/// Embed-and-regress velocity network `s(x, T, dT)`.
///
/// The flattened state and the summed time embedding enter the first
/// affine layer together; hidden layers use `tanh`.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    cfg: NetConfig,
    state_shape: Vec<usize>,
    grid: usize,
    params: ParamSet,
}

impl VelocityNet {
    pub fn new(cfg: NetConfig, state_shape: &[usize], grid: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        if state_shape.is_empty() || state_shape.contains(&0) {
            return Err(Error::Invalid(format!("bad state shape {state_shape:?}")));
        }
        let d: usize = state_shape.iter().product();
        let mut params = ParamSet::new();
        let w0 = cfg.widths[0];
        params.push("in.w_x", init_matrix(rng, d, w0));
        params.push("in.w_emb", init_matrix(rng, cfg.emb_dim, w0));
        params.push("in.b", Tensor::zeros([w0]));
        for (i, pair) in cfg.widths.windows(2).enumerate() {
            params.push(format!("hidden{i}.w"), init_matrix(rng, pair[0], pair[1]));
            params.push(format!("hidden{i}.b"), Tensor::zeros([pair[1]]));
        }
        let last = *cfg.widths.last().unwrap();
        params.push("out.w", init_matrix(rng, last, d));
        params.push("out.b", Tensor::zeros([d]));
        Ok(VelocityNet {
            cfg,
            state_shape: state_shape.to_vec(),
            grid,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn state_dim(&self) -> usize {
        self.state_shape.iter().product()
    }
}

impl VelocityModel for VelocityNet {
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
        if cond.is_some() {
            return Err(Error::Invalid("VelocityNet takes no conditioning input".into()));
        }
        let b = g.shape(x)[0];
        if t.len() != b {
            return Err(Error::shape("velocity_net", format!("{b} rows vs {} indices", t.len())));
        }
        let flat = g.reshape(x, &[b, self.state_dim()])?;
        let emb = embed_batch(t, dt, self.grid, self.cfg.emb_dim, self.cfg.dt_embed)?;
        let emb = g.constant(emb);

        let hx = g.matmul(flat, p[0])?;
        let he = g.matmul(emb, p[1])?;
        let h = g.add(hx, he)?;
        let h = g.add_bias(h, p[2])?;
        let mut h = g.tanh(h)?;
        let mut slot = 3;
        for _ in 1..self.cfg.widths.len() {
            let z = g.matmul(h, p[slot])?;
            let z = g.add_bias(z, p[slot + 1])?;
            h = g.tanh(z)?;
            slot += 2;
        }
        let out = g.matmul(h, p[slot])?;
        let out = g.add_bias(out, p[slot + 1])?;
        let mut shape = vec![b];
        shape.extend_from_slice(&self.state_shape);
        g.reshape(out, &shape)
    }
}
