//! On-disk formats.
//!
//! Arrays and checkpoints share one container: the 8-byte magic
//! `AFBUNDLE`, a little-endian `u32` version, a `u64` header length, a
//! UTF-8 JSON header, then every tensor as little-endian `f64` in header
//! order. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchor::{HrConfig, HrNet};
use crate::error::{Error, Result};
use crate::flow::{NetConfig, TrainState, VelocityModel, VelocityNet};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{RngState, SeededRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor, Var};

const MAGIC: &[u8; 8] = b"AFBUNDLE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new(meta: serde_json::Value) -> Self {
        Bundle { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, in stored order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated bundle".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not an anchorflow bundle".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| Error::Format("truncated bundle".into()))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long).map_err(|_| Error::Format("truncated bundle".into()))?;
        let hlen = u64::from_le_bytes(long) as usize;
        if r.len() < hlen {
            return Err(Error::Format("truncated bundle header".into()));
        }
        let header: Header =
            serde_json::from_slice(&r[..hlen]).map_err(|e| Error::Format(format!("bad bundle header: {e}")))?;
        r = &r[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Format(format!("truncated payload for `{}`", e.name)));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Bundle { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Write a file, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Save one array as a single-tensor bundle named `data`; returns the
/// file checksum.
pub fn save_array(path: &Path, t: &Tensor, meta: serde_json::Value) -> Result<String> {
    let mut b = Bundle::new(meta);
    b.push("data", t.clone());
    let bytes = b.to_bytes();
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_array(path: &Path) -> Result<Tensor> {
    let b = Bundle::load(path)?;
    b.get("data")
        .cloned()
        .ok_or_else(|| Error::Format(format!("{} has no `data` array", path.display())))
}

/// Binary 8-bit PGM of `[H,W]`, `[N,H,W]` or `[N,C,H,W]` images, tiled
/// left to right (one row per image, channels across), mapping
/// `[lo, hi]` to `[0, 255]`.
pub fn pgm_bytes(images: &Tensor, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let s = images.shape();
    let (n, c, h, w) = match *s {
        [h, w] => (1, 1, h, w),
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("pgm", format!("cannot tile {s:?}"))),
    };
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(Error::Invalid(format!("empty intensity range [{lo}, {hi}]")));
    }
    let (gh, gw) = (n * h, c * w);
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    let d = images.data();
    for img in 0..n {
        for i in 0..h {
            for ch in 0..c {
                for j in 0..w {
                    let v = d[((img * c + ch) * h + i) * w + j];
                    let q = ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0);
                    out.push(q as u8);
                }
            }
        }
    }
    Ok(out)
}

/// Network family and shape needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    Mlp {
        net: NetConfig,
        state_shape: Vec<usize>,
    },
    Hr {
        hr: HrConfig,
        state_shape: Vec<usize>,
        anchor_channels: usize,
    },
}

/// A rebuilt model of either family.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Mlp(VelocityNet),
    Hr(HrNet),
}

impl AnyModel {
    pub fn build(arch: &Architecture, grid: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        Ok(match arch {
            Architecture::Mlp { net, state_shape } => {
                AnyModel::Mlp(VelocityNet::new(net.clone(), state_shape, grid, &mut rng)?)
            }
            Architecture::Hr { hr, state_shape, anchor_channels } => {
                AnyModel::Hr(HrNet::new(hr.clone(), state_shape, *anchor_channels, grid, &mut rng)?)
            }
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            AnyModel::Mlp(m) => Architecture::Mlp {
                net: m.config().clone(),
                state_shape: m.state_shape().to_vec(),
            },
            AnyModel::Hr(m) => Architecture::Hr {
                hr: m.config().clone(),
                state_shape: m.state_shape().to_vec(),
                anchor_channels: m.anchor_channels(),
            },
        }
    }

    fn inner(&self) -> &dyn VelocityModel {
        match self {
            AnyModel::Mlp(m) => m,
            AnyModel::Hr(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn VelocityModel {
        match self {
            AnyModel::Mlp(m) => m,
            AnyModel::Hr(m) => m,
        }
    }
}

impl VelocityModel for AnyModel {
    fn params(&self) -> &crate::flow::ParamSet {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut crate::flow::ParamSet {
        self.inner_mut().params_mut()
    }

    fn state_shape(&self) -> &[usize] {
        self.inner().state_shape()
    }

    fn grid(&self) -> usize {
        self.inner().grid()
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
        self.inner().forward(g, p, x, t, dt, cond)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    architecture: Architecture,
    schedule: NoiseSchedule,
    step: u64,
    adam_t: u64,
    adam: AdamWConfig,
    rng: RngState,
    /// Echo of the run configuration that produced the checkpoint.
    config: String,
}

/// Training state restored from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState<AnyModel>,
    pub schedule: NoiseSchedule,
    pub config: String,
}

impl Checkpoint {
    /// Model carrying the EMA weights, as used for sampling.
    pub fn ema_model(&self) -> AnyModel {
        self.state.ema_model()
    }
}

pub fn checkpoint_bundle<M: VelocityModel>(
    state: &TrainState<M>,
    arch: &Architecture,
    sched: &NoiseSchedule,
    config_echo: &str,
) -> Bundle {
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        architecture: arch.clone(),
        schedule: *sched,
        step: state.step,
        adam_t: state.opt.t,
        adam: state.opt.cfg,
        rng: state.rng.state(),
        config: config_echo.to_string(),
    };
    let mut b = Bundle::new(serde_json::to_value(meta).expect("meta serializes"));
    let names = state.model.params().names();
    let groups: [(&str, &[Tensor]); 4] = [
        ("param", state.model.params().tensors()),
        ("ema", &state.ema),
        ("adam_m", &state.opt.m),
        ("adam_v", &state.opt.v),
    ];
    for (prefix, tensors) in groups {
        for (n, t) in names.iter().zip(tensors) {
            b.push(format!("{prefix}/{n}"), t.clone());
        }
    }
    b
}

pub fn save_checkpoint<M: VelocityModel>(
    path: &Path,
    state: &TrainState<M>,
    arch: &Architecture,
    sched: &NoiseSchedule,
    config_echo: &str,
) -> Result<String> {
    let bytes = checkpoint_bundle(state, arch, sched, config_echo).to_bytes();
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let b = Bundle::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(b.meta.clone())
        .map_err(|e| Error::Format(format!("{}: not a checkpoint: {e}", path.display())))?;
    let mut model = AnyModel::build(&meta.architecture, meta.schedule.n, 0)?;
    model.params_mut().assign(b.with_prefix("param/"))?;
    let params = model.params().tensors().to_vec();
    let mut opt = AdamW::new(meta.adam, &params);
    opt.m = b.with_prefix("adam_m/");
    opt.v = b.with_prefix("adam_v/");
    opt.t = meta.adam_t;
    let ema = b.with_prefix("ema/");
    if ema.len() != params.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(Error::Format(format!("{}: incomplete checkpoint", path.display())));
    }
    let rng = SeededRng::from_state(&meta.rng).ok_or_else(|| Error::Format("bad rng state".into()))?;
    Ok(Checkpoint {
        state: TrainState { model, opt, ema, step: meta.step, rng, history: Vec::new() },
        schedule: meta.schedule,
        config: meta.config,
    })
}
