use std::path::{Path, PathBuf};

use anchorflow::anchor::{HrNet, HrSource};
use anchorflow::config::RunConfig;
use anchorflow::flow::{train_alternating, BatchSource, LossRecord, TensorSource, TrainState, VelocityModel, VelocityNet};
use anchorflow::io::{save_checkpoint, Architecture};
use anchorflow::rng::SeededRng;
use anchorflow::tensor::Tensor;
use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use crate::gen::dataset;
use crate::out::{self, usage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Step-conditioned velocity net on 2-D points
    Shortcut,
    /// Stage I: low-resolution anchor model on shape sequences
    Anchor,
    /// Stage II: high-resolution net with the anchor injector
    Hr,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Shortcut => "shortcut",
            Stage::Anchor => "anchor",
            Stage::Hr => "hr",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: Stage,
    /// Run configuration (TOML)
    pub config: PathBuf,
    /// Output directory; defaults to `<root>/<name>/<stage>`
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Train on this array file instead of regenerating the dataset
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn training_array(cfg: &RunConfig, stage: Stage, data: Option<&Path>) -> Result<Tensor> {
    if let Some(p) = data {
        return out::load_array(p);
    }
    let want = match stage {
        Stage::Shortcut => "points",
        Stage::Anchor => "lr",
        Stage::Hr => "hr",
    };
    dataset(cfg)?
        .into_iter()
        .find(|(n, _)| *n == want)
        .map(|(_, t)| t)
        .ok_or_else(|| usage(format!("`train {}` needs data.kind = {}", stage.name(), expected_kind(stage))))
}

fn expected_kind(stage: Stage) -> &'static str {
    match stage {
        Stage::Shortcut => "a 2-D distribution",
        _ => "\"shapes\"",
    }
}

pub fn write_losses(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "phase", "loss", "lambda_mean"])?;
    for r in history {
        let phase = serde_json::to_value(r.phase)?;
        w.write_record([
            r.step.to_string(),
            phase.as_str().unwrap_or_default().to_string(),
            r.loss.to_string(),
            r.lambda_mean.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out::write(path, &w.into_inner().context("flushing loss csv")?)
}

fn fit<M, S>(cfg: &RunConfig, model: M, rng: SeededRng, data: &S, arch: Architecture, dir: &Path) -> Result<()>
where
    M: VelocityModel + Clone,
    S: BatchSource,
{
    let mut state = TrainState::new(model, cfg.train.adamw(), rng);
    train_alternating(&mut state, data, &cfg.schedule, &cfg.anc(), &cfg.train)?;
    let echo = cfg.echo();
    let sha = save_checkpoint(&dir.join("checkpoint.afb"), &state, &arch, &cfg.schedule, &echo)?;
    write_losses(&dir.join("losses.csv"), &state.history)?;
    out::write(&dir.join("config.toml"), echo.as_bytes())?;
    let last = state.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    eprintln!("{} updates, last loss {last:.5}, checkpoint {sha}", state.step);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn run(a: TrainArgs) -> Result<()> {
    let cfg = out::load_config(&a.config)?;
    let dir = match &a.out {
        Some(p) => p.clone(),
        None => out::resolve_dir(None, Some(&cfg)).join(a.stage.name()),
    };
    let data = training_array(&cfg, a.stage, a.data.as_deref())?;
    let grid = cfg.schedule.n;
    let mut rng = SeededRng::new(cfg.seed);
    match a.stage {
        Stage::Shortcut | Stage::Anchor => {
            if a.stage == Stage::Anchor && data.ndim() != 4 {
                return Err(usage(format!("anchor data must be [N,F,h,w], got {:?}", data.shape())));
            }
            let state_shape = data.shape()[1..].to_vec();
            let model = VelocityNet::new(cfg.net.clone(), &state_shape, grid, &mut rng)?;
            let arch = Architecture::Mlp { net: cfg.net.clone(), state_shape };
            fit(&cfg, model, rng, &TensorSource { data }, arch, &dir)
        }
        Stage::Hr => {
            let source = HrSource::new(data, cfg.degrade)?;
            let state_shape = source.hr.shape()[1..].to_vec();
            let channels = state_shape[0];
            let model = HrNet::new(cfg.hr.clone(), &state_shape, channels, grid, &mut rng)?;
            let arch = Architecture::Hr { hr: cfg.hr.clone(), state_shape, anchor_channels: channels };
            fit(&cfg, model, rng, &source, arch, &dir)
        }
    }
}
