use std::path::{Path, PathBuf};
use std::time::Instant;

use anchorflow::anchor::{sample_hr, two_stage_sample};
use anchorflow::config::RunConfig;
use anchorflow::flow::{sample_euler, sample_fewstep, VelocityModel};
use anchorflow::io::{sha256_hex, AnyModel, Checkpoint};
use anchorflow::rng::SeededRng;
use anchorflow::tensor::Tensor;
use anyhow::Result;
use clap::Args;
use serde::Serialize;

use crate::out::{self, usage, FileEntry};

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint to sample from (an HR checkpoint in two-stage mode)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stage I checkpoint; enables two-stage sampling
    #[arg(long, conflicts_with = "anchors")]
    pub anchor_checkpoint: Option<PathBuf>,
    /// Array of `[B,C,h,w]` anchors guiding an HR checkpoint
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    /// Step count; defaults to the checkpoint's `infer.steps`
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stage I step count; defaults to `infer.anchor_steps`
    #[arg(long)]
    pub anchor_steps: Option<usize>,
    /// Number of samples; defaults to `infer.n_samples`
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sampling seed; defaults to the run seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Plain Euler on the step-size-zero field instead of shortcut steps
    #[arg(long)]
    pub euler: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Manifest {
    mode: &'static str,
    checkpoint_sha256: String,
    anchor_checkpoint_sha256: Option<String>,
    anchors_sha256: Option<String>,
    seed: u64,
    steps: usize,
    anchor_steps: Option<usize>,
    n_samples: usize,
    files: Vec<FileEntry>,
}

#[derive(Serialize)]
pub struct Timing {
    pub wall_clock_s: f64,
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&out::read_input(path)?))
}

pub fn run_config(ck: &Checkpoint) -> Result<RunConfig> {
    Ok(RunConfig::from_toml(&ck.config)?)
}

fn write_samples(dir: &Path, name: &str, t: &Tensor, seed: u64) -> Result<FileEntry> {
    let entry = out::save_array(dir, &format!("{name}.afb"), t, serde_json::json!({ "seed": seed }))?;
    if t.ndim() >= 3 {
        out::save_pgm(dir, &format!("{name}.pgm"), t)?;
    }
    Ok(entry)
}

pub fn run(a: SampleArgs) -> Result<()> {
    let ck = out::load_checkpoint(&a.checkpoint)?;
    let cfg = run_config(&ck)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let steps = a.steps.unwrap_or(if a.euler { cfg.infer.euler_steps } else { cfg.infer.steps });
    let n = a.samples.unwrap_or(cfg.infer.n_samples);
    let model = ck.ema_model();
    let sched = ck.schedule;
    let mut rng = SeededRng::new(seed);
    let mut manifest = Manifest {
        mode: "single",
        checkpoint_sha256: file_sha(&a.checkpoint)?,
        anchor_checkpoint_sha256: None,
        anchors_sha256: None,
        seed,
        steps,
        anchor_steps: None,
        n_samples: n,
        files: Vec::new(),
    };
    let started = Instant::now();

    match (&model, &a.anchor_checkpoint, &a.anchors) {
        (AnyModel::Hr(hr), Some(anchor_path), _) => {
            let stage1 = out::load_checkpoint(anchor_path)?;
            let anchor_model = stage1.ema_model();
            let anchor_steps = a.anchor_steps.unwrap_or(cfg.infer.anchor_steps);
            manifest.mode = "two_stage";
            manifest.anchor_checkpoint_sha256 = Some(file_sha(anchor_path)?);
            manifest.anchor_steps = Some(anchor_steps);
            if n > 0 {
                let (anchors, samples) =
                    two_stage_sample(&anchor_model, hr, &sched, anchor_steps, steps, n, &mut rng)?;
                manifest.files.push(write_samples(&a.out, "anchors", &anchors, seed)?);
                manifest.files.push(write_samples(&a.out, "samples", &samples, seed)?);
            }
        }
        (AnyModel::Hr(hr), None, Some(anchor_file)) => {
            let anchors = out::load_array(anchor_file)?;
            manifest.mode = "guided";
            manifest.anchors_sha256 = Some(file_sha(anchor_file)?);
            manifest.n_samples = anchors.shape()[0];
            let samples = sample_hr(hr, &sched, &anchors, steps, &mut rng)?;
            manifest.files.push(write_samples(&a.out, "samples", &samples, seed)?);
        }
        (AnyModel::Mlp(_), Some(_), _) | (AnyModel::Mlp(_), _, Some(_)) => {
            return Err(usage("anchors only apply to an HR checkpoint"));
        }
        (m, None, None) => {
            if n > 0 {
                let samples = if a.euler {
                    sample_euler(m, steps, &sched, n, &mut rng, None)?
                } else {
                    sample_fewstep(m, steps, &sched, n, &mut rng, None)?
                };
                manifest.files.push(write_samples(&a.out, "samples", &samples, seed)?);
            }
        }
    }

    let wall = started.elapsed().as_secs_f64();
    out::write_json(&a.out.join("manifest.json"), &manifest)?;
    out::write_json(&a.out.join("timing.json"), &Timing { wall_clock_s: wall })?;
    eprintln!(
        "{} sample(s) of shape {:?} in {wall:.2}s -> {}",
        manifest.n_samples,
        model.state_shape(),
        a.out.display()
    );
    Ok(())
}
