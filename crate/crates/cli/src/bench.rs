use std::path::PathBuf;
use std::time::Instant;

use anchorflow::flow::{sample_euler, sample_fewstep, VelocityModel};
use anchorflow::metrics::{latency_metrics, mhd_mse, sliced_w2};
use anchorflow::rng::SeededRng;
use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use crate::out::{self, usage};
use crate::sample::run_config;

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out points for sliced_w2 (2-D checkpoints)
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Step counts, e.g. `2,3,4,5`; defaults to `infer.sweep`
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// mhd_mse scale exponents for image checkpoints
    #[arg(long, default_value = "1,2,3")]
    pub kset: String,
    #[arg(long, default_value_t = 256)]
    pub projections: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Row {
    sampler: &'static str,
    steps: usize,
    metric: &'static str,
    value: f64,
}

#[derive(Serialize)]
struct TimingRow {
    sampler: &'static str,
    steps: usize,
    wall_clock_s: f64,
    latency_per_pixel: Option<f64>,
    latency_per_frame: Option<f64>,
}

pub fn run(a: BenchArgs) -> Result<()> {
    let ck = out::load_checkpoint(&a.checkpoint)?;
    let cfg = run_config(&ck)?;
    let model = ck.ema_model();
    let shape = model.state_shape().to_vec();
    let seed = a.seed.unwrap_or(cfg.seed);
    let n = a.samples.unwrap_or(cfg.infer.n_samples);
    if n == 0 {
        return Err(usage("bench needs at least one sample"));
    }
    let sweep = match &a.sweep {
        Some(s) => out::parse_list(s)?,
        None => cfg.infer.sweep.clone(),
    };
    let reference = match &a.reference {
        Some(p) => {
            let t = out::load_array(p)?;
            let (rows, len) = (t.shape()[0], t.len());
            Some(t.reshape([rows, len / rows])?)
        }
        None => None,
    };
    let kset: Vec<u32> = out::parse_list(&a.kset)?.into_iter().map(|k| k as u32).collect();

    let mut runs: Vec<(&'static str, usize)> = sweep.iter().map(|&s| ("fewstep", s)).collect();
    runs.push(("euler", cfg.infer.euler_steps));
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for (sampler, steps) in runs {
        let mut rng = SeededRng::new(seed);
        let started = Instant::now();
        let x = match sampler {
            "euler" => sample_euler(&model, steps, &ck.schedule, n, &mut rng, None)?,
            _ => sample_fewstep(&model, steps, &ck.schedule, n, &mut rng, None)?,
        };
        let wall = started.elapsed().as_secs_f64();
        let (pp, pf) = match shape.as_slice() {
            [f, h, w] => {
                let (pp, pf) = latency_metrics(wall, n * f, *h, *w)?;
                (Some(pp), Some(pf))
            }
            _ => (None, None),
        };
        timing.push(TimingRow { sampler, steps, wall_clock_s: wall, latency_per_pixel: pp, latency_per_frame: pf });
        if let Some(r) = &reference {
            let pts = x.clone().reshape([n, x.len() / n])?;
            rows.push(Row { sampler, steps, metric: "sliced_w2", value: sliced_w2(&pts, r, a.projections, seed)? });
        }
        if shape.len() >= 2 {
            rows.push(Row { sampler, steps, metric: "mhd_mse", value: mhd_mse(&x, &kset)? });
        }
        let mean_sq = x.sq_norm() / x.len() as f64;
        rows.push(Row { sampler, steps, metric: "mean_square", value: mean_sq });
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    out::write(&a.out.join("bench.csv"), &w.into_inner().context("flushing bench csv")?)?;
    out::write_json(&a.out.join("timing.json"), &timing)?;
    for r in &rows {
        println!("{}\t{}\t{}\t{}", r.sampler, r.steps, r.metric, r.value);
    }
    Ok(())
}
