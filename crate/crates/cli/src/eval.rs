use std::path::{Path, PathBuf};

use anchorflow::metrics::{latency_metrics, mhd_mse, sc_residual, sliced_w2, MetricReport, DEFAULT_KSET};
use anchorflow::rng::SeededRng;
use anchorflow::tensor::Tensor;
use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use crate::out::{self, usage};
use crate::sample::run_config;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Metric {
    /// Multi-scale high-detail MSE of `--input`
    MhdMse,
    /// Sliced Wasserstein-2 between `--input` and `--reference`
    SlicedW2,
    /// Unweighted self-consistency residual of `--checkpoint` on `--input`
    ScResidual,
    /// Latency per pixel and per frame from `--latency`, `--frames`, `--res`
    Latency,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Metrics to compute (repeatable)
    #[arg(long = "metric", value_enum, required = true)]
    pub metrics: Vec<Metric>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scale exponents for mhd_mse, e.g. `1,2,3`
    #[arg(long)]
    pub kset: Option<String>,
    /// Random projections for sliced_w2
    #[arg(long, default_value_t = 256)]
    pub projections: usize,
    /// Seed for projections and probe noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe rows for sc_residual
    #[arg(long, default_value_t = 512)]
    pub probe: usize,
    /// Wall-clock latency in seconds
    #[arg(long)]
    pub latency: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Resolution as `WIDTHxHEIGHT`
    #[arg(long)]
    pub res: Option<String>,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, metric: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("{metric} needs --{flag}")))
}

/// `[n, ...]` as `[n, d]`.
fn as_points(t: Tensor) -> Result<Tensor> {
    let (n, len) = (t.shape()[0], t.len());
    let d = len / n;
    Ok(t.reshape([n, d])?)
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("resolution `{s}` is not WIDTHxHEIGHT")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| usage(format!("bad resolution `{s}`")));
    Ok((p(w)?, p(h)?))
}

fn report(metric: &str, value: f64, config: String, inputs: String, seeds: String, note: &str) -> MetricReport {
    MetricReport { metric: metric.into(), value, config, inputs, seeds, note: note.into() }
}

pub fn evaluate(a: &EvalArgs) -> Result<Vec<MetricReport>> {
    let mut rows = Vec::new();
    for &m in &a.metrics {
        match m {
            Metric::MhdMse => {
                let input = need(&a.input, "input", "mhd_mse")?;
                let kset: Vec<u32> = match &a.kset {
                    Some(s) => out::parse_list(s)?.into_iter().map(|k| k as u32).collect(),
                    None => DEFAULT_KSET.to_vec(),
                };
                let video = out::load_array(input)?;
                let value = mhd_mse(&video, &kset)?;
                let ks: Vec<String> = kset.iter().map(u32::to_string).collect();
                rows.push(report(
                    "mhd_mse",
                    value,
                    format!("kset={}", ks.join(",")),
                    input.display().to_string(),
                    String::new(),
                    "box-average down, nearest up",
                ));
            }
            Metric::SlicedW2 => {
                let input = need(&a.input, "input", "sliced_w2")?;
                let reference = need(&a.reference, "reference", "sliced_w2")?;
                let x = as_points(out::load_array(input)?)?;
                let y = as_points(out::load_array(reference)?)?;
                let value = sliced_w2(&x, &y, a.projections, a.seed)?;
                rows.push(report(
                    "sliced_w2",
                    value,
                    format!("projections={}", a.projections),
                    format!("{};{}", input.display(), reference.display()),
                    format!("projection_seed={}", a.seed),
                    "",
                ));
            }
            Metric::ScResidual => {
                let ckpt = need(&a.checkpoint, "checkpoint", "sc_residual")?;
                let input = need(&a.input, "input", "sc_residual")?;
                let ck = out::load_checkpoint(ckpt)?;
                let cfg = run_config(&ck)?;
                let data = out::load_array(input)?;
                let rows_n = data.shape()[0].min(a.probe);
                let probe = data.gather_rows(&(0..rows_n).collect::<Vec<_>>());
                let noise = SeededRng::new(a.seed).normal_tensor(probe.shape().to_vec());
                let model = ck.ema_model();
                let value = sc_residual(&model, &ck.schedule, &cfg.sampler, &noise, &probe, None)
                    .context("sc_residual")?;
                rows.push(report(
                    "sc_residual",
                    value,
                    format!("anchors={:?} k={} probe={rows_n}", cfg.sampler.anchors, cfg.sampler.k),
                    format!("{};{}", ckpt.display(), input.display()),
                    format!("noise_seed={}", a.seed),
                    "EMA weights",
                ));
            }
            Metric::Latency => {
                let latency = a.latency.ok_or_else(|| usage("latency needs --latency"))?;
                let frames = a.frames.ok_or_else(|| usage("latency needs --frames"))?;
                let res = a.res.as_deref().ok_or_else(|| usage("latency needs --res"))?;
                let (w, h) = parse_res(res)?;
                let (pp, pf) = latency_metrics(latency, frames, h, w)?;
                let cfg = format!("latency_s={latency} frames={frames} res={w}x{h}");
                rows.push(report("latency_per_pixel", pp, cfg.clone(), String::new(), String::new(), ""));
                rows.push(report("latency_per_frame", pf, cfg, String::new(), String::new(), ""));
            }
        }
    }
    Ok(rows)
}

pub fn run(a: EvalArgs) -> Result<()> {
    let rows = evaluate(&a)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    out::write(&a.out.join("metrics.csv"), &w.into_inner().context("flushing metrics csv")?)?;
    out::write_json(&a.out.join("metrics.json"), &rows)?;
    for r in &rows {
        println!("{}\t{}", r.metric, r.value);
    }
    Ok(())
}
