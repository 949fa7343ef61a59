use std::fmt;
use std::path::{Path, PathBuf};

use anchorflow::config::RunConfig;
use anchorflow::io::{self, Bundle};
use anchorflow::tensor::Tensor;
use anyhow::{Context, Result};
use serde::Serialize;

/// Default output root when neither `--out` nor `out_dir` is given.
pub const OUT_ENV: &str = "ANCHORFLOW_OUT";

/// Bad invocation or missing input; maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<anchorflow::Error>() {
            use anchorflow::Error::*;
            return match err {
                NonFinite(_) => 3,
                Config(_) | Invalid(_) | OutOfRange(_) | Shape { .. } | Format(_) => 2,
                Io(_) => 1,
            };
        }
    }
    1
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

/// `--out` if given, else `<root>/<name>` with the root taken from the
/// config, then the environment, then `runs`.
pub fn resolve_dir(explicit: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = cfg
        .and_then(|c| c.out_dir.clone())
        .or_else(|| std::env::var(OUT_ENV).ok())
        .unwrap_or_else(|| "runs".into());
    let name = cfg.map(|c| c.name.as_str()).unwrap_or("run");
    Path::new(&root).join(name)
}

/// Read an input file, treating absence as a usage error.
pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_array(path: &Path) -> Result<Tensor> {
    let bytes = read_input(path)?;
    let b = Bundle::from_bytes(&bytes).with_context(|| format!("reading {}", path.display()))?;
    b.get("data")
        .cloned()
        .ok_or_else(|| usage(format!("{} holds no `data` array", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<io::Checkpoint> {
    read_input(path)?;
    io::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    io::write_file(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

/// One written file as listed in a manifest.
#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

pub fn save_array(dir: &Path, name: &str, t: &Tensor, meta: serde_json::Value) -> Result<FileEntry> {
    let sha256 = io::save_array(&dir.join(name), t, meta).with_context(|| format!("writing {name}"))?;
    Ok(FileEntry { file: name.into(), shape: t.shape().to_vec(), sha256 })
}

/// Images are written as PGM grids scaled from `[0, 1]`.
pub fn save_pgm(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    write(&dir.join(name), &io::pgm_bytes(t, 0.0, 1.0)?)
}

pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| usage(format!("bad list entry `{p}` in `{s}`"))))
        .collect()
}
