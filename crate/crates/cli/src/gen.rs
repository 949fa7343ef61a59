use std::path::PathBuf;

use anchorflow::config::{DataKind, RunConfig};
use anchorflow::datasets::{gen_2d, gen_shape_corpus};
use anchorflow::tensor::Tensor;
use anyhow::Result;
use clap::Args;
use serde::Serialize;

use crate::out::{self, FileEntry};

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Run configuration (TOML)
    pub config: PathBuf,
    /// Output directory
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest {
    name: String,
    kind: DataKind,
    seed: u64,
    files: Vec<FileEntry>,
}

/// Named training arrays for the configured dataset: `points` for 2-D
/// data, `lr` and `hr` for shape sequences.
pub fn dataset(cfg: &RunConfig) -> Result<Vec<(&'static str, Tensor)>> {
    Ok(match cfg.data.toy() {
        Some(toy) => vec![("points", gen_2d(&toy)?)],
        None => {
            let (lr, hr) = gen_shape_corpus(&cfg.data.shapes(), cfg.data.n)?;
            vec![("lr", lr), ("hr", hr)]
        }
    })
}

pub fn run(a: GenArgs) -> Result<()> {
    let cfg = out::load_config(&a.config)?;
    let dir = match &a.out {
        Some(p) => p.clone(),
        None => out::resolve_dir(None, Some(&cfg)).join("data"),
    };
    let mut files = Vec::new();
    for (name, t) in dataset(&cfg)? {
        let meta = serde_json::json!({ "dataset": cfg.data, "array": name });
        files.push(out::save_array(&dir, &format!("{name}.afb"), &t, meta)?);
        if name != "points" {
            out::save_pgm(&dir, &format!("{name}_preview.pgm"), &t.gather_rows(&[0]))?;
        }
    }
    out::write(&dir.join("config.toml"), cfg.echo().as_bytes())?;
    let manifest = Manifest { name: cfg.name.clone(), kind: cfg.data.kind, seed: cfg.data.seed, files };
    out::write_json(&dir.join("manifest.json"), &manifest)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}
