//! Declarative run configuration.
//!
//! A run is described by a TOML file with dotted sections. Unknown keys are
//! rejected and every field has a default, so `name = "x"` alone is a valid
//! configuration.
//!
//! ```toml
//! name = "moons"
//! seed = 7
//!
//! [schedule]
//! shift = 3.0
//!
//! [sampler]
//! beta = 0.7
//! anchors = [500, 600, 700, 800]
//!
//! [train]
//! steps = 2000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchor::{DegradeConfig, HrConfig};
use crate::datasets::{ShapeSequence, ToyDistribution, ToyKind};
use crate::error::{Error, Result};
use crate::flow::{AncSettings, NetConfig, TrainConfig};
use crate::schedule::{NoiseSchedule, StepSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    TwoMoons,
    EightGaussians,
    Checkerboard,
    Shapes,
}

impl DataKind {
    pub fn toy(self) -> Option<ToyKind> {
        match self {
            DataKind::TwoMoons => Some(ToyKind::TwoMoons),
            DataKind::EightGaussians => Some(ToyKind::EightGaussians),
            DataKind::Checkerboard => Some(ToyKind::Checkerboard),
            DataKind::Shapes => None,
        }
    }
}

/// Training corpus. `n` counts points for 2-D data and sequences for shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "DataConfig::default_kind")]
    pub kind: DataKind,
    #[serde(default = "DataConfig::default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "DataConfig::default_frames")]
    pub frames: usize,
    #[serde(default = "DataConfig::default_lr")]
    pub lr_h: usize,
    #[serde(default = "DataConfig::default_lr")]
    pub lr_w: usize,
    #[serde(default = "DataConfig::default_factor")]
    pub factor: usize,
    #[serde(default = "DataConfig::default_shapes")]
    pub n_shapes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        toml::from_str("").expect("all data fields have defaults")
    }
}

impl DataConfig {
    fn default_kind() -> DataKind {
        DataKind::TwoMoons
    }
    fn default_n() -> usize {
        8192
    }
    fn default_frames() -> usize {
        3
    }
    fn default_lr() -> usize {
        8
    }
    fn default_factor() -> usize {
        4
    }
    fn default_shapes() -> usize {
        2
    }

    pub fn toy(&self) -> Option<ToyDistribution> {
        self.kind.toy().map(|kind| ToyDistribution { kind, n: self.n, seed: self.seed })
    }

    pub fn shapes(&self) -> ShapeSequence {
        ShapeSequence {
            frames: self.frames,
            lr_h: self.lr_h,
            lr_w: self.lr_w,
            factor: self.factor,
            n_shapes: self.n_shapes,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("data.n must be positive".into()));
        }
        if self.kind == DataKind::Shapes {
            self.shapes().validate().map_err(|e| Error::Config(format!("data: {e}")))?;
        }
        Ok(())
    }
}

/// Sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// Few-step count; the default matches the evaluation protocol.
    #[serde(default = "InferConfig::default_steps")]
    pub steps: usize,
    /// Stage I step count in two-stage sampling.
    #[serde(default = "InferConfig::default_steps")]
    pub anchor_steps: usize,
    /// Step count of the Euler reference sampler.
    #[serde(default = "InferConfig::default_euler")]
    pub euler_steps: usize,
    /// Step counts swept by `bench`.
    #[serde(default = "InferConfig::default_sweep")]
    pub sweep: Vec<usize>,
    #[serde(default = "InferConfig::default_samples")]
    pub n_samples: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        toml::from_str("").expect("all infer fields have defaults")
    }
}

impl InferConfig {
    fn default_steps() -> usize {
        4
    }
    fn default_euler() -> usize {
        50
    }
    fn default_sweep() -> Vec<usize> {
        vec![2, 3, 4, 5]
    }
    fn default_samples() -> usize {
        1024
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "RunConfig::default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; falls back to the command line or environment.
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub sampler: StepSampler,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub degrade: DegradeConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub hr: HrConfig,
    #[serde(default)]
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_toml("").expect("all run fields have defaults")
    }
}

impl RunConfig {
    fn default_name() -> String {
        "run".into()
    }

    /// Parse and validate; unknown keys and bad values are `Error::Config`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML rendering written next to every output.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.schedule.validate().map_err(cfg)?;
        self.sampler.validate(&self.schedule).map_err(cfg)?;
        self.net.validate()?;
        self.train.validate()?;
        self.degrade.validate()?;
        self.data.validate()?;
        self.hr.validate()?;
        let inf = &self.infer;
        if inf.steps == 0 || inf.anchor_steps == 0 || inf.euler_steps == 0 || inf.sweep.contains(&0) {
            return Err(Error::Config("infer step counts must be positive".into()));
        }
        let max = inf.steps.max(inf.anchor_steps).max(inf.euler_steps).max(inf.sweep.iter().copied().max().unwrap_or(1));
        if max > self.schedule.n {
            return Err(Error::Config(format!("infer step count {max} exceeds schedule.n = {}", self.schedule.n)));
        }
        Ok(())
    }

    /// Consistency-loss settings implied by `sampler.*` and `train.*`.
    pub fn anc(&self) -> AncSettings {
        AncSettings {
            sampler: self.sampler.clone(),
            calibration: self.train.calibrate.then_some(self.train.p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.schedule.n, 1000);
        assert_eq!(c.sampler.anchors, vec![500, 600, 700, 800]);
        assert_eq!(c.infer.sweep, vec![2, 3, 4, 5]);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let e = RunConfig::from_toml("foo = 1").unwrap_err().to_string();
        assert!(e.contains("foo"), "{e}");
        let e = RunConfig::from_toml("[train]\nstesp = 3").unwrap_err().to_string();
        assert!(e.contains("stesp"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_toml("name = \"x\"\nseed = 9\n[sampler]\nbeta = 0.0\n[data]\nkind = \"shapes\"").unwrap();
        assert_eq!(RunConfig::from_toml(&c.echo()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["[schedule]\nshift = -1.0", "[train]\nbatch = 0", "[infer]\nsteps = 5000", "[data]\nn = 0"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
