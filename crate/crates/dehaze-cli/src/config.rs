//! Run configuration: JSON file plus command-line overrides.
//!
//! Precedence is defaults < config file < explicit flags, and the fully
//! resolved result is echoed before anything runs, so a run can be
//! reconstructed from its log alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dehaze_core::loss::WeightPreset;
use dehaze_core::net::AblationMode;
use dehaze_core::trainer::TrainConfig;
use dehaze_core::{Error, Result};

/// Environment variable naming the directory all relative output paths
/// resolve against. Unset means outputs land relative to the working
/// directory.
pub const OUT_ROOT_ENV: &str = "DEHAZE_OUT_ROOT";

/// Everything a training run needs, serializable so the echoed config is
/// the run's full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory holding `manifest.json` and the sample files it lists.
    pub data_dir: PathBuf,
    /// Directory of real hazy images for the unlabeled pool; only the
    /// `full` ablation reads it.
    pub unlabeled_dir: Option<PathBuf>,
    /// Output directory for the log and checkpoints (relative paths resolve
    /// against `DEHAZE_OUT_ROOT` when that is set).
    pub out_dir: PathBuf,
    /// Named loss-weight setting; when present it replaces
    /// `train.weights` wholesale.
    pub preset: Option<WeightPreset>,
    pub train: TrainConfig,
    /// Write one JSON log line every this many iterations (0 = none).
    pub log_every: usize,
    /// Overwrite the checkpoint every this many iterations (0 = only at the
    /// end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            unlabeled_dir: None,
            out_dir: PathBuf::from("out"),
            preset: None,
            train: TrainConfig::default(),
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Applies the preset (if any) and validates the result. Call after all
    /// overrides have been merged in.
    pub fn resolve(&mut self) -> Result<()> {
        if let Some(preset) = self.preset {
            self.train.weights = preset.weights();
        }
        self.train.validate()?;
        if self.train.t_max == 0 {
            return Err(Error::Config(
                "t_max must be positive: the learning-rate and consistency \
                 schedules are defined relative to the training horizon"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Flag-level overrides shared by `train`; each one, when present, replaces
/// the corresponding config-file field.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// Directory holding manifest.json and its sample files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory of real hazy images for the unlabeled pool.
    #[arg(long)]
    pub unlabeled_dir: Option<PathBuf>,
    /// Output directory for log and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RNG seed for parameters, batching, crops, and noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total training iterations (the schedule horizon).
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Network/loss ladder rung: basic, basic-stage1, basic-two-stages, full.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<AblationMode>,
    /// Loss-weight setting: prose, m1, m2, m3, m4.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<WeightPreset>,
    /// Samples per iteration (mixed batches split this evenly).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Square training-crop side in pixels.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Initial learning rate of the polynomial decay schedule.
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Iterations between JSON log lines (0 = none).
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Iterations between checkpoint overwrites (0 = only final).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = &self.data_dir {
            config.data_dir = v.clone();
        }
        if let Some(v) = &self.unlabeled_dir {
            config.unlabeled_dir = Some(v.clone());
        }
        if let Some(v) = &self.out {
            config.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            config.train.seed = v;
        }
        if let Some(v) = self.t_max {
            config.train.t_max = v;
        }
        if let Some(v) = self.ablation {
            config.train.mode = v;
        }
        if let Some(v) = self.preset {
            config.preset = Some(v);
        }
        if let Some(v) = self.batch_size {
            config.train.batch_size = v;
        }
        if let Some(v) = self.crop {
            config.train.crop = v;
        }
        if let Some(v) = self.lr0 {
            config.train.schedule.lr0 = v;
        }
        if let Some(v) = self.log_every {
            config.log_every = v;
        }
        if let Some(v) = self.checkpoint_every {
            config.checkpoint_every = v;
        }
    }
}

/// Parses a serde kebab-case enum value by round-tripping it as a JSON
/// string, so flag spellings and config-file spellings never diverge.
fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown {what} '{s}'"))
}

pub fn parse_ablation(s: &str) -> std::result::Result<AblationMode, String> {
    parse_kebab(s, "ablation mode")
}

pub fn parse_preset(s: &str) -> std::result::Result<WeightPreset, String> {
    parse_kebab(s, "weight preset")
}

/// Resolves an output path against `DEHAZE_OUT_ROOT`: absolute paths pass
/// through, relative ones are joined under the root when it is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Existence check with a config-level error, so missing inputs exit with
/// the usage code instead of surfacing as runtime failures mid-run.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}
