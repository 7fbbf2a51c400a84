use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use xmhash_core::trainer::AblationSwitch;
use xmhash_core::{EvalConfig, TrainConfig};

/// Name of the effective-config echo written into run directories.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Flags shared by `train` and `ablate`. Each one, when given, replaces the
/// value from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (or the directory holding it)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Code length in bits
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size in pairs
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub disc_hidden: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub map_k: Option<usize>,
}

impl Overrides {
    /// Loads `--config` (or defaults) and applies the flags on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Copy>(slot: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        let t = &mut cfg.train;
        set(&mut t.seed, self.seed);
        set(&mut t.code_bits, self.bits);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch);
        set(&mut t.hidden_dim, self.hidden);
        set(&mut t.disc_hidden_dim, self.disc_hidden);
        set(&mut t.lr0, self.lr);
        let w = &mut t.weights;
        set(&mut w.tau, self.tau);
        set(&mut w.alpha, self.alpha);
        set(&mut w.beta, self.beta);
        set(&mut w.gamma, self.gamma);
        set(&mut w.lambda1, self.lambda1);
        set(&mut w.lambda2, self.lambda2);
        set(&mut cfg.eval.map_k, self.map_k);
    }
}

pub fn add_switches(cfg: &mut RunConfig, switches: &[AblationSwitch]) {
    cfg.train.ablation.extend(switches.iter().copied());
}

/// Output root for runs without an explicit `--out`.
pub fn output_root() -> PathBuf {
    std::env::var_os("XMHASH_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Accepts either a manifest file or a dataset directory.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(xmhash_core::dataset::MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}
