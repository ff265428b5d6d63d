//! Run configuration: task presets, TOML files, and flag overrides.
//!
//! Every stage resolves its configuration the same way: task defaults,
//! then the optional TOML file, then command-line flags (flags win). The
//! effective configuration is snapshotted next to the stage outputs so any
//! run can be reproduced bit for bit.

use anyhow::{bail, Context, Result};
use quilt_core::diffusion::{SamplerConfig, SamplerOrder, SigmaScheduleConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the root for relative output directories.
pub const OUT_ROOT_ENV: &str = "QUILT_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum Task {
    /// Long stationary 1D signals assembled from length-64 patches.
    Signal1d,
    /// 16x16 bump images with position conditioning.
    Bump2d,
    /// Diagonal Gaussian long objects with a position-dependent mean; every
    /// stage has an analytic reference.
    GaussianOracle,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Signal1d => "signal1d",
            Task::Bump2d => "bump2d",
            Task::GaussianOracle => "gaussian-oracle",
        }
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum Method {
    /// Trained coordinator over base-denoiser outputs.
    Dde,
    /// Per-patch base outputs averaged in the overlaps at every step.
    Multidiffusion,
    /// Independent per-patch sampling, concatenated.
    Concat,
    /// Guidance-sum composition of conditional and unconditional outputs.
    Rrr,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dde => "dde",
            Method::Multidiffusion => "multidiffusion",
            Method::Concat => "concat",
            Method::Rrr => "rrr",
        }
    }

    pub fn from_name(name: &str) -> Result<Method> {
        match name {
            "dde" => Ok(Method::Dde),
            "multidiffusion" => Ok(Method::Multidiffusion),
            "concat" => Ok(Method::Concat),
            "rrr" => Ok(Method::Rrr),
            other => bail!("unknown method {other:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum CoordArch {
    Vit,
    Rnn,
}

/// Patch geometry of the expanded domain (1D tasks) and the conditioning
/// counts (bump task).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub l_train: usize,
    pub l_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub fourier_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigma_log_mean: f64,
    pub sigma_log_std: f64,
    pub cond_dropout: f64,
    pub ema_decay: f64,
    pub lr_final_scale: f64,
}

impl TrainParams {
    pub fn to_core(self, seed: u64) -> Result<quilt_core::base::TrainConfig> {
        Ok(quilt_core::base::TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            sigma_sampler: quilt_core::diffusion::SigmaSampler::new(
                self.sigma_log_mean,
                self.sigma_log_std,
            )?,
            cond_dropout: self.cond_dropout,
            ema_decay: self.ema_decay,
            seed,
            lr_final_scale: self.lr_final_scale,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordModelConfig {
    pub arch: CoordArch,
    pub token_patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub theta_base: f64,
    pub fourier_dim: usize,
    pub rnn_hidden_channels: usize,
    pub rnn_conv_hidden: usize,
    pub rnn_kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub churn: f64,
    /// 1 = Euler, 2 = Heun.
    pub order: usize,
}

impl SamplerParams {
    pub fn to_core(self, seed: u64) -> Result<SamplerConfig> {
        let order = match self.order {
            1 => SamplerOrder::Euler,
            2 => SamplerOrder::Heun,
            other => bail!("sampler order must be 1 (Euler) or 2 (Heun), got {other}"),
        };
        let config = SamplerConfig {
            schedule: SigmaScheduleConfig {
                sigma_min: self.sigma_min,
                sigma_max: self.sigma_max,
                rho: self.rho,
                n_steps: self.steps,
            },
            order,
            s_churn: self.churn,
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum SeparationRule {
    /// Pairwise Euclidean distance >= 0.15 (feasible for up to 5 points).
    Euclidean,
    /// Pairwise squared distance >= 0.15 (infeasible beyond 3 points;
    /// provided for protocol comparison).
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub n_samples: usize,
    pub w_dde: f64,
    pub w_rrr: f64,
    pub oracle_radius: f64,
    pub oracle_tau: f64,
    pub separation: SeparationRule,
    pub separation_threshold: f64,
    /// Reference-set size for the feature-statistics distance.
    pub reference_size: usize,
}

impl EvalParams {
    pub fn separation_rule(&self) -> quilt_core::eval::MinSeparation {
        match self.separation {
            SeparationRule::Euclidean => {
                quilt_core::eval::MinSeparation::Euclidean(self.separation_threshold)
            }
            SeparationRule::Squared => {
                quilt_core::eval::MinSeparation::Squared(self.separation_threshold)
            }
        }
    }

    pub fn oracle(&self) -> quilt_core::eval::ConstraintOracle {
        quilt_core::eval::ConstraintOracle {
            radius: self.oracle_radius,
            tau: self.oracle_tau,
        }
    }
}

/// The one structured configuration every stage consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub dataset_size: usize,
    pub grid: GridConfig,
    pub base: BaseModelConfig,
    pub train_base: TrainParams,
    pub coord: CoordModelConfig,
    pub train_coord: TrainParams,
    pub sampler: SamplerParams,
    pub eval: EvalParams,
}

impl RunConfig {
    pub fn defaults_for(task: Task) -> RunConfig {
        let eval = EvalParams {
            n_samples: 256,
            w_dde: 20.0,
            w_rrr: 4.0,
            oracle_radius: 2.0,
            oracle_tau: 0.5,
            separation: SeparationRule::Euclidean,
            separation_threshold: 0.15,
            reference_size: 256,
        };
        let coord_vit = |token_patch: usize, hidden: usize, depth: usize| CoordModelConfig {
            arch: CoordArch::Vit,
            token_patch,
            hidden,
            depth,
            heads: 4,
            mlp_ratio: 4,
            theta_base: 1e4,
            fourier_dim: 8,
            rnn_hidden_channels: 16,
            rnn_conv_hidden: 32,
            rnn_kernel: 5,
        };
        match task {
            Task::Signal1d => RunConfig {
                task,
                seed: 0,
                dataset_size: 512,
                grid: GridConfig {
                    patch_len: 64,
                    stride: 48,
                    l_train: 5,
                    l_test: 13,
                },
                base: BaseModelConfig {
                    hidden: 96,
                    blocks: 3,
                    fourier_dim: 8,
                },
                train_base: TrainParams {
                    lr: 2e-3,
                    batch_size: 32,
                    epochs: 120,
                    sigma_log_mean: -1.2,
                    sigma_log_std: 1.2,
                    cond_dropout: 0.0,
                    ema_decay: 0.999,
                    lr_final_scale: 0.02,
                },
                coord: coord_vit(4, 64, 3),
                train_coord: TrainParams {
                    lr: 1e-3,
                    batch_size: 4,
                    epochs: 30,
                    sigma_log_mean: -1.2,
                    sigma_log_std: 1.2,
                    cond_dropout: 0.0,
                    ema_decay: 0.999,
                    lr_final_scale: 0.05,
                },
                sampler: SamplerParams {
                    steps: 150,
                    sigma_min: 1e-4,
                    sigma_max: 20.0,
                    rho: 7.0,
                    churn: 20.0,
                    order: 2,
                },
                eval,
            },
            Task::Bump2d => RunConfig {
                task,
                seed: 0,
                dataset_size: 2048,
                grid: GridConfig {
                    patch_len: 16,
                    stride: 16,
                    l_train: 2,
                    l_test: 5,
                },
                base: BaseModelConfig {
                    hidden: 128,
                    blocks: 4,
                    fourier_dim: 12,
                },
                train_base: TrainParams {
                    lr: 2e-3,
                    batch_size: 32,
                    epochs: 120,
                    sigma_log_mean: -1.0,
                    sigma_log_std: 1.6,
                    cond_dropout: 0.10,
                    ema_decay: 0.999,
                    lr_final_scale: 0.02,
                },
                coord: coord_vit(4, 64, 3),
                train_coord: TrainParams {
                    lr: 1e-3,
                    batch_size: 8,
                    epochs: 40,
                    sigma_log_mean: -1.0,
                    sigma_log_std: 1.6,
                    cond_dropout: 0.10,
                    ema_decay: 0.999,
                    lr_final_scale: 0.05,
                },
                sampler: SamplerParams {
                    steps: 100,
                    sigma_min: 1e-4,
                    sigma_max: 80.0,
                    rho: 7.0,
                    churn: 0.0,
                    order: 2,
                },
                eval,
            },
            Task::GaussianOracle => RunConfig {
                task,
                seed: 0,
                dataset_size: 256,
                grid: GridConfig {
                    patch_len: 8,
                    stride: 4,
                    l_train: 3,
                    l_test: 5,
                },
                base: BaseModelConfig {
                    hidden: 32,
                    blocks: 2,
                    fourier_dim: 4,
                },
                train_base: TrainParams {
                    lr: 2e-3,
                    batch_size: 32,
                    epochs: 60,
                    sigma_log_mean: -0.7,
                    sigma_log_std: 1.0,
                    cond_dropout: 0.0,
                    ema_decay: 0.999,
                    lr_final_scale: 0.05,
                },
                coord: coord_vit(2, 32, 2),
                train_coord: TrainParams {
                    lr: 1e-3,
                    batch_size: 8,
                    epochs: 30,
                    sigma_log_mean: -0.7,
                    sigma_log_std: 1.0,
                    cond_dropout: 0.0,
                    ema_decay: 0.999,
                    lr_final_scale: 0.05,
                },
                sampler: SamplerParams {
                    steps: 80,
                    sigma_min: 1e-4,
                    sigma_max: 20.0,
                    rho: 7.0,
                    churn: 0.0,
                    order: 2,
                },
                eval: EvalParams {
                    n_samples: 512,
                    reference_size: 512,
                    ..eval
                },
            },
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            bail!("dataset_size must be >= 1");
        }
        if self.grid.l_train == 0 || self.grid.l_test == 0 {
            bail!("l_train and l_test must be >= 1");
        }
        if self.grid.patch_len == 0 || self.grid.stride == 0 {
            bail!("grid patch_len and stride must be >= 1");
        }
        if self.grid.stride > self.grid.patch_len {
            bail!(
                "grid stride {} exceeds patch_len {}",
                self.grid.stride,
                self.grid.patch_len
            );
        }
        Ok(())
    }

    /// Expanded object length for an L-patch line layout.
    pub fn line_total_len(&self, l: usize) -> usize {
        self.grid.patch_len + self.grid.stride * (l - 1)
    }
}

/// Shared flag overrides; flags win over the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration. Without it, `--task` presets are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task preset (required when no --config is given).
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sampler step-count override.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sampler churn override.
    #[arg(long)]
    pub churn: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.task) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(task)) => RunConfig::defaults_for(task),
            (None, None) => bail!("either --config or --task is required"),
        };
        if let Some(task) = self.task {
            if cfg.task != task {
                bail!(
                    "--task {} contradicts the config file task {}",
                    task.as_str(),
                    cfg.task.as_str()
                );
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.sampler.steps = steps;
        }
        if let Some(churn) = self.churn {
            cfg.sampler.churn = churn;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolve an output directory against the output-root environment
/// variable.
pub fn resolve_out_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}
