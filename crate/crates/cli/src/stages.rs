//! Stage implementations behind the CLI subcommands.

use crate::config::{CoordArch, Method, RunConfig, Task};
use crate::io::{
    atomic_write, read_manifest, read_samples_csv, write_manifest, write_pgm, write_samples_csv,
    Manifest,
};
use anyhow::{bail, Context, Result};
use quilt_core::base::{train_base, BaseArch, BaseDenoiser, BaseNetConfig, CondEncoding};
use quilt_core::coordinator::{
    train_coordinator, CompositeDenoiser, CoordTask, CoordTrainItem, Coordinator,
    CoordinatorConfig, CoordinatorModel, RecurrentConfig, RecurrentCoordinator,
};
use quilt_core::dataset::{make_signal_objects, make_toy_dataset, DatasetKind, BUMP_IMAGE_SIDE};
use quilt_core::diffusion::{ode_sample, Cond, LossWeighting};
use quilt_core::eval::{
    accuracy_eval, detect_peaks, frechet_feature_distance, sample_conditionings,
    seam_interior_ratio, FeatureProjector, MetricRow,
};
use quilt_core::grid::{PatchGrid1D, PatchLayout};
use quilt_core::oracle::{gaussian_marginal, GaussianData};
use quilt_core::rng::{derive_seed, rng_from_seed};
use quilt_core::{load_checkpoint, save_checkpoint, NoiseLevel, ParamSet, Tensor};
use std::path::{Path, PathBuf};

// seed sub-streams
const STREAM_DATASET: u64 = 0xDA7A;
const STREAM_COORD_DATA: u64 = 0xDA7B;
const STREAM_BASE_INIT: u64 = 0xB0;
const STREAM_BASE_TRAIN: u64 = 0xB1;
const STREAM_COORD_INIT: u64 = 0xC0;
const STREAM_COORD_TRAIN: u64 = 0xC1;
const STREAM_SAMPLE: u64 = 0x5A;
const STREAM_CONDS: u64 = 0xC09D;
const STREAM_REFERENCE: u64 = 0xEF;
const STREAM_PROJECTOR: u64 = 0xFE;

fn write_config_snapshot(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    atomic_write(&out_dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        text.push_str(&format!("{epoch},{loss}\n"));
    }
    atomic_write(path, text.as_bytes())
}

/// The long-object Gaussian ensemble for the oracle task: a smooth
/// position-dependent mean profile with constant variance. Patch-level
/// models never see absolute positions, so the profile is exactly what a
/// coordinator must supply.
pub fn gaussian_profile(total_len: usize, patch_len: usize) -> GaussianData {
    let period = (2 * patch_len) as f64;
    let mean: Vec<f64> = (0..total_len)
        .map(|i| 0.8 * (std::f64::consts::TAU * i as f64 / period).sin())
        .collect();
    GaussianData::new(mean, vec![0.3; total_len]).expect("profile distribution")
}

struct BaseTrainingData {
    records: Vec<(Tensor, Option<Cond>)>,
    sigma_data: f64,
    input_shape: Vec<usize>,
    cond: CondEncoding,
}

fn build_base_records(cfg: &RunConfig) -> Result<BaseTrainingData> {
    let seed = derive_seed(cfg.seed, STREAM_DATASET);
    match cfg.task {
        Task::Signal1d => {
            let ds = make_toy_dataset(DatasetKind::Signal1d, cfg.dataset_size, seed)?;
            Ok(BaseTrainingData {
                records: ds
                    .records
                    .into_iter()
                    .map(|r| (r.sample, None))
                    .collect(),
                sigma_data: ds.sigma_data,
                input_shape: vec![cfg.grid.patch_len],
                cond: CondEncoding::None,
            })
        }
        Task::Bump2d => {
            let ds = make_toy_dataset(DatasetKind::Bump2d, cfg.dataset_size, seed)?;
            Ok(BaseTrainingData {
                records: ds
                    .records
                    .into_iter()
                    .map(|r| (r.sample, r.cond))
                    .collect(),
                sigma_data: ds.sigma_data,
                input_shape: vec![BUMP_IMAGE_SIDE, BUMP_IMAGE_SIDE],
                cond: CondEncoding::Position2d,
            })
        }
        Task::GaussianOracle => {
            use rand::Rng as _;
            let n_train = cfg.line_total_len(cfg.grid.l_train);
            let data = gaussian_profile(n_train, cfg.grid.patch_len);
            let b = cfg.grid.patch_len;
            let mut rng = rng_from_seed(seed);
            let records: Vec<(Tensor, Option<Cond>)> = (0..cfg.dataset_size)
                .map(|_| {
                    let long = data.sample(&mut rng);
                    let off = rng.gen_range(0..=n_train - b);
                    (
                        Tensor::from_vec(long.data()[off..off + b].to_vec()),
                        None,
                    )
                })
                .collect();
            let n_total: usize = records.iter().map(|r| r.0.len()).sum();
            let mean: f64 =
                records.iter().map(|r| r.0.sum()).sum::<f64>() / n_total as f64;
            let var: f64 = records
                .iter()
                .flat_map(|r| r.0.data())
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n_total as f64;
            Ok(BaseTrainingData {
                records,
                sigma_data: var.sqrt(),
                input_shape: vec![b],
                cond: CondEncoding::None,
            })
        }
    }
}

fn base_meta(cfg: &RunConfig, net: &BaseNetConfig, ema: bool) -> serde_json::Value {
    serde_json::json!({
        "kind": "base",
        "task": cfg.task.as_str(),
        "net": net,
        "sigma_data": net.sigma_data,
        "ema": ema,
    })
}

pub fn run_train_base(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let data = build_base_records(cfg)?;
    let net = BaseNetConfig {
        input_shape: data.input_shape.clone(),
        arch: BaseArch::Residual {
            hidden: cfg.base.hidden,
            blocks: cfg.base.blocks,
        },
        cond: data.cond,
        fourier_dim: cfg.base.fourier_dim,
        sigma_data: data.sigma_data,
    };
    let mut model = BaseDenoiser::init(net.clone(), derive_seed(cfg.seed, STREAM_BASE_INIT))?;
    let train_cfg = cfg
        .train_base
        .to_core(derive_seed(cfg.seed, STREAM_BASE_TRAIN))?;
    let weighting = LossWeighting::Edm {
        sigma_data: data.sigma_data,
    };
    eprintln!(
        "training base model on {} records for {} epochs",
        data.records.len(),
        train_cfg.epochs
    );
    let out = train_base(&mut model, &data.records, &train_cfg, &weighting)?;
    save_checkpoint(
        &out_dir.join("base.ckpt"),
        &base_meta(cfg, &net, false),
        &out.params,
    )?;
    save_checkpoint(
        &out_dir.join("base_ema.ckpt"),
        &base_meta(cfg, &net, true),
        &out.ema,
    )?;
    write_loss_csv(&out_dir.join("base_loss.csv"), &out.epoch_losses)?;
    write_config_snapshot(cfg, out_dir)?;
    eprintln!(
        "base training done: first-epoch loss {:.6}, last-epoch loss {:.6}",
        out.epoch_losses.first().unwrap(),
        out.epoch_losses.last().unwrap()
    );
    Ok(())
}

pub fn load_base(path: &Path, cfg: &RunConfig) -> Result<BaseDenoiser> {
    let ckpt = load_checkpoint(path)
        .with_context(|| format!("loading base checkpoint {}", path.display()))?;
    let kind = ckpt.meta.get("kind").and_then(|v| v.as_str());
    if kind != Some("base") {
        bail!(
            "{} is not a base checkpoint (kind = {kind:?})",
            path.display()
        );
    }
    let task = ckpt.meta.get("task").and_then(|v| v.as_str());
    if task != Some(cfg.task.as_str()) {
        bail!(
            "checkpoint task {task:?} does not match configured task {}",
            cfg.task.as_str()
        );
    }
    let net: BaseNetConfig = serde_json::from_value(
        ckpt.meta
            .get("net")
            .cloned()
            .context("base checkpoint missing net config")?,
    )?;
    Ok(BaseDenoiser {
        cfg: net,
        params: ckpt.params,
    })
}

/// A coordinator loaded from a checkpoint, either architecture.
pub enum LoadedCoordinator {
    Vit(Coordinator),
    Rnn(RecurrentCoordinator),
}

impl LoadedCoordinator {
    pub fn as_model(&self) -> &dyn CoordinatorModel {
        match self {
            LoadedCoordinator::Vit(m) => m,
            LoadedCoordinator::Rnn(m) => m,
        }
    }
}

fn coord_meta(
    cfg: &RunConfig,
    arch: &str,
    arch_cfg: serde_json::Value,
    ema: bool,
) -> serde_json::Value {
    serde_json::json!({
        "kind": "coordinator",
        "task": cfg.task.as_str(),
        "arch": arch,
        "arch_config": arch_cfg,
        "grid": cfg.grid,
        "l_train": cfg.grid.l_train,
        "ema": ema,
    })
}

pub fn load_coordinator(path: &Path) -> Result<LoadedCoordinator> {
    let ckpt = load_checkpoint(path)
        .with_context(|| format!("loading coordinator checkpoint {}", path.display()))?;
    let kind = ckpt.meta.get("kind").and_then(|v| v.as_str());
    if kind != Some("coordinator") {
        bail!(
            "{} is not a coordinator checkpoint (kind = {kind:?})",
            path.display()
        );
    }
    let arch = ckpt.meta.get("arch").and_then(|v| v.as_str());
    let arch_cfg = ckpt
        .meta
        .get("arch_config")
        .cloned()
        .context("coordinator checkpoint missing arch_config")?;
    match arch {
        Some("vit") => {
            let cfg: CoordinatorConfig = serde_json::from_value(arch_cfg)?;
            let mut model = Coordinator::init(cfg, 0)?;
            model.params().check_same_structure(&ckpt.params)?;
            *model.params_mut() = ckpt.params;
            Ok(LoadedCoordinator::Vit(model))
        }
        Some("rnn") => {
            let cfg: RecurrentConfig = serde_json::from_value(arch_cfg)?;
            let mut model = RecurrentCoordinator::init(cfg, 0)?;
            model.params().check_same_structure(&ckpt.params)?;
            *model.params_mut() = ckpt.params;
            Ok(LoadedCoordinator::Rnn(model))
        }
        other => bail!("unknown coordinator arch {other:?}"),
    }
}

fn build_coord_items(cfg: &RunConfig) -> Result<(Vec<CoordTrainItem>, CoordTask)> {
    let seed = derive_seed(cfg.seed, STREAM_COORD_DATA);
    match cfg.task {
        Task::Signal1d => {
            let n_train = cfg.line_total_len(cfg.grid.l_train);
            let objects = make_signal_objects(n_train, cfg.dataset_size, seed);
            let layout = PatchLayout::Line(PatchGrid1D::new(
                cfg.grid.patch_len,
                cfg.grid.stride,
                cfg.grid.l_train,
            )?);
            Ok((
                objects
                    .into_iter()
                    .map(|object| CoordTrainItem {
                        object,
                        positions: Vec::new(),
                    })
                    .collect(),
                CoordTask::Spatial { layout },
            ))
        }
        Task::GaussianOracle => {
            let n_train = cfg.line_total_len(cfg.grid.l_train);
            let data = gaussian_profile(n_train, cfg.grid.patch_len);
            let mut rng = rng_from_seed(seed);
            let items = (0..cfg.dataset_size)
                .map(|_| CoordTrainItem {
                    object: data.sample(&mut rng),
                    positions: Vec::new(),
                })
                .collect();
            let layout = PatchLayout::Line(PatchGrid1D::new(
                cfg.grid.patch_len,
                cfg.grid.stride,
                cfg.grid.l_train,
            )?);
            Ok((items, CoordTask::Spatial { layout }))
        }
        Task::Bump2d => {
            // same dataset as base training; conditioning positions are
            // extracted from each image with the analytic peak detector,
            // mirroring the classifier-based extraction protocol
            let ds = make_toy_dataset(
                DatasetKind::Bump2d,
                cfg.dataset_size,
                derive_seed(cfg.seed, STREAM_DATASET),
            )?;
            let oracle = cfg.eval.oracle();
            let items: Vec<CoordTrainItem> = ds
                .records
                .into_iter()
                .map(|r| {
                    let mut positions = detect_peaks(&r.sample, &oracle);
                    if positions.is_empty() {
                        if let Some(Cond::Position(p)) = r.cond {
                            positions.push(p);
                        }
                    }
                    CoordTrainItem {
                        object: r.sample,
                        positions,
                    }
                })
                .collect();
            Ok((
                items,
                CoordTask::MultiCond {
                    l_train: cfg.grid.l_train,
                },
            ))
        }
    }
}

pub fn run_train_coord(cfg: &RunConfig, base_ckpt: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let base = load_base(base_ckpt, cfg)?;
    let (items, task) = build_coord_items(cfg)?;
    let weighting = LossWeighting::Edm {
        sigma_data: base.cfg.sigma_data,
    };
    let train_cfg = cfg
        .train_coord
        .to_core(derive_seed(cfg.seed, STREAM_COORD_TRAIN))?;
    let init_seed = derive_seed(cfg.seed, STREAM_COORD_INIT);

    eprintln!(
        "training {:?} coordinator on {} objects for {} epochs",
        cfg.coord.arch,
        items.len(),
        train_cfg.epochs
    );
    let (out, arch_name, arch_cfg_json, params, ema): (_, &str, serde_json::Value, ParamSet, ParamSet) =
        match cfg.coord.arch {
            CoordArch::Vit => {
                let patch_shape = match cfg.task {
                    Task::Bump2d => vec![BUMP_IMAGE_SIDE, BUMP_IMAGE_SIDE],
                    _ => vec![cfg.grid.patch_len],
                };
                let vit_cfg = CoordinatorConfig {
                    patch_shape,
                    token_patch: cfg.coord.token_patch,
                    hidden: cfg.coord.hidden,
                    depth: cfg.coord.depth,
                    heads: cfg.coord.heads,
                    mlp_ratio: cfg.coord.mlp_ratio,
                    theta_base: cfg.coord.theta_base,
                    fourier_dim: cfg.coord.fourier_dim,
                    cond_channels: cfg.task == Task::Bump2d,
                    cond_tokens: cfg.task == Task::Bump2d,
                };
                let mut model = Coordinator::init(vit_cfg.clone(), init_seed)?;
                let out =
                    train_coordinator(&base, &mut model, &task, &items, &train_cfg, &weighting)?;
                let params = out.params.clone();
                let ema = out.ema.clone();
                (out, "vit", serde_json::to_value(&vit_cfg)?, params, ema)
            }
            CoordArch::Rnn => {
                if cfg.task == Task::Bump2d {
                    bail!("the recurrent coordinator supports 1D tasks only");
                }
                let rnn_cfg = RecurrentConfig {
                    patch_len: cfg.grid.patch_len,
                    hidden_channels: cfg.coord.rnn_hidden_channels,
                    conv_hidden: cfg.coord.rnn_conv_hidden,
                    kernel: cfg.coord.rnn_kernel,
                };
                let mut model = RecurrentCoordinator::init(rnn_cfg.clone(), init_seed)?;
                let out =
                    train_coordinator(&base, &mut model, &task, &items, &train_cfg, &weighting)?;
                let params = out.params.clone();
                let ema = out.ema.clone();
                (out, "rnn", serde_json::to_value(&rnn_cfg)?, params, ema)
            }
        };

    save_checkpoint(
        &out_dir.join("coord.ckpt"),
        &coord_meta(cfg, arch_name, arch_cfg_json.clone(), false),
        &params,
    )?;
    save_checkpoint(
        &out_dir.join("coord_ema.ckpt"),
        &coord_meta(cfg, arch_name, arch_cfg_json, true),
        &ema,
    )?;
    write_loss_csv(&out_dir.join("coord_loss.csv"), &out.epoch_losses)?;
    write_config_snapshot(cfg, out_dir)?;
    eprintln!(
        "coordinator training done: first-epoch loss {:.6}, last-epoch loss {:.6}",
        out.epoch_losses.first().unwrap(),
        out.epoch_losses.last().unwrap()
    );
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SampleOpts {
    pub method: Method,
    pub l: usize,
    pub w: Option<f64>,
    pub n: Option<usize>,
    pub base_ckpt: PathBuf,
    pub coord_ckpt: Option<PathBuf>,
}

pub fn run_sample(cfg: &RunConfig, opts: &SampleOpts, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let base = load_base(&opts.base_ckpt, cfg)?;
    let n_samples = opts.n.unwrap_or(cfg.eval.n_samples);
    if n_samples == 0 || opts.l == 0 {
        bail!("need n >= 1 and L >= 1");
    }
    let l = opts.l;
    let sampler = cfg.sampler.to_core(cfg.seed)?;

    let coordinator = match (opts.method, &opts.coord_ckpt) {
        (Method::Dde, Some(path)) => Some(load_coordinator(path)?),
        (Method::Dde, None) => bail!("--method dde requires --coord-ckpt"),
        (_, _) => None,
    };

    // method/grid compatibility is checked before any sampling work
    let (layout, guidance_w): (Option<PatchLayout>, Option<f64>) = match cfg.task {
        Task::Bump2d => {
            let shape = vec![BUMP_IMAGE_SIDE, BUMP_IMAGE_SIDE];
            match opts.method {
                Method::Concat => bail!(
                    "concatenation is undefined for the multi-conditioning task \
                     (replicated patches overlap everywhere)"
                ),
                Method::Dde => (
                    Some(PatchLayout::Replicate { count: l, shape }),
                    Some(opts.w.unwrap_or(cfg.eval.w_dde)),
                ),
                Method::Multidiffusion => {
                    (Some(PatchLayout::Replicate { count: l, shape }), None)
                }
                Method::Rrr => (None, Some(opts.w.unwrap_or(cfg.eval.w_rrr))),
            }
        }
        Task::Signal1d | Task::GaussianOracle => {
            let n_total = cfg.line_total_len(l);
            match opts.method {
                Method::Rrr => bail!("the guidance-sum method needs a conditional task"),
                Method::Concat => {
                    if !n_total.is_multiple_of(cfg.grid.patch_len) {
                        bail!(
                            "concatenation needs the object length {n_total} to be a \
                             multiple of the patch length {}; pick L with \
                             (L-1)*stride divisible by patch_len",
                            cfg.grid.patch_len
                        );
                    }
                    let grid = PatchGrid1D::from_total(
                        n_total,
                        cfg.grid.patch_len,
                        cfg.grid.patch_len,
                    )?;
                    (Some(PatchLayout::Line(grid)), None)
                }
                Method::Dde | Method::Multidiffusion => {
                    let grid =
                        PatchGrid1D::new(cfg.grid.patch_len, cfg.grid.stride, l)?;
                    (Some(PatchLayout::Line(grid)), None)
                }
            }
        }
    };

    let object_shape: Vec<usize> = match cfg.task {
        Task::Bump2d => vec![BUMP_IMAGE_SIDE, BUMP_IMAGE_SIDE],
        _ => vec![cfg.line_total_len(l)],
    };

    let mut samples: Vec<Tensor> = Vec::with_capacity(n_samples);
    let mut conditionings: Vec<Vec<[f64; 2]>> = Vec::with_capacity(n_samples);
    let mut sample_seeds = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sample_seed = derive_seed(derive_seed(cfg.seed, STREAM_SAMPLE), i as u64);
        sample_seeds.push(sample_seed);
        let mut rng = rng_from_seed(sample_seed);

        let conds: Vec<[f64; 2]> = if cfg.task == Task::Bump2d {
            let mut cond_rng =
                rng_from_seed(derive_seed(derive_seed(cfg.seed, STREAM_CONDS), i as u64));
            sample_conditionings(l, cfg.eval.separation_rule(), &mut cond_rng)?
        } else {
            Vec::new()
        };
        let cond = if conds.is_empty() {
            None
        } else {
            Some(Cond::Positions(conds.clone()))
        };

        let sample = match (opts.method, &coordinator, &layout) {
            (Method::Dde, Some(coord), Some(layout)) => {
                let denoiser = CompositeDenoiser {
                    base: &base,
                    model: coord.as_model(),
                    layout: layout.clone(),
                    guidance: guidance_w,
                };
                ode_sample(
                    &denoiser,
                    cond.as_ref(),
                    &sampler,
                    &object_shape,
                    None,
                    &mut rng,
                )?
            }
            (Method::Multidiffusion, _, Some(layout)) => {
                let denoiser = quilt_core::baselines::MultiDiffusionDenoiser {
                    base: &base,
                    layout: layout.clone(),
                };
                ode_sample(
                    &denoiser,
                    cond.as_ref(),
                    &sampler,
                    &object_shape,
                    None,
                    &mut rng,
                )?
            }
            (Method::Rrr, _, _) => {
                let denoiser = quilt_core::baselines::RrrDenoiser {
                    base: &base,
                    w: guidance_w.unwrap_or(cfg.eval.w_rrr),
                };
                ode_sample(
                    &denoiser,
                    cond.as_ref(),
                    &sampler,
                    &object_shape,
                    None,
                    &mut rng,
                )?
            }
            (Method::Concat, _, Some(layout)) => {
                let conds_per_patch = vec![None; layout.num_patches()];
                quilt_core::baselines::concat_sample(
                    &base,
                    &conds_per_patch,
                    &sampler,
                    layout,
                    sample_seed,
                )?
            }
            _ => unreachable!("method/layout combinations validated above"),
        };
        samples.push(sample);
        conditionings.push(conds);
        if (i + 1) % 32 == 0 {
            eprintln!("sampled {}/{}", i + 1, n_samples);
        }
    }

    write_samples_csv(&out_dir.join("samples.csv"), &samples)?;
    let mut image_files = Vec::new();
    let mut image_ranges = Vec::new();
    if cfg.task == Task::Bump2d {
        for (i, s) in samples.iter().enumerate() {
            let name = format!("sample_{i:04}.pgm");
            let (lo, hi) = write_pgm(&out_dir.join(&name), s)?;
            image_files.push(name);
            image_ranges.push([lo, hi]);
        }
    }
    let manifest = Manifest {
        task: cfg.task.as_str().to_string(),
        method: opts.method.as_str().to_string(),
        l,
        seed: cfg.seed,
        n_samples,
        guidance_w,
        steps: cfg.sampler.steps,
        churn: cfg.sampler.churn,
        object_shape,
        sample_seeds,
        conditionings,
        samples_csv: "samples.csv".to_string(),
        image_files,
        image_ranges,
    };
    write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    write_config_snapshot(cfg, out_dir)?;
    eprintln!("wrote {} samples to {}", n_samples, out_dir.display());
    Ok(())
}

fn seam_boundaries(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<usize>> {
    let n_total = manifest.object_shape[0];
    let grid = match Method::from_name(&manifest.method)? {
        Method::Concat => {
            PatchGrid1D::from_total(n_total, cfg.grid.patch_len, cfg.grid.patch_len)?
        }
        _ => PatchGrid1D::new(cfg.grid.patch_len, cfg.grid.stride, manifest.l)?,
    };
    Ok(PatchLayout::Line(grid).line_boundaries())
}

pub fn run_eval(cfg: &RunConfig, sample_dirs: &[PathBuf], out_dir: &Path) -> Result<()> {
    if sample_dirs.is_empty() {
        bail!("eval needs at least one --samples directory");
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows: Vec<MetricRow> = Vec::new();
    for dir in sample_dirs {
        let manifest = read_manifest(&dir.join("manifest.json"))?;
        if manifest.task != cfg.task.as_str() {
            bail!(
                "sample dir {} is for task {}, config says {}",
                dir.display(),
                manifest.task,
                cfg.task.as_str()
            );
        }
        let samples = read_samples_csv(&dir.join(&manifest.samples_csv), &manifest.object_shape)?;
        if samples.len() != manifest.n_samples || manifest.conditionings.len() != samples.len() {
            bail!(
                "manifest/sample mismatch in {}: {} rows vs {} declared",
                dir.display(),
                samples.len(),
                manifest.n_samples
            );
        }
        let row = |metric: &str, value: f64| MetricRow {
            method: manifest.method.clone(),
            l: manifest.l,
            seed: manifest.seed,
            metric: metric.to_string(),
            value,
        };
        match cfg.task {
            Task::Bump2d => {
                let paired: Vec<(Tensor, Vec<[f64; 2]>)> = samples
                    .iter()
                    .cloned()
                    .zip(manifest.conditionings.iter().cloned())
                    .collect();
                let acc = accuracy_eval(&paired, &cfg.eval.oracle())?;
                rows.push(row("accuracy", acc));
            }
            Task::Signal1d => {
                let boundaries = seam_boundaries(cfg, &manifest)?;
                let mut ratios = Vec::with_capacity(samples.len());
                for s in &samples {
                    ratios.push(seam_interior_ratio(s, &boundaries)?);
                }
                let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
                rows.push(row("seam_ratio", mean_ratio));

                let n_total = manifest.object_shape[0];
                let reference = make_signal_objects(
                    n_total,
                    cfg.eval.reference_size,
                    derive_seed(cfg.seed, STREAM_REFERENCE),
                );
                let feat_dim = quilt_core::eval::FEATURE_DIM
                    .min(samples.len() / 2)
                    .min(reference.len() / 2);
                if feat_dim >= 2 {
                    let projector = FeatureProjector::with_dim(
                        n_total,
                        feat_dim,
                        derive_seed(cfg.seed, STREAM_PROJECTOR),
                    )?;
                    let fd = frechet_feature_distance(&samples, &reference, &projector)?;
                    rows.push(row("frechet", fd.distance));
                    if fd.regularized {
                        rows.push(row("frechet_regularized", 1.0));
                    }
                }
            }
            Task::GaussianOracle => {
                let n_total = manifest.object_shape[0];
                let data = gaussian_profile(n_total, cfg.grid.patch_len);
                let target = gaussian_marginal(
                    &data,
                    NoiseLevel::new(cfg.sampler.sigma_min)
                        .map_err(|e| anyhow::anyhow!(e.to_string()))?,
                );
                let n = samples.len() as f64;
                let dim = n_total;
                let mut mean = vec![0.0; dim];
                for s in &samples {
                    for (m, v) in mean.iter_mut().zip(s.data()) {
                        *m += v / n;
                    }
                }
                let mut var = vec![0.0; dim];
                for s in &samples {
                    for (k, v) in s.data().iter().enumerate() {
                        var[k] += (v - mean[k]) * (v - mean[k]) / n;
                    }
                }
                let mean_abs_err = mean
                    .iter()
                    .zip(target.mean())
                    .map(|(m, t)| (m - t).abs())
                    .sum::<f64>()
                    / dim as f64;
                let var_rel_err = var
                    .iter()
                    .zip(target.variances())
                    .map(|(v, t)| (v - t).abs() / t)
                    .sum::<f64>()
                    / dim as f64;
                rows.push(row("mean_abs_err", mean_abs_err));
                rows.push(row("var_rel_err", var_rel_err));
            }
        }
    }

    let mut text = String::from(MetricRow::csv_header());
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    atomic_write(&out_dir.join("metrics.csv"), text.as_bytes())?;
    write_config_snapshot(cfg, out_dir)?;
    for r in &rows {
        eprintln!("{}", r.to_csv());
    }
    Ok(())
}

fn parse_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            bail!("{}:{}: malformed metric row", path.display(), i + 1);
        }
        rows.push(MetricRow {
            method: parts[0].to_string(),
            l: parts[1].parse()?,
            seed: parts[2].parse()?,
            metric: parts[3].to_string(),
            value: parts[4].parse()?,
        });
    }
    Ok(rows)
}

/// Join metric CSVs from several eval runs into one table sorted by
/// (L, method, metric, seed).
pub fn run_compare(inputs: &[PathBuf], out_dir: &Path) -> Result<()> {
    if inputs.is_empty() {
        bail!("compare needs at least one metrics input");
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for input in inputs {
        let path = if input.is_dir() {
            input.join("metrics.csv")
        } else {
            input.clone()
        };
        rows.extend(parse_metric_rows(&path)?);
    }
    rows.sort_by(|a, b| {
        (a.l, &a.method, &a.metric, a.seed).cmp(&(b.l, &b.method, &b.metric, b.seed))
    });
    let mut text = String::from(MetricRow::csv_header());
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    atomic_write(&out_dir.join("compare.csv"), text.as_bytes())?;
    println!("{:<16} {:>3} {:>6} {:<20} {:>12}", "method", "L", "seed", "metric", "value");
    for r in &rows {
        println!(
            "{:<16} {:>3} {:>6} {:<20} {:>12.6}",
            r.method, r.l, r.seed, r.metric, r.value
        );
    }
    Ok(())
}
