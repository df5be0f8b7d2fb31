//! Command-line workflow. Every command resolves a [`RunConfig`] from an
//! optional JSON file plus flags, echoes it to `run_config.json` in the
//! output directory, then writes its artifacts next to it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::encoding::HashGridConfig;
use crate::field::{save_checkpoint, CheckpointMeta, FieldConfig, FieldModel};
use crate::geometry::{Aabb, Jitter, RaySampling, ScannerGeometry};
use crate::io::{self, Dtype};
use crate::metrics::{pca_feature_map, stability_curve, MetricReport, SliceSpec};
use crate::phantom::{voxelize, PhantomSpec, VoxelVolume};
use crate::projector::{extract_volume, project_analytic, project_stack, ProjectionStack};
use crate::rng::SeedStream;
use crate::training::{
    pretrain_mci, train_reconstruction_with, GroundTruth, PretrainConfig, TrainConfig, TrainLog,
    TrainOptions, TrainOutcome,
};
use crate::{Error, Result, Vec3};

pub const CONFIG_ECHO: &str = "run_config.json";

/// Flat run configuration. Unknown keys are rejected; flags override file
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Builtin phantom name or path to a phantom JSON file.
    pub phantom: String,
    /// Voxels per axis for phantom, extraction and analysis grids.
    pub volume_dims: usize,
    /// Edge length of the centred reconstruction cube (mm).
    pub volume_extent: f64,

    pub dso: f64,
    pub dsd: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch: f64,
    pub num_views: usize,
    pub angle_span: f64,
    /// Samples per ray when projecting a voxel volume.
    pub projection_points: usize,

    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub hidden: Vec<usize>,
    pub use_ln: bool,

    pub epochs: u64,
    pub rays_per_view: usize,
    pub points_per_ray: usize,
    pub views_per_batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub use_mci: bool,
    pub mci_checkpoint: Option<PathBuf>,
    pub freeze_mci: bool,
    pub use_mask: bool,
    pub mask_threshold: f64,
    pub log_every: u64,
    pub probe_every: u64,
    pub eval_every: u64,
    pub jitter: Jitter,
    pub deterministic: bool,

    pub pretrain_epochs: u64,
    pub pretrain_points: usize,
    pub pretrain_lr: f64,
    pub pretrain_freeze_encoder: bool,

    /// Seeds per ablation variant, counting up from `seed`.
    pub ablate_seeds: u64,
    /// Phantom used to pre-train the ablation's MCI checkpoint when none is given.
    pub mci_phantom: String,
    /// Epochs-to-threshold target sits this far below the mean final
    /// baseline PSNR.
    pub threshold_margin_db: f64,

    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = ScannerGeometry::default();
        let f = FieldConfig::default();
        let t = TrainConfig::default();
        let p = PretrainConfig::default();
        Self {
            phantom: "sphere-blob".into(),
            volume_dims: 64,
            volume_extent: 100.0,
            dso: g.dso,
            dsd: g.dsd,
            detector_rows: g.detector_rows,
            detector_cols: g.detector_cols,
            pixel_pitch: g.pixel_pitch,
            num_views: g.num_views,
            angle_span: g.angle_span,
            projection_points: 256,
            levels: f.grid.levels,
            features_per_level: f.grid.features_per_level,
            log2_table_size: f.grid.table_size.trailing_zeros(),
            base_resolution: f.grid.base_resolution,
            growth_factor: f.grid.growth_factor,
            hidden: f.hidden,
            use_ln: f.use_ln,
            epochs: t.epochs,
            rays_per_view: t.rays_per_view,
            points_per_ray: t.points_per_ray,
            views_per_batch: t.views_per_batch,
            lr: t.lr,
            seed: t.seed,
            use_mci: t.use_mci,
            mci_checkpoint: t.mci_checkpoint,
            freeze_mci: t.freeze_mci,
            use_mask: t.use_mask,
            mask_threshold: t.mask_threshold,
            log_every: t.log_every,
            probe_every: t.probe_every,
            eval_every: t.eval_every,
            jitter: t.jitter,
            deterministic: t.deterministic,
            pretrain_epochs: p.epochs,
            pretrain_points: p.points_per_batch,
            pretrain_lr: p.lr,
            pretrain_freeze_encoder: p.freeze_encoder,
            ablate_seeds: 3,
            mci_phantom: "two-blobs-1".into(),
            threshold_margin_db: 1.0,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "config line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn bounds(&self) -> Result<Aabb> {
        Aabb::centered_cube(self.volume_extent)
    }

    pub fn geometry(&self) -> Result<ScannerGeometry> {
        let g = ScannerGeometry {
            dso: self.dso,
            dsd: self.dsd,
            detector_rows: self.detector_rows,
            detector_cols: self.detector_cols,
            pixel_pitch: self.pixel_pitch,
            num_views: self.num_views,
            angle_span: self.angle_span,
            volume: self.bounds()?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn field(&self, bounds: Aabb) -> Result<FieldConfig> {
        if self.log2_table_size >= usize::BITS {
            return Err(Error::Config(format!(
                "log2_table_size {} is too large",
                self.log2_table_size
            )));
        }
        Ok(FieldConfig {
            grid: HashGridConfig {
                levels: self.levels,
                features_per_level: self.features_per_level,
                table_size: 1 << self.log2_table_size,
                base_resolution: self.base_resolution,
                growth_factor: self.growth_factor,
                bounds,
            },
            use_ln: self.use_ln,
            hidden: self.hidden.clone(),
            ..FieldConfig::default()
        })
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            rays_per_view: self.rays_per_view,
            points_per_ray: self.points_per_ray,
            views_per_batch: self.views_per_batch,
            lr: self.lr,
            seed: self.seed,
            use_ln: self.use_ln,
            use_mci: self.use_mci,
            mci_checkpoint: self.mci_checkpoint.clone(),
            use_mask: self.use_mask,
            mask_threshold: self.mask_threshold,
            log_every: self.log_every,
            probe_every: self.probe_every,
            eval_every: self.eval_every,
            freeze_mci: self.freeze_mci,
            jitter: self.jitter,
            deterministic: self.deterministic,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            points_per_batch: self.pretrain_points,
            lr: self.pretrain_lr,
            seed: self.seed,
            log_every: self.log_every,
            freeze_encoder: self.pretrain_freeze_encoder,
            deterministic: self.deterministic,
        }
    }

    /// Cubic voxel grid covering `bounds` at `volume_dims` per axis.
    pub fn grid(&self, bounds: &Aabb) -> Result<([usize; 3], Vec3, Vec3)> {
        if self.volume_dims == 0 {
            return Err(Error::Config("volume_dims must be positive".into()));
        }
        let n = self.volume_dims;
        Ok(([n; 3], bounds.extent() / n as f64, bounds.min))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.field(self.bounds()?)?.grid.validate()?;
        self.train().validate()?;
        self.pretrain().validate()?;
        self.grid(&self.bounds()?)?;
        if self.projection_points == 0 {
            return Err(Error::Config("projection_points must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "neural-cbct",
    version,
    about = "Neural-field cone-beam CT reconstruction"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "NEURAL_CBCT_THREADS")]
    pub threads: Option<usize>,
    /// Omit wall-clock fields so outputs are bitwise reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub epochs: Option<u64>,
    /// MCI checkpoint: load its LN+MLP before reconstruction.
    #[arg(long, global = true)]
    pub mci: Option<PathBuf>,
    /// Keep the MCI-loaded LN+MLP fixed during reconstruction.
    #[arg(long, global = true)]
    pub freeze_mci: bool,
    /// Ground-truth volume sidecar for metrics and pre-training.
    #[arg(long, global = true)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Voxelize a phantom.
    Phantom {
        /// Builtin name or JSON spec path; defaults to the config's `phantom`.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Simulate projections of a volume, or of the analytic phantom.
    Project {
        /// Volume sidecar; without it the config phantom is projected exactly.
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Also write one PNG per view.
        #[arg(long)]
        png: bool,
    },
    /// Pre-train a full field with a voxel loss for MCI.
    Pretrain,
    /// Train a field on a projection stack and extract the volume.
    Reconstruct {
        #[arg(long)]
        stack: PathBuf,
    },
    /// Baseline / +LN / +LN+MCI sweep over seeds.
    Ablate {
        #[arg(long)]
        stack: PathBuf,
    },
    /// PCA feature maps and stability curve of a checkpoint or run directory.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// PSNR / SSIM of a reconstruction against `--gt`.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        per_slice: bool,
    },
}

/// File config merged with flag overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(e) = common.epochs {
        cfg.epochs = e;
        cfg.pretrain_epochs = e;
    }
    if let Some(m) = &common.mci {
        cfg.use_mci = true;
        cfg.mci_checkpoint = Some(m.clone());
    }
    if common.freeze_mci {
        cfg.freeze_mci = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cli.common.out;
    let gt = cli.common.gt.as_deref();
    match &cli.command {
        Command::Phantom { spec } => {
            cmd_phantom(cfg, spec.as_deref(), out)?;
        }
        Command::Project { volume, png } => {
            cmd_project(cfg, volume.as_deref(), *png, out)?;
        }
        Command::Pretrain => {
            cmd_pretrain(cfg, gt, out)?;
        }
        Command::Reconstruct { stack } => {
            cmd_reconstruct(cfg, stack, gt, out)?;
        }
        Command::Ablate { stack } => {
            let gt = gt.ok_or_else(|| Error::Config("ablate requires --gt".into()))?;
            cmd_ablate(cfg, stack, gt, out)?;
        }
        Command::Analyze { checkpoint, run } => {
            cmd_analyze(cfg, checkpoint.as_deref(), run.as_deref(), out)?;
        }
        Command::Eval { recon, per_slice } => {
            let gt = gt.ok_or_else(|| Error::Config("eval requires --gt".into()))?;
            let report = cmd_eval(cfg, recon, gt, *per_slice, out)?;
            println!("psnr {:.4} dB  ssim {:.6}", report.psnr, report.ssim);
        }
    }
    Ok(())
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::write_json(&out.join(CONFIG_ECHO), cfg)
}

pub fn load_phantom(name_or_path: &str) -> Result<PhantomSpec> {
    let path = Path::new(name_or_path);
    if path.extension().is_some_and(|e| e == "json") || path.is_file() {
        let text = io::read_text(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        PhantomSpec::from_json(&text, &stem)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        PhantomSpec::builtin(name_or_path)
    }
}

pub fn voxelize_config(cfg: &RunConfig, spec: &PhantomSpec) -> Result<VoxelVolume> {
    let (dims, spacing, origin) = cfg.grid(&cfg.bounds()?)?;
    voxelize(spec, dims, spacing, origin)
}

/// Writes `phantom.json` + `phantom.raw` and a centre-slice PNG.
pub fn cmd_phantom(cfg: &RunConfig, spec: Option<&str>, out: &Path) -> Result<PathBuf> {
    prepare_out(cfg, out)?;
    let spec = load_phantom(spec.unwrap_or(&cfg.phantom))?;
    let vol = voxelize_config(cfg, &spec)?;
    let path = out.join("phantom.json");
    io::write_volume(&vol, &path, Dtype::F64)?;
    io::write_json(&out.join("phantom_spec.json"), &spec)?;
    io::slice_png(&vol, vol.dims()[2] / 2, &out.join("phantom_slice.png"))?;
    Ok(path)
}

/// Writes `stack.json` + `stack.raw`, optionally `views/view_NNN.png`.
pub fn cmd_project(
    cfg: &RunConfig,
    volume: Option<&Path>,
    png: bool,
    out: &Path,
) -> Result<PathBuf> {
    prepare_out(cfg, out)?;
    let mut geometry = cfg.geometry()?;
    let stack = match volume {
        Some(p) => {
            let vol = io::read_volume(p)?;
            geometry.volume = vol.bounds();
            geometry.validate()?;
            project_stack(
                &vol,
                &geometry,
                &RaySampling::midpoint(cfg.projection_points),
            )?
        }
        None => project_analytic(&load_phantom(&cfg.phantom)?, &geometry)?,
    };
    if let Some(w) = geometry.coverage_warning() {
        eprintln!("warning: {w}");
    }
    let path = out.join("stack.json");
    io::write_stack(&stack, &path, Dtype::F64)?;
    if png {
        for im in &stack.images {
            io::view_png(im, &out.join(format!("views/view_{:03}.png", im.view)))?;
        }
    }
    Ok(path)
}

/// Pre-trains on `--gt` (or the config phantom) and writes `mci.ckpt` plus
/// `pretrain_log.csv`.
pub fn cmd_pretrain(cfg: &RunConfig, gt: Option<&Path>, out: &Path) -> Result<PathBuf> {
    prepare_out(cfg, out)?;
    let bounds = cfg.bounds()?;
    let mut model = FieldModel::new(&cfg.field(bounds)?, &SeedStream::new(cfg.seed))?;
    let (ck, log) = match gt {
        Some(p) => {
            let vol = io::read_volume(p)?;
            pretrain_mci(GroundTruth::Volume(&vol), &mut model, &cfg.pretrain())?
        }
        None => {
            let spec = load_phantom(&cfg.phantom)?;
            pretrain_mci(GroundTruth::Spec(&spec), &mut model, &cfg.pretrain())?
        }
    };
    let path = out.join("mci.ckpt");
    ck.write(&path)?;
    io::write_bytes(&out.join("pretrain_log.csv"), log.to_csv().as_bytes())?;
    Ok(path)
}

/// Result of one reconstruction run.
#[derive(Debug, Clone)]
pub struct ReconRun {
    pub volume: VoxelVolume,
    pub log: TrainLog,
    pub metrics: Option<MetricReport>,
}

fn train_one(
    cfg: &RunConfig,
    stack: &ProjectionStack,
    gt: Option<&VoxelVolume>,
    abort_checkpoint: Option<PathBuf>,
) -> (
    Result<(FieldModel, VoxelVolume, Option<MetricReport>)>,
    TrainOutcome,
) {
    let mut outcome = TrainOutcome::default();
    let res = (|| {
        let bounds = stack.geometry.volume;
        let mut model = FieldModel::new(&cfg.field(bounds)?, &SeedStream::new(cfg.seed))?;
        let opts = TrainOptions {
            validation: gt,
            abort_checkpoint,
        };
        train_reconstruction_with(&mut model, stack, &cfg.train(), &opts, &mut outcome)?;
        let (dims, spacing, origin) = match gt {
            Some(g) => (g.dims(), g.spacing(), g.origin()),
            None => cfg.grid(&bounds)?,
        };
        let vol = extract_volume(&model, dims, spacing, origin)?;
        let metrics = gt
            .map(|g| MetricReport::compute(&vol, g, false))
            .transpose()?;
        Ok((model, vol, metrics))
    })();
    (res, outcome)
}

/// Writes `recon.json/.raw`, `train_log.csv`, `probe_curve.csv` (when probes
/// were logged), `model.ckpt` and, with a ground truth, `metrics.json`. A
/// numeric abort leaves the partial log and `last_good.ckpt`.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    stack: &Path,
    gt: Option<&Path>,
    out: &Path,
) -> Result<ReconRun> {
    prepare_out(cfg, out)?;
    let stack = io::read_stack(stack)?;
    let gt = gt.map(io::read_volume).transpose()?;
    let (res, outcome) = train_one(cfg, &stack, gt.as_ref(), Some(out.join("last_good.ckpt")));
    io::write_bytes(&out.join("train_log.csv"), outcome.log.to_csv().as_bytes())?;
    let (model, volume, metrics) = res?;
    if let Ok(curve) = stability_curve(&outcome.log) {
        io::write_bytes(
            &out.join("probe_curve.csv"),
            io::curve_csv(&curve).as_bytes(),
        )?;
    }
    io::write_volume(&volume, &out.join("recon.json"), Dtype::F64)?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        epoch: cfg.epochs,
        provenance: model.provenance().to_string(),
    };
    save_checkpoint(&model, &meta, &out.join("model.ckpt"))?;
    if let Some(m) = &metrics {
        io::write_json(&out.join("metrics.json"), m)?;
    }
    Ok(ReconRun {
        volume,
        log: outcome.log,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub use_ln: bool,
    pub use_mci: bool,
    pub freeze_mci: bool,
    pub final_psnr: f64,
    pub final_ssim: f64,
    /// None when the run never reached the threshold.
    pub epochs_to_threshold: Option<u64>,
    pub threshold_db: f64,
}

pub const ABLATION_HEADER: &str =
    "variant,seed,use_ln,use_mci,freeze_mci,final_psnr,final_ssim,epochs_to_threshold,threshold_db";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let ett = r
            .epochs_to_threshold
            .map(|e| e.to_string())
            .unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            r.use_ln,
            r.use_mci,
            r.freeze_mci,
            r.final_psnr,
            r.final_ssim,
            ett,
            r.threshold_db
        ));
    }
    s
}

pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    ("baseline", false, false),
    ("ln", true, false),
    ("ln_mci", true, true),
];

/// Runs every variant for `ablate_seeds` seeds. Without an MCI checkpoint in
/// the config, one is pre-trained on `mci_phantom` into `out/mci/`. The
/// threshold is the mean final baseline PSNR minus `threshold_margin_db`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    stack: &Path,
    gt: &Path,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    prepare_out(cfg, out)?;
    let stack = io::read_stack(stack)?;
    let gt = io::read_volume(gt)?;
    let mci = match &cfg.mci_checkpoint {
        Some(p) => p.clone(),
        None => {
            let pre = RunConfig {
                phantom: cfg.mci_phantom.clone(),
                use_ln: true,
                ..cfg.clone()
            };
            cmd_pretrain(&pre, None, &out.join("mci"))?
        }
    };
    let mut runs = Vec::new();
    for i in 0..cfg.ablate_seeds {
        for (name, ln, mci_on) in ABLATION_VARIANTS {
            let run_cfg = RunConfig {
                seed: cfg.seed + i,
                use_ln: ln,
                use_mci: mci_on,
                mci_checkpoint: mci_on.then(|| mci.clone()),
                freeze_mci: mci_on && cfg.freeze_mci,
                eval_every: if cfg.eval_every == 0 {
                    cfg.log_every
                } else {
                    cfg.eval_every
                },
                ..cfg.clone()
            };
            let (res, outcome) = train_one(&run_cfg, &stack, Some(&gt), None);
            let (_, _, metrics) = res?;
            let m = metrics.expect("validation metrics");
            runs.push((name, run_cfg, m, outcome.log));
        }
    }
    let base: Vec<f64> = runs
        .iter()
        .filter(|r| r.0 == "baseline")
        .map(|r| r.2.psnr)
        .collect();
    let threshold = base.iter().sum::<f64>() / base.len().max(1) as f64 - cfg.threshold_margin_db;
    let rows: Vec<AblationRow> = runs
        .into_iter()
        .map(|(name, c, m, log)| AblationRow {
            variant: name.into(),
            seed: c.seed,
            use_ln: c.use_ln,
            use_mci: c.use_mci,
            freeze_mci: c.freeze_mci,
            final_psnr: m.psnr,
            final_ssim: m.ssim,
            epochs_to_threshold: log.epochs_to_psnr(threshold),
            threshold_db: threshold,
        })
        .collect();
    io::write_bytes(&out.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Explained variances of the three centre-slice PCA maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub axis: usize,
    pub position: f64,
    pub explained_variance: [f64; 3],
}

/// Writes `pca_{x,y,z}.png` + `pca.json` for the model, and
/// `stability_curve.csv/.png` when a run directory with probes is given.
pub fn cmd_analyze(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    run: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ck = match (checkpoint, run) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(r)) => r.join("model.ckpt"),
        (None, None) => return Err(Error::Config("analyze needs --checkpoint or --run".into())),
    };
    prepare_out(cfg, out)?;
    let (model, _) = crate::field::load_full(&ck)?;
    let bounds = model.grid().config().bounds;
    let center = bounds.center();
    let mut summary = Vec::new();
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let slice = SliceSpec {
            axis,
            position: center[axis],
            rows: cfg.volume_dims,
            cols: cfg.volume_dims,
        };
        let map = pca_feature_map(&model, &slice)?;
        io::pca_png(&map, &out.join(format!("pca_{name}.png")))?;
        summary.push(PcaSummary {
            axis,
            position: slice.position,
            explained_variance: map.explained_variance,
        });
    }
    io::write_json(&out.join("pca.json"), &summary)?;
    if let Some(r) = run {
        let log_path = r.join("train_log.csv");
        let log = TrainLog::from_csv(&io::read_text(&log_path)?)?;
        let curve = stability_curve(&log).map_err(|_| {
            Error::Domain(format!(
                "{} has no stability probe entries; train with probe_every <= epochs",
                log_path.display()
            ))
        })?;
        io::write_bytes(
            &out.join("stability_curve.csv"),
            io::curve_csv(&curve).as_bytes(),
        )?;
        io::curve_png(&curve, &out.join("stability_curve.png"))?;
    }
    Ok(())
}

/// Writes `metrics.json` for `recon` against `gt`.
pub fn cmd_eval(
    cfg: &RunConfig,
    recon: &Path,
    gt: &Path,
    per_slice: bool,
    out: &Path,
) -> Result<MetricReport> {
    prepare_out(cfg, out)?;
    let r = io::read_volume(recon)?;
    let g = io::read_volume(gt)?;
    let report = MetricReport::compute(&r, &g, per_slice)?;
    io::write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
