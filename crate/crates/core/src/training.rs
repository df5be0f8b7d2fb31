//! Voxel-loss pre-training of a full field and pixel-loss reconstruction
//! from projections.
//!
//! One epoch is one optimizer step on one ray batch.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{detect_noisy_channels, random_probe_lines};
use crate::field::{
    Checkpoint, CheckpointMeta, FieldGrads, FieldModel, ParamGroup, StabilityRecord,
};
use crate::geometry::{Jitter, Ray, RaySampling};
use crate::metrics::psnr;
use crate::nn::{check_finite, AdamConfig, AdamState};
use crate::phantom::{trilinear_unchecked, PhantomSpec, VoxelVolume};
use crate::projector::{
    extract_volume, render_rays_field, render_rays_field_backward, ProjectionStack,
};
use crate::rng::{stream, SeedStream};
use crate::{Error, Result, Vec3};

/// Number of points whose features are recorded for the stability probe.
pub const PROBE_POINTS: usize = 1024;
pub const MASK_PROBE_LINES: usize = 16;
pub const MASK_PROBE_SAMPLES: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub rays_per_view: usize,
    pub points_per_ray: usize,
    pub views_per_batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub use_ln: bool,
    pub use_mci: bool,
    pub mci_checkpoint: Option<PathBuf>,
    pub use_mask: bool,
    pub mask_threshold: f64,
    pub log_every: u64,
    pub probe_every: u64,
    /// Validation PSNR cadence when a ground truth is supplied; 0 = final only.
    pub eval_every: u64,
    pub freeze_mci: bool,
    pub jitter: Jitter,
    /// Leaves wall-clock fields empty so logs are reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            rays_per_view: 256,
            points_per_ray: 128,
            views_per_batch: 1,
            lr: 1e-3,
            seed: 0,
            use_ln: true,
            use_mci: false,
            mci_checkpoint: None,
            use_mask: false,
            mask_threshold: 0.5,
            log_every: 10,
            probe_every: 100,
            eval_every: 0,
            freeze_mci: false,
            jitter: Jitter::Stratified,
            deterministic: false,
        }
    }
}

fn positive(name: &str, v: u64) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("lr must be positive, got {lr}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("rays_per_view", self.rays_per_view as u64)?;
        positive("points_per_ray", self.points_per_ray as u64)?;
        positive("views_per_batch", self.views_per_batch as u64)?;
        positive("log_every", self.log_every)?;
        positive("probe_every", self.probe_every)?;
        check_lr(self.lr)?;
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config(format!(
                "mask_threshold must lie in (0, 1), got {}",
                self.mask_threshold
            )));
        }
        if self.use_mci && self.mci_checkpoint.is_none() {
            return Err(Error::Config("use_mci requires mci_checkpoint".into()));
        }
        Ok(())
    }

    pub fn sampling(&self) -> RaySampling {
        RaySampling {
            num_points: self.points_per_ray,
            jitter: self.jitter,
        }
    }

    /// Epoch after which the channel mask is computed.
    pub fn mask_epoch(&self) -> u64 {
        (self.epochs / 10).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub points_per_batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Keeps the encoder at its initialization.
    pub freeze_encoder: bool,
    pub deterministic: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            points_per_batch: 4096,
            lr: 1e-3,
            seed: 0,
            log_every: 10,
            freeze_encoder: false,
            deterministic: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("points_per_batch", self.points_per_batch as u64)?;
        positive("log_every", self.log_every)?;
        check_lr(self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u64,
    pub loss: f64,
    pub wall_ms: Option<f64>,
    pub probe_l1: Option<f64>,
    pub psnr_val: Option<f64>,
}

/// Per-epoch training records with strictly increasing epochs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "epoch,loss,wall_ms,probe_l1,psnr_val";

impl TrainLog {
    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::Consistency(format!(
                    "log epoch {} does not follow {}",
                    record.epoch, last.epoch
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// `(epoch, psnr)` for every evaluated epoch.
    pub fn psnr_series(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.psnr_val.map(|p| (r.epoch, p)))
            .collect()
    }

    /// First evaluated epoch whose PSNR reaches `target`.
    pub fn epochs_to_psnr(&self, target: f64) -> Option<u64> {
        self.psnr_series()
            .into_iter()
            .find(|&(_, p)| p >= target)
            .map(|(e, _)| e)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.loss,
                opt(r.wall_ms),
                opt(r.probe_l1),
                opt(r.psnr_val)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOG_HEADER) {
            return Err(Error::Config(format!(
                "training log must start with the header {LOG_HEADER}"
            )));
        }
        let mut log = Self::default();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("log line {}: bad {what}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("field count"));
            }
            let opt = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(what))
                }
            };
            log.push(LogRecord {
                epoch: f[0].parse().map_err(|_| bad("epoch"))?,
                loss: f[1].parse().map_err(|_| bad("loss"))?,
                wall_ms: opt(f[2], "wall_ms")?,
                probe_l1: opt(f[3], "probe_l1")?,
                psnr_val: opt(f[4], "psnr_val")?,
            })?;
        }
        Ok(log)
    }
}

fn l1_loss(predicted: &[f64], target: &[f64], what: &str) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::shape(target.len(), predicted.len(), what));
    }
    if predicted.is_empty() {
        return Err(Error::Domain(format!("{what} batch is empty")));
    }
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / predicted.len() as f64)
}

/// Mean absolute error between rendered and measured projection values.
pub fn pixel_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    l1_loss(predicted, target, "pixel loss")
}

/// Mean absolute error between predicted and true attenuation.
pub fn voxel_loss(predicted_mu: &[f64], mu_gt: &[f64]) -> Result<f64> {
    l1_loss(predicted_mu, mu_gt, "voxel loss")
}

/// Gradient of the mean absolute error with respect to `predicted`.
fn l1_grad(predicted: &[f64], target: &[f64]) -> Vec<f64> {
    let n = predicted.len() as f64;
    predicted
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Hit rays of every view with their measured values, ready for batching.
#[derive(Debug, Clone)]
pub struct RaySampler {
    views: Vec<Vec<(Ray, f64)>>,
    rays_per_view: usize,
    views_per_batch: usize,
}

impl RaySampler {
    pub fn new(stack: &ProjectionStack, config: &TrainConfig) -> Result<Self> {
        if stack.num_views() == 0 {
            return Err(Error::Domain("projection stack is empty".into()));
        }
        let g = &stack.geometry;
        let pixels = g.pixels_per_view();
        if config.rays_per_view > pixels {
            return Err(Error::Config(format!(
                "rays_per_view {} exceeds the {pixels} pixels of a view",
                config.rays_per_view
            )));
        }
        if config.views_per_batch == 0 {
            return Err(Error::Config("views_per_batch must be positive".into()));
        }
        let views = (0..stack.num_views())
            .map(|v| {
                let mut hits = Vec::new();
                for r in 0..g.detector_rows {
                    for c in 0..g.detector_cols {
                        let ray = g.generate_ray(v, r, c)?;
                        if ray.hits() {
                            hits.push((ray, stack.value(v, r, c)));
                        }
                    }
                }
                Ok(hits)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            views,
            rays_per_view: config.rays_per_view,
            views_per_batch: config.views_per_batch,
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Views used at step `step` (0-based), cycling through the stack.
    pub fn batch_views(&self, step: u64) -> Vec<usize> {
        let n = self.views.len() as u64;
        (0..self.views_per_batch as u64)
            .map(|k| ((step * self.views_per_batch as u64 + k) % n) as usize)
            .collect()
    }

    /// Pixels of each batch view drawn uniformly without replacement among
    /// the rays that hit the volume.
    pub fn batch<R: Rng + ?Sized>(&self, step: u64, rng: &mut R) -> Vec<(Ray, f64)> {
        let mut out = Vec::new();
        for v in self.batch_views(step) {
            let hits = &self.views[v];
            let k = self.rays_per_view.min(hits.len());
            out.extend(index::sample(rng, hits.len(), k).iter().map(|i| hits[i]));
        }
        out
    }
}

/// One batch of `(ray, measured value)` pairs for step `step`.
pub fn sample_ray_batch<R: Rng + ?Sized>(
    stack: &ProjectionStack,
    config: &TrainConfig,
    step: u64,
    rng: &mut R,
) -> Result<Vec<(Ray, f64)>> {
    Ok(RaySampler::new(stack, config)?.batch(step, rng))
}

/// Per-group Adam states; frozen groups keep `None`.
struct Optimizer {
    states: Vec<Option<AdamState>>,
}

impl Optimizer {
    fn new(model: &mut FieldModel, lr: f64, frozen: impl Fn(ParamGroup) -> bool) -> Self {
        let states = model
            .parameters_mut()
            .iter()
            .map(|(g, p)| (!frozen(*g)).then(|| AdamState::new(p.len(), AdamConfig::with_lr(lr))))
            .collect();
        Self { states }
    }

    fn step(&mut self, model: &mut FieldModel, grads: &FieldGrads) -> Result<()> {
        let groups = grads.groups();
        // Check everything first so a bad gradient leaves all groups untouched.
        for (g, values) in &groups {
            check_finite(values, &format!("{} gradient", g.name()))?;
        }
        for ((state, (_, params)), (_, g)) in self
            .states
            .iter_mut()
            .zip(model.parameters_mut())
            .zip(groups)
        {
            if let Some(s) = state {
                s.step(params, g)?;
            }
        }
        Ok(())
    }
}

/// Runtime inputs that are not part of the serialized configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Ground truth for validation PSNR.
    pub validation: Option<&'a VoxelVolume>,
    /// Where the last good model is written on a numeric abort.
    pub abort_checkpoint: Option<PathBuf>,
}

/// Log plus every stability record captured during a run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub records: Vec<StabilityRecord>,
}

/// Evenly strided subset of at most [`PROBE_POINTS`] batch points.
fn probe_subset(points: &[Vec3]) -> Vec<Vec3> {
    let stride = points.len().div_ceil(PROBE_POINTS).max(1);
    points.iter().step_by(stride).copied().collect()
}

fn validation_psnr(model: &FieldModel, gt: &VoxelVolume) -> Result<f64> {
    let v = extract_volume(model, gt.dims(), gt.spacing(), gt.origin())?;
    psnr(&v, gt)
}

fn numeric_abort(
    err: Error,
    epoch: u64,
    model: &mut FieldModel,
    last_good: FieldModel,
    seed: u64,
    path: Option<&PathBuf>,
) -> Error {
    *model = last_good;
    let mut msg = format!("training aborted at epoch {epoch}: {err}");
    if let Some(p) = path {
        let meta = CheckpointMeta {
            seed,
            epoch: epoch.saturating_sub(1),
            provenance: model.provenance().to_string(),
        };
        match crate::field::save_checkpoint(model, &meta, p) {
            Ok(()) => {
                let _ = write!(msg, "; last good model saved to {}", p.display());
            }
            Err(e) => {
                let _ = write!(msg, "; saving the last good model failed: {e}");
            }
        }
    }
    Error::Numeric(msg)
}

/// Pixel-loss reconstruction. `outcome` holds the partial log when an error
/// is returned.
pub fn train_reconstruction_with(
    model: &mut FieldModel,
    stack: &ProjectionStack,
    config: &TrainConfig,
    options: &TrainOptions,
    outcome: &mut TrainOutcome,
) -> Result<()> {
    config.validate()?;
    if config.use_ln != model.ln().is_some() {
        return Err(Error::Config(format!(
            "use_ln = {} but the model {} a layer norm",
            config.use_ln,
            if model.ln().is_some() { "has" } else { "lacks" }
        )));
    }
    if config.use_mci {
        let path = config.mci_checkpoint.as_ref().expect("validated");
        model.load_mci(path)?;
    }
    let sampler = RaySampler::new(stack, config)?;
    if config.epochs == 0 {
        return Ok(());
    }

    let seeds = SeedStream::new(config.seed);
    let mut batch_rng = seeds.rng(stream::RAY_BATCH);
    let mut jitter_rng = seeds.rng(stream::JITTER);
    let sampling = config.sampling();
    let freeze_head = config.use_mci && config.freeze_mci;
    let mut opt = Optimizer::new(model, config.lr, |g| freeze_head && g.is_head());
    let mut grads = FieldGrads::zeros(model);
    let start = Instant::now();
    let mut last_good = model.clone();

    for step in 0..config.epochs {
        let epoch = step + 1;
        if config.use_mask && step == config.mask_epoch() && step < config.epochs {
            let lines = random_probe_lines(
                &model.grid().config().bounds,
                MASK_PROBE_LINES,
                MASK_PROBE_SAMPLES,
                &mut seeds.rng(stream::MASK_PROBE),
            );
            let mask = detect_noisy_channels(model.grid(), &lines, config.mask_threshold)?;
            model.set_mask(mask)?;
        }

        let batch = sampler.batch(step, &mut batch_rng);
        let rays: Vec<Ray> = batch.iter().map(|b| b.0).collect();
        let targets: Vec<f64> = batch.iter().map(|b| b.1).collect();
        let (pred, trace) = render_rays_field(model, &rays, &sampling, &mut jitter_rng)?;
        if step == 0 {
            let probes = probe_subset(trace.points());
            outcome.records.push(model.record_stability(0, &probes)?);
        }
        let loss = pixel_loss(&pred, &targets)?;
        if !loss.is_finite() {
            let err = Error::Numeric(format!("loss is {loss}"));
            return Err(numeric_abort(
                err,
                epoch,
                model,
                last_good,
                config.seed,
                options.abort_checkpoint.as_ref(),
            ));
        }
        last_good.clone_from(model);
        grads.clear();
        render_rays_field_backward(model, &trace, &l1_grad(&pred, &targets), &mut grads)?;
        if let Err(e) = opt.step(model, &grads) {
            return Err(numeric_abort(
                e,
                epoch,
                model,
                last_good,
                config.seed,
                options.abort_checkpoint.as_ref(),
            ));
        }

        let mut probe_l1 = None;
        if epoch % config.probe_every == 0 {
            let last = outcome.records.last().expect("initial record");
            probe_l1 = Some(crate::field::stability_probe(std::slice::from_ref(last), model)?[0].1);
            outcome
                .records
                .push(model.record_stability(epoch, &probe_subset(trace.points()))?);
        }
        let mut psnr_val = None;
        if let Some(gt) = options.validation {
            let due = config.eval_every > 0 && epoch % config.eval_every == 0;
            if due || epoch == config.epochs {
                psnr_val = Some(validation_psnr(model, gt)?);
            }
        }
        if epoch % config.log_every == 0
            || epoch == config.epochs
            || probe_l1.is_some()
            || psnr_val.is_some()
        {
            outcome.log.push(LogRecord {
                epoch,
                loss,
                wall_ms: (!config.deterministic).then(|| start.elapsed().as_secs_f64() * 1e3),
                probe_l1,
                psnr_val,
            })?;
        }
    }
    Ok(())
}

/// Pixel-loss reconstruction with default options.
pub fn train_reconstruction(
    mut model: FieldModel,
    stack: &ProjectionStack,
    config: &TrainConfig,
) -> Result<(FieldModel, TrainLog)> {
    let mut outcome = TrainOutcome::default();
    train_reconstruction_with(
        &mut model,
        stack,
        config,
        &TrainOptions::default(),
        &mut outcome,
    )?;
    Ok((model, outcome.log))
}

/// Attenuation ground truth for pre-training.
#[derive(Debug, Clone, Copy)]
pub enum GroundTruth<'a> {
    Volume(&'a VoxelVolume),
    Spec(&'a PhantomSpec),
}

impl GroundTruth<'_> {
    pub fn mu(&self, p: &Vec3) -> f64 {
        match self {
            GroundTruth::Volume(v) => trilinear_unchecked(v, p),
            GroundTruth::Spec(s) => s.mu_at(p),
        }
    }
}

/// Direct voxel-loss supervision of every parameter group on uniform random
/// points. Returns the final checkpoint; `log` holds the partial log when an
/// error is returned.
pub fn pretrain_mci_with(
    gt: GroundTruth,
    model: &mut FieldModel,
    config: &PretrainConfig,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    config.validate()?;
    let bounds = model.grid().config().bounds;
    let mut rng = SeedStream::new(config.seed).rng(stream::PRETRAIN);
    let mut opt = Optimizer::new(model, config.lr, |g| {
        config.freeze_encoder && g == ParamGroup::Encoder
    });
    let mut grads = FieldGrads::zeros(model);
    let start = Instant::now();
    let n = config.points_per_batch;
    for step in 0..config.epochs {
        let epoch = step + 1;
        let points: Vec<Vec3> = (0..n)
            .map(|_| Vec3::from_fn(|i, _| rng.gen_range(bounds.min[i]..bounds.max[i])))
            .collect();
        let target: Vec<f64> = points.iter().map(|p| gt.mu(p)).collect();
        let (mu, trace) = model.forward_batch(&points)?;
        let mu = mu.to_vec();
        let loss = voxel_loss(&mu, &target)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "pre-training loss is {loss} at epoch {epoch}"
            )));
        }
        grads.clear();
        let g = Array1::from(l1_grad(&mu, &target));
        model.backward_batch(&trace, g.view(), &mut grads)?;
        opt.step(model, &grads)?;
        if epoch % config.log_every == 0 || epoch == config.epochs {
            log.push(LogRecord {
                epoch,
                loss,
                wall_ms: (!config.deterministic).then(|| start.elapsed().as_secs_f64() * 1e3),
                probe_l1: None,
                psnr_val: None,
            })?;
        }
    }
    if config.epochs > 0 {
        model.set_provenance("pretrain");
    }
    Ok(Checkpoint::from_model(model, config.seed, config.epochs))
}

pub fn pretrain_mci(
    gt: GroundTruth,
    model: &mut FieldModel,
    config: &PretrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let mut log = TrainLog::default();
    let ck = pretrain_mci_with(gt, model, config, &mut log)?;
    Ok((ck, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::HashGridConfig;
    use crate::field::FieldConfig;
    use crate::geometry::{Aabb, ScannerGeometry};
    use crate::projector::{project_analytic, ProjectionImage};

    fn small_geometry() -> ScannerGeometry {
        ScannerGeometry {
            detector_rows: 16,
            detector_cols: 16,
            pixel_pitch: 19.2,
            num_views: 4,
            ..ScannerGeometry::default()
        }
    }

    fn small_config(use_ln: bool) -> FieldConfig {
        FieldConfig {
            grid: HashGridConfig {
                levels: 4,
                table_size: 1 << 12,
                base_resolution: 4,
                growth_factor: 1.5,
                features_per_level: 2,
                bounds: Aabb::centered_cube(100.0).unwrap(),
            },
            use_ln,
            hidden: vec![16],
            ..FieldConfig::default()
        }
    }

    fn train_config() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            rays_per_view: 32,
            points_per_ray: 16,
            log_every: 5,
            probe_every: 10,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    fn sphere_stack() -> ProjectionStack {
        project_analytic(&PhantomSpec::builtin("sphere1").unwrap(), &small_geometry()).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(pixel_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((pixel_loss(&[1.5, 2.5, 0.5], &[1.0, 2.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(
            (pixel_loss(&[1.0, -1.0, 4.0, 0.0], &[0.0, 1.0, 1.0, 0.5]).unwrap() - 6.5 / 4.0).abs()
                < 1e-15
        );
        assert!(matches!(pixel_loss(&[], &[]), Err(Error::Domain(_))));
        assert!(matches!(
            pixel_loss(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));

        assert_eq!(voxel_loss(&[0.2; 4], &[0.2; 4]).unwrap(), 0.0);
        assert!((voxel_loss(&[0.0; 5], &[0.7; 5]).unwrap() - 0.7).abs() < 1e-15);
        let mut rng = SeedStream::new(0).rng(0);
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut manual = 0.0;
        for i in 0..100 {
            manual += (a[i] - b[i]).abs();
        }
        assert!((voxel_loss(&a, &b).unwrap() - manual / 100.0).abs() < 1e-14);
    }

    #[test]
    fn l1_grad_matches_finite_differences() {
        let p = [0.3, -0.2, 1.5];
        let t = [0.1, 0.4, 1.5];
        let g = l1_grad(&p, &t);
        assert_eq!(g, vec![1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn batch_full_view_and_validation() {
        let stack = sphere_stack();
        let pixels = stack.geometry.pixels_per_view();
        let cfg = TrainConfig {
            rays_per_view: pixels,
            ..train_config()
        };
        let sampler = RaySampler::new(&stack, &cfg).unwrap();
        let mut rng = SeedStream::new(0).rng(stream::RAY_BATCH);
        let batch = sampler.batch(0, &mut rng);
        let mut seen: Vec<(usize, usize)> = batch.iter().map(|(r, _)| (r.row, r.col)).collect();
        seen.sort();
        let all: Vec<(usize, usize)> = (0..16)
            .flat_map(|r| (0..16).map(move |c| (r, c)))
            .filter(|&(r, c)| stack.geometry.generate_ray(0, r, c).unwrap().hits())
            .collect();
        assert_eq!(seen, all);
        for (ray, a) in &batch {
            assert_eq!(ray.view, 0);
            assert_eq!(*a, stack.value(0, ray.row, ray.col));
        }

        let too_many = TrainConfig {
            rays_per_view: pixels + 1,
            ..train_config()
        };
        assert!(matches!(
            RaySampler::new(&stack, &too_many),
            Err(Error::Config(_))
        ));
        let empty = ProjectionStack {
            geometry: ScannerGeometry {
                num_views: 0,
                ..small_geometry()
            },
            images: vec![],
        };
        assert!(RaySampler::new(&empty, &train_config()).is_err());
    }

    #[test]
    fn batch_views_cycle_and_repeat() {
        let stack = sphere_stack();
        let cfg = TrainConfig {
            views_per_batch: 3,
            ..train_config()
        };
        let s = RaySampler::new(&stack, &cfg).unwrap();
        assert_eq!(s.batch_views(0), vec![0, 1, 2]);
        assert_eq!(s.batch_views(1), vec![3, 0, 1]);
        let run = || {
            let mut rng = SeedStream::new(9).rng(stream::RAY_BATCH);
            (0..5)
                .flat_map(|i| s.batch(i, &mut rng))
                .map(|(r, _)| (r.view, r.row, r.col))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn misses_are_excluded() {
        // Wide panel: corner pixels miss the volume.
        let g = ScannerGeometry {
            pixel_pitch: 40.0,
            ..small_geometry()
        };
        let stack = project_analytic(&PhantomSpec::builtin("sphere1").unwrap(), &g).unwrap();
        let hits = (0..16)
            .flat_map(|r| (0..16).map(move |c| (r, c)))
            .filter(|&(r, c)| g.generate_ray(0, r, c).unwrap().hits())
            .count();
        assert!(hits < 256);
        let cfg = TrainConfig {
            rays_per_view: 256,
            ..train_config()
        };
        let s = RaySampler::new(&stack, &cfg).unwrap();
        let batch = s.batch(0, &mut SeedStream::new(1).rng(0));
        assert_eq!(batch.len(), hits);
        assert!(batch.iter().all(|(r, _)| r.hits()));
    }

    #[test]
    fn pixel_selection_is_uniform() {
        // 16 pixels per view, 4 drawn per batch, 10^4 batches.
        let g = ScannerGeometry {
            detector_rows: 4,
            detector_cols: 4,
            pixel_pitch: 40.0,
            num_views: 1,
            ..ScannerGeometry::default()
        };
        let stack = ProjectionStack::new(
            g.clone(),
            vec![ProjectionImage {
                view: 0,
                rows: 4,
                cols: 4,
                pixels: vec![0.0; 16],
            }],
        )
        .unwrap();
        let cfg = TrainConfig {
            rays_per_view: 4,
            ..train_config()
        };
        let s = RaySampler::new(&stack, &cfg).unwrap();
        let mut rng = SeedStream::new(11).rng(stream::RAY_BATCH);
        let mut counts = [0usize; 16];
        let draws = 10_000;
        for i in 0..draws {
            let b = s.batch(i, &mut rng);
            assert_eq!(b.len(), 4);
            let mut px: Vec<usize> = b.iter().map(|(r, _)| r.row * 4 + r.col).collect();
            px.sort();
            px.dedup();
            assert_eq!(px.len(), 4, "drawn without replacement");
            for p in px {
                counts[p] += 1;
            }
        }
        let expected = draws as f64 * 4.0 / 16.0;
        let sd = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "{c} vs {expected}");
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 15 degrees of freedom, 99.9% quantile.
        assert!(chi2 < 37.7, "chi2 {chi2}");
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let stack = sphere_stack();
        let m0 = FieldModel::new(&small_config(true), &SeedStream::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..train_config()
        };
        let (m, log) = train_reconstruction(m0.clone(), &stack, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(
            Checkpoint::from_model(&m, 0, 0).to_bytes().unwrap(),
            Checkpoint::from_model(&m0, 0, 0).to_bytes().unwrap()
        );
    }

    #[test]
    fn config_checks() {
        let stack = sphere_stack();
        let m = FieldModel::new(&small_config(false), &SeedStream::new(1)).unwrap();
        assert!(matches!(
            train_reconstruction(m.clone(), &stack, &train_config()),
            Err(Error::Config(_))
        ));
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..train_config()
            },
            TrainConfig {
                points_per_ray: 0,
                ..train_config()
            },
            TrainConfig {
                use_mci: true,
                ..train_config()
            },
            TrainConfig {
                mask_threshold: 1.0,
                ..train_config()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn deterministic_runs_are_identical() {
        let stack = sphere_stack();
        let run = || {
            let m = FieldModel::new(&small_config(true), &SeedStream::new(2)).unwrap();
            let cfg = TrainConfig {
                use_mask: true,
                ..train_config()
            };
            let (m, log) = train_reconstruction(m, &stack, &cfg).unwrap();
            (
                Checkpoint::from_model(&m, 2, 20).to_bytes().unwrap(),
                log.to_csv(),
            )
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.lines().skip(1).all(|l| l.split(',').nth(2) == Some("")));
    }

    #[test]
    fn single_ray_constant_target_converges() {
        // A single ray whose target is reachable by a constant field.
        let g = ScannerGeometry {
            detector_rows: 1,
            detector_cols: 1,
            num_views: 1,
            ..ScannerGeometry::default()
        };
        let ray = g.generate_ray(0, 0, 0).unwrap();
        let target = 0.2 * ray.chord_length();
        let stack = ProjectionStack::new(
            g,
            vec![ProjectionImage {
                view: 0,
                rows: 1,
                cols: 1,
                pixels: vec![target],
            }],
        )
        .unwrap();
        let m = FieldModel::new(&small_config(false), &SeedStream::new(3)).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            rays_per_view: 1,
            log_every: 1,
            jitter: Jitter::None,
            use_ln: false,
            ..train_config()
        };
        let (_, log) = train_reconstruction(m, &stack, &cfg).unwrap();
        let first = log.records()[0].loss;
        let last = log.last().unwrap().loss;
        assert!(last < 0.01 * first, "{first} -> {last}");
    }

    #[test]
    fn one_step_descends() {
        let stack = sphere_stack();
        for seed in 0..5 {
            let m0 = FieldModel::new(&small_config(true), &SeedStream::new(seed)).unwrap();
            let cfg = TrainConfig {
                epochs: 1,
                jitter: Jitter::None,
                views_per_batch: 4,
                lr: 1e-4,
                seed,
                ..train_config()
            };
            let sampler = RaySampler::new(&stack, &cfg).unwrap();
            let batch = sampler.batch(0, &mut SeedStream::new(seed).rng(stream::RAY_BATCH));
            let loss_of = |m: &FieldModel| {
                let rays: Vec<Ray> = batch.iter().map(|b| b.0).collect();
                let t: Vec<f64> = batch.iter().map(|b| b.1).collect();
                let (p, _) =
                    render_rays_field(m, &rays, &cfg.sampling(), &mut SeedStream::new(0).rng(0))
                        .unwrap();
                pixel_loss(&p, &t).unwrap()
            };
            let before = loss_of(&m0);
            let (m1, log) = train_reconstruction(m0, &stack, &cfg).unwrap();
            assert_eq!(log.records()[0].loss, before);
            assert!(loss_of(&m1) < before);
        }
    }

    #[test]
    fn probe_matches_reinference() {
        let stack = sphere_stack();
        let mut m = FieldModel::new(&small_config(true), &SeedStream::new(4)).unwrap();
        let cfg = train_config();
        let mut out = TrainOutcome::default();
        train_reconstruction_with(&mut m, &stack, &cfg, &TrainOptions::default(), &mut out)
            .unwrap();
        assert_eq!(
            out.records.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![0, 10, 20]
        );
        let curve = crate::metrics::stability_curve(&out.log).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[1].0, 20);
        let oracle = crate::field::stability_probe(&out.records[1..2], &m).unwrap();
        assert_eq!(curve[1].1, oracle[0].1);
        assert!(curve[1].1 > 0.0);
    }

    #[test]
    fn frozen_head_probe_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.nfck");
        let stack = sphere_stack();
        let m = FieldModel::new(&small_config(true), &SeedStream::new(5)).unwrap();
        crate::field::save_checkpoint(&m, &CheckpointMeta::default(), &path).unwrap();
        let cfg = TrainConfig {
            use_mci: true,
            mci_checkpoint: Some(path),
            freeze_mci: true,
            ..train_config()
        };
        let m2 = FieldModel::new(&small_config(true), &SeedStream::new(6)).unwrap();
        let (trained, log) = train_reconstruction(m2, &stack, &cfg).unwrap();
        let curve = crate::metrics::stability_curve(&log).unwrap();
        assert!(curve.iter().all(|&(_, v)| v == 0.0));
        assert_eq!(trained.mlp(), m.mlp());
        assert_eq!(trained.ln(), m.ln());
    }

    #[test]
    fn log_csv_roundtrip() {
        let mut log = TrainLog::default();
        log.push(LogRecord {
            epoch: 1,
            loss: 0.5,
            wall_ms: Some(1.25),
            probe_l1: None,
            psnr_val: None,
        })
        .unwrap();
        log.push(LogRecord {
            epoch: 3,
            loss: 0.1 + 0.2,
            wall_ms: None,
            probe_l1: Some(1e-9),
            psnr_val: Some(31.5),
        })
        .unwrap();
        assert!(log
            .push(LogRecord {
                epoch: 3,
                loss: 0.0,
                wall_ms: None,
                probe_l1: None,
                psnr_val: None
            })
            .is_err());
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,loss,wall_ms,probe_l1,psnr_val\n1,0.5,1.25,,\n"));
        assert_eq!(TrainLog::from_csv(&csv).unwrap(), log);
        assert_eq!(log.epochs_to_psnr(30.0), Some(3));
        assert_eq!(log.epochs_to_psnr(40.0), None);
    }

    #[test]
    fn pretrain_zero_epochs_is_init() {
        let spec = PhantomSpec::uniform("c", 0.5);
        let mut m = FieldModel::new(&small_config(true), &SeedStream::new(7)).unwrap();
        let init = Checkpoint::from_model(&m, 0, 0).to_bytes().unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            seed: 0,
            ..PretrainConfig::default()
        };
        let (ck, log) = pretrain_mci(GroundTruth::Spec(&spec), &mut m, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(ck.to_bytes().unwrap(), init);
    }

    #[test]
    fn pretrain_initial_loss_of_zero_model() {
        let spec = PhantomSpec::uniform("c", 0.35);
        let mut m = FieldModel::new(&small_config(false), &SeedStream::new(8)).unwrap();
        for l in m.mlp_mut().layers_mut() {
            l.weights_mut().fill(0.0);
            l.bias_mut().fill(0.0);
        }
        let cfg = PretrainConfig {
            epochs: 1,
            log_every: 1,
            deterministic: true,
            ..PretrainConfig::default()
        };
        let (_, log) = pretrain_mci(GroundTruth::Spec(&spec), &mut m, &cfg).unwrap();
        assert!((log.records()[0].loss - 0.35).abs() < 1e-12);
    }
}
