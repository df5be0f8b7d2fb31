//! Beer–Lambert forward projection: `A = Σ μ(p_i)·δ` along each ray, for
//! voxel volumes (data synthesis) and neural fields (training).

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;

use crate::field::{BatchTrace, FieldGrads, FieldModel};
use crate::geometry::{sample_points, Ray, RaySampling, ScannerGeometry};
use crate::phantom::{trilinear_unchecked, PhantomSpec, VoxelVolume};
use crate::{Error, Result, Vec3};

/// One detector image of log-attenuation values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub view: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl ProjectionImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.cols + col]
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub geometry: ScannerGeometry,
    pub images: Vec<ProjectionImage>,
}

impl ProjectionStack {
    pub fn new(geometry: ScannerGeometry, images: Vec<ProjectionImage>) -> Result<Self> {
        geometry.validate()?;
        if images.len() != geometry.num_views {
            return Err(Error::shape(
                geometry.num_views,
                images.len(),
                "projection images",
            ));
        }
        for (v, img) in images.iter().enumerate() {
            if img.view != v
                || img.rows != geometry.detector_rows
                || img.cols != geometry.detector_cols
            {
                return Err(Error::Shape(format!(
                    "image {v} is view {} with {}x{} pixels, geometry expects {}x{}",
                    img.view, img.rows, img.cols, geometry.detector_rows, geometry.detector_cols
                )));
            }
            if img.pixels.len() != img.rows * img.cols {
                return Err(Error::shape(
                    img.rows * img.cols,
                    img.pixels.len(),
                    "image pixels",
                ));
            }
            if img.pixels.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "view {v} holds non-finite projection values"
                )));
            }
        }
        Ok(Self { geometry, images })
    }

    pub fn num_views(&self) -> usize {
        self.images.len()
    }

    pub fn value(&self, view: usize, row: usize, col: usize) -> f64 {
        self.images[view].get(row, col)
    }

    pub fn max(&self) -> f64 {
        self.images
            .iter()
            .map(ProjectionImage::max)
            .fold(0.0, f64::max)
    }
}

/// Rendered value of one ray; `hit` is false when the ray misses the volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayValue {
    pub value: f64,
    pub hit: bool,
}

/// Midpoint-rule integral of the trilinear volume along the ray. Jitter in
/// `sampling` is ignored: synthesized projections are deterministic.
pub fn render_ray_volume(volume: &VoxelVolume, ray: &Ray, sampling: &RaySampling) -> RayValue {
    let Some((t0, t1)) = ray.span else {
        return RayValue {
            value: 0.0,
            hit: false,
        };
    };
    let n = sampling.num_points.max(1);
    let delta = (t1 - t0) / n as f64;
    let sum: f64 = (0..n)
        .map(|i| trilinear_unchecked(volume, &ray.at(t0 + (i as f64 + 0.5) * delta)))
        .sum();
    RayValue {
        value: sum * delta,
        hit: true,
    }
}

/// Caches of a field render over a set of rays.
#[derive(Debug, Clone)]
pub struct FieldRenderTrace {
    batch: BatchTrace,
    /// Step size and number of samples for each ray (0 samples on a miss).
    deltas: Vec<f64>,
    counts: Vec<usize>,
    points: Vec<Vec3>,
}

impl FieldRenderTrace {
    pub fn num_rays(&self) -> usize {
        self.deltas.len()
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Every sample point of the batch, ray by ray.
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }
}

/// `A_r = Σ μ(p_i)·δ_r` for every ray; rays that miss render 0.
pub fn render_rays_field<R: Rng + ?Sized>(
    model: &FieldModel,
    rays: &[Ray],
    sampling: &RaySampling,
    rng: &mut R,
) -> Result<(Vec<f64>, FieldRenderTrace)> {
    let mut points: Vec<Vec3> = Vec::with_capacity(rays.len() * sampling.num_points);
    let mut deltas = Vec::with_capacity(rays.len());
    let mut counts = Vec::with_capacity(rays.len());
    for ray in rays {
        if ray.hits() {
            let samples = sample_points(ray, sampling, rng)?;
            deltas.push(samples[0].delta);
            counts.push(samples.len());
            points.extend(samples.iter().map(|s| s.point));
        } else {
            deltas.push(0.0);
            counts.push(0);
        }
    }
    let (mu, batch) = model.forward_batch(&points)?;
    let mut values = Vec::with_capacity(rays.len());
    let mut offset = 0;
    for (&n, &d) in counts.iter().zip(&deltas) {
        values.push(mu.slice(ndarray::s![offset..offset + n]).sum() * d);
        offset += n;
    }
    Ok((
        values,
        FieldRenderTrace {
            batch,
            deltas,
            counts,
            points,
        },
    ))
}

/// Adds the gradient of `Σ_r grad_a[r]·A_r` into `grads`.
pub fn render_rays_field_backward(
    model: &FieldModel,
    trace: &FieldRenderTrace,
    grad_a: &[f64],
    grads: &mut FieldGrads,
) -> Result<()> {
    if grad_a.len() != trace.num_rays() {
        return Err(Error::shape(
            trace.num_rays(),
            grad_a.len(),
            "ray gradients",
        ));
    }
    let mut g_mu = Array1::zeros(trace.batch.len());
    let mut offset = 0;
    for ((&n, &d), &g) in trace.counts.iter().zip(&trace.deltas).zip(grad_a) {
        g_mu.slice_mut(ndarray::s![offset..offset + n]).fill(g * d);
        offset += n;
    }
    model.backward_batch(&trace.batch, g_mu.view(), grads)
}

pub fn render_ray_field<R: Rng + ?Sized>(
    model: &FieldModel,
    ray: &Ray,
    sampling: &RaySampling,
    rng: &mut R,
) -> Result<(f64, FieldRenderTrace)> {
    let (v, trace) = render_rays_field(model, std::slice::from_ref(ray), sampling, rng)?;
    Ok((v[0], trace))
}

pub fn render_ray_field_backward(
    model: &FieldModel,
    trace: &FieldRenderTrace,
    grad_a: f64,
    grads: &mut FieldGrads,
) -> Result<()> {
    render_rays_field_backward(model, trace, &[grad_a], grads)
}

fn project_with(
    geometry: &ScannerGeometry,
    pixel: impl Fn(&Ray) -> f64 + Sync,
) -> Result<ProjectionStack> {
    geometry.validate()?;
    let (rows, cols) = (geometry.detector_rows, geometry.detector_cols);
    let images = (0..geometry.num_views)
        .map(|view| {
            let pixels: Vec<f64> = (0..rows * cols)
                .into_par_iter()
                .map(|i| {
                    let ray = geometry
                        .generate_ray(view, i / cols, i % cols)
                        .expect("indices in range");
                    pixel(&ray)
                })
                .collect();
            ProjectionImage {
                view,
                rows,
                cols,
                pixels,
            }
        })
        .collect();
    ProjectionStack::new(geometry.clone(), images)
}

/// Renders every pixel of every view. Pixels are independent, so the
/// parallel result equals a serial loop bit for bit.
pub fn project_stack(
    volume: &VoxelVolume,
    geometry: &ScannerGeometry,
    sampling: &RaySampling,
) -> Result<ProjectionStack> {
    project_with(geometry, |ray| {
        render_ray_volume(volume, ray, sampling).value
    })
}

/// Exact projections of an analytic phantom.
pub fn project_analytic(spec: &PhantomSpec, geometry: &ScannerGeometry) -> Result<ProjectionStack> {
    project_with(geometry, |ray| spec.line_integral(ray))
}

/// Evaluates the field at every voxel centre, clamping negatives to 0.
pub fn extract_volume(
    model: &FieldModel,
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
) -> Result<VoxelVolume> {
    let grid = VoxelVolume::constant(dims, spacing, origin, 0.0)?;
    let centers: Vec<Vec3> = grid.centers().collect();
    // Per-point evaluation so values match `FieldModel::eval` bit for bit.
    let chunks: Vec<Result<Vec<f64>>> = centers
        .par_chunks(4096)
        .map(|c| c.iter().map(|p| model.eval(p).map(|(mu, _)| mu)).collect())
        .collect();
    let mut data = Vec::with_capacity(centers.len());
    for c in chunks {
        data.extend(c?.into_iter().map(|v| v.max(0.0)));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "field produced non-finite attenuation".into(),
        ));
    }
    grid.with_data(data)
}
