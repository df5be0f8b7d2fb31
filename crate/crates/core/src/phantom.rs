//! Additive ellipsoid phantoms, voxel volumes and exact line integrals.

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Ray};
use crate::{Error, Result, Vec3};

const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EllipsoidRepr", into = "EllipsoidRepr")]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    /// Columns are the ellipsoid's local axes in world coordinates.
    pub rotation: Matrix3<f64>,
    pub mu_delta: f64,
}

/// On-disk form: rotation is row-major and optional.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipsoidRepr {
    center: [f64; 3],
    semi_axes: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[[f64; 3]; 3]>,
    mu_delta: f64,
}

impl TryFrom<EllipsoidRepr> for Ellipsoid {
    type Error = Error;

    fn try_from(r: EllipsoidRepr) -> Result<Self> {
        let rotation = match r.rotation {
            Some(m) => Matrix3::from_fn(|i, j| m[i][j]),
            None => Matrix3::identity(),
        };
        let e = Ellipsoid {
            center: Vec3::from(r.center),
            semi_axes: Vec3::from(r.semi_axes),
            rotation,
            mu_delta: r.mu_delta,
        };
        e.validate()?;
        Ok(e)
    }
}

impl From<Ellipsoid> for EllipsoidRepr {
    fn from(e: Ellipsoid) -> Self {
        let r = e.rotation;
        EllipsoidRepr {
            center: e.center.into(),
            semi_axes: e.semi_axes.into(),
            rotation: (r != Matrix3::identity())
                .then(|| std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]))),
            mu_delta: e.mu_delta,
        }
    }
}

impl Ellipsoid {
    pub fn new(center: Vec3, semi_axes: Vec3, mu_delta: f64) -> Result<Self> {
        let e = Self {
            center,
            semi_axes,
            rotation: Matrix3::identity(),
            mu_delta,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn sphere(center: Vec3, radius: f64, mu_delta: f64) -> Result<Self> {
        Self::new(center, Vec3::repeat(radius), mu_delta)
    }

    /// Rotated by `angle` radians about the z axis.
    pub fn rotated_z(mut self, angle: f64) -> Result<Self> {
        self.rotation = *Rotation3::from_axis_angle(&Vec3::z_axis(), angle).matrix();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!(
                "ellipsoid semi-axes must be positive, got {:?}",
                self.semi_axes.as_slice()
            )));
        }
        if !(self.center.iter().all(|v| v.is_finite()) && self.mu_delta.is_finite()) {
            return Err(Error::Config(
                "ellipsoid center and mu_delta must be finite".into(),
            ));
        }
        let defect = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if !(defect <= 1e-10) || self.rotation.determinant() < 0.0 {
            return Err(Error::Config(format!(
                "ellipsoid rotation is not a proper rotation (defect {defect:e})"
            )));
        }
        Ok(())
    }

    fn to_unit(&self, v: &Vec3) -> Vec3 {
        (self.rotation.transpose() * v).component_div(&self.semi_axes)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.to_unit(&(p - self.center)).norm_squared() <= 1.0
    }

    /// Parameter interval where `origin + t·dir` lies inside, if any.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let o = self.to_unit(&(origin - self.center));
        let d = self.to_unit(dir);
        let a = d.norm_squared();
        let b = 2.0 * o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 || a == 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Numerically stable root pair.
        let q = -0.5 * (b + b.signum() * sq);
        let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
        Some((r1.min(r2), r1.max(r2)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub background_mu: f64,
    pub ellipsoids: Vec<Ellipsoid>,
}

impl PhantomSpec {
    pub const BUILTINS: [&'static str; 6] = [
        "sphere1",
        "sphere-blob",
        "shepp3d-lite",
        "two-blobs",
        "two-blobs-1",
        "two-blobs-2",
    ];

    pub fn uniform(name: &str, background_mu: f64) -> Self {
        Self {
            name: name.into(),
            background_mu,
            ellipsoids: vec![],
        }
    }

    /// Checks the ellipsoids and that μ is nonnegative at every ellipsoid
    /// centre, every axis tip and on a lattice over their bounding box.
    pub fn validate(&self) -> Result<()> {
        if !(self.background_mu >= 0.0 && self.background_mu.is_finite()) {
            return Err(Error::Config(format!(
                "background_mu must be finite and >= 0, got {}",
                self.background_mu
            )));
        }
        for e in &self.ellipsoids {
            e.validate()?;
        }
        if self.ellipsoids.iter().all(|e| e.mu_delta >= 0.0) {
            return Ok(());
        }
        let mut witnesses = vec![];
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for e in &self.ellipsoids {
            witnesses.push(e.center);
            for i in 0..3 {
                let tip = e.rotation.column(i) * e.semi_axes[i] * 0.999;
                witnesses.push(e.center + tip);
                witnesses.push(e.center - tip);
            }
            let r = e.semi_axes.max();
            lo = lo.inf(&(e.center - Vec3::repeat(r)));
            hi = hi.sup(&(e.center + Vec3::repeat(r)));
        }
        const K: usize = 24;
        for i in 0..K {
            for j in 0..K {
                for k in 0..K {
                    let f = Vec3::new(i as f64, j as f64, k as f64) / (K - 1) as f64;
                    witnesses.push(lo + (hi - lo).component_mul(&f));
                }
            }
        }
        if let Some(p) = witnesses.iter().find(|p| self.mu_at(p) < 0.0) {
            return Err(Error::Config(format!(
                "phantom `{}` has negative attenuation at {:?}",
                self.name,
                p.as_slice()
            )));
        }
        Ok(())
    }

    /// Parses a spec file: either an object with `ellipsoids` or a bare list.
    pub fn from_json(text: &str, fallback_name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Form {
            Full(PhantomSpec),
            List(Vec<Ellipsoid>),
        }
        let form: Form = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "phantom spec, line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        let mut spec = match form {
            Form::Full(s) => s,
            Form::List(ellipsoids) => PhantomSpec {
                name: String::new(),
                background_mu: 0.0,
                ellipsoids,
            },
        };
        if spec.name.is_empty() {
            spec.name = fallback_name.into();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let s = |c: [f64; 3], r: f64, mu: f64| Ellipsoid::sphere(Vec3::from(c), r, mu);
        let e =
            |c: [f64; 3], a: [f64; 3], mu: f64| Ellipsoid::new(Vec3::from(c), Vec3::from(a), mu);
        let ellipsoids = match name {
            "sphere1" => vec![s([0.0; 3], 35.0, 0.5)?],
            "sphere-blob" => vec![
                s([0.0; 3], 35.0, 0.4)?,
                e([10.0, -8.0, 5.0], [12.0, 8.0, 10.0], 0.4)?,
            ],
            "shepp3d-lite" => shepp3d_lite(48.0, 0.5)?,
            "two-blobs" | "two-blobs-1" => vec![
                e([0.0; 3], [40.0, 35.0, 38.0], 0.4)?,
                s([15.0, 10.0, 0.0], 12.0, 0.4)?,
                s([-15.0, -12.0, 8.0], 8.0, 0.2)?,
            ],
            "two-blobs-2" => vec![
                e([0.0; 3], [36.0, 40.0, 36.0], 0.4)?,
                s([-12.0, 15.0, -5.0], 10.0, 0.35)?,
                s([14.0, -10.0, 10.0], 9.0, 0.25)?,
            ],
            _ => {
                return Err(Error::Config(format!(
                    "unknown builtin phantom `{name}` (expected one of {})",
                    Self::BUILTINS.join(", ")
                )))
            }
        };
        let spec = PhantomSpec {
            name: name.into(),
            background_mu: 0.0,
            ellipsoids,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Background plus the deltas of every containing ellipsoid. Sums that
    /// cancel to zero up to rounding are returned as exactly 0.
    pub fn mu_at(&self, p: &Vec3) -> f64 {
        let mu = self.background_mu
            + self
                .ellipsoids
                .iter()
                .filter(|e| e.contains(p))
                .map(|e| e.mu_delta)
                .sum::<f64>();
        if mu < 0.0 && mu > -ROUNDING_SLACK {
            0.0
        } else {
            mu
        }
    }

    /// Exact line integral of μ over the ray's clipped span.
    pub fn line_integral(&self, ray: &Ray) -> f64 {
        let Some((t0, t1)) = ray.span else {
            return 0.0;
        };
        let chords: f64 = self
            .ellipsoids
            .iter()
            .filter_map(|e| {
                let (a, b) = e.intersect(&ray.origin, &ray.direction)?;
                Some(e.mu_delta * (b.min(t1) - a.max(t0)).max(0.0))
            })
            .sum();
        self.background_mu * (t1 - t0) + chords
    }
}

/// Six-ellipsoid 3-D Shepp–Logan variant with the modified contrasts,
/// scaled to half-size `size` mm and peak `mu`.
fn shepp3d_lite(size: f64, mu: f64) -> Result<Vec<Ellipsoid>> {
    #[rustfmt::skip]
    let table: [([f64; 3], [f64; 3], f64, f64); 6] = [
        ([0.0, 0.0, 0.0],      [0.69, 0.92, 0.81],   0.0,   1.0),
        ([0.0, -0.0184, 0.0],  [0.6624, 0.874, 0.78], 0.0, -0.8),
        ([0.22, 0.0, 0.0],     [0.11, 0.31, 0.22],  -18.0, -0.2),
        ([-0.22, 0.0, 0.0],    [0.16, 0.41, 0.28],   18.0, -0.2),
        ([0.0, 0.35, -0.15],   [0.21, 0.25, 0.41],   0.0,   0.1),
        ([0.0, 0.1, 0.25],     [0.046, 0.046, 0.05], 0.0,   0.1),
    ];
    table
        .iter()
        .map(|(c, a, deg, amp)| {
            Ellipsoid::new(Vec3::from(*c) * size, Vec3::from(*a) * size, amp * mu)?
                .rotated_z(deg.to_radians())
        })
        .collect()
}

/// Regular grid of attenuation values, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    dims: [usize; 3],
    spacing: Vec3,
    /// Corner of voxel (0, 0, 0).
    origin: Vec3,
    data: Vec<f64>,
}

impl VoxelVolume {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || origin.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Config(
                "volume spacing must be positive and origin finite".into(),
            ));
        }
        let n = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(n, data.len(), "volume data"));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!(
                "volume values must be finite and >= 0, found {bad}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// Grid of `dims` voxels exactly tiling `bounds`.
    pub fn covering(bounds: &Aabb, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let spacing = Vec3::from_fn(|i, _| bounds.extent()[i] / dims[i].max(1) as f64);
        Self::new(dims, spacing, bounds.min, data)
    }

    pub fn constant(dims: [usize; 3], spacing: Vec3, origin: Vec3, value: f64) -> Result<Self> {
        Self::new(dims, spacing, origin, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        let max = self.origin + Vec3::from_fn(|i, _| self.spacing[i] * self.dims[i] as f64);
        Aabb {
            min: self.origin,
            max,
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let idx = [i, j, k];
        self.origin + Vec3::from_fn(|a, _| (idx[a] as f64 + 0.5) * self.spacing[a])
    }

    /// Voxel centres in storage order.
    pub fn centers(&self) -> impl Iterator<Item = Vec3> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| {
            (0..ny).flat_map(move |j| (0..nx).map(move |i| self.voxel_center(i, j, k)))
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Same grid, different values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, data)
    }

    pub fn same_grid(&self, other: &VoxelVolume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }
}

pub fn voxelize(
    spec: &PhantomSpec,
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
) -> Result<VoxelVolume> {
    let grid = VoxelVolume::constant(dims, spacing, origin, 0.0)?;
    let data = grid.centers().map(|p| spec.mu_at(&p)).collect();
    grid.with_data(data)
}

pub fn mu_at(spec: &PhantomSpec, p: &Vec3) -> f64 {
    spec.mu_at(p)
}

pub fn analytic_line_integral(spec: &PhantomSpec, ray: &Ray) -> f64 {
    spec.line_integral(ray)
}

/// Trilinear interpolation between voxel centres; points beyond the outer
/// centres are clamped onto them.
pub fn trilinear_sample(volume: &VoxelVolume, p: &Vec3) -> Result<f64> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!(
            "cannot sample at non-finite point {:?}",
            p.as_slice()
        )));
    }
    Ok(trilinear_unchecked(volume, p))
}

#[inline]
pub(crate) fn trilinear_unchecked(volume: &VoxelVolume, p: &Vec3) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let n = volume.dims[a];
        let s = ((p[a] - volume.origin[a]) / volume.spacing[a] - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n.saturating_sub(2));
        base[a] = i;
        frac[a] = s - i as f64;
    }
    let [nx, ny, _] = volume.dims;
    let step = [
        usize::from(volume.dims[0] > 1),
        if volume.dims[1] > 1 { nx } else { 0 },
        if volume.dims[2] > 1 { nx * ny } else { 0 },
    ];
    let o = volume.index(base[0], base[1], base[2]);
    let d = &volume.data;
    let mut acc = 0.0;
    for k in 0..8 {
        let bits = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
        let mut w = 1.0;
        let mut off = o;
        for a in 0..3 {
            if bits[a] == 1 {
                w *= frac[a];
                off += step[a];
            } else {
                w *= 1.0 - frac[a];
            }
        }
        if w != 0.0 {
            acc += w * d[off];
        }
    }
    acc
}
