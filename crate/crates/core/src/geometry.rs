//! Circular-orbit cone-beam geometry with a flat-panel detector.
//!
//! The rotation axis is `z`. At view angle `θ` the source sits at
//! `dso·(cos θ, sin θ, 0)` and the detector centre at distance `dsd` from the
//! source on the far side of the axis. Detector columns run along
//! `(-sin θ, cos θ, 0)`; row 0 is the top (`+z`) edge.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Axis-aligned box in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    /// Cube of side `extent` centred at the origin.
    pub fn centered_cube(extent: f64) -> Result<Self> {
        let h = extent / 2.0;
        Self::new(Vec3::repeat(-h), Vec3::repeat(h))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0..3).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.max[i] > self.min[i]
        });
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "bounds must have positive extent on every axis: {:?} .. {:?}",
                self.min.as_slice(),
                self.max.as_slice()
            )))
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn half_diagonal(&self) -> f64 {
        self.extent().norm() / 2.0
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]))
    }

    /// Slab-method intersection of the ray `origin + t·dir`, `t ≥ 0`.
    /// Returns `None` when the ray misses or only grazes the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = {
                let a = (self.min[i] - origin[i]) * inv;
                let b = (self.max[i] - origin[i]) * inv;
                if a <= b {
                    (a, b)
                } else {
                    (b, a)
                }
            };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannerGeometry {
    /// Source to rotation-centre distance (mm).
    pub dso: f64,
    /// Source to detector distance (mm).
    pub dsd: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch: f64,
    pub num_views: usize,
    pub angle_span: f64,
    pub volume: Aabb,
}

impl Default for ScannerGeometry {
    fn default() -> Self {
        Self {
            dso: 250.0,
            dsd: 500.0,
            detector_rows: 64,
            detector_cols: 64,
            pixel_pitch: 4.8,
            num_views: 20,
            angle_span: TAU,
            volume: Aabb::centered_cube(100.0).expect("valid default bounds"),
        }
    }
}

/// Ray from the source through one detector pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Entry/exit distances through the volume, `None` if the ray misses.
    pub span: Option<(f64, f64)>,
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

impl Ray {
    /// Builds a ray with a normalized direction, clipped against `bounds`.
    pub fn new(origin: Vec3, direction: Vec3, bounds: &Aabb) -> Self {
        let direction = direction.normalize();
        Self {
            origin,
            direction,
            span: clip_to_volume(&origin, &direction, bounds),
            view: 0,
            row: 0,
            col: 0,
        }
    }

    pub fn hits(&self) -> bool {
        self.span.is_some()
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn chord_length(&self) -> f64 {
        self.span.map_or(0.0, |(a, b)| b - a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    #[default]
    None,
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaySampling {
    pub num_points: usize,
    pub jitter: Jitter,
}

impl RaySampling {
    pub fn midpoint(num_points: usize) -> Self {
        Self {
            num_points,
            jitter: Jitter::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub point: Vec3,
    pub delta: f64,
}

impl ScannerGeometry {
    pub fn validate(&self) -> Result<()> {
        self.volume.validate()?;
        let positive = [self.dso, self.dsd, self.pixel_pitch, self.angle_span];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "dso, dsd, pixel_pitch and angle_span must be positive".into(),
            ));
        }
        if self.detector_rows == 0 || self.detector_cols == 0 || self.num_views == 0 {
            return Err(Error::Config(
                "detector size and view count must be positive".into(),
            ));
        }
        let r = (self.volume.center().norm()) + self.volume.half_diagonal();
        if !(self.dsd > self.dso && self.dso > r) {
            return Err(Error::Config(format!(
                "need dsd > dso > volume radius: dsd={}, dso={}, radius={r:.3}",
                self.dsd, self.dso
            )));
        }
        Ok(())
    }

    /// Warns when some corner of the volume projects outside the detector
    /// at any view. Perspective projection keeps the box convex, so checking
    /// the corners is exact.
    pub fn coverage_warning(&self) -> Option<String> {
        let half_w = self.detector_cols as f64 * self.pixel_pitch / 2.0;
        let half_h = self.detector_rows as f64 * self.pixel_pitch / 2.0;
        let mut worst: f64 = 0.0;
        for view in 0..self.num_views {
            let angle = view as f64 * self.angle_span / self.num_views as f64;
            let (s, c) = angle.sin_cos();
            let source = self.source_position(angle);
            let axis = Vec3::new(-c, -s, 0.0);
            let u = Vec3::new(-s, c, 0.0);
            for k in 0..8 {
                let corner = Vec3::from_fn(|i, _| {
                    if k >> i & 1 == 1 {
                        self.volume.max[i]
                    } else {
                        self.volume.min[i]
                    }
                });
                let rel = corner - source;
                let depth = rel.dot(&axis);
                let scale = self.dsd / depth;
                worst = worst
                    .max((rel.dot(&u) * scale).abs() / half_w)
                    .max((rel.z * scale).abs() / half_h);
            }
        }
        (worst > 1.0).then(|| {
            format!("volume projects up to {:.0}% of the detector half-size; part of it is never imaged", worst * 100.0)
        })
    }

    pub fn pixels_per_view(&self) -> usize {
        self.detector_rows * self.detector_cols
    }

    pub fn view_angle(&self, view: usize) -> Result<f64> {
        if view >= self.num_views {
            return Err(Error::Domain(format!(
                "view {view} out of range 0..{}",
                self.num_views
            )));
        }
        Ok(view as f64 * self.angle_span / self.num_views as f64)
    }

    pub fn source_position(&self, angle: f64) -> Vec3 {
        Vec3::new(self.dso * angle.cos(), self.dso * angle.sin(), 0.0)
    }

    /// Centre of detector pixel `(row, col)` at gantry angle `angle`.
    pub fn pixel_position(&self, angle: f64, row: usize, col: usize) -> Vec3 {
        let (s, c) = angle.sin_cos();
        let source = self.source_position(angle);
        let axis = Vec3::new(-c, -s, 0.0);
        let u = Vec3::new(-s, c, 0.0);
        let w = Vec3::z();
        let du = (col as f64 - (self.detector_cols as f64 - 1.0) / 2.0) * self.pixel_pitch;
        let dv = (row as f64 - (self.detector_rows as f64 - 1.0) / 2.0) * self.pixel_pitch;
        source + axis * self.dsd + u * du - w * dv
    }

    pub fn ray_at_angle(&self, angle: f64, row: usize, col: usize) -> Ray {
        let origin = self.source_position(angle);
        let target = self.pixel_position(angle, row, col);
        Ray::new(origin, target - origin, &self.volume)
    }

    pub fn generate_ray(&self, view: usize, row: usize, col: usize) -> Result<Ray> {
        if row >= self.detector_rows || col >= self.detector_cols {
            return Err(Error::Domain(format!(
                "pixel ({row}, {col}) outside {}x{} detector",
                self.detector_rows, self.detector_cols
            )));
        }
        let angle = self.view_angle(view)?;
        let mut ray = self.ray_at_angle(angle, row, col);
        ray.view = view;
        ray.row = row;
        ray.col = col;
        Ok(ray)
    }
}

pub fn clip_to_volume(origin: &Vec3, direction: &Vec3, bounds: &Aabb) -> Option<(f64, f64)> {
    bounds.intersect(origin, direction)
}

/// Uniform samples along the clipped ray: `t_i = t_near + (i + ½)·δ` for the
/// midpoint rule, or a uniform draw inside bin `i` when stratified.
pub fn sample_points<R: Rng + ?Sized>(
    ray: &Ray,
    sampling: &RaySampling,
    rng: &mut R,
) -> Result<Vec<RaySample>> {
    let Some((t0, t1)) = ray.span else {
        return Err(Error::Domain(
            "cannot sample a ray that misses the volume".into(),
        ));
    };
    if sampling.num_points == 0 {
        return Err(Error::Config("points per ray must be at least 1".into()));
    }
    let n = sampling.num_points;
    let delta = (t1 - t0) / n as f64;
    Ok((0..n)
        .map(|i| {
            let offset = match sampling.jitter {
                Jitter::None => 0.5,
                Jitter::Stratified => rng.gen::<f64>(),
            };
            let t = t0 + (i as f64 + offset) * delta;
            RaySample {
                t,
                point: ray.at(t),
                delta,
            }
        })
        .collect())
}
