//! Volume quality metrics and the two analysis artifacts: PCA maps of the
//! encoder features and the head stability curve.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::field::FieldModel;
use crate::phantom::VoxelVolume;
use crate::training::TrainLog;
use crate::{Error, Result, Vec3};

/// Reported in place of +inf when the volumes match exactly.
pub const PSNR_CAP: f64 = 999.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_slice_ssim: Option<Vec<f64>>,
}

impl MetricReport {
    pub fn compute(recon: &VoxelVolume, gt: &VoxelVolume, per_slice: bool) -> Result<Self> {
        let slices = ssim_slices(recon, gt)?;
        let ssim = slices.iter().sum::<f64>() / slices.len() as f64;
        Ok(Self {
            psnr: psnr(recon, gt)?,
            ssim,
            per_slice_ssim: per_slice.then_some(slices),
        })
    }
}

fn check_dims(recon: &VoxelVolume, gt: &VoxelVolume) -> Result<()> {
    if recon.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "volume dims differ: {:?} vs {:?}",
            recon.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `10·log10(R²/MSE)` with `R = max(gt) − min(gt)`. The range comes from
/// `gt` only, so the metric is not symmetric in its arguments.
pub fn psnr(recon: &VoxelVolume, gt: &VoxelVolume) -> Result<f64> {
    check_dims(recon, gt)?;
    let mse = recon
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / gt.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    let (lo, hi) = gt.min_max();
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::Domain(
            "ground truth is constant, PSNR range is zero".into(),
        ));
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `nx × ny` image (x fastest).
fn filter_valid(img: &[f64], nx: usize, ny: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let (ox, oy) = (nx - k + 1, ny - k + 1);
    let mut tmp = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            tmp[y * ox + x] = (0..k).map(|i| w[i] * img[y * nx + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            out[y * ox + x] = (0..k).map(|i| w[i] * tmp[(y + i) * ox + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of each z slice.
pub fn ssim_slices(recon: &VoxelVolume, gt: &VoxelVolume) -> Result<Vec<f64>> {
    check_dims(recon, gt)?;
    let [nx, ny, nz] = gt.dims();
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "slices of {nx}x{ny} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    // Joint range keeps the constants nonzero for two distinct constants.
    let (a_lo, a_hi) = recon.min_max();
    let (b_lo, b_hi) = gt.min_max();
    let range = a_hi.max(b_hi) - a_lo.min(b_lo);
    if range == 0.0 {
        return Ok(vec![1.0; nz]);
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let w = gaussian_window();
    let plane = nx * ny;
    Ok((0..nz)
        .map(|z| {
            let x = &recon.data()[z * plane..(z + 1) * plane];
            let y = &gt.data()[z * plane..(z + 1) * plane];
            let prod = |a: &[f64], b: &[f64]| -> Vec<f64> {
                a.iter().zip(b).map(|(p, q)| p * q).collect()
            };
            let mx = filter_valid(x, nx, ny, &w);
            let my = filter_valid(y, nx, ny, &w);
            let exx = filter_valid(&prod(x, x), nx, ny, &w);
            let eyy = filter_valid(&prod(y, y), nx, ny, &w);
            let exy = filter_valid(&prod(x, y), nx, ny, &w);
            let n = mx.len();
            (0..n)
                .map(|i| {
                    let (ux, uy) = (mx[i], my[i]);
                    let sxx = exx[i] - ux * ux;
                    let syy = eyy[i] - uy * uy;
                    let sxy = exy[i] - ux * uy;
                    ((2.0 * ux * uy + c1) * (2.0 * sxy + c2))
                        / ((ux * ux + uy * uy + c1) * (sxx + syy + c2))
                })
                .sum::<f64>()
                / n as f64
        })
        .collect())
}

/// Slice-wise SSIM along z (11×11 Gaussian window, σ = 1.5), averaged over
/// all slices.
pub fn ssim(recon: &VoxelVolume, gt: &VoxelVolume) -> Result<f64> {
    let s = ssim_slices(recon, gt)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// A planar slice through the model bounds, sampled at cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    /// Axis normal to the slice: 0 = x, 1 = y, 2 = z.
    pub axis: usize,
    /// Slice position along `axis`, in mm.
    pub position: f64,
    pub rows: usize,
    pub cols: usize,
}

impl SliceSpec {
    /// Row-major sample points; columns run along the first in-plane axis.
    pub fn points(&self, bounds: &crate::geometry::Aabb) -> Result<Vec<Vec3>> {
        if self.axis > 2 {
            return Err(Error::Domain(format!(
                "slice axis {} is not 0, 1 or 2",
                self.axis
            )));
        }
        if self.position < bounds.min[self.axis] || self.position > bounds.max[self.axis] {
            return Err(Error::Domain(format!(
                "slice position {} lies outside the volume",
                self.position
            )));
        }
        let (u, v) = match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let ext = bounds.extent();
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let mut p = Vec3::zeros();
                p[self.axis] = self.position;
                p[u] = bounds.min[u] + (c as f64 + 0.5) / self.cols as f64 * ext[u];
                p[v] = bounds.min[v] + (r as f64 + 0.5) / self.rows as f64 * ext[v];
                out.push(p);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaMap {
    pub axis: usize,
    pub position: f64,
    pub rows: usize,
    pub cols: usize,
    /// rows × cols × 3, each channel in [0, 1].
    pub rgb: Vec<f64>,
    /// Variance along each of the three components, nonincreasing.
    pub explained_variance: [f64; 3],
}

/// Eigenvalues below this fraction of the largest count as zero variance.
const RANK_TOL: f64 = 1e-10;

/// Projects centred feature rows onto their top-3 principal components and
/// min-max normalizes each channel. Flat channels become 0.5.
pub fn pca_rgb(features: &ndarray::Array2<f64>) -> Result<(Vec<f64>, [f64; 3])> {
    let (n, d) = features.dim();
    if n < 3 {
        return Err(Error::Domain(format!(
            "PCA needs at least 3 samples, got {n}"
        )));
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("n > 0");
    let centered = features - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    // Rounding residue of centring constant features is ~eps² · |f|².
    let scale = features.iter().fold(0.0f64, |a, v| a.max(v * v));
    let floor = (RANK_TOL * top).max(1e-20 * scale).max(f64::MIN_POSITIVE);

    let mut rgb = vec![0.5; n * 3];
    let mut explained = [0.0; 3];
    for (ch, &k) in order.iter().take(3).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        explained[ch] = lambda;
        if lambda <= floor {
            explained[ch] = 0.0;
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // Deterministic sign: largest-magnitude component positive.
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let proj: Vec<f64> = centered
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (i, p) in proj.iter().enumerate() {
                rgb[i * 3 + ch] = (p - lo) / (hi - lo);
            }
        }
    }
    Ok((rgb, explained))
}

/// PCA map of the post-mask, pre-LN encoder features on one slice.
pub fn pca_feature_map(model: &FieldModel, slice: &SliceSpec) -> Result<PcaMap> {
    let points = slice.points(&model.grid().config().bounds)?;
    let features = model.encode_points(&points)?;
    let (rgb, explained_variance) = pca_rgb(&features)?;
    Ok(PcaMap {
        axis: slice.axis,
        position: slice.position,
        rows: slice.rows,
        cols: slice.cols,
        rgb,
        explained_variance,
    })
}

/// Epoch-sorted probe values from a training log.
pub fn stability_curve(log: &TrainLog) -> Result<Vec<(u64, f64)>> {
    let mut out: Vec<(u64, f64)> = log
        .records()
        .iter()
        .filter_map(|r| r.probe_l1.map(|v| (r.epoch, v)))
        .collect();
    if out.is_empty() {
        return Err(Error::Domain(
            "training log holds no stability probe entries".into(),
        ));
    }
    out.sort_by_key(|p| p.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LogRecord;
    use ndarray::Array2;
    use rand::Rng;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> VoxelVolume {
        VoxelVolume::new(dims, Vec3::repeat(1.0), Vec3::zeros(), data).unwrap()
    }

    fn structured(dims: [usize; 3]) -> VoxelVolume {
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n)
            .map(|i| {
                let (x, y) = ((i % dims[0]) as f64, ((i / dims[0]) % dims[1]) as f64);
                1.0 + (x / 3.0).sin() * (y / 4.0).cos() + 0.02 * x
            })
            .collect();
        vol(dims, data)
    }

    #[test]
    fn psnr_examples() {
        let gt = structured([12, 12, 3]);
        assert_eq!(psnr(&gt, &gt).unwrap(), PSNR_CAP);

        // Range 1, uniform error 0.1.
        let n = 4 * 4 * 4;
        let g: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let r: Vec<f64> = g.iter().map(|v| v + 0.1).collect();
        let p = psnr(&vol([4; 3], r), &vol([4; 3], g)).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");

        let mut rng = crate::rng::SeedStream::new(3).rng(0);
        let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0).collect();
        let (lo, hi) = b
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let mse: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
        let oracle = 20.0 * (hi - lo).log10() - 10.0 * mse.log10();
        let got = psnr(&vol([4; 3], a.clone()), &vol([4; 3], b.clone())).unwrap();
        assert!((got - oracle).abs() < 1e-10);
        // Range is taken from the second argument only.
        let swapped = psnr(&vol([4; 3], b), &vol([4; 3], a)).unwrap();
        assert!((swapped - got).abs() > 1e-3);

        assert!(psnr(&vol([4; 3], vec![0.0; n]), &vol([2, 4, 8], vec![0.0; n])).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = crate::rng::SeedStream::new(1).rng(0);
        for _ in 0..5 {
            let d = [13, 17, 4];
            let x = vol(
                d,
                (0..13 * 17 * 4).map(|_| rng.gen_range(0.0..5.0)).collect(),
            );
            assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        }
        let c = vol([11, 11, 1], vec![0.7; 121]);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (a, b) = (0.3, 0.8);
        let x = vol([12, 12, 2], vec![a; 288]);
        let y = vol([12, 12, 2], vec![b; 288]);
        let r: f64 = b - a;
        let c1 = (0.01 * r).powi(2);
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&x, &y).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_inverted_is_negative_and_scale_invariant() {
        let gt = structured([24, 24, 3]);
        let (lo, hi) = gt.min_max();
        let inv = gt
            .with_data(gt.data().iter().map(|v| hi + lo - v).collect())
            .unwrap();
        assert!(ssim(&inv, &gt).unwrap() < 0.0);

        let noisy = {
            let mut rng = crate::rng::SeedStream::new(2).rng(0);
            gt.with_data(
                gt.data()
                    .iter()
                    .map(|v| v + rng.gen_range(0.0..0.3))
                    .collect(),
            )
            .unwrap()
        };
        let s = ssim(&noisy, &gt).unwrap();
        let scaled = |v: &VoxelVolume| {
            v.with_data(v.data().iter().map(|x| 3.0 * x).collect())
                .unwrap()
        };
        let s2 = ssim(&scaled(&noisy), &scaled(&gt)).unwrap();
        assert!((s - s2).abs() < 1e-9, "{s} vs {s2}");
    }

    #[test]
    fn ssim_rejects_small_slices() {
        let x = vol([10, 20, 2], vec![0.0; 400]);
        assert!(matches!(ssim(&x, &x), Err(Error::Domain(_))));
    }

    #[test]
    fn gaussian_window_is_normalized() {
        let w = gaussian_window();
        assert_eq!(w.len(), 11);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[4] / w[5] - (-1.0 / 4.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn pca_constant_features_gray() {
        let f = Array2::from_elem((50, 6), 0.3);
        let (rgb, ev) = pca_rgb(&f).unwrap();
        assert!(rgb.iter().all(|&v| v == 0.5));
        assert_eq!(ev, [0.0; 3]);
        assert!(pca_rgb(&Array2::zeros((2, 4))).is_err());
    }

    #[test]
    fn pca_rank_one() {
        let dir = [0.5, -1.0, 2.0, 0.0, 0.3];
        let f = Array2::from_shape_fn((40, 5), |(i, j)| 1.0 + (i as f64 * 0.37).sin() * dir[j]);
        let (rgb, ev) = pca_rgb(&f).unwrap();
        let red: Vec<f64> = rgb.chunks(3).map(|c| c[0]).collect();
        assert!(red.iter().any(|&v| v == 0.0) && red.iter().any(|&v| v == 1.0));
        assert!(rgb.chunks(3).all(|c| c[1] == 0.5 && c[2] == 0.5));
        assert!(ev[0] > 0.0 && ev[1] == 0.0 && ev[2] == 0.0);
    }

    /// Largest principal angle between two 3D subspaces of R^d.
    fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = a.clone().qr().q();
        let qb = b.clone().qr().q();
        let s = (qa.transpose() * qb).singular_values();
        s.iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .clamp(-1.0, 1.0)
            .acos()
    }

    #[test]
    fn pca_recovers_subspace() {
        let mut rng = crate::rng::SeedStream::new(4).rng(0);
        let d = 8;
        let basis = DMatrix::from_fn(d, 3, |_, _| rng.gen_range(-1.0..1.0));
        let n = 200;
        let mut f = Array2::zeros((n, d));
        let mut coefs = vec![];
        for i in 0..n {
            let c = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.5..0.5),
            ];
            for j in 0..d {
                f[[i, j]] = 0.2 + (0..3).map(|k| c[k] * basis[(j, k)]).sum::<f64>();
            }
            coefs.push(c);
        }
        // Reconstruct the component directions from the covariance the same
        // way a reader would, then compare spans.
        let (_, ev) = pca_rgb(&f).unwrap();
        assert!(ev[0] >= ev[1] && ev[1] >= ev[2] && ev[2] > 0.0);
        let mean = f.mean_axis(ndarray::Axis(0)).unwrap();
        let c = &f - &mean;
        let cov = c.t().dot(&c) / n as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = DMatrix::from_fn(d, 3, |i, k| eig.eigenvectors[(i, order[k])]);
        assert!(principal_angle(&top, &basis) < 1e-6);
        assert!(eig.eigenvalues[order[3]].abs() < 1e-10);
    }

    #[test]
    fn pca_channel_order_nonincreasing() {
        let mut rng = crate::rng::SeedStream::new(5).rng(0);
        let f = Array2::from_shape_fn((100, 6), |(_, j)| rng.gen_range(-1.0..1.0) * (j + 1) as f64);
        let (rgb, ev) = pca_rgb(&f).unwrap();
        assert!(ev[0] >= ev[1] && ev[1] >= ev[2]);
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stability_curve_examples() {
        let mut log = TrainLog::default();
        assert!(stability_curve(&log).is_err());
        let rec = |epoch, probe| LogRecord {
            epoch,
            loss: 1.0,
            wall_ms: None,
            probe_l1: probe,
            psnr_val: None,
        };
        log.push(rec(100, None)).unwrap();
        log.push(rec(200, Some(0.25))).unwrap();
        assert_eq!(stability_curve(&log).unwrap(), vec![(200, 0.25)]);
        log.push(rec(300, Some(0.0))).unwrap();
        assert_eq!(
            stability_curve(&log).unwrap(),
            vec![(200, 0.25), (300, 0.0)]
        );
    }
}
