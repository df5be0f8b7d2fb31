//! Multiresolution hash-grid encoding.
//!
//! Level `l` overlays a grid of `N_l = floor(base · growth^l)` cells per axis
//! on the bounding box. A point reads the `F` features stored at each of the
//! 8 vertices of its cell and blends them trilinearly; the per-level results
//! are concatenated into an `L·F` vector. Levels whose `(N_l + 1)³` vertices
//! fit in the table are indexed directly, finer levels through a spatial hash.
//!
//! Only the ≤ 8·L entries touched by a point receive gradient from it, so the
//! backward pass produces a sparse update.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::geometry::Aabb;
use crate::{Error, Result, Vec3};

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];
const INIT_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Entries per level; a power of two.
    pub table_size: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub bounds: Aabb,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            features_per_level: 2,
            table_size: 1 << 16,
            base_resolution: 4,
            growth_factor: 1.5,
            bounds: Aabb::centered_cube(100.0).expect("valid default bounds"),
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 || self.base_resolution == 0 {
            return Err(Error::Config(
                "levels, features_per_level and base_resolution must be positive".into(),
            ));
        }
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 31 {
            return Err(Error::Config(format!(
                "table_size must be a power of two, got {}",
                self.table_size
            )));
        }
        if !(self.growth_factor > 1.0 && self.growth_factor.is_finite()) {
            return Err(Error::Config(format!(
                "growth_factor must be > 1, got {}",
                self.growth_factor
            )));
        }
        if self.level_resolution(self.levels - 1) >= u32::MAX as usize / 2 {
            return Err(Error::Config("finest level resolution is too large".into()));
        }
        self.bounds.validate()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Cells per axis at level `l`.
    pub fn level_resolution(&self, l: usize) -> usize {
        (self.base_resolution as f64 * self.growth_factor.powi(l as i32)).floor() as usize
    }

    /// True when level `l` is indexed without hashing.
    pub fn is_dense(&self, l: usize) -> bool {
        let side = self.level_resolution(l) as u128 + 1;
        side * side * side <= self.table_size as u128
    }

    pub fn num_parameters(&self) -> usize {
        self.levels * self.table_size * self.features_per_level
    }
}

/// Table index of vertex `cell` on level `l`.
pub fn hash_index(config: &HashGridConfig, l: usize, cell: [u32; 3]) -> Result<usize> {
    if l >= config.levels {
        return Err(Error::Domain(format!(
            "level {l} out of range 0..{}",
            config.levels
        )));
    }
    let n = config.level_resolution(l);
    if cell.iter().any(|&c| c as usize > n) {
        return Err(Error::Domain(format!(
            "cell {cell:?} outside level {l} lattice 0..={n}"
        )));
    }
    Ok(vertex_index(
        config.is_dense(l),
        n + 1,
        config.table_size,
        cell,
    ))
}

#[inline]
fn vertex_index(dense: bool, side: usize, table_size: usize, cell: [u32; 3]) -> usize {
    if dense {
        cell[0] as usize + side * (cell[1] as usize + side * cell[2] as usize)
    } else {
        let h = (cell[0] as u64).wrapping_mul(PRIMES[0])
            ^ (cell[1] as u64).wrapping_mul(PRIMES[1])
            ^ (cell[2] as u64).wrapping_mul(PRIMES[2]);
        (h as usize) & (table_size - 1)
    }
}

/// Per-channel keep flags over the `L·F` encoded features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    keep: Vec<bool>,
}

impl ChannelMask {
    pub fn all(dim: usize) -> Self {
        Self {
            keep: vec![true; dim],
        }
    }

    pub fn from_keep(keep: Vec<bool>) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::Domain(
                "channel mask must keep at least one channel".into(),
            ));
        }
        Ok(Self { keep })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn is_kept(&self, channel: usize) -> bool {
        self.keep[channel]
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_all(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

/// Vertex indices and trilinear weights of one encoded point, 8 per level.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeTrace {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

impl EncodeTrace {
    pub fn level_indices(&self, l: usize) -> &[u32] {
        &self.indices[l * 8..(l + 1) * 8]
    }

    pub fn level_weights(&self, l: usize) -> &[f64] {
        &self.weights[l * 8..(l + 1) * 8]
    }
}

/// Gradient on table entries: per level, table index → `F` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGrad {
    pub levels: Vec<BTreeMap<u32, Vec<f64>>>,
}

impl SparseGrad {
    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.is_empty())
    }

    /// Number of touched entries across all levels.
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn get(&self, level: usize, index: u32) -> Option<&[f64]> {
        self.levels.get(level)?.get(&index).map(|v| v.as_slice())
    }

    pub fn scale(&mut self, s: f64) {
        for level in &mut self.levels {
            for v in level.values_mut() {
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    pub fn add_assign(&mut self, other: &SparseGrad) {
        if self.levels.len() < other.levels.len() {
            self.levels.resize_with(other.levels.len(), BTreeMap::new);
        }
        for (mine, theirs) in self.levels.iter_mut().zip(&other.levels) {
            for (k, v) in theirs {
                let e = mine.entry(*k).or_insert_with(|| vec![0.0; v.len()]);
                e.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LevelInfo {
    resolution: usize,
    dense: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    info: Vec<LevelInfo>,
    /// Level-major, then entry, then feature.
    tables: Vec<f64>,
}

impl HashGrid {
    /// Tables drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn new<R: Rng + ?Sized>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dist = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE);
        let tables = (0..config.num_parameters())
            .map(|_| dist.sample(rng))
            .collect();
        Self::from_tables(config, tables)
    }

    pub fn from_tables(config: HashGridConfig, tables: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if tables.len() != config.num_parameters() {
            return Err(Error::shape(
                config.num_parameters(),
                tables.len(),
                "hash tables",
            ));
        }
        if tables.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("hash table entries must be finite".into()));
        }
        let info = (0..config.levels)
            .map(|l| LevelInfo {
                resolution: config.level_resolution(l),
                dense: config.is_dense(l),
            })
            .collect();
        Ok(Self {
            config,
            info,
            tables,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn tables(&self) -> &[f64] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [f64] {
        &mut self.tables
    }

    fn entry_offset(&self, level: usize, index: usize) -> usize {
        (level * self.config.table_size + index) * self.config.features_per_level
    }

    pub fn entry(&self, level: usize, index: usize) -> &[f64] {
        let o = self.entry_offset(level, index);
        &self.tables[o..o + self.config.features_per_level]
    }

    pub fn entry_mut(&mut self, level: usize, index: usize) -> &mut [f64] {
        let o = self.entry_offset(level, index);
        let f = self.config.features_per_level;
        &mut self.tables[o..o + f]
    }

    pub fn encode(&self, p: &Vec3, mask: &ChannelMask) -> Result<(Vec<f64>, EncodeTrace)> {
        let l = self.config.levels;
        let mut features = vec![0.0; self.output_dim()];
        let mut trace = EncodeTrace {
            indices: vec![0; l * 8],
            weights: vec![0.0; l * 8],
        };
        self.encode_into(
            p,
            mask,
            &mut features,
            &mut trace.indices,
            &mut trace.weights,
        )?;
        Ok((features, trace))
    }

    /// Allocation-free encode. `indices`/`weights` take `8·L` entries each.
    pub fn encode_into(
        &self,
        p: &Vec3,
        mask: &ChannelMask,
        features: &mut [f64],
        indices: &mut [u32],
        weights: &mut [f64],
    ) -> Result<()> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::Domain(format!(
                "cannot encode non-finite point {:?}",
                p.as_slice()
            )));
        }
        if mask.len() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), mask.len(), "channel mask"));
        }
        let bounds = &self.config.bounds;
        let extent = bounds.extent();
        let u = Vec3::from_fn(|i, _| ((p[i] - bounds.min[i]) / extent[i]).clamp(0.0, 1.0));
        let f = self.config.features_per_level;
        let t = self.config.table_size;

        for (l, info) in self.info.iter().enumerate() {
            let n = info.resolution;
            let mut cell = [0u32; 3];
            let mut frac = [0.0; 3];
            for i in 0..3 {
                let s = u[i] * n as f64;
                let c = (s.floor() as usize).min(n - 1);
                cell[i] = c as u32;
                frac[i] = s - c as f64;
            }
            let out = &mut features[l * f..(l + 1) * f];
            out.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..8 {
                let d = [(k & 1) as u32, ((k >> 1) & 1) as u32, ((k >> 2) & 1) as u32];
                let w = (0..3)
                    .map(|i| if d[i] == 1 { frac[i] } else { 1.0 - frac[i] })
                    .product::<f64>();
                let idx = vertex_index(
                    info.dense,
                    n + 1,
                    t,
                    [cell[0] + d[0], cell[1] + d[1], cell[2] + d[2]],
                );
                indices[l * 8 + k] = idx as u32;
                weights[l * 8 + k] = w;
                let o = (l * t + idx) * f;
                for (j, v) in out.iter_mut().enumerate() {
                    *v += w * self.tables[o + j];
                }
            }
            for (j, v) in out.iter_mut().enumerate() {
                if !mask.is_kept(l * f + j) {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    fn check_trace(&self, indices: &[u32], weights: &[f64]) -> Result<()> {
        let expected = self.config.levels * 8;
        if indices.len() != expected || weights.len() != expected {
            return Err(Error::Consistency(format!(
                "trace holds {} entries, grid expects {expected}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices
            .iter()
            .find(|&&i| i as usize >= self.config.table_size)
        {
            return Err(Error::Consistency(format!(
                "trace index {bad} outside table of size {}",
                self.config.table_size
            )));
        }
        Ok(())
    }

    pub fn encode_backward(
        &self,
        trace: &EncodeTrace,
        grad_features: &[f64],
        mask: &ChannelMask,
    ) -> Result<SparseGrad> {
        self.check_trace(&trace.indices, &trace.weights)?;
        if grad_features.len() != self.output_dim() || mask.len() != self.output_dim() {
            return Err(Error::shape(
                self.output_dim(),
                grad_features.len(),
                "encode grad_features",
            ));
        }
        let f = self.config.features_per_level;
        let mut out = SparseGrad {
            levels: vec![BTreeMap::new(); self.config.levels],
        };
        for l in 0..self.config.levels {
            let g: Vec<f64> = (0..f)
                .map(|j| {
                    if mask.is_kept(l * f + j) {
                        grad_features[l * f + j]
                    } else {
                        0.0
                    }
                })
                .collect();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (&idx, &w) in trace.level_indices(l).iter().zip(trace.level_weights(l)) {
                if w == 0.0 {
                    continue;
                }
                let e = out.levels[l].entry(idx).or_insert_with(|| vec![0.0; f]);
                e.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
            }
        }
        Ok(out)
    }

    /// Adds the backward of one encoded point into a dense gradient shaped
    /// like the tables.
    pub fn scatter_backward(
        &self,
        indices: &[u32],
        weights: &[f64],
        grad_features: &[f64],
        mask: &ChannelMask,
        dense: &mut [f64],
    ) -> Result<()> {
        self.check_trace(indices, weights)?;
        if dense.len() != self.tables.len() {
            return Err(Error::shape(
                self.tables.len(),
                dense.len(),
                "dense grid gradient",
            ));
        }
        let f = self.config.features_per_level;
        let t = self.config.table_size;
        for l in 0..self.config.levels {
            let g = &grad_features[l * f..(l + 1) * f];
            for k in 0..8 {
                let w = weights[l * 8 + k];
                if w == 0.0 {
                    continue;
                }
                let o = (l * t + indices[l * 8 + k] as usize) * f;
                for j in 0..f {
                    if mask.is_kept(l * f + j) {
                        dense[o + j] += w * g[j];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Straight segment along which channels are sampled for spectral analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeLine {
    pub start: Vec3,
    pub end: Vec3,
    pub samples: usize,
}

impl ProbeLine {
    pub const MIN_SAMPLES: usize = 64;

    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        let n = self.samples;
        (0..n).map(move |k| self.start + (self.end - self.start) * (k as f64 / (n - 1) as f64))
    }
}

/// Chords through random interior points along random directions.
pub fn random_probe_lines<R: Rng + ?Sized>(
    bounds: &Aabb,
    count: usize,
    samples: usize,
    rng: &mut R,
) -> Vec<ProbeLine> {
    let mut lines = Vec::with_capacity(count);
    let min_len = bounds.extent().min() * 0.25;
    while lines.len() < count {
        let p = Vec3::from_fn(|i, _| rng.gen_range(bounds.min[i]..bounds.max[i]));
        let d = loop {
            let v = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let (Some((_, fwd)), Some((_, back))) =
            (bounds.intersect(&p, &d), bounds.intersect(&p, &(-d)))
        else {
            continue;
        };
        if fwd + back < min_len {
            continue;
        }
        lines.push(ProbeLine {
            start: p - d * back,
            end: p + d * fwd,
            samples,
        });
    }
    lines
}

/// Fraction of a signal's AC energy above half the Nyquist frequency.
///
/// The mean is removed first; DFT bin `j` is folded to frequency
/// `min(j, n - j)` and counts as high when that exceeds `n / 4`. A signal
/// with no AC energy scores 0.
pub fn high_frequency_ratio(signal: &[f64]) -> f64 {
    let n = signal.len();
    if n < 2 {
        return 0.0;
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .map(|&v| Complex::new(v - mean, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut high, mut total) = (0.0, 0.0);
    for (j, c) in buf.iter().enumerate() {
        let e = c.norm_sqr();
        total += e;
        if j.min(n - j) as f64 > n as f64 / 4.0 {
            high += e;
        }
    }
    // Round-off of a constant signal leaves ~1e-30 energy; treat as silent.
    let scale = signal
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    if total <= scale * 1e-24 {
        0.0
    } else {
        high / total
    }
}

/// Mean high-frequency ratio of every channel along the probe lines.
pub fn channel_noise_ratios(grid: &HashGrid, probe_lines: &[ProbeLine]) -> Result<Vec<f64>> {
    if probe_lines.is_empty() {
        return Err(Error::Domain("at least one probe line is required".into()));
    }
    let dim = grid.output_dim();
    let all = ChannelMask::all(dim);
    let mut ratio_sum = vec![0.0; dim];
    for line in probe_lines {
        if line.samples < ProbeLine::MIN_SAMPLES {
            return Err(Error::Domain(format!(
                "probe line needs at least {} samples, got {}",
                ProbeLine::MIN_SAMPLES,
                line.samples
            )));
        }
        if !((line.end - line.start).norm() > 0.0) {
            return Err(Error::Domain("probe line has zero length".into()));
        }
        let mut signals = vec![Vec::with_capacity(line.samples); dim];
        for p in line.points() {
            let (feat, _) = grid.encode(&p, &all)?;
            for (s, v) in signals.iter_mut().zip(feat) {
                s.push(v);
            }
        }
        for (acc, s) in ratio_sum.iter_mut().zip(&signals) {
            *acc += high_frequency_ratio(s);
        }
    }
    Ok(ratio_sum
        .iter()
        .map(|r| r / probe_lines.len() as f64)
        .collect())
}

/// Masks every channel whose mean high-frequency ratio along the probe lines
/// exceeds `threshold`. If every channel would be masked, the one with the
/// lowest ratio is kept.
pub fn detect_noisy_channels(
    grid: &HashGrid,
    probe_lines: &[ProbeLine],
    threshold: f64,
) -> Result<ChannelMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let ratios = channel_noise_ratios(grid, probe_lines)?;
    let mut keep: Vec<bool> = ratios.iter().map(|&r| r <= threshold).collect();
    if !keep.iter().any(|&k| k) {
        let best = ratios
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        keep[best] = true;
    }
    ChannelMask::from_keep(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn cfg(
        levels: usize,
        base: usize,
        growth: f64,
        table_size: usize,
        extent: f64,
    ) -> HashGridConfig {
        HashGridConfig {
            levels,
            features_per_level: 2,
            table_size,
            base_resolution: base,
            growth_factor: growth,
            bounds: Aabb::new(Vec3::zeros(), Vec3::repeat(extent)).unwrap(),
        }
    }

    fn random_grid(c: HashGridConfig, seed: u64) -> HashGrid {
        let mut rng = SeedStream::new(seed).rng(0);
        let n = c.num_parameters();
        let tables = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        HashGrid::from_tables(c, tables).unwrap()
    }

    #[test]
    fn level_resolutions() {
        let c = cfg(4, 4, 2.0, 1 << 12, 1.0);
        assert_eq!(c.level_resolution(0), 4);
        assert_eq!(c.level_resolution(3), 32);
        let c = cfg(3, 16, 1.5, 1 << 12, 1.0);
        assert_eq!(c.level_resolution(2), 36);
        let d = HashGridConfig::default();
        let res: Vec<usize> = (0..d.levels).map(|l| d.level_resolution(l)).collect();
        assert!(res.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, 4, 2.0, 1000, 1.0).validate().is_err());
        assert!(cfg(2, 4, 1.0, 1024, 1.0).validate().is_err());
        assert!(cfg(2, 4, 2.0, 1024, 1.0).validate().is_ok());
    }

    #[test]
    fn direct_indexing() {
        let c = cfg(1, 4, 2.0, 1 << 12, 1.0);
        assert!(c.is_dense(0));
        assert_eq!(hash_index(&c, 0, [0, 0, 0]).unwrap(), 0);
        assert_eq!(hash_index(&c, 0, [1, 2, 3]).unwrap(), 86);
        assert!(matches!(
            hash_index(&c, 0, [5, 0, 0]),
            Err(Error::Domain(_))
        ));
        assert!(hash_index(&c, 1, [0, 0, 0]).is_err());
    }

    #[test]
    fn dense_levels_never_alias() {
        let c = cfg(3, 3, 1.5, 1 << 10, 1.0);
        for l in 0..3 {
            assert!(c.is_dense(l));
            let n = c.level_resolution(l) as u32;
            let mut seen = std::collections::HashSet::new();
            for x in 0..=n {
                for y in 0..=n {
                    for z in 0..=n {
                        assert!(seen.insert(hash_index(&c, l, [x, y, z]).unwrap()));
                    }
                }
            }
        }
    }

    #[test]
    fn hashed_level_matches_reference() {
        // Independent reference: exact 128-bit products, then XOR and mod.
        let reference = |c: [u32; 3], t: u128| -> usize {
            let a = c[0] as u128;
            let b = (c[1] as u128) * 2_654_435_761u128;
            let d = (c[2] as u128) * 805_459_861u128;
            ((a ^ b ^ d) % t) as usize
        };
        let c = cfg(2, 40, 2.0, 1 << 10, 1.0);
        assert!(!c.is_dense(0));
        for cell in [[1u32, 2, 3], [40, 0, 17], [7, 39, 40], [0, 0, 0]] {
            assert_eq!(hash_index(&c, 0, cell).unwrap(), reference(cell, 1 << 10));
        }
        // 17 ^ (5·2654435761) ^ (9·805459861) mod 1024, worked by hand.
        assert_eq!(
            hash_index(&c, 1, [17, 5, 9]).unwrap(),
            reference([17, 5, 9], 1024)
        );
    }

    #[test]
    fn vertex_point_reads_single_entry() {
        let c = cfg(2, 4, 2.0, 1 << 12, 8.0);
        let g = random_grid(c.clone(), 1);
        let mask = ChannelMask::all(4);
        // (2, 4, 6) mm is a vertex on both levels (cell size 2 and 1).
        let (feat, trace) = g.encode(&Vec3::new(2.0, 4.0, 6.0), &mask).unwrap();
        for l in 0..2 {
            let n = c.level_resolution(l) as u32;
            let s = n / 4;
            let idx = hash_index(&c, l, [s, 2 * s, 3 * s]).unwrap();
            assert_eq!(&feat[l * 2..l * 2 + 2], g.entry(l, idx));
            let w = trace.level_weights(l);
            assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(w.iter().filter(|&&x| x == 0.0).count(), 7);
        }
    }

    #[test]
    fn cell_centre_is_corner_mean() {
        let c = cfg(1, 4, 2.0, 1 << 12, 4.0);
        let g = random_grid(c.clone(), 2);
        let (feat, trace) = g
            .encode(&Vec3::new(1.5, 2.5, 0.5), &ChannelMask::all(2))
            .unwrap();
        assert!(trace.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15));
        let mut mean = [0.0; 2];
        for k in 0..8u32 {
            let idx = hash_index(&c, 0, [1 + (k & 1), 2 + ((k >> 1) & 1), (k >> 2) & 1]).unwrap();
            mean[0] += g.entry(0, idx)[0] / 8.0;
            mean[1] += g.entry(0, idx)[1] / 8.0;
        }
        assert!((feat[0] - mean[0]).abs() < 1e-15 && (feat[1] - mean[1]).abs() < 1e-15);
    }

    /// Nested 1-D lerps: along x on four edges, then y, then z.
    fn nested_lerp(g: &HashGrid, p: &Vec3) -> Vec<f64> {
        let c = g.config();
        let mut out = vec![];
        for l in 0..c.levels {
            let n = c.level_resolution(l);
            let s: Vec<f64> = (0..3)
                .map(|i| (p[i] - c.bounds.min[i]) / c.bounds.extent()[i] * n as f64)
                .collect();
            let base: Vec<u32> = s
                .iter()
                .map(|v| (v.floor() as usize).min(n - 1) as u32)
                .collect();
            let fr: Vec<f64> = (0..3).map(|i| s[i] - base[i] as f64).collect();
            for j in 0..c.features_per_level {
                let v = |dx: u32, dy: u32, dz: u32| {
                    let idx = hash_index(c, l, [base[0] + dx, base[1] + dy, base[2] + dz]).unwrap();
                    g.entry(l, idx)[j]
                };
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let x00 = lerp(v(0, 0, 0), v(1, 0, 0), fr[0]);
                let x10 = lerp(v(0, 1, 0), v(1, 1, 0), fr[0]);
                let x01 = lerp(v(0, 0, 1), v(1, 0, 1), fr[0]);
                let x11 = lerp(v(0, 1, 1), v(1, 1, 1), fr[0]);
                let y0 = lerp(x00, x10, fr[1]);
                let y1 = lerp(x01, x11, fr[1]);
                out.push(lerp(y0, y1, fr[2]));
            }
        }
        out
    }

    #[test]
    fn encode_matches_nested_lerp() {
        let c = cfg(5, 3, 1.7, 1 << 10, 10.0);
        let g = random_grid(c, 3);
        let mut rng = SeedStream::new(4).rng(0);
        for _ in 0..500 {
            let p = Vec3::from_fn(|_, _| rng.gen_range(0.0..10.0));
            let (feat, _) = g.encode(&p, &ChannelMask::all(10)).unwrap();
            let oracle = nested_lerp(&g, &p);
            for (a, b) in feat.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_rejects_non_finite_and_clamps_outside() {
        let g = random_grid(cfg(2, 4, 2.0, 1 << 10, 1.0), 0);
        let m = ChannelMask::all(4);
        assert!(matches!(
            g.encode(&Vec3::new(f64::NAN, 0.0, 0.0), &m),
            Err(Error::Domain(_))
        ));
        let (a, _) = g.encode(&Vec3::new(1.0 + 1e-9, 0.5, 0.5), &m).unwrap();
        let (b, _) = g.encode(&Vec3::new(1.0, 0.5, 0.5), &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn continuity_across_faces() {
        let c = cfg(4, 4, 1.6, 1 << 10, 12.0);
        let g = random_grid(c.clone(), 5);
        let m = ChannelMask::all(8);
        let mut rng = SeedStream::new(6).rng(0);
        for _ in 0..200 {
            let l = rng.gen_range(0..4);
            let n = c.level_resolution(l);
            let cell = 12.0 / n as f64;
            let face = rng.gen_range(1..n) as f64 * cell;
            let axis = rng.gen_range(0..3);
            let mut p = Vec3::from_fn(|_, _| rng.gen_range(0.5..11.5));
            p[axis] = face - 0.5e-9 * cell;
            let mut q = p;
            q[axis] = face + 0.5e-9 * cell;
            let (a, _) = g.encode(&p, &m).unwrap();
            let (b, _) = g.encode(&q, &m).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let c = cfg(2, 4, 2.0, 1 << 12, 8.0);
        let g = random_grid(c, 7);
        let m = ChannelMask::all(4);
        let (_, trace) = g.encode(&Vec3::new(3.3, 1.2, 7.1), &m).unwrap();
        assert!(g.encode_backward(&trace, &[0.0; 4], &m).unwrap().is_empty());

        let (_, trace) = g.encode(&Vec3::new(2.0, 4.0, 6.0), &m).unwrap();
        let sg = g
            .encode_backward(&trace, &[1.0, -2.0, 0.5, 3.0], &m)
            .unwrap();
        assert_eq!(sg.levels[0].len(), 1);
        assert_eq!(sg.levels[1].len(), 1);
        assert_eq!(sg.levels[0].values().next().unwrap(), &vec![1.0, -2.0]);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let g = random_grid(cfg(2, 4, 2.0, 1 << 10, 8.0), 7);
        let m = ChannelMask::all(4);
        let (_, mut trace) = g.encode(&Vec3::new(3.3, 1.2, 7.1), &m).unwrap();
        trace.indices[3] = 1 << 10;
        assert!(matches!(
            g.encode_backward(&trace, &[1.0; 4], &m),
            Err(Error::Consistency(_))
        ));
        let short = EncodeTrace {
            indices: vec![0; 8],
            weights: vec![0.0; 8],
        };
        assert!(matches!(
            g.encode_backward(&short, &[1.0; 4], &m),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences_on_touched_entries() {
        let c = cfg(4, 3, 2.0, 1 << 8, 6.0);
        let g = random_grid(c.clone(), 8);
        let m = ChannelMask::all(8);
        let mut rng = SeedStream::new(9).rng(0);
        for _ in 0..20 {
            let p = Vec3::from_fn(|_, _| rng.gen_range(0.0..6.0));
            let probe: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |grid: &HashGrid| -> f64 {
                grid.encode(&p, &m)
                    .unwrap()
                    .0
                    .iter()
                    .zip(&probe)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (_, trace) = g.encode(&p, &m).unwrap();
            let sg = g.encode_backward(&trace, &probe, &m).unwrap();
            for (l, level) in sg.levels.iter().enumerate() {
                for (&idx, grad) in level {
                    for j in 0..2 {
                        let h = 1e-6;
                        let mut gp = g.clone();
                        gp.entry_mut(l, idx as usize)[j] += h;
                        let mut gm = g.clone();
                        gm.entry_mut(l, idx as usize)[j] -= h;
                        let num = (loss(&gp) - loss(&gm)) / (2.0 * h);
                        assert!((num - grad[j]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_encode() {
        let c = cfg(4, 3, 2.0, 1 << 8, 6.0);
        let g = random_grid(c.clone(), 10);
        let m = ChannelMask::all(8);
        let mut rng = SeedStream::new(11).rng(0);
        for _ in 0..50 {
            let p = Vec3::from_fn(|_, _| rng.gen_range(0.0..6.0));
            let gvec: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, trace) = g.encode(&p, &m).unwrap();
            let sg = g.encode_backward(&trace, &gvec, &m).unwrap();
            // Perturbation u on touched entries; encode is linear in the
            // tables, so J·u is the encoding of a grid holding u.
            let mut u = HashGrid::from_tables(c.clone(), vec![0.0; c.num_parameters()]).unwrap();
            let mut rhs = 0.0;
            for l in 0..c.levels {
                for &idx in trace.level_indices(l) {
                    let e = u.entry_mut(l, idx as usize);
                    if e[0] == 0.0 {
                        e[0] = rng.gen_range(-1.0..1.0);
                        e[1] = rng.gen_range(-1.0..1.0);
                    }
                }
                for (&idx, grad) in &sg.levels[l] {
                    let e = u.entry(l, idx as usize);
                    rhs += grad[0] * e[0] + grad[1] * e[1];
                }
            }
            let (ju, _) = u.encode(&p, &m).unwrap();
            let lhs: f64 = gvec.iter().zip(&ju).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_channels_are_silent() {
        let c = cfg(3, 4, 2.0, 1 << 10, 8.0);
        let g = random_grid(c, 12);
        let mut keep = vec![true; 6];
        keep[1] = false;
        keep[4] = false;
        let m = ChannelMask::from_keep(keep).unwrap();
        let (feat, trace) = g.encode(&Vec3::new(1.1, 5.2, 3.3), &m).unwrap();
        assert_eq!(feat[1], 0.0);
        assert_eq!(feat[4], 0.0);
        assert_ne!(feat[0], 0.0);
        let sg = g
            .encode_backward(&trace, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0], &m)
            .unwrap();
        assert!(sg.is_empty());
        let mut dense = vec![0.0; g.tables().len()];
        g.scatter_backward(
            &trace.indices,
            &trace.weights,
            &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            &m,
            &mut dense,
        )
        .unwrap();
        assert!(dense.iter().all(|&v| v == 0.0));
        assert!(ChannelMask::from_keep(vec![false; 3]).is_err());
    }

    #[test]
    fn scatter_matches_sparse_backward() {
        let c = cfg(4, 3, 2.0, 1 << 8, 6.0);
        let g = random_grid(c.clone(), 13);
        let m = ChannelMask::all(8);
        let (_, trace) = g.encode(&Vec3::new(1.0, 2.5, 4.2), &m).unwrap();
        let gf = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.0, 1.1];
        let sg = g.encode_backward(&trace, &gf, &m).unwrap();
        let mut dense = vec![0.0; g.tables().len()];
        g.scatter_backward(&trace.indices, &trace.weights, &gf, &m, &mut dense)
            .unwrap();
        for (l, level) in sg.levels.iter().enumerate() {
            for (&idx, v) in level {
                let o = (l * c.table_size + idx as usize) * 2;
                assert!((dense[o] - v[0]).abs() < 1e-15 && (dense[o + 1] - v[1]).abs() < 1e-15);
            }
        }
        let touched = dense.iter().filter(|&&v| v != 0.0).count();
        assert!(touched <= 2 * sg.len());
    }

    proptest! {
        #[test]
        fn trilinear_weights_form_partition_of_unity(x in 0.0..10.0f64, y in 0.0..10.0f64, z in 0.0..10.0f64) {
            let g = random_grid(cfg(6, 2, 1.9, 1 << 10, 10.0), 1);
            let (_, trace) = g.encode(&Vec3::new(x, y, z), &ChannelMask::all(12)).unwrap();
            for l in 0..6 {
                let w = trace.level_weights(l);
                prop_assert!(w.iter().all(|&v| v >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_ratio_closed_forms() {
        assert_eq!(high_frequency_ratio(&[0.7; 128]), 0.0);
        let cosine: Vec<f64> = (0..128)
            .map(|k| (2.0 * PI * k as f64 / 128.0).cos())
            .collect();
        assert!(high_frequency_ratio(&cosine) < 1e-20);
        let nyquist: Vec<f64> = (0..128)
            .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert!((high_frequency_ratio(&nyquist) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detection_on_constructed_channels() {
        // One dense level with cell size 1 mm, so samples at integer x land
        // exactly on vertices.
        let c = HashGridConfig {
            levels: 1,
            features_per_level: 3,
            table_size: 1 << 18,
            base_resolution: 63,
            growth_factor: 2.0,
            bounds: Aabb::new(Vec3::zeros(), Vec3::repeat(63.0)).unwrap(),
        };
        let mut g = HashGrid::from_tables(c.clone(), vec![0.0; c.num_parameters()]).unwrap();
        for x in 0..=63u32 {
            for y in 0..=63u32 {
                for z in 0..=63u32 {
                    let idx = hash_index(&c, 0, [x, y, z]).unwrap();
                    let e = g.entry_mut(0, idx);
                    e[0] = 0.25;
                    e[1] = (2.0 * PI * x as f64 / 63.0).cos();
                    e[2] = if x % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let lines: Vec<ProbeLine> = [10.0, 20.0, 40.0]
            .iter()
            .map(|&y| ProbeLine {
                start: Vec3::new(0.0, y, 31.0),
                end: Vec3::new(63.0, y, 31.0),
                samples: 64,
            })
            .collect();
        let mask = detect_noisy_channels(&g, &lines, 0.5).unwrap();
        assert_eq!(mask.keep(), &[true, true, false]);
        let strict = detect_noisy_channels(&g, &lines, 0.999).unwrap();
        assert_eq!(strict.keep(), &[true, true, false]);

        let bad = [ProbeLine {
            start: Vec3::repeat(5.0),
            end: Vec3::repeat(5.0),
            samples: 64,
        }];
        assert!(matches!(
            detect_noisy_channels(&g, &bad, 0.5),
            Err(Error::Domain(_))
        ));
        let short = [ProbeLine {
            samples: 10,
            ..lines[0]
        }];
        assert!(detect_noisy_channels(&g, &short, 0.5).is_err());
    }

    #[test]
    fn random_probe_lines_stay_in_bounds() {
        let b = Aabb::centered_cube(100.0).unwrap();
        let mut rng = SeedStream::new(1).rng(0);
        let lines = random_probe_lines(&b, 16, 128, &mut rng);
        assert_eq!(lines.len(), 16);
        for l in &lines {
            let grow = Aabb::new(b.min - Vec3::repeat(1e-9), b.max + Vec3::repeat(1e-9)).unwrap();
            assert!(grow.contains(&l.start) && grow.contains(&l.end));
            assert!((l.end - l.start).norm() >= 25.0);
        }
    }
}
