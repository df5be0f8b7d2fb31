//! File formats: JSON sidecar + raw little-endian data for volumes and
//! projection stacks, PNG exports, and small CSV/JSON helpers.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::ScannerGeometry;
use crate::metrics::PcaMap;
use crate::phantom::VoxelVolume;
use crate::projector::{ProjectionImage, ProjectionStack};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ByteOrder {
    #[default]
    LE,
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype, expected: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() != expected * dtype.size() {
        return Err(Error::Shape(format!(
            "{}: expected {} bytes for {expected} {dtype:?} values, found {}",
            path.display(),
            expected * dtype.size(),
            bytes.len()
        )));
    }
    Ok(match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Consistency(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!(
            "{} (line {}, column {}): {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Raw data file that sits next to a sidecar: `name.json` -> `name.raw`.
pub fn data_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

fn data_file_name(sidecar: &Path) -> String {
    data_path(sidecar)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn resolve_data(sidecar: &Path, name: &str) -> PathBuf {
    sidecar
        .parent()
        .map(|d| d.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: Dtype,
    pub byte_order: ByteOrder,
    pub data_file: String,
}

/// Writes `sidecar` (JSON) and its `.raw` companion, x-fastest.
pub fn write_volume(volume: &VoxelVolume, sidecar: &Path, dtype: Dtype) -> Result<()> {
    let meta = VolumeSidecar {
        dims: volume.dims(),
        spacing: volume.spacing().into(),
        origin: volume.origin().into(),
        dtype,
        byte_order: ByteOrder::LE,
        data_file: data_file_name(sidecar),
    };
    write_bytes(&data_path(sidecar), &encode(volume.data(), dtype))?;
    write_json(sidecar, &meta)
}

pub fn read_volume(sidecar: &Path) -> Result<VoxelVolume> {
    let meta: VolumeSidecar = read_json(sidecar)?;
    let path = resolve_data(sidecar, &meta.data_file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n = meta.dims.iter().product();
    let data = decode(&bytes, meta.dtype, n, &path)?;
    VoxelVolume::new(
        meta.dims,
        Vec3::from(meta.spacing),
        Vec3::from(meta.origin),
        data,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSidecar {
    pub geometry: ScannerGeometry,
    pub views: usize,
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub byte_order: ByteOrder,
    pub data_file: String,
}

/// Writes a projection stack: pixel-major per view, views concatenated.
pub fn write_stack(stack: &ProjectionStack, sidecar: &Path, dtype: Dtype) -> Result<()> {
    let g = &stack.geometry;
    let meta = StackSidecar {
        geometry: g.clone(),
        views: stack.num_views(),
        rows: g.detector_rows,
        cols: g.detector_cols,
        dtype,
        byte_order: ByteOrder::LE,
        data_file: data_file_name(sidecar),
    };
    let values: Vec<f64> = stack
        .images
        .iter()
        .flat_map(|im| im.pixels.iter().copied())
        .collect();
    write_bytes(&data_path(sidecar), &encode(&values, dtype))?;
    write_json(sidecar, &meta)
}

pub fn read_stack(sidecar: &Path) -> Result<ProjectionStack> {
    let meta: StackSidecar = read_json(sidecar)?;
    let g = meta.geometry;
    if meta.rows != g.detector_rows || meta.cols != g.detector_cols || meta.views != g.num_views {
        return Err(Error::Config(format!(
            "{}: sidecar dims disagree with its geometry",
            sidecar.display()
        )));
    }
    let path = resolve_data(sidecar, &meta.data_file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let per_view = meta.rows * meta.cols;
    let data = decode(&bytes, meta.dtype, per_view * meta.views, &path)?;
    let images = data
        .chunks_exact(per_view.max(1))
        .take(meta.views)
        .enumerate()
        .map(|(view, px)| ProjectionImage {
            view,
            rows: meta.rows,
            cols: meta.cols,
            pixels: px.to_vec(),
        })
        .collect();
    ProjectionStack::new(g, images)
}

fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
}

fn save_png(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img(path).map_err(Error::from)
}

/// 8-bit grayscale image, window `[0, max]` unless given.
pub fn gray_png(
    values: &[f64],
    width: usize,
    height: usize,
    window: Option<(f64, f64)>,
    path: &Path,
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(width * height, values.len(), "image pixels"));
    }
    let (lo, hi) = window.unwrap_or((0.0, values.iter().copied().fold(0.0, f64::max)));
    let px = values.iter().map(|&v| to_u8(v, lo, hi)).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, px).expect("sized buffer");
    save_png(|p| img.save(p), path)
}

pub fn view_png(image: &ProjectionImage, path: &Path) -> Result<()> {
    gray_png(&image.pixels, image.cols, image.rows, None, path)
}

/// Axial (constant z) slice `k` of a volume.
pub fn slice_png(volume: &VoxelVolume, k: usize, path: &Path) -> Result<()> {
    let [nx, ny, nz] = volume.dims();
    if k >= nz {
        return Err(Error::Domain(format!("slice {k} outside 0..{nz}")));
    }
    let plane = &volume.data()[k * nx * ny..(k + 1) * nx * ny];
    let (_, hi) = volume.min_max();
    gray_png(plane, nx, ny, Some((0.0, hi)), path)
}

pub fn pca_png(map: &PcaMap, path: &Path) -> Result<()> {
    let px = map.rgb.iter().map(|&v| to_u8(v, 0.0, 1.0)).collect();
    let img = RgbImage::from_raw(map.cols as u32, map.rows as u32, px).expect("sized buffer");
    save_png(|p| img.save(p), path)
}

/// Line plot of a series on a white canvas, for quick inspection.
pub fn curve_png(series: &[(u64, f64)], path: &Path) -> Result<()> {
    let (w, h) = (400u32, 200u32);
    let mut img = GrayImage::from_pixel(w, h, image::Luma([255]));
    if let (Some(first), Some(last)) = (series.first(), series.last()) {
        let hi = series.iter().map(|p| p.1).fold(0.0, f64::max);
        let span = (last.0 - first.0).max(1) as f64;
        let pt = |&(e, v): &(u64, f64)| {
            let x = (e - first.0) as f64 / span * (w - 1) as f64;
            let y = if hi > 0.0 { v / hi } else { 0.0 };
            (x, (1.0 - y) * (h - 1) as f64)
        };
        for pair in series.windows(2) {
            let (a, b) = (pt(&pair[0]), pt(&pair[1]));
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                img.put_pixel(x.round() as u32, y.round() as u32, image::Luma([0]));
            }
        }
        if series.len() == 1 {
            let (x, y) = pt(&series[0]);
            img.put_pixel(x.round() as u32, y.round() as u32, image::Luma([0]));
        }
    }
    save_png(|p| img.save(p), path)
}

pub fn curve_csv(series: &[(u64, f64)]) -> String {
    let mut s = String::from("epoch,probe_l1\n");
    for (e, v) in series {
        s.push_str(&format!("{e},{v}\n"));
    }
    s
}
