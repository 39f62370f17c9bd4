//! Volumes, their on-disk format, preprocessing and patch machinery.
//!
//! Voxels are stored x-fastest: index `x + nx * (y + ny * z)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::BoundingBox;
use crate::error::{Error, Result};

pub const AIR_HU: f32 = -1000.0;

/// Which end of the slice axis points toward the top of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CranialAxis {
    #[serde(rename = "+z")]
    PlusZ,
    #[serde(rename = "-z")]
    MinusZ,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
    pub cranial_axis: Option<CranialAxis>,
    pub volume_id: String,
}

impl Volume {
    pub fn new(
        volume_id: impl Into<String>,
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            cranial_axis: None,
            volume_id: volume_id.into(),
        })
    }

    pub fn filled(volume_id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(volume_id, dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn with_cranial_axis(mut self, axis: CranialAxis) -> Self {
        self.cranial_axis = Some(axis);
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Value at signed coordinates, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64, z: i64) -> Option<f32> {
        let [nx, ny, nz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            return None;
        }
        Some(self.get(x as usize, y as usize, z as usize))
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] < self.dims[a] as f64)
    }

    fn with_data(&self, dims: [usize; 3], data: Vec<f32>) -> Volume {
        Volume {
            dims,
            spacing: self.spacing,
            data,
            cranial_axis: self.cranial_axis,
            volume_id: self.volume_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cranial_axis: Option<CranialAxis>,
    volume_id: String,
}

/// Paths of the raw/sidecar pair for a base path such as `dir/case01`.
pub fn volume_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    let s = s
        .strip_suffix(".vol.json")
        .or_else(|| s.strip_suffix(".vol.raw"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{s}.vol.raw")),
        PathBuf::from(format!("{s}.vol.json")),
    )
}

/// Reads `<base>.vol.raw` (little-endian int16, x-fastest) and its JSON
/// sidecar `<base>.vol.json`. `base` may also name either file directly.
pub fn read_volume(base: &Path) -> Result<Volume> {
    let (raw_path, json_path) = volume_paths(base);
    let header_text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: Sidecar = serde_json::from_str(&header_text).map_err(|e| Error::Format {
        what: "volume header",
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected: usize = header.dims.iter().product();
    if bytes.len() % 2 != 0 || bytes.len() / 2 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() / 2,
        });
    }
    let data = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
        .collect();
    let mut v = Volume::new(header.volume_id, header.dims, header.spacing_mm, data)?;
    v.cranial_axis = header.cranial_axis;
    Ok(v)
}

/// Writes the raw/sidecar pair. Every value must be an integer in the
/// int16 range so that reading back is bit-exact.
pub fn write_volume(v: &Volume, base: &Path) -> Result<()> {
    let (raw_path, json_path) = volume_paths(base);
    let mut bytes = Vec::with_capacity(v.data.len() * 2);
    for (index, &value) in v.data.iter().enumerate() {
        if value.fract() != 0.0 || value < i16::MIN as f32 || value > i16::MAX as f32 {
            return Err(Error::NotRepresentable { index, value });
        }
        bytes.extend_from_slice(&(value as i16).to_le_bytes());
    }
    let header = Sidecar {
        dims: v.dims,
        spacing_mm: v.spacing,
        cranial_axis: v.cranial_axis,
        volume_id: v.volume_id.clone(),
    };
    let text = serde_json::to_string_pretty(&header).expect("sidecar serializes");
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HuWindow {
    pub min: f32,
    pub max: f32,
}

impl Default for HuWindow {
    fn default() -> Self {
        HuWindow {
            min: -1000.0,
            max: 1000.0,
        }
    }
}

impl HuWindow {
    /// Maps `[min, max]` linearly onto `[-1, 1]` after clamping.
    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        let half = 0.5 * (self.max - self.min);
        let mid = 0.5 * (self.max + self.min);
        (hu.clamp(self.min, self.max) - mid) / half
    }
}

/// Clamps to [-1000, 1000] HU and scales to [-1, 1].
pub fn normalize_hu(v: &Volume) -> Volume {
    normalize_with(v, HuWindow::default())
}

pub fn normalize_with(v: &Volume, window: HuWindow) -> Volume {
    v.with_data(v.dims, v.data.iter().map(|&x| window.apply(x)).collect())
}

/// Range of z slices kept by [`truncate_cranial`].
pub fn cranial_slab(v: &Volume, max_extent_mm: f64) -> Result<std::ops::Range<usize>> {
    let axis = v.cranial_axis.ok_or(Error::MissingCranialAxis)?;
    if !(max_extent_mm > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "max extent must be positive, got {max_extent_mm}"
        )));
    }
    let nz = v.dims[2];
    // slack for quotients such as 200 / 0.8 landing just under an integer
    let keep = ((max_extent_mm / v.spacing[2]) + 1e-9).floor() as usize;
    let keep = keep.clamp(1, nz);
    Ok(match axis {
        CranialAxis::PlusZ => nz - keep..nz,
        CranialAxis::MinusZ => 0..keep,
    })
}

/// Keeps at most `max_extent_mm` of slices, counted from the cranial end.
pub fn truncate_cranial(v: &Volume, max_extent_mm: f64) -> Result<Volume> {
    let slab = cranial_slab(v, max_extent_mm)?;
    if slab.len() == v.dims[2] {
        return Ok(v.clone());
    }
    let plane = v.dims[0] * v.dims[1];
    let data = v.data[slab.start * plane..slab.end * plane].to_vec();
    Ok(v.with_data([v.dims[0], v.dims[1], slab.len()], data))
}

/// A box-shaped region of a parent volume. The origin may be negative or the
/// extent may overhang; such voxels read as `pad_value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [i64; 3],
    pub size: [usize; 3],
    pub pad_value: f32,
}

impl PatchSpec {
    pub fn new(origin: [i64; 3], size: [usize; 3]) -> Self {
        PatchSpec {
            origin,
            size,
            pad_value: AIR_HU,
        }
    }

    pub fn origin_f64(&self) -> [f64; 3] {
        [
            self.origin[0] as f64,
            self.origin[1] as f64,
            self.origin[2] as f64,
        ]
    }

    pub fn contains_local(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] < self.size[a] as f64)
    }
}

fn axis_origins(n: usize, patch: usize, stride: usize) -> Vec<i64> {
    if n <= patch {
        return vec![0];
    }
    let last = n - patch;
    let mut origins: Vec<i64> = (0..last).step_by(stride).map(|o| o as i64).collect();
    origins.push(last as i64);
    origins
}

/// Overlapping tiling with `stride = patch - overlap` per axis. The last tile
/// on each axis is moved inward to end at the boundary; padding only occurs
/// where the volume is smaller than a patch.
pub fn tile_volume(dims: [usize; 3], patch_size: [usize; 3], overlap: usize) -> Result<Vec<PatchSpec>> {
    if patch_size.iter().any(|&p| p <= overlap) {
        return Err(Error::InvalidParameter(format!(
            "patch size {patch_size:?} must exceed overlap {overlap}"
        )));
    }
    let per_axis: Vec<Vec<i64>> = (0..3)
        .map(|a| axis_origins(dims[a], patch_size[a], patch_size[a] - overlap))
        .collect();
    let mut specs = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                specs.push(PatchSpec::new([x, y, z], patch_size));
            }
        }
    }
    Ok(specs)
}

pub fn extract_patch(v: &Volume, spec: &PatchSpec) -> Volume {
    let [px, py, pz] = spec.size;
    let mut data = vec![spec.pad_value; px * py * pz];
    let [nx, ny, nz] = v.dims.map(|d| d as i64);
    // x range that lands inside the parent, shared by every row
    let x_lo = (-spec.origin[0]).clamp(0, px as i64) as usize;
    let x_hi = (nx - spec.origin[0]).clamp(0, px as i64) as usize;
    if x_lo < x_hi {
        for z in 0..pz {
            let sz = spec.origin[2] + z as i64;
            if sz < 0 || sz >= nz {
                continue;
            }
            for y in 0..py {
                let sy = spec.origin[1] + y as i64;
                if sy < 0 || sy >= ny {
                    continue;
                }
                let src = v.index((spec.origin[0] + x_lo as i64) as usize, sy as usize, sz as usize);
                let dst = x_lo + px * (y + py * z);
                data[dst..dst + (x_hi - x_lo)].copy_from_slice(&v.data[src..src + (x_hi - x_lo)]);
            }
        }
    }
    Volume {
        dims: spec.size,
        spacing: v.spacing,
        data,
        cranial_axis: v.cranial_axis,
        volume_id: v.volume_id.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Translation applied after zoom, in voxels.
    pub shift: [f64; 3],
    /// Isotropic scale about the patch center.
    pub zoom: f64,
    pub flip: [bool; 3],
    /// Intensity scale about the patch mean.
    pub contrast_scale: f64,
    /// Standard deviation of additive Gaussian noise, in data units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            shift: [0.0; 3],
            zoom: 1.0,
            flip: [false; 3],
            contrast_scale: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Ranges for drawing random augmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_shift: f64,
    pub zoom: [f64; 2],
    pub allow_flip: bool,
    pub contrast: [f64; 2],
    pub max_noise_sigma: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_shift: 8.0,
            zoom: [0.8, 1.2],
            allow_flip: false,
            contrast: [0.9, 1.1],
            max_noise_sigma: 20.0,
        }
    }
}

impl AugmentRanges {
    pub fn draw(&self, seed: u64) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let shift = [
            sample(-self.max_shift, self.max_shift),
            sample(-self.max_shift, self.max_shift),
            sample(-self.max_shift, self.max_shift),
        ];
        let zoom = sample(self.zoom[0], self.zoom[1]);
        let contrast_scale = sample(self.contrast[0], self.contrast[1]);
        let noise_sigma = sample(0.0, self.max_noise_sigma);
        let flip = if self.allow_flip {
            [sample(0.0, 1.0) < 0.5, sample(0.0, 1.0) < 0.5, sample(0.0, 1.0) < 0.5]
        } else {
            [false; 3]
        };
        AugmentParams {
            shift,
            zoom,
            flip,
            contrast_scale,
            noise_sigma,
            seed: seed.wrapping_add(1),
        }
    }
}

/// Trilinear sample at continuous coordinates, clamping to the edge voxels.
fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = v.dims[a];
        let u = (p[a] - 0.5).clamp(0.0, (n - 1) as f64);
        let f = u.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(n - 1);
        frac[a] = u - f;
    }
    let mut acc = 0.0f64;
    for (dz, wz) in [(lo[2], 1.0 - frac[2]), (hi[2], frac[2])] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(lo[1], 1.0 - frac[1]), (hi[1], frac[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(lo[0], 1.0 - frac[0]), (hi[0], frac[0])] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * v.get(dx, dy, dz) as f64;
            }
        }
    }
    acc as f32
}

/// Applies flip, then zoom about the patch center, then shift to both the
/// voxels and the boxes; contrast and noise touch only the voxels.
pub fn augment(
    patch: &Volume,
    boxes: &[BoundingBox],
    params: &AugmentParams,
) -> Result<(Volume, Vec<BoundingBox>)> {
    if !(params.zoom > 0.0 && params.zoom.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "zoom must be positive, got {}",
            params.zoom
        )));
    }
    if !(params.noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be non-negative, got {}",
            params.noise_sigma
        )));
    }
    let dims = patch.dims;
    let extent = dims.map(|d| d as f64);
    let center = extent.map(|e| 0.5 * e);

    let forward = |p: [f64; 3]| -> [f64; 3] {
        let mut q = [0.0; 3];
        for a in 0..3 {
            let f = if params.flip[a] { extent[a] - p[a] } else { p[a] };
            q[a] = center[a] + params.zoom * (f - center[a]) + params.shift[a];
        }
        q
    };

    let out_boxes = boxes
        .iter()
        .map(|b| BoundingBox {
            center: forward(b.center),
            diameter: b.diameter * params.zoom,
        })
        .collect();

    let resample = params.zoom != 1.0 || params.shift.iter().any(|&s| s != 0.0);
    let mut data = if !resample && params.flip.iter().all(|&f| !f) {
        patch.data.clone()
    } else if !resample {
        let mut data = Vec::with_capacity(patch.len());
        for z in 0..dims[2] {
            let sz = if params.flip[2] { dims[2] - 1 - z } else { z };
            for y in 0..dims[1] {
                let sy = if params.flip[1] { dims[1] - 1 - y } else { y };
                for x in 0..dims[0] {
                    let sx = if params.flip[0] { dims[0] - 1 - x } else { x };
                    data.push(patch.get(sx, sy, sz));
                }
            }
        }
        data
    } else {
        let mut data = Vec::with_capacity(patch.len());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let q = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    let mut src = [0.0; 3];
                    for a in 0..3 {
                        let f = center[a] + (q[a] - params.shift[a] - center[a]) / params.zoom;
                        src[a] = if params.flip[a] { extent[a] - f } else { f };
                    }
                    data.push(sample_trilinear(patch, src));
                }
            }
        }
        data
    };

    if params.contrast_scale != 1.0 {
        let mean = data.iter().map(|&x| x as f64).sum::<f64>() / data.len() as f64;
        for x in &mut data {
            *x = (mean + params.contrast_scale * (*x as f64 - mean)) as f32;
        }
    }
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let normal = Normal::new(0.0, params.noise_sigma).expect("sigma validated");
        for x in &mut data {
            *x += normal.sample(&mut rng) as f32;
        }
    }
    Ok((patch.with_data(dims, data), out_boxes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPatch {
    pub spec: PatchSpec,
    /// Lesion the patch was centered on, if it was a positive draw.
    pub lesion: Option<usize>,
}

/// Draws `n` training patches: each is lesion-centered with probability
/// `positive_fraction`, otherwise placed uniformly in the volume. A centered
/// patch puts its lesion uniformly inside the middle half of the patch.
pub fn sample_training_patches(
    dims: [usize; 3],
    patch_size: [usize; 3],
    lesions: &[BoundingBox],
    n: usize,
    positive_fraction: f64,
    seed: u64,
) -> Result<Vec<TrainingPatch>> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::InvalidParameter(format!(
            "positive fraction must lie in [0, 1], got {positive_fraction}"
        )));
    }
    if positive_fraction > 0.0 && lesions.is_empty() {
        return Err(Error::InvalidParameter(
            "positive fraction > 0 requires at least one lesion".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let positive = rng.random_bool(positive_fraction);
        let mut origin = [0i64; 3];
        let lesion = if positive {
            let idx = rng.random_range(0..lesions.len());
            for a in 0..3 {
                let p = patch_size[a] as f64;
                let local = rng.random_range(0.25 * p..0.75 * p);
                origin[a] = (lesions[idx].center[a] - local).floor() as i64;
            }
            Some(idx)
        } else {
            for a in 0..3 {
                let span = dims[a].saturating_sub(patch_size[a]);
                origin[a] = rng.random_range(0..=span) as i64;
            }
            None
        };
        out.push(TrainingPatch {
            spec: PatchSpec::new(origin, patch_size),
            lesion,
        });
    }
    Ok(out)
}
