//! Whole-volume orchestration of both stages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_grid, decode, Anchor, AnchorGridConfig, TargetVector};
use crate::error::{Error, Result};
use crate::fpr::{extract_fpr_patches, rescore, select_candidates, FprConfig, PatchClassifier};
use crate::postproc::{merge_tiles, CandidateDetection, NmsParams};
use crate::volume::{cranial_slab, extract_patch, normalize_with, tile_volume, HuWindow, PatchSpec, Volume};

/// Where a tile sits: `tile.origin` is relative to the truncated volume,
/// whose first slice is slice `z_offset` of the original.
#[derive(Debug, Clone, Copy)]
pub struct TileContext<'a> {
    pub volume_id: &'a str,
    pub tile: &'a PatchSpec,
    pub z_offset: usize,
}

impl TileContext<'_> {
    /// Tile-local point in original volume coordinates.
    pub fn to_original(&self, local: [f64; 3]) -> [f64; 3] {
        let o = self.tile.origin_f64();
        [local[0] + o[0], local[1] + o[1], local[2] + o[2] + self.z_offset as f64]
    }

    pub fn to_local(&self, original: [f64; 3]) -> [f64; 3] {
        let o = self.tile.origin_f64();
        [original[0] - o[0], original[1] - o[1], original[2] - o[2] - self.z_offset as f64]
    }
}

/// Stage-one scorer. Returns sparse `(anchor index, target)` pairs; anchors
/// not listed are treated as background.
pub trait TileDetector: Sync {
    fn score_tile(&self, ctx: &TileContext<'_>, patch: &Volume, anchors: &[Anchor]) -> Vec<(usize, TargetVector)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub window: HuWindow,
    pub max_extent_mm: f64,
    pub grid: AnchorGridConfig,
    pub overlap: usize,
    pub nms: NmsParams,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            window: HuWindow::default(),
            max_extent_mm: 200.0,
            grid: AnchorGridConfig::default(),
            overlap: 16,
            nms: NmsParams::default(),
        }
    }
}

/// Truncate, window, tile, score, decode and merge. Candidates come back in
/// original volume coordinates, ordered by descending probability.
pub fn detect_volume(v: &Volume, detector: &dyn TileDetector, params: &DetectParams) -> Result<Vec<CandidateDetection>> {
    let slab = cranial_slab(v, params.max_extent_mm)?;
    let plane = v.dims[0] * v.dims[1];
    let truncated = Volume::new(
        v.volume_id.clone(),
        [v.dims[0], v.dims[1], slab.len()],
        v.spacing,
        v.data[slab.start * plane..slab.end * plane].to_vec(),
    )?;
    let normalized = normalize_with(&truncated, params.window);
    let anchors = anchor_grid(&params.grid)?;
    let size = params.grid.patch_size;
    let pad = params.window.apply(crate::volume::AIR_HU);
    let mut per_tile = Vec::new();
    for mut tile in tile_volume(normalized.dims, [size; 3], params.overlap)? {
        tile.pad_value = pad;
        let patch = extract_patch(&normalized, &tile);
        let ctx = TileContext {
            volume_id: &v.volume_id,
            tile: &tile,
            z_offset: slab.start,
        };
        let mut local = Vec::new();
        for (index, t) in detector.score_tile(&ctx, &patch, &anchors) {
            let anchor = anchors.get(index).ok_or_else(|| {
                Error::InvalidParameter(format!("detector returned anchor {index} of {}", anchors.len()))
            })?;
            let (bbox, p) = decode(&t, anchor);
            if !(bbox.diameter > 0.0 && bbox.diameter.is_finite() && bbox.center.iter().all(|c| c.is_finite())) {
                continue;
            }
            let mut c = CandidateDetection::new(bbox, p);
            c.scale_index = Some(anchor.scale_index);
            local.push(c);
        }
        per_tile.push((tile, local));
    }
    let shift = slab.start as f64;
    Ok(merge_tiles(&per_tile, params.nms)
        .into_iter()
        .map(|mut c| {
            c.bbox.center[2] += shift;
            c
        })
        .collect())
}

/// Second stage on one volume: NMS with the configured floor, three patches
/// per surviving candidate, and the averaged classifier probability.
pub fn reduce_volume(
    v: &Volume,
    cands: &[CandidateDetection],
    classifier: &dyn PatchClassifier,
    sensitivity_mode: bool,
    nms_params: NmsParams,
    config: &FprConfig,
) -> Result<Vec<CandidateDetection>> {
    let selected = select_candidates(cands, sensitivity_mode, nms_params, config);
    selected
        .iter()
        .map(|c| {
            let patches = extract_fpr_patches(v, c, config)?;
            rescore(c, classifier.score(&v.volume_id, &patches))
        })
        .collect()
}

/// Maps `f` over `items` on `jobs` threads; results keep input order, so the
/// output does not depend on `jobs`. The first error in input order wins.
pub fn par_map_ordered<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let results: Vec<Result<R>> = pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect());
    results.into_iter().collect()
}
