//! Candidate detections, greedy 3D NMS and cross-tile aggregation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::{iou3d, BoundingBox};
use crate::volume::PatchSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detector,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDetection {
    pub bbox: BoundingBox,
    pub probability: f64,
    pub stage: Stage,
    pub source_tile: Option<PatchSpec>,
    pub scale_index: Option<usize>,
}

impl CandidateDetection {
    pub fn new(bbox: BoundingBox, probability: f64) -> Self {
        CandidateDetection {
            bbox,
            probability,
            stage: Stage::Detector,
            source_tile: None,
            scale_index: None,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        self.bbox.center
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsParams {
    pub iou_thresh: f64,
    /// Candidates at or below this probability are dropped.
    pub prob_thresh: f64,
}

impl Default for NmsParams {
    fn default() -> Self {
        NmsParams {
            iou_thresh: 0.25,
            prob_thresh: 0.25,
        }
    }
}

/// Descending probability, then ascending center, diameter, scale and tile
/// origin. Total over everything a candidate carries except the stage.
pub fn detection_order(a: &CandidateDetection, b: &CandidateDetection) -> Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then_with(|| {
            (0..3)
                .map(|i| a.bbox.center[i].total_cmp(&b.bbox.center[i]))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.bbox.diameter.total_cmp(&b.bbox.diameter))
        .then_with(|| a.scale_index.cmp(&b.scale_index))
        .then_with(|| {
            let key = |c: &CandidateDetection| c.source_tile.map(|t| t.origin);
            key(a).cmp(&key(b))
        })
}

pub fn nms(cands: &[CandidateDetection], params: NmsParams) -> Vec<CandidateDetection> {
    let mut pool: Vec<&CandidateDetection> = cands
        .iter()
        .filter(|c| c.probability > params.prob_thresh)
        .collect();
    pool.sort_by(|a, b| detection_order(a, b));
    let mut kept: Vec<CandidateDetection> = Vec::new();
    for c in pool {
        if kept.iter().all(|k| iou3d(&k.bbox, &c.bbox) <= params.iou_thresh) {
            kept.push(c.clone());
        }
    }
    kept
}

/// Moves tile-local candidates into the parent volume's frame.
pub fn to_volume_coords(cands: &[CandidateDetection], tile: &PatchSpec) -> Vec<CandidateDetection> {
    let offset = tile.origin_f64();
    cands
        .iter()
        .map(|c| CandidateDetection {
            bbox: c.bbox.translated(offset),
            source_tile: Some(*tile),
            ..c.clone()
        })
        .collect()
}

pub fn merge_tiles(per_tile: &[(PatchSpec, Vec<CandidateDetection>)], params: NmsParams) -> Vec<CandidateDetection> {
    let all: Vec<CandidateDetection> = per_tile
        .iter()
        .flat_map(|(tile, cands)| to_volume_coords(cands, tile))
        .collect();
    nms(&all, params)
}
