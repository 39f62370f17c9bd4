//! False-positive reduction: three candidate-centered patches per location,
//! a pluggable classifier per scale, and averaging of the three scores.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::BoundingBox;
use crate::error::{Error, Result};
use crate::postproc::{nms, CandidateDetection, NmsParams, Stage};
use crate::volume::{extract_patch, normalize_with, write_volume, HuWindow, PatchSpec, Volume, AIR_HU};

pub const DEFAULT_PATCH_SIZES: [[usize; 3]; 3] = [[20, 20, 10], [32, 32, 16], [48, 48, 32]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FprConfig {
    pub patch_sizes: [[usize; 3]; 3],
    /// Probability floor used when the detector runs at maximum sensitivity.
    pub sensitivity_floor: f64,
    pub pad_value: f32,
}

impl Default for FprConfig {
    fn default() -> Self {
        FprConfig {
            patch_sizes: DEFAULT_PATCH_SIZES,
            sensitivity_floor: 0.05,
            pad_value: AIR_HU,
        }
    }
}

/// NMS before the second stage. In sensitivity mode the probability floor
/// drops from `nms.prob_thresh` to `config.sensitivity_floor`.
pub fn select_candidates(
    cands: &[CandidateDetection],
    sensitivity_mode: bool,
    nms_params: NmsParams,
    config: &FprConfig,
) -> Vec<CandidateDetection> {
    let params = if sensitivity_mode {
        NmsParams {
            prob_thresh: config.sensitivity_floor,
            ..nms_params
        }
    } else {
        nms_params
    };
    nms(cands, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FprPatchSet {
    pub candidate: CandidateDetection,
    /// Windowed to [-1, 1], one per configured size.
    pub patches: [Volume; 3],
    pub specs: [PatchSpec; 3],
}

/// Patch whose voxel `size / 2` (per axis) contains `center`.
pub fn centered_spec(center: [f64; 3], size: [usize; 3], pad_value: f32) -> PatchSpec {
    let mut origin = [0i64; 3];
    for a in 0..3 {
        origin[a] = center[a].floor() as i64 - (size[a] / 2) as i64;
    }
    PatchSpec {
        origin,
        size,
        pad_value,
    }
}

pub fn extract_fpr_patches(v: &Volume, cand: &CandidateDetection, config: &FprConfig) -> Result<FprPatchSet> {
    let center = cand.center();
    if !v.contains_point(center) {
        return Err(Error::CenterOutsideVolume {
            center,
            dims: v.dims,
        });
    }
    let specs = config
        .patch_sizes
        .map(|size| centered_spec(center, size, config.pad_value));
    let patches = specs
        .each_ref()
        .map(|spec| normalize_with(&extract_patch(v, spec), HuWindow::default()));
    Ok(FprPatchSet {
        candidate: cand.clone(),
        patches,
        specs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FprLabel {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "excluded")]
    Excluded,
}

/// Positive if the center lies in any lesion box; otherwise excluded when
/// it sits closer than half the patch extent to some lesion center on
/// every axis; otherwise negative.
pub fn label_candidate(cand: &CandidateDetection, lesions: &[BoundingBox], patch_size: [usize; 3]) -> FprLabel {
    let c = cand.center();
    if lesions.iter().any(|l| l.contains(c)) {
        return FprLabel::Positive;
    }
    let near = lesions
        .iter()
        .any(|l| (0..3).all(|a| (c[a] - l.center[a]).abs() < 0.5 * patch_size[a] as f64));
    if near {
        FprLabel::Excluded
    } else {
        FprLabel::Negative
    }
}

pub fn label_per_scale(cand: &CandidateDetection, lesions: &[BoundingBox], config: &FprConfig) -> [FprLabel; 3] {
    config.patch_sizes.map(|size| label_candidate(cand, lesions, size))
}

/// Replaces the probability with the mean of the three per-scale scores.
pub fn rescore(cand: &CandidateDetection, probs: [f64; 3]) -> Result<CandidateDetection> {
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidParameter(format!(
            "classifier probability {bad} outside [0, 1]"
        )));
    }
    let mut sorted = probs;
    sorted.sort_by(f64::total_cmp);
    let mean = ((sorted[0] + sorted[1] + sorted[2]) / 3.0).clamp(0.0, 1.0);
    Ok(CandidateDetection {
        probability: mean,
        stage: Stage::Reduced,
        ..cand.clone()
    })
}

/// Scores the three patches of a candidate location.
pub trait PatchClassifier: Sync {
    fn score(&self, volume_id: &str, patches: &FprPatchSet) -> [f64; 3];
}

/// One line of the training-patch manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPatchRecord {
    pub volume_id: String,
    pub center_vox: [f64; 3],
    pub label: FprLabel,
    pub scale: usize,
    pub patch_file: String,
}

/// Writes every labeled, non-excluded patch of the candidates as an HU
/// volume under `dir` and returns the manifest records.
pub fn export_training_patches(
    v: &Volume,
    cands: &[CandidateDetection],
    lesions: &[BoundingBox],
    config: &FprConfig,
    dir: &Path,
) -> Result<Vec<TrainingPatchRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for (ci, cand) in cands.iter().enumerate() {
        if !v.contains_point(cand.center()) {
            return Err(Error::CenterOutsideVolume {
                center: cand.center(),
                dims: v.dims,
            });
        }
        for (scale, size) in config.patch_sizes.iter().enumerate() {
            let label = label_candidate(cand, lesions, *size);
            if label == FprLabel::Excluded {
                continue;
            }
            let name = format!("{}_c{ci:04}_s{scale}", v.volume_id);
            let mut patch = extract_patch(v, &centered_spec(cand.center(), *size, config.pad_value));
            patch.volume_id = name.clone();
            write_volume(&patch, &dir.join(&name))?;
            records.push(TrainingPatchRecord {
                volume_id: v.volume_id.clone(),
                center_vox: cand.center(),
                label,
                scale,
                patch_file: format!("{name}.vol.json"),
            });
        }
    }
    Ok(records)
}

pub fn write_training_manifest(records: &[TrainingPatchRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand_at(c: [f64; 3], p: f64) -> CandidateDetection {
        CandidateDetection::new(BoundingBox::new(c, 4.0).unwrap(), p)
    }

    #[test]
    fn sensitivity_mode_keeps_low_scores() {
        let cfg = FprConfig::default();
        let c = [cand_at([10.0; 3], 0.1)];
        assert_eq!(select_candidates(&c, true, NmsParams::default(), &cfg).len(), 1);
        assert!(select_candidates(&c, false, NmsParams::default(), &cfg).is_empty());
        assert!(select_candidates(&[], true, NmsParams::default(), &cfg).is_empty());
        let high = [cand_at([10.0; 3], 0.6), cand_at([40.0; 3], 0.9)];
        assert_eq!(
            select_candidates(&high, true, NmsParams::default(), &cfg),
            select_candidates(&high, false, NmsParams::default(), &cfg)
        );
    }

    #[test]
    fn patches_have_configured_sizes_and_centering() {
        let mut v = Volume::filled("v", [128; 3], [1.0; 3], 0.0).unwrap();
        let i = v.index(64, 64, 64);
        v.data[i] = 500.0;
        let set = extract_fpr_patches(&v, &cand_at([64.5; 3], 0.5), &FprConfig::default()).unwrap();
        for (patch, size) in set.patches.iter().zip(DEFAULT_PATCH_SIZES) {
            assert_eq!(patch.dims, size);
            assert_eq!(patch.get(size[0] / 2, size[1] / 2, size[2] / 2), 0.5);
            assert!(patch.data.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn near_face_pads_large_patch() {
        let v = Volume::filled("v", [128; 3], [1.0; 3], 0.0).unwrap();
        let set = extract_fpr_patches(&v, &cand_at([5.5, 64.5, 64.5], 0.5), &FprConfig::default()).unwrap();
        let big = &set.patches[2];
        // origin x = 5 - 24 = -19: first 19 planes are air
        assert_eq!(big.get(18, 24, 16), -1.0);
        assert_eq!(big.get(19, 24, 16), 0.0);
        // small patch: origin x = 5 - 10 = -5
        assert_eq!(set.patches[0].get(4, 10, 5), -1.0);
        assert_eq!(set.patches[0].get(5, 10, 5), 0.0);
    }

    #[test]
    fn outside_center_is_error() {
        let v = Volume::filled("v", [16; 3], [1.0; 3], 0.0).unwrap();
        assert!(matches!(
            extract_fpr_patches(&v, &cand_at([16.0, 1.0, 1.0], 0.5), &FprConfig::default()),
            Err(Error::CenterOutsideVolume { .. })
        ));
    }

    #[test]
    fn labeling_rules() {
        let lesion = [BoundingBox::new([50.0; 3], 6.0).unwrap()];
        let size = [32, 32, 16];
        assert_eq!(label_candidate(&cand_at([50.0; 3], 0.5), &lesion, size), FprLabel::Positive);
        assert_eq!(label_candidate(&cand_at([150.0; 3], 0.5), &lesion, size), FprLabel::Negative);
        // 3.01 voxels out along x: outside the 6-voxel box, inside 16/16/8
        assert_eq!(label_candidate(&cand_at([53.01, 50.0, 50.0], 0.5), &lesion, size), FprLabel::Excluded);
        assert_eq!(label_candidate(&cand_at([53.0, 50.0, 50.0], 0.5), &lesion, size), FprLabel::Positive);
        // within half-extent in x,y but not z (8)
        assert_eq!(label_candidate(&cand_at([52.0, 50.0, 59.0], 0.5), &lesion, size), FprLabel::Negative);
        assert_eq!(
            label_per_scale(&cand_at([60.0, 50.0, 50.0], 0.5), &lesion, &FprConfig::default()),
            [FprLabel::Negative, FprLabel::Excluded, FprLabel::Excluded]
        );
    }

    #[test]
    fn rescore_means() {
        let c = cand_at([1.0; 3], 0.9);
        let r = rescore(&c, [0.9, 0.6, 0.3]).unwrap();
        assert!((r.probability - 0.6).abs() < 1e-15);
        assert_eq!(r.stage, Stage::Reduced);
        assert_eq!(rescore(&c, [1.0; 3]).unwrap().probability, 1.0);
        assert_eq!(rescore(&c, [0.0; 3]).unwrap().probability, 0.0);
        assert_eq!(
            rescore(&c, [0.3, 0.9, 0.6]).unwrap().probability,
            rescore(&c, [0.6, 0.3, 0.9]).unwrap().probability
        );
        assert!(rescore(&c, [1.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn training_export_skips_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::filled("vol", [64; 3], [1.0; 3], 0.0).unwrap();
        let lesion = [BoundingBox::new([30.5; 3], 6.0).unwrap()];
        let cands = [cand_at([30.5; 3], 0.9), cand_at([40.5, 30.5, 30.5], 0.5)];
        let recs = export_training_patches(&v, &cands, &lesion, &FprConfig::default(), dir.path()).unwrap();
        // first: 3 positives; second: neg at scale 0 (10 >= 10), excluded at 1 and 2
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[3].label, FprLabel::Negative);
        assert!(dir.path().join(&recs[0].patch_file).exists());
        let manifest = dir.path().join("manifest.jsonl");
        write_training_manifest(&recs, &manifest).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""label":"pos""#));
    }
}
