//! A perfect patch classifier can only help: stage-two sensitivity at any
//! false-positive rate is at least stage one's, and scored false positives
//! disappear.

use std::collections::HashMap;

use ia_detect::anchors::BoundingBox;
use ia_detect::config::{derive_seed, ORACLE, SYNTH};
use ia_detect::eval::{froc, match_lesions, sensitivity_at_fppv, VolumeRecord, FPPV_GRID};
use ia_detect::fpr::FprConfig;
use ia_detect::pipeline::{detect_volume, par_map_ordered, reduce_volume, DetectParams};
use ia_detect::synth::{dataset_phantom, oracle_detect, OracleClassifier, OracleDetectorSpec, OracleTileDetector, PhantomSpec};

fn study(seed: u64, n: usize, fp_per_volume: f64) -> (Vec<VolumeRecord>, Vec<VolumeRecord>) {
    let phantom = PhantomSpec::default();
    let detect = DetectParams::default();
    let fpr = FprConfig::default();
    let indices: Vec<usize> = (0..n).collect();
    let pairs = par_map_ordered(&indices, 4, |_, &i| {
        let ph = dataset_phantom(&phantom, [0, 3], derive_seed(seed, SYNTH, i as u64), i)?;
        let truth: Vec<BoundingBox> = ph.lesions.iter().map(|l| l.bbox).collect();
        let spec = OracleDetectorSpec {
            fp_per_volume,
            seed: derive_seed(seed, ORACLE, i as u64),
            ..Default::default()
        };
        let id = ph.volume.volume_id.clone();
        let detector = OracleTileDetector {
            grid: detect.grid.clone(),
            candidates: HashMap::from([(id.clone(), oracle_detect(&truth, ph.volume.dims, &spec)?)]),
        };
        let stage1 = detect_volume(&ph.volume, &detector, &detect)?;
        let classifier = OracleClassifier {
            lesions: HashMap::from([(id.clone(), truth)]),
        };
        let stage2 = reduce_volume(&ph.volume, &stage1, &classifier, true, detect.nms, &fpr)?;
        let record = |candidates| VolumeRecord {
            volume_id: id.clone(),
            lesions: ph.lesions.clone(),
            candidates,
        };
        Ok((record(stage1), record(stage2)))
    })
    .unwrap();
    pairs.into_iter().unzip()
}

/// False positives scoring above zero.
fn scored_false_positives(records: &[VolumeRecord]) -> usize {
    records
        .iter()
        .map(|r| {
            let boxes: Vec<BoundingBox> = r.lesions.iter().map(|l| l.bbox).collect();
            let m = match_lesions(&r.candidates, &boxes);
            r.candidates.iter().zip(&m.is_tp).filter(|(c, tp)| !**tp && c.probability > 0.0).count()
        })
        .sum()
}

#[test]
fn perfect_classifier_never_lowers_sensitivity() {
    for seed in [1, 2, 3] {
        let (s1, s2) = study(seed, 12, 4.0);
        let (c1, c2) = (froc(&s1).unwrap(), froc(&s2).unwrap());
        for q in FPPV_GRID.iter().copied().chain([0.0, 0.1, 16.0]) {
            let (a, b) = (sensitivity_at_fppv(&c1, q), sensitivity_at_fppv(&c2, q));
            assert!(b >= a, "seed {seed}, {q} FPPV: {a} -> {b}");
        }
        let before = scored_false_positives(&s1);
        assert!(before > 0, "seed {seed} produced no false positives");
        assert_eq!(scored_false_positives(&s2), 0, "seed {seed}");
    }
}

#[test]
fn without_false_positives_both_stages_agree() {
    let (s1, s2) = study(8, 10, 0.0);
    let (c1, c2) = (froc(&s1).unwrap(), froc(&s2).unwrap());
    for q in FPPV_GRID {
        assert_eq!(sensitivity_at_fppv(&c1, q), sensitivity_at_fppv(&c2, q));
    }
}
