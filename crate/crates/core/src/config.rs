//! Run configuration. Every field has a default; a JSON file may give any
//! subset of fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::LabelThresholds;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fpr::FprConfig;
use crate::loss::LossParams;
use crate::pipeline::DetectParams;
use crate::synth::{OracleDetectorSpec, PhantomSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub candidates_dir: PathBuf,
    pub reduced_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset_dir: "data".into(),
            candidates_dir: "candidates".into(),
            reduced_dir: "reduced".into(),
            output_dir: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_volumes: usize,
    /// Inclusive range of aneurysm counts drawn per volume.
    pub aneurysms_per_volume: [usize; 2],
    pub phantom: PhantomSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_volumes: 10,
            aneurysms_per_volume: [0, 2],
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Volume `i` is synthesized with `derive_seed(seed, SYNTH, i)`
    /// and scored by the oracle with `derive_seed(seed, ORACLE, i)`.
    pub seed: u64,
    pub paths: Paths,
    pub detect: DetectParams,
    pub labels: LabelThresholds,
    pub loss: LossParams,
    pub fpr: FprConfig,
    /// Run the second stage on everything above `fpr.sensitivity_floor`.
    pub fpr_sensitivity_mode: bool,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub oracle: OracleDetectorSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            detect: DetectParams::default(),
            labels: LabelThresholds::default(),
            loss: LossParams::default(),
            fpr: FprConfig::default(),
            fpr_sensitivity_mode: true,
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            oracle: OracleDetectorSpec::default(),
        }
    }
}

pub const SYNTH: u64 = 1;
pub const ORACLE: u64 = 2;

/// `splitmix64(seed ^ (purpose << 56)) + index`, wrapping.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut z = (seed ^ (purpose << 56)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)).wrapping_add(index)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidParameter(message) => Error::Format {
                what: "config",
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.synth.phantom.validate()?;
        self.oracle.validate()?;
        let [lo, hi] = self.synth.aneurysms_per_volume;
        if lo > hi {
            return Err(Error::InvalidParameter("aneurysms_per_volume must be ordered".into()));
        }
        let l = self.labels;
        if !(0.0 <= l.negative_iou && l.negative_iou <= l.positive_iou && l.positive_iou <= 1.0) {
            return Err(Error::InvalidParameter("IoU thresholds must satisfy 0 <= neg <= pos <= 1".into()));
        }
        if self.detect.overlap >= self.detect.grid.patch_size {
            return Err(Error::InvalidParameter("tile overlap must be smaller than the tile".into()));
        }
        crate::anchors::anchor_grid(&self.detect.grid)?;
        let w = self.detect.window;
        if !(w.min < w.max) || !(self.detect.max_extent_mm > 0.0) {
            return Err(Error::InvalidParameter("HU window must be ordered and max extent positive".into()));
        }
        let b = &self.eval.bootstrap;
        if b.n_resamples == 0 || !(b.level > 0.0 && b.level < 1.0) {
            return Err(Error::InvalidParameter("bootstrap needs n_resamples >= 1 and level in (0, 1)".into()));
        }
        Ok(())
    }
}
