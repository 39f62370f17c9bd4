//! Two-stage detection of small spherical lesions in CT angiography volumes.
//!
//! Stage one scores a 24³ anchor grid over overlapping 96³ tiles, decodes the
//! anchor offsets into cubic boxes and merges tiles with 3D non-maximum
//! suppression. Stage two re-scores each candidate from three anisotropic
//! patches and averages the probabilities. The [`eval`] module carries the
//! lesion-level FROC protocol together with patient-level ROC, fixed
//! threshold metrics, bootstrap intervals and Fisher's exact test.
//!
//! Model inference is abstracted behind [`pipeline::TileDetector`] and
//! [`fpr::PatchClassifier`]; [`synth`] provides phantom volumes and oracle
//! scorers so the whole chain can run deterministically without trained
//! networks.

pub mod anchors;
pub mod config;
pub mod error;
pub mod eval;
pub mod fpr;
pub mod io;
pub mod loss;
pub mod pipeline;
pub mod postproc;
pub mod synth;
pub mod volume;

pub use anchors::{Anchor, AnchorLabel, BoundingBox, TargetVector};
pub use error::{Error, Result};
pub use postproc::{CandidateDetection, Stage};
pub use volume::{PatchSpec, Volume};
