//! JSON Lines records for annotations and candidates, and the dataset
//! manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anchors::BoundingBox;
use crate::error::{Error, Result};
use crate::eval::Lesion;
use crate::postproc::{CandidateDetection, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub volume_id: String,
    pub center_vox: [f64; 3],
    pub diameter_vox: f64,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl AnnotationRecord {
    pub fn new(volume_id: &str, lesion: &Lesion) -> Self {
        AnnotationRecord {
            volume_id: volume_id.to_string(),
            center_vox: lesion.bbox.center,
            diameter_vox: lesion.bbox.diameter,
            labels: lesion.labels.clone(),
        }
    }

    pub fn to_lesion(&self) -> Result<Lesion> {
        Ok(Lesion {
            bbox: BoundingBox::new(self.center_vox, self.diameter_vox)?,
            labels: self.labels.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub volume_id: String,
    pub center_vox: [f64; 3],
    pub diameter_vox: f64,
    pub prob: f64,
    pub stage: Stage,
}

impl CandidateRecord {
    pub fn new(volume_id: &str, c: &CandidateDetection) -> Self {
        CandidateRecord {
            volume_id: volume_id.to_string(),
            center_vox: c.bbox.center,
            diameter_vox: c.bbox.diameter,
            prob: c.probability,
            stage: c.stage,
        }
    }

    pub fn to_candidate(&self) -> Result<CandidateDetection> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::InvalidParameter(format!("candidate probability {} outside [0, 1]", self.prob)));
        }
        let mut c = CandidateDetection::new(BoundingBox::new(self.center_vox, self.diameter_vox)?, self.prob);
        c.stage = self.stage;
        Ok(c)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what,
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Annotations grouped by volume id.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<Lesion>>> {
    let records: Vec<AnnotationRecord> = read_jsonl(path, "annotation")?;
    let mut out: BTreeMap<String, Vec<Lesion>> = BTreeMap::new();
    for r in records {
        let lesion = r.to_lesion().map_err(|e| Error::Format {
            what: "annotation",
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        out.entry(r.volume_id).or_default().push(lesion);
    }
    Ok(out)
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    let records: Vec<CandidateRecord> = read_jsonl(path, "candidate")?;
    for r in &records {
        r.to_candidate().map_err(|e| Error::Format {
            what: "candidate",
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    Ok(records)
}

pub fn candidates_file(dir: &Path, volume_id: &str) -> PathBuf {
    dir.join(format!("{volume_id}.candidates.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume_id: String,
    /// Volume base path relative to the manifest directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volumes: Vec<ManifestEntry>,
    /// Annotation JSONL relative to the manifest directory.
    pub annotations: String,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "manifest",
            path,
            message: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.volumes.iter().map(|v| v.volume_id.as_str()).collect()
    }
}
