//! Subcommands of the `ia-detect` binary.
//!
//! Exit codes: 0 success, 2 configuration or output-path error, 3 bad or
//! missing input data, 4 inconsistent inputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ia_detect::anchors::BoundingBox;
use ia_detect::config::{derive_seed, RunConfig, ORACLE, SYNTH};
use ia_detect::eval::{compare_reports, evaluate, EvaluationReport, FrocCurve, Lesion, RocCurve, VolumeRecord};
use ia_detect::fpr::{export_training_patches, write_training_manifest, PatchClassifier};
use ia_detect::io::{
    candidates_file, read_annotations, read_candidates, write_jsonl, AnnotationRecord, CandidateRecord, DatasetManifest,
    ManifestEntry,
};
use ia_detect::pipeline::{detect_volume, par_map_ordered, reduce_volume, TileDetector};
use ia_detect::synth::{dataset_phantom, oracle_detect, BlobTileDetector, OracleClassifier, OracleTileDetector, ReferenceClassifier};
use ia_detect::volume::{read_volume, write_volume, Volume};
use ia_detect::{CandidateDetection, Error};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONSISTENCY: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn config_err(e: impl fmt::Display) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn data_err(e: impl fmt::Display) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: e.to_string(),
    }
}

fn consistency_err(e: impl fmt::Display) -> CliError {
    CliError {
        code: EXIT_CONSISTENCY,
        message: e.to_string(),
    }
}

/// Errors while reading inputs: inconsistencies keep their own code,
/// invalid parameters are configuration problems, the rest is bad data.
fn input_err(e: Error) -> CliError {
    match e {
        Error::Inconsistent(_) => consistency_err(e),
        Error::InvalidParameter(_) | Error::PlacementFailed { .. } => config_err(e),
        _ => data_err(e),
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ia-detect", version, about = "Two-stage aneurysm detection pipeline on CTA volumes")]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-volume work and bootstrap resampling.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Run stage one and write one candidate file per volume.
    Detect(DetectArgs),
    /// Rescore stage-one candidates with a patch classifier.
    Reduce(ReduceArgs),
    /// Compute FROC, ROC, operating-point metrics and intervals.
    Eval(EvalArgs),
    /// Compare two evaluation reports on the same volumes.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (default: paths.dataset_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of volumes (default: synth.n_volumes).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorKind {
    /// Replays perturbed ground truth through the anchor grid.
    Oracle,
    /// Bright-blob heuristic with no access to annotations.
    Blob,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Dataset directory holding manifest.json (default: paths.dataset_dir).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Candidate directory (default: paths.candidates_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DetectorKind::Oracle)]
    pub detector: DetectorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierKind {
    /// Analytic center-versus-shell brightness score.
    Reference,
    /// 1 inside an annotated lesion, 0 elsewhere.
    Oracle,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// Dataset directory holding manifest.json (default: paths.dataset_dir).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stage-one candidate directory (default: paths.candidates_dir).
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Rescored candidate directory (default: paths.reduced_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClassifierKind::Reference)]
    pub classifier: ClassifierKind,
    /// Also write labeled training patches and their manifest here.
    #[arg(long)]
    pub export_patches: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory holding manifest.json (default: paths.dataset_dir).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Candidate directory to score (default: paths.candidates_dir).
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Report directory (default: paths.output_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip bootstrap intervals.
    #[arg(long)]
    pub no_ci: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub report_a: PathBuf,
    pub report_b: PathBuf,
    /// Directory for comparison.json and the paired FROC CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(config_err)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.jobs == 0 {
        return Err(config_err("--jobs must be at least 1"));
    }
    cfg.eval.bootstrap.jobs = cli.jobs;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => {
            println!("{}", cfg.to_json());
            Ok(())
        }
        Command::Synth(args) => cmd_synth(&cfg, args, cli.jobs),
        Command::Detect(args) => cmd_detect(&cfg, args, cli.jobs),
        Command::Reduce(args) => cmd_reduce(&cfg, args, cli.jobs),
        Command::Eval(args) => cmd_eval(&cfg, args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_synth(cfg: &RunConfig, args: &SynthArgs, jobs: usize) -> CliResult<()> {
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.dataset_dir.clone());
    let n = args.n.unwrap_or(cfg.synth.n_volumes);
    create_dir(&out.join("volumes"))?;
    let indices: Vec<usize> = (0..n).collect();
    let per_volume = par_map_ordered(&indices, jobs, |_, &i| {
        let ph = dataset_phantom(&cfg.synth.phantom, cfg.synth.aneurysms_per_volume, derive_seed(cfg.seed, SYNTH, i as u64), i)?;
        let rel = format!("volumes/{}", ph.volume.volume_id);
        write_volume(&ph.volume, &out.join(&rel))?;
        let records: Vec<AnnotationRecord> = ph.lesions.iter().map(|l| AnnotationRecord::new(&ph.volume.volume_id, l)).collect();
        Ok((ManifestEntry { volume_id: ph.volume.volume_id, path: rel }, records))
    })
    .map_err(|e| match e {
        Error::Io { .. } => config_err(e),
        other => input_err(other),
    })?;
    let (volumes, annotations): (Vec<ManifestEntry>, Vec<Vec<AnnotationRecord>>) = per_volume.into_iter().unzip();
    let annotations: Vec<AnnotationRecord> = annotations.into_iter().flatten().collect();
    write_jsonl(&out.join("annotations.jsonl"), &annotations).map_err(config_err)?;
    let manifest = DatasetManifest {
        volumes,
        annotations: "annotations.jsonl".into(),
        seed: cfg.seed,
    };
    manifest.write(&out).map_err(config_err)?;
    eprintln!("wrote {n} volumes and {} annotations to {}", annotations.len(), out.display());
    Ok(())
}

struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
    lesions: BTreeMap<String, Vec<Lesion>>,
}

impl Dataset {
    fn load(dir: &Path) -> CliResult<Self> {
        let manifest = DatasetManifest::read(dir).map_err(data_err)?;
        let lesions = read_annotations(&dir.join(&manifest.annotations)).map_err(data_err)?;
        let ids: BTreeSet<&str> = manifest.ids().into_iter().collect();
        let unknown: Vec<&String> = lesions.keys().filter(|k| !ids.contains(k.as_str())).collect();
        if !unknown.is_empty() {
            return Err(consistency_err(format!("annotations reference volumes missing from the manifest: {unknown:?}")));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            lesions,
        })
    }

    fn volume(&self, entry: &ManifestEntry) -> CliResult<Volume> {
        let v = read_volume(&self.dir.join(&entry.path))
            .map_err(|e| data_err(format!("volume {}: {e}", entry.volume_id)))?;
        if v.volume_id != entry.volume_id {
            return Err(data_err(format!(
                "volume {}: header declares id {}",
                entry.volume_id, v.volume_id
            )));
        }
        Ok(v)
    }

    fn boxes(&self, id: &str) -> Vec<BoundingBox> {
        self.lesions.get(id).map(|ls| ls.iter().map(|l| l.bbox).collect()).unwrap_or_default()
    }
}

fn write_candidates(dir: &Path, id: &str, cands: &[CandidateDetection]) -> CliResult<()> {
    let records: Vec<CandidateRecord> = cands.iter().map(|c| CandidateRecord::new(id, c)).collect();
    write_jsonl(&candidates_file(dir, id), &records).map_err(config_err)
}

/// Candidates of one volume; every record must carry that volume's id.
fn load_candidates(dir: &Path, id: &str) -> CliResult<Vec<CandidateDetection>> {
    let path = candidates_file(dir, id);
    let records = read_candidates(&path).map_err(|e| data_err(format!("volume {id}: {e}")))?;
    records
        .iter()
        .map(|r| {
            if r.volume_id != id {
                return Err(data_err(format!(
                    "{} references unknown volume id {}",
                    path.display(),
                    r.volume_id
                )));
            }
            r.to_candidate().map_err(data_err)
        })
        .collect()
}

/// Candidate files in `dir` whose volume id is not in the manifest.
fn stray_candidate_files(dir: &Path, ids: &BTreeSet<&str>) -> CliResult<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| data_err(format!("cannot read {}: {e}", dir.display())))?;
    let mut stray = Vec::new();
    for entry in entries {
        let name = entry.map_err(data_err)?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".candidates.jsonl") {
            if !ids.contains(id) {
                stray.push(id.to_string());
            }
        }
    }
    stray.sort();
    Ok(stray)
}

pub fn cmd_detect(cfg: &RunConfig, args: &DetectArgs, jobs: usize) -> CliResult<()> {
    let data = Dataset::load(args.data.as_deref().unwrap_or(&cfg.paths.dataset_dir))?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.candidates_dir.clone());
    create_dir(&out)?;
    let results = par_map_ordered(&data.manifest.volumes, jobs, |i, entry| {
        let run = || -> CliResult<Vec<CandidateDetection>> {
            let v = data.volume(entry)?;
            let detector: Box<dyn TileDetector> = match args.detector {
                DetectorKind::Oracle => {
                    let spec = ia_detect::synth::OracleDetectorSpec {
                        seed: derive_seed(cfg.seed, ORACLE, i as u64),
                        ..cfg.oracle.clone()
                    };
                    let cands = oracle_detect(&data.boxes(&entry.volume_id), v.dims, &spec).map_err(config_err)?;
                    Box::new(OracleTileDetector {
                        grid: cfg.detect.grid.clone(),
                        candidates: HashMap::from([(entry.volume_id.clone(), cands)]),
                    })
                }
                DetectorKind::Blob => Box::new(BlobTileDetector::default()),
            };
            detect_volume(&v, detector.as_ref(), &cfg.detect).map_err(|e| match e {
                Error::InvalidParameter(_) => config_err(e),
                other => data_err(format!("volume {}: {other}", entry.volume_id)),
            })
        };
        Ok(run())
    })
    .map_err(input_err)?;
    let mut total = 0;
    for (entry, result) in data.manifest.volumes.iter().zip(results) {
        let cands = result?;
        total += cands.len();
        write_candidates(&out, &entry.volume_id, &cands)?;
    }
    eprintln!("wrote {total} candidates for {} volumes to {}", data.manifest.volumes.len(), out.display());
    Ok(())
}

pub fn cmd_reduce(cfg: &RunConfig, args: &ReduceArgs, jobs: usize) -> CliResult<()> {
    let data = Dataset::load(args.data.as_deref().unwrap_or(&cfg.paths.dataset_dir))?;
    let input = args.candidates.clone().unwrap_or_else(|| cfg.paths.candidates_dir.clone());
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.reduced_dir.clone());
    let ids: BTreeSet<&str> = data.manifest.ids().into_iter().collect();
    let stray = stray_candidate_files(&input, &ids)?;
    if !stray.is_empty() {
        return Err(data_err(format!("candidates reference unknown volume ids: {stray:?}")));
    }
    create_dir(&out)?;
    if let Some(dir) = &args.export_patches {
        create_dir(dir)?;
    }
    let classifier: Box<dyn PatchClassifier> = match args.classifier {
        ClassifierKind::Reference => Box::new(ReferenceClassifier),
        ClassifierKind::Oracle => Box::new(OracleClassifier {
            lesions: data.manifest.volumes.iter().map(|e| (e.volume_id.clone(), data.boxes(&e.volume_id))).collect(),
        }),
    };
    let results = par_map_ordered(&data.manifest.volumes, jobs, |_, entry| {
        let run = || -> CliResult<_> {
            let cands = load_candidates(&input, &entry.volume_id)?;
            if cands.is_empty() {
                return Ok((cands, Vec::new()));
            }
            let v = data.volume(entry)?;
            let reduced = reduce_volume(&v, &cands, classifier.as_ref(), cfg.fpr_sensitivity_mode, cfg.detect.nms, &cfg.fpr)
                .map_err(|e| data_err(format!("volume {}: {e}", entry.volume_id)))?;
            let patches = match &args.export_patches {
                Some(dir) => {
                    let selected =
                        ia_detect::fpr::select_candidates(&cands, cfg.fpr_sensitivity_mode, cfg.detect.nms, &cfg.fpr);
                    export_training_patches(&v, &selected, &data.boxes(&entry.volume_id), &cfg.fpr, dir)
                        .map_err(|e| match e {
                            Error::Io { .. } | Error::NotRepresentable { .. } => config_err(e),
                            other => data_err(other),
                        })?
                }
                None => Vec::new(),
            };
            Ok((reduced, patches))
        };
        Ok(run())
    })
    .map_err(input_err)?;
    let mut manifest = Vec::new();
    let mut total = 0;
    for (entry, result) in data.manifest.volumes.iter().zip(results) {
        let (reduced, patches) = result?;
        total += reduced.len();
        write_candidates(&out, &entry.volume_id, &reduced)?;
        manifest.extend(patches);
    }
    if let Some(dir) = &args.export_patches {
        write_training_manifest(&manifest, &dir.join("patches.jsonl")).map_err(config_err)?;
    }
    eprintln!("wrote {total} rescored candidates to {}", out.display());
    Ok(())
}

fn froc_csv(curve: &FrocCurve) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fppv", "sensitivity"]).map_err(config_err)?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fppv.to_string(), p.sensitivity.to_string()])
            .map_err(config_err)?;
    }
    finish_csv(w)
}

fn roc_csv(curve: &RocCurve) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fpr", "tpr"]).map_err(config_err)?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])
            .map_err(config_err)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> CliResult<String> {
    let bytes = w.into_inner().map_err(|e| config_err(e.to_string()))?;
    String::from_utf8(bytes).map_err(config_err)
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> CliResult<()> {
    let data = Dataset::load(args.data.as_deref().unwrap_or(&cfg.paths.dataset_dir))?;
    let input = args.candidates.clone().unwrap_or_else(|| cfg.paths.candidates_dir.clone());
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    let ids: BTreeSet<&str> = data.manifest.ids().into_iter().collect();
    let stray = stray_candidate_files(&input, &ids)?;
    let missing: Vec<&str> = ids.iter().copied().filter(|id| !candidates_file(&input, id).exists()).collect();
    if !stray.is_empty() || !missing.is_empty() {
        return Err(consistency_err(format!(
            "candidate files and annotations cover different volumes; without annotations: {stray:?}, without candidates: {missing:?}"
        )));
    }
    let mut records = Vec::with_capacity(ids.len());
    for entry in &data.manifest.volumes {
        records.push(VolumeRecord {
            volume_id: entry.volume_id.clone(),
            lesions: data.lesions.get(&entry.volume_id).cloned().unwrap_or_default(),
            candidates: load_candidates(&input, &entry.volume_id)?,
        });
    }
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.skip_ci |= args.no_ci;
    let report = evaluate(&records, &eval_cfg).map_err(data_err)?;
    create_dir(&out)?;
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report).map_err(config_err)? + "\n"))?;
    write_text(&out.join("froc.csv"), &froc_csv(&report.froc)?)?;
    if let Some(roc) = &report.roc {
        write_text(&out.join("roc.csv"), &roc_csv(roc)?)?;
    }
    eprintln!(
        "{} volumes, {} lesions, average sensitivity {:.4}",
        report.n_volumes, report.n_lesions, report.avg_sensitivity
    );
    Ok(())
}

fn read_report(path: &Path) -> CliResult<EvaluationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data_err(format!("malformed report {}: {e}", path.display())))
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let a = read_report(&args.report_a)?;
    let b = read_report(&args.report_b)?;
    let cmp = compare_reports(&a, &b).map_err(input_err)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("comparison.json"), &(serde_json::to_string_pretty(&cmp).map_err(config_err)? + "\n"))?;
    write_text(&args.out.join("froc_a.csv"), &froc_csv(&cmp.froc_a)?)?;
    write_text(&args.out.join("froc_b.csv"), &froc_csv(&cmp.froc_b)?)?;
    for op in &cmp.operating_points {
        eprintln!(
            "{}: p(accuracy) = {:.4}, p(sensitivity) = {:.4}, p(specificity) = {:.4}",
            op.name, op.accuracy.p_value, op.sensitivity.p_value, op.specificity.p_value
        );
    }
    Ok(())
}
