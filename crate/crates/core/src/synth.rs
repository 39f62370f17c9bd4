//! Phantom CTA volumes with known lesions, and seeded reference scorers.
//!
//! Vessels are tubes around random smooth polylines; aneurysms are spheres
//! attached to a vessel wall. The oracle detector perturbs the ground truth
//! with misses, jitter and Poisson false positives. Everything is a pure
//! function of its seed.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_index, encode, Anchor, AnchorGridConfig, BoundingBox, TargetVector};
use crate::error::{Error, Result};
use crate::eval::Lesion;
use crate::fpr::{FprPatchSet, PatchClassifier};
use crate::pipeline::{TileContext, TileDetector};
use crate::postproc::CandidateDetection;
use crate::volume::{CranialAxis, Volume};

pub const LOCATIONS: [&str; 7] = ["ICA", "MCA", "ACOM", "PCOM", "BA", "ACA", "PCA"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub cranial_axis: CranialAxis,
    pub n_vessels: usize,
    /// Voxels.
    pub vessel_radius_range: [f64; 2],
    pub n_aneurysms: usize,
    /// Voxels.
    pub aneurysm_diameter_range: [f64; 2],
    pub background_hu: f32,
    pub vessel_hu: f32,
    pub aneurysm_hu: f32,
    pub noise_sigma: f64,
    /// Placement attempts before giving up.
    pub max_attempts: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [128, 128, 80],
            spacing: [0.5, 0.5, 0.8],
            cranial_axis: CranialAxis::PlusZ,
            n_vessels: 4,
            vessel_radius_range: [1.5, 3.0],
            n_aneurysms: 2,
            aneurysm_diameter_range: [2.5, 20.0],
            background_hu: 40.0,
            vessel_hu: 300.0,
            aneurysm_hu: 300.0,
            noise_sigma: 20.0,
            max_attempts: 10_000,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be an ordered range within [{lo}, {hi}], got {r:?}"
        )))
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("phantom dims and spacing must be positive".into()));
        }
        check_range("vessel_radius_range", self.vessel_radius_range, f64::MIN_POSITIVE, f64::MAX)?;
        check_range("aneurysm_diameter_range", self.aneurysm_diameter_range, f64::MIN_POSITIVE, f64::MAX)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub points: Vec<[f64; 3]>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub lesions: Vec<Lesion>,
    pub vessels: Vec<Vessel>,
}

/// Table bins on diameter in millimetres.
pub fn size_class(diameter_mm: f64) -> &'static str {
    if diameter_mm < 3.0 {
        "<=3mm"
    } else if diameter_mm < 5.0 {
        "3-5mm"
    } else if diameter_mm < 10.0 {
        "5-10mm"
    } else {
        ">=10mm"
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        r[0] + (r[1] - r[0]) * rng.random::<f64>()
    } else {
        r[0]
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-6 {
            return v.map(|c| c / len);
        }
    }
}

fn inside(p: [f64; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= dims[a] as f64)
}

const STEP: f64 = 6.0;
const BEND: f64 = 0.35;
const MAX_STEPS: usize = 200;

fn walk(rng: &mut ChaCha8Rng, start: [f64; 3], mut dir: [f64; 3], dims: [usize; 3]) -> Vec<[f64; 3]> {
    let n = Normal::new(0.0, BEND).expect("bend");
    let mut p = start;
    let mut out = Vec::new();
    for _ in 0..MAX_STEPS {
        let d: [f64; 3] = std::array::from_fn(|a| dir[a] + n.sample(rng));
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
        dir = d.map(|c| c / len);
        p = std::array::from_fn(|a| p[a] + STEP * dir[a]);
        out.push(p);
        if !inside(p, dims) {
            break;
        }
    }
    out
}

fn random_vessel(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> Vessel {
    let radius = uniform(rng, spec.vessel_radius_range);
    let start: [f64; 3] = std::array::from_fn(|a| spec.dims[a] as f64 * (0.2 + 0.6 * rng.random::<f64>()));
    let dir = unit_vector(rng);
    let mut back = walk(rng, start, dir.map(|c| -c), spec.dims);
    back.reverse();
    back.push(start);
    back.extend(walk(rng, start, dir, spec.dims));
    Vessel { points: back, radius }
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let ap: [f64; 3] = std::array::from_fn(|i| p[i] - a[i]);
    let denom = ab.iter().map(|c| c * c).sum::<f64>();
    let t = if denom > 0.0 {
        (ab.iter().zip(&ap).map(|(x, y)| x * y).sum::<f64>() / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

/// Voxel index range whose centers may fall within `[lo, hi]`.
fn voxel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
    a.min(b)..b
}

fn paint<F: Fn([f64; 3]) -> bool>(v: &mut Volume, lo: [f64; 3], hi: [f64; 3], value: f32, hit: F) {
    let dims = v.dims;
    for z in voxel_span(lo[2], hi[2], dims[2]) {
        for y in voxel_span(lo[1], hi[1], dims[1]) {
            for x in voxel_span(lo[0], hi[0], dims[0]) {
                let c = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                if hit(c) {
                    let i = v.index(x, y, z);
                    v.data[i] = value;
                }
            }
        }
    }
}

fn paint_vessel(v: &mut Volume, vessel: &Vessel, hu: f32) {
    let r = vessel.radius;
    for w in vessel.points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let lo = std::array::from_fn(|i| a[i].min(b[i]) - r);
        let hi = std::array::from_fn(|i| a[i].max(b[i]) + r);
        paint(v, lo, hi, hu, |c| segment_distance(c, a, b) <= r);
    }
}

fn paint_sphere(v: &mut Volume, b: &BoundingBox, hu: f32) {
    let r = b.half();
    let c = b.center;
    let lo = c.map(|x| x - r);
    let hi = c.map(|x| x + r);
    paint(v, lo, hi, hu, |p| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>() <= r * r);
}

fn boxes_separated(a: &BoundingBox, b: &BoundingBox) -> bool {
    (0..3).any(|i| (a.center[i] - b.center[i]).abs() > a.half() + b.half() + 1.0)
}

fn place_aneurysm(rng: &mut ChaCha8Rng, spec: &PhantomSpec, vessels: &[Vessel]) -> Option<BoundingBox> {
    let d = uniform(rng, spec.aneurysm_diameter_range);
    let raw: [f64; 3] = if vessels.is_empty() {
        std::array::from_fn(|a| spec.dims[a] as f64 * rng.random::<f64>())
    } else {
        let vessel = &vessels[rng.random_range(0..vessels.len())];
        let p = vessel.points[rng.random_range(0..vessel.points.len())];
        let u = unit_vector(rng);
        let dist = vessel.radius + 0.25 * d;
        std::array::from_fn(|a| p[a] + dist * u[a])
    };
    let center = raw.map(|c| c.floor() + 0.5);
    let fits = (0..3).all(|a| center[a] - 0.5 * d >= 0.0 && center[a] + 0.5 * d <= spec.dims[a] as f64);
    if fits {
        BoundingBox::new(center, d).ok()
    } else {
        None
    }
}

/// Builds one phantom. Lesion boxes are pairwise separated by at least one
/// voxel on some axis and lie entirely inside the volume.
pub fn generate_phantom(spec: &PhantomSpec, volume_id: &str, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_voxels = spec.dims.iter().product::<usize>();
    let mut volume = Volume::new(volume_id, spec.dims, spec.spacing, vec![spec.background_hu; n_voxels])?
        .with_cranial_axis(spec.cranial_axis);
    let vessels: Vec<Vessel> = (0..spec.n_vessels).map(|_| random_vessel(&mut rng, spec)).collect();
    for v in &vessels {
        paint_vessel(&mut volume, v, spec.vessel_hu);
    }

    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(spec.n_aneurysms);
    let mut attempts = 0;
    while boxes.len() < spec.n_aneurysms {
        if attempts == spec.max_attempts {
            return Err(Error::PlacementFailed {
                requested: spec.n_aneurysms,
                attempts,
            });
        }
        attempts += 1;
        if let Some(b) = place_aneurysm(&mut rng, spec, &vessels) {
            if boxes.iter().all(|o| boxes_separated(o, &b)) {
                boxes.push(b);
            }
        }
    }
    for b in &boxes {
        paint_sphere(&mut volume, b, spec.aneurysm_hu);
    }

    let mm_per_voxel = spec.spacing.iter().product::<f64>().cbrt();
    let site = if rng.random_bool(0.5) { "internal" } else { "external" };
    let sah = if rng.random_bool(0.5) { "SAH+" } else { "SAH-" };
    let lesions = boxes
        .into_iter()
        .map(|bbox| {
            let mut labels = BTreeMap::new();
            labels.insert("size_class".to_string(), size_class(bbox.diameter * mm_per_voxel).to_string());
            labels.insert("location".to_string(), LOCATIONS[rng.random_range(0..LOCATIONS.len())].to_string());
            labels.insert("site".to_string(), site.to_string());
            labels.insert("sah".to_string(), sah.to_string());
            Lesion { bbox, labels }
        })
        .collect();

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("checked sigma");
        for x in volume.data.iter_mut() {
            *x = (*x as f64 + noise.sample(&mut rng)).round().clamp(i16::MIN as f64, i16::MAX as f64) as f32;
        }
    }
    Ok(Phantom {
        volume,
        lesions,
        vessels,
    })
}

/// Identifier of volume `index` in a synthetic dataset.
pub fn volume_id(index: usize) -> String {
    format!("vol{index:04}")
}

/// Volume `index` of a dataset: the aneurysm count is drawn uniformly from
/// `aneurysm_count` (inclusive) with `seed`, which also seeds the phantom.
pub fn dataset_phantom(spec: &PhantomSpec, aneurysm_count: [usize; 2], seed: u64, index: usize) -> Result<Phantom> {
    if aneurysm_count[0] > aneurysm_count[1] {
        return Err(Error::InvalidParameter("aneurysm count range must be ordered".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PhantomSpec {
        n_aneurysms: rng.random_range(aneurysm_count[0]..=aneurysm_count[1]),
        ..spec.clone()
    };
    generate_phantom(&spec, &volume_id(index), rng.random())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleDetectorSpec {
    pub hit_prob: f64,
    /// Per-axis Gaussian sigma in voxels. Jitter is clamped so a hit stays
    /// inside its lesion box.
    pub center_jitter_sigma: f64,
    /// Detected diameter is the true one times `1 + U(-r, r)`.
    pub diameter_jitter_ratio: f64,
    pub fp_per_volume: f64,
    pub fp_prob_range: [f64; 2],
    pub tp_prob_range: [f64; 2],
    /// Voxels.
    pub fp_diameter_range: [f64; 2],
    pub seed: u64,
}

impl Default for OracleDetectorSpec {
    fn default() -> Self {
        OracleDetectorSpec {
            hit_prob: 0.95,
            center_jitter_sigma: 1.0,
            diameter_jitter_ratio: 0.1,
            fp_per_volume: 4.0,
            fp_prob_range: [0.3, 1.0],
            tp_prob_range: [0.3, 1.0],
            fp_diameter_range: [3.0, 10.0],
            seed: 0,
        }
    }
}

impl OracleDetectorSpec {
    pub fn validate(&self) -> Result<()> {
        check_range("hit_prob", [self.hit_prob, self.hit_prob], 0.0, 1.0)?;
        check_range("tp_prob_range", self.tp_prob_range, 0.0, 1.0)?;
        check_range("fp_prob_range", self.fp_prob_range, 0.0, 1.0)?;
        check_range("fp_diameter_range", self.fp_diameter_range, f64::MIN_POSITIVE, f64::MAX)?;
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !(ok(self.center_jitter_sigma) && ok(self.fp_per_volume) && ok(self.diameter_jitter_ratio) && self.diameter_jitter_ratio < 1.0) {
            return Err(Error::InvalidParameter(
                "jitter and fp_per_volume must be nonnegative, diameter jitter below 1".into(),
            ));
        }
        Ok(())
    }
}

const FP_PLACEMENT_TRIES: usize = 100;

/// Simulated stage-one output for one volume with lesions `truth`.
pub fn oracle_detect(truth: &[BoundingBox], dims: [usize; 3], spec: &OracleDetectorSpec) -> Result<Vec<CandidateDetection>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for lesion in truth {
        if !rng.random_bool(spec.hit_prob) {
            continue;
        }
        let mut center = lesion.center;
        if spec.center_jitter_sigma > 0.0 {
            let n = Normal::new(0.0, spec.center_jitter_sigma).expect("checked sigma");
            let limit = 0.45 * lesion.diameter;
            for c in center.iter_mut() {
                *c += n.sample(&mut rng).clamp(-limit, limit);
            }
        }
        let r = spec.diameter_jitter_ratio;
        let scale = if r > 0.0 { 1.0 + rng.random_range(-r..r) } else { 1.0 };
        let p = uniform(&mut rng, spec.tp_prob_range);
        out.push(CandidateDetection::new(BoundingBox::new(center, lesion.diameter * scale)?, p));
    }
    let n_fp = if spec.fp_per_volume > 0.0 {
        Poisson::new(spec.fp_per_volume).expect("checked rate").sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        let d = uniform(&mut rng, spec.fp_diameter_range);
        let p = uniform(&mut rng, spec.fp_prob_range);
        for _ in 0..FP_PLACEMENT_TRIES {
            let center: [f64; 3] = std::array::from_fn(|a| {
                let span = (dims[a] as f64 - d).max(0.0);
                0.5 * d.min(dims[a] as f64) + span * rng.random::<f64>()
            });
            let b = BoundingBox::new(center, d)?;
            if truth.iter().all(|t| (0..3).any(|a| (t.center[a] - center[a]).abs() >= t.half() + b.half())) {
                out.push(CandidateDetection::new(b, p));
                break;
            }
        }
    }
    Ok(out)
}

/// Replays precomputed candidates through the anchor machinery: each
/// candidate inside a tile is encoded on the anchor of its grid cell whose
/// size is closest in log scale.
#[derive(Debug, Clone, Default)]
pub struct OracleTileDetector {
    pub grid: AnchorGridConfig,
    pub candidates: HashMap<String, Vec<CandidateDetection>>,
}

impl TileDetector for OracleTileDetector {
    fn score_tile(&self, ctx: &TileContext<'_>, _patch: &Volume, anchors: &[Anchor]) -> Vec<(usize, TargetVector)> {
        let Some(cands) = self.candidates.get(ctx.volume_id) else {
            return Vec::new();
        };
        let factor = self.grid.downsample_factor();
        let g = self.grid.grid_size;
        let mut out = Vec::new();
        for c in cands {
            let local = ctx.to_local(c.center());
            if !ctx.tile.contains_local(local) {
                continue;
            }
            let cell = local.map(|x| ((x / factor).floor() as usize).min(g - 1));
            let scale = (0..self.grid.anchor_sizes.len())
                .min_by(|&a, &b| {
                    let da = (c.bbox.diameter / self.grid.anchor_sizes[a]).ln().abs();
                    let db = (c.bbox.diameter / self.grid.anchor_sizes[b]).ln().abs();
                    da.total_cmp(&db)
                })
                .expect("anchor sizes nonempty");
            let i = anchor_index(&self.grid, cell, scale);
            let local_box = BoundingBox {
                center: local,
                diameter: c.bbox.diameter,
            };
            out.push((i, encode(&local_box, &anchors[i], c.probability)));
        }
        out
    }
}

/// Windowed intensity above which a voxel counts as contrast-filled.
pub const BRIGHT_THRESHOLD: f32 = 0.15;

/// Inner-minus-shell fraction of bright voxels around the patch center,
/// mapped through a logistic. Inner region: ellipsoid with semi-axes a
/// quarter of the patch size; shell: up to half the patch size.
pub fn reference_score(patch: &Volume) -> f64 {
    let [nx, ny, nz] = patch.dims;
    let c = [nx / 2, ny / 2, nz / 2].map(|h| h as f64 + 0.5);
    let semi = [nx, ny, nz].map(|n| (n as f64 / 4.0).max(0.5));
    let (mut inner, mut inner_bright, mut shell, mut shell_bright) = (0usize, 0usize, 0usize, 0usize);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let r2: f64 = (0..3).map(|a| ((p[a] - c[a]) / semi[a]).powi(2)).sum();
                let bright = patch.get(x, y, z) > BRIGHT_THRESHOLD;
                if r2 <= 1.0 {
                    inner += 1;
                    inner_bright += bright as usize;
                } else if r2 <= 4.0 {
                    shell += 1;
                    shell_bright += bright as usize;
                }
            }
        }
    }
    let frac = |b: usize, n: usize| if n == 0 { 0.0 } else { b as f64 / n as f64 };
    let s = frac(inner_bright, inner) - frac(shell_bright, shell);
    1.0 / (1.0 + (-6.0 * s).exp())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceClassifier;

impl PatchClassifier for ReferenceClassifier {
    fn score(&self, _volume_id: &str, patches: &FprPatchSet) -> [f64; 3] {
        std::array::from_fn(|i| reference_score(&patches.patches[i]))
    }
}

/// Perfect classifier: 1 when the candidate center lies in an annotated
/// lesion of its volume, 0 otherwise.
#[derive(Debug, Clone, Default)]
pub struct OracleClassifier {
    pub lesions: HashMap<String, Vec<BoundingBox>>,
}

impl PatchClassifier for OracleClassifier {
    fn score(&self, volume_id: &str, patches: &FprPatchSet) -> [f64; 3] {
        let c = patches.candidate.center();
        let hit = self
            .lesions
            .get(volume_id)
            .is_some_and(|ls| ls.iter().any(|l| l.contains(c)));
        [if hit { 1.0 } else { 0.0 }; 3]
    }
}

/// Heuristic stage-one scorer with no knowledge of the ground truth. Each
/// anchor compares the bright fraction of its cube with that of the
/// surrounding cube of twice the side.
#[derive(Debug, Clone)]
pub struct BlobTileDetector {
    pub min_probability: f64,
}

impl Default for BlobTileDetector {
    fn default() -> Self {
        BlobTileDetector { min_probability: 0.05 }
    }
}

struct Integral {
    dims: [usize; 3],
    sums: Vec<u32>,
}

impl Integral {
    fn new(v: &Volume) -> Self {
        let [nx, ny, nz] = v.dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut sums = vec![0u32; sx * sy * (nz + 1)];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let b = (v.get(x, y, z) > BRIGHT_THRESHOLD) as u32;
                    let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
                    sums[at(x + 1, y + 1, z + 1)] = b + sums[at(x, y + 1, z + 1)] + sums[at(x + 1, y, z + 1)]
                        + sums[at(x + 1, y + 1, z)]
                        + sums[at(x, y, z)]
                        - sums[at(x, y, z + 1)]
                        - sums[at(x, y + 1, z)]
                        - sums[at(x + 1, y, z)];
                }
            }
        }
        Integral { dims: v.dims, sums }
    }

    /// Count and volume of the clipped cube `[lo, hi)`.
    fn cube(&self, lo: [i64; 3], hi: [i64; 3]) -> (u64, u64) {
        let l: [usize; 3] = std::array::from_fn(|a| lo[a].clamp(0, self.dims[a] as i64) as usize);
        let h: [usize; 3] = std::array::from_fn(|a| hi[a].clamp(0, self.dims[a] as i64) as usize);
        if (0..3).any(|a| h[a] <= l[a]) {
            return (0, 0);
        }
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let s = |x: usize, y: usize, z: usize| self.sums[x + sx * (y + sy * z)] as i64;
        let total = s(h[0], h[1], h[2]) - s(l[0], h[1], h[2]) - s(h[0], l[1], h[2]) - s(h[0], h[1], l[2])
            + s(l[0], l[1], h[2])
            + s(l[0], h[1], l[2])
            + s(h[0], l[1], l[2])
            - s(l[0], l[1], l[2]);
        let vol = (0..3).map(|a| (h[a] - l[a]) as u64).product();
        (total as u64, vol)
    }
}

impl TileDetector for BlobTileDetector {
    fn score_tile(&self, _ctx: &TileContext<'_>, patch: &Volume, anchors: &[Anchor]) -> Vec<(usize, TargetVector)> {
        let integral = Integral::new(patch);
        let mut out = Vec::new();
        for (i, a) in anchors.iter().enumerate() {
            let bounds = |half: f64| {
                let lo: [i64; 3] = std::array::from_fn(|k| (a.position[k] - half).round() as i64);
                let hi: [i64; 3] = std::array::from_fn(|k| (a.position[k] + half).round() as i64);
                (lo, hi)
            };
            let (lo, hi) = bounds(0.5 * a.size);
            let (inner, inner_vol) = integral.cube(lo, hi);
            if inner_vol == 0 || inner * 2 < inner_vol {
                continue;
            }
            let (olo, ohi) = bounds(a.size);
            let (outer, outer_vol) = integral.cube(olo, ohi);
            let shell_vol = outer_vol - inner_vol;
            let fi = inner as f64 / inner_vol as f64;
            let fs = if shell_vol == 0 { 0.0 } else { (outer - inner) as f64 / shell_vol as f64 };
            let p = 1.0 / (1.0 + (-10.0 * (fi - fs - 0.5)).exp());
            if p >= self.min_probability {
                out.push((
                    i,
                    TargetVector {
                        p,
                        offset: [0.0; 3],
                        log_scale: 0.0,
                    },
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpr::{extract_fpr_patches, FprConfig};
    use crate::volume::normalize_hu;

    fn small_spec(n_aneurysms: usize) -> PhantomSpec {
        PhantomSpec {
            dims: [64, 64, 48],
            n_aneurysms,
            aneurysm_diameter_range: [2.5, 10.0],
            ..Default::default()
        }
    }

    #[test]
    fn size_bins() {
        assert_eq!(size_class(2.5), "<=3mm");
        assert_eq!(size_class(3.0), "3-5mm");
        assert_eq!(size_class(7.5), "5-10mm");
        assert_eq!(size_class(10.0), ">=10mm");
    }

    #[test]
    fn no_aneurysms() {
        let p = generate_phantom(&small_spec(0), "a", 1).unwrap();
        assert!(p.lesions.is_empty());
        assert_eq!(p.vessels.len(), 4);
    }

    #[test]
    fn deterministic_from_seed() {
        let a = generate_phantom(&small_spec(3), "a", 7).unwrap();
        let b = generate_phantom(&small_spec(3), "a", 7).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.lesions, b.lesions);
        let c = generate_phantom(&small_spec(3), "a", 8).unwrap();
        assert_ne!(a.volume.data, c.volume.data);
    }

    #[test]
    fn construction_check() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..small_spec(5)
        };
        let p = generate_phantom(&spec, "a", 3).unwrap();
        assert_eq!(p.lesions.len(), 5);
        for l in &p.lesions {
            let c = l.bbox.center.map(|x| x.floor() as usize);
            assert_eq!(p.volume.get(c[0], c[1], c[2]), spec.aneurysm_hu);
            assert!(l.labels.contains_key("size_class"));
            assert!(LOCATIONS.contains(&l.labels["location"].as_str()));
        }
        for (i, a) in p.lesions.iter().enumerate() {
            for b in &p.lesions[i + 1..] {
                assert!(boxes_separated(&a.bbox, &b.bbox));
            }
        }
    }

    #[test]
    fn interior_contrast_before_noise() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..small_spec(4)
        };
        let p = generate_phantom(&spec, "a", 11).unwrap();
        for l in &p.lesions {
            let (c, r) = (l.bbox.center, l.bbox.half());
            let mut sum = 0.0;
            let mut n = 0;
            for z in 0..spec.dims[2] {
                for y in 0..spec.dims[1] {
                    for x in 0..spec.dims[0] {
                        let q = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                        if (0..3).map(|a| (q[a] - c[a]).powi(2)).sum::<f64>() <= r * r {
                            sum += p.volume.get(x, y, z) as f64;
                            n += 1;
                        }
                    }
                }
            }
            assert!(n > 0);
            assert_eq!(sum / n as f64 - spec.background_hu as f64, (spec.aneurysm_hu - spec.background_hu) as f64);
        }
    }

    #[test]
    fn placement_gives_up() {
        let spec = PhantomSpec {
            dims: [16, 16, 16],
            n_vessels: 0,
            n_aneurysms: 20,
            aneurysm_diameter_range: [8.0, 8.0],
            max_attempts: 500,
            ..Default::default()
        };
        assert!(matches!(
            generate_phantom(&spec, "a", 0),
            Err(Error::PlacementFailed { requested: 20, attempts: 500 })
        ));
    }

    #[test]
    fn invalid_spec() {
        let spec = PhantomSpec {
            aneurysm_diameter_range: [5.0, 2.0],
            ..Default::default()
        };
        assert!(generate_phantom(&spec, "a", 0).is_err());
        let o = OracleDetectorSpec {
            tp_prob_range: [0.5, 1.5],
            ..Default::default()
        };
        assert!(oracle_detect(&[], [10; 3], &o).is_err());
    }

    fn truth() -> Vec<BoundingBox> {
        vec![
            BoundingBox::new([20.5, 20.5, 20.5], 6.0).unwrap(),
            BoundingBox::new([40.5, 30.5, 10.5], 3.0).unwrap(),
        ]
    }

    #[test]
    fn perfect_oracle() {
        let spec = OracleDetectorSpec {
            hit_prob: 1.0,
            center_jitter_sigma: 0.0,
            diameter_jitter_ratio: 0.0,
            fp_per_volume: 0.0,
            tp_prob_range: [1.0, 1.0],
            ..Default::default()
        };
        let out = oracle_detect(&truth(), [64; 3], &spec).unwrap();
        assert_eq!(out.len(), 2);
        for (c, t) in out.iter().zip(truth()) {
            assert_eq!(c.bbox, t);
            assert_eq!(c.probability, 1.0);
        }
    }

    #[test]
    fn misses_everything() {
        let spec = OracleDetectorSpec {
            hit_prob: 0.0,
            seed: 5,
            ..Default::default()
        };
        let out = oracle_detect(&truth(), [64; 3], &spec).unwrap();
        assert!(out.iter().all(|c| truth().iter().all(|t| !t.contains(c.center()))));
    }

    #[test]
    fn poisson_fp_mean() {
        let n = 1000;
        let mut total = 0usize;
        for seed in 0..n {
            let spec = OracleDetectorSpec {
                hit_prob: 0.0,
                seed,
                ..Default::default()
            };
            total += oracle_detect(&truth(), [64; 3], &spec).unwrap().len();
        }
        let mean = total as f64 / n as f64;
        // sigma of the mean of 1000 Poisson(4) draws
        let sigma = (4.0f64 / n as f64).sqrt();
        assert!((mean - 4.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn hits_stay_inside_lesion() {
        for seed in 0..200 {
            let spec = OracleDetectorSpec {
                hit_prob: 1.0,
                center_jitter_sigma: 3.0,
                fp_per_volume: 0.0,
                seed,
                ..Default::default()
            };
            for (c, t) in oracle_detect(&truth(), [64; 3], &spec).unwrap().iter().zip(truth()) {
                assert!(t.contains(c.center()));
            }
        }
    }

    #[test]
    fn reference_classifier_contrast() {
        let bg = Volume::filled("b", [20, 20, 10], [1.0; 3], -0.5).unwrap();
        assert!(reference_score(&bg) <= 0.5);
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            aneurysm_diameter_range: [8.0, 10.0],
            ..small_spec(2)
        };
        let p = generate_phantom(&spec, "a", 21).unwrap();
        let cfg = FprConfig::default();
        for l in &p.lesions {
            let on = extract_fpr_patches(&p.volume, &CandidateDetection::new(l.bbox, 1.0), &cfg).unwrap();
            let on_scores = ReferenceClassifier.score("a", &on);
            let background = normalize_hu(&Volume::filled("b", [20, 20, 10], [1.0; 3], spec.background_hu).unwrap());
            assert!(on_scores[0] > reference_score(&background));
        }
        let same = FprPatchSet {
            candidate: CandidateDetection::new(truth()[0], 0.5),
            patches: [bg.clone(), bg.clone(), bg.clone()],
            specs: [crate::volume::PatchSpec::new([0; 3], [20, 20, 10]); 3],
        };
        let s = ReferenceClassifier.score("a", &same);
        assert!(s[0] == s[1] && s[1] == s[2]);
    }

    #[test]
    fn oracle_classifier_labels() {
        let mut lesions = HashMap::new();
        lesions.insert("v".to_string(), truth());
        let oc = OracleClassifier { lesions };
        let v = Volume::filled("v", [64; 3], [1.0; 3], 0.0).unwrap();
        let cfg = FprConfig::default();
        let inside = extract_fpr_patches(&v, &CandidateDetection::new(truth()[0], 0.4), &cfg).unwrap();
        assert_eq!(oc.score("v", &inside), [1.0; 3]);
        let far = CandidateDetection::new(BoundingBox::new([50.0; 3], 4.0).unwrap(), 0.9);
        let outside = extract_fpr_patches(&v, &far, &cfg).unwrap();
        assert_eq!(oc.score("v", &outside), [0.0; 3]);
        assert_eq!(oc.score("other", &inside), [0.0; 3]);
    }

    #[test]
    fn integral_cube_matches_direct_count() {
        let mut v = Volume::filled("v", [7, 5, 6], [1.0; 3], 0.0).unwrap();
        for (i, x) in v.data.iter_mut().enumerate() {
            if (i * 7919) % 3 == 0 {
                *x = 1.0;
            }
        }
        let integral = Integral::new(&v);
        let (lo, hi) = ([1, 0, 2], [6, 4, 9]);
        let mut direct = 0;
        for z in 2..6 {
            for y in 0..4 {
                for x in 1..6 {
                    direct += (v.get(x, y, z) > BRIGHT_THRESHOLD) as u64;
                }
            }
        }
        assert_eq!(integral.cube(lo, hi), (direct, 5 * 4 * 4));
    }
}
