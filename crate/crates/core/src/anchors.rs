//! Anchor grid, cubic-box IoU and the offset encoding between boxes and
//! per-anchor network outputs.
//!
//! All coordinates are continuous voxel coordinates: voxel `i` spans
//! `[i, i + 1)` along its axis, so its center sits at `i + 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned cube given by its center and side length, both in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: [f64; 3],
    pub diameter: f64,
}

impl BoundingBox {
    pub fn new(center: [f64; 3], diameter: f64) -> Result<Self> {
        if !(diameter > 0.0 && diameter.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "box diameter must be positive and finite, got {diameter}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "box center must be finite, got {center:?}"
            )));
        }
        Ok(BoundingBox { center, diameter })
    }

    pub fn half(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn volume(&self) -> f64 {
        self.diameter * self.diameter * self.diameter
    }

    /// Closed-interval containment: points on a face count as inside.
    pub fn contains(&self, point: [f64; 3]) -> bool {
        let h = self.half();
        (0..3).all(|a| (point[a] - self.center[a]).abs() <= h)
    }

    pub fn translated(&self, by: [f64; 3]) -> BoundingBox {
        BoundingBox {
            center: [
                self.center[0] + by[0],
                self.center[1] + by[1],
                self.center[2] + by[2],
            ],
            diameter: self.diameter,
        }
    }
}

/// Intersection over union of two cubes. Volumes are taken from the same
/// face coordinates as the intersection, so a box has IoU exactly 1 with
/// itself.
pub fn iou3d(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ha, hb) = (a.half(), b.half());
    let side = |c: f64, h: f64| (c + h) - (c - h);
    let va: f64 = (0..3).map(|i| side(a.center[i], ha)).product();
    let vb: f64 = (0..3).map(|i| side(b.center[i], hb)).product();
    let mut inter = 1.0;
    for axis in 0..3 {
        let lo = (a.center[axis] - ha).max(b.center[axis] - hb);
        let hi = (a.center[axis] + ha).min(b.center[axis] + hb);
        let extent = hi - lo;
        if extent <= 0.0 {
            return 0.0;
        }
        inter *= extent;
    }
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A reference cube of side `size` centered on an output-grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub grid_index: [usize; 3],
    pub position: [f64; 3],
    pub size: f64,
    pub scale_index: usize,
}

impl Anchor {
    pub fn as_box(&self) -> BoundingBox {
        BoundingBox {
            center: self.position,
            diameter: self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorGridConfig {
    pub patch_size: usize,
    pub grid_size: usize,
    pub anchor_sizes: Vec<f64>,
}

impl Default for AnchorGridConfig {
    fn default() -> Self {
        AnchorGridConfig {
            patch_size: 96,
            grid_size: 24,
            anchor_sizes: vec![5.0, 10.0, 20.0],
        }
    }
}

impl AnchorGridConfig {
    pub fn downsample_factor(&self) -> f64 {
        self.patch_size as f64 / self.grid_size as f64
    }
}

/// Builds every anchor of a cubic patch.
///
/// Grid point `(i, j, k)` sits at `(index + 0.5) * patch_size / grid_size`.
/// Anchors are ordered x-fastest over the grid with the scale index varying
/// fastest of all, so anchor `n` has scale `n % sizes.len()`.
pub fn anchor_grid(config: &AnchorGridConfig) -> Result<Vec<Anchor>> {
    let AnchorGridConfig {
        patch_size,
        grid_size,
        ref anchor_sizes,
    } = *config;
    if grid_size == 0 || patch_size == 0 || patch_size % grid_size != 0 {
        return Err(Error::InvalidParameter(format!(
            "patch size {patch_size} is not divisible by grid size {grid_size}"
        )));
    }
    if anchor_sizes.is_empty() || anchor_sizes.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(
            "anchor sizes must be nonempty and positive".into(),
        ));
    }
    let factor = config.downsample_factor();
    let mut anchors = Vec::with_capacity(grid_size.pow(3) * anchor_sizes.len());
    for k in 0..grid_size {
        for j in 0..grid_size {
            for i in 0..grid_size {
                let position = [
                    (i as f64 + 0.5) * factor,
                    (j as f64 + 0.5) * factor,
                    (k as f64 + 0.5) * factor,
                ];
                for (scale_index, &size) in anchor_sizes.iter().enumerate() {
                    anchors.push(Anchor {
                        grid_index: [i, j, k],
                        position,
                        size,
                        scale_index,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

/// Position of an anchor in the list produced by [`anchor_grid`].
pub fn anchor_index(config: &AnchorGridConfig, grid_index: [usize; 3], scale_index: usize) -> usize {
    let g = config.grid_size;
    ((grid_index[2] * g + grid_index[1]) * g + grid_index[0]) * config.anchor_sizes.len() + scale_index
}

/// Per-anchor output: a probability plus the geometric offsets of a box
/// relative to the anchor, normalized by the anchor size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub p: f64,
    pub offset: [f64; 3],
    pub log_scale: f64,
}

impl TargetVector {
    pub fn to_array(&self) -> [f64; 5] {
        [self.p, self.offset[0], self.offset[1], self.offset[2], self.log_scale]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        TargetVector {
            p: v[0],
            offset: [v[1], v[2], v[3]],
            log_scale: v[4],
        }
    }

    /// The four regression components `(dx, dy, dz, ds)`.
    pub fn geometry(&self) -> [f64; 4] {
        [self.offset[0], self.offset[1], self.offset[2], self.log_scale]
    }
}

pub fn encode(bbox: &BoundingBox, anchor: &Anchor, p: f64) -> TargetVector {
    let l = anchor.size;
    TargetVector {
        p,
        offset: [
            (bbox.center[0] - anchor.position[0]) / l,
            (bbox.center[1] - anchor.position[1]) / l,
            (bbox.center[2] - anchor.position[2]) / l,
        ],
        log_scale: (bbox.diameter / l).ln(),
    }
}

pub fn decode(t: &TargetVector, anchor: &Anchor) -> (BoundingBox, f64) {
    let l = anchor.size;
    let bbox = BoundingBox {
        center: [
            anchor.position[0] + t.offset[0] * l,
            anchor.position[1] + t.offset[1] * l,
            anchor.position[2] + t.offset[2] * l,
        ],
        diameter: l * t.log_scale.exp(),
    };
    (bbox, t.p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive {
        lesion_index: usize,
        matched_box: BoundingBox,
        target: TargetVector,
    },
    Negative,
    Ignored,
}

impl AnchorLabel {
    pub fn name(&self) -> &'static str {
        match self {
            AnchorLabel::Positive { .. } => "positive",
            AnchorLabel::Negative => "negative",
            AnchorLabel::Ignored => "ignored",
        }
    }

    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelThresholds {
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            positive_iou: 0.5,
            negative_iou: 0.02,
        }
    }
}

/// Labels each anchor by its best IoU over all lesions: above
/// `positive_iou` is positive, below `negative_iou` negative, anything in
/// between is left out of training. Ties on the best IoU go to the lowest
/// lesion index.
pub fn assign_labels(
    anchors: &[Anchor],
    lesions: &[BoundingBox],
    thresholds: LabelThresholds,
) -> Result<Vec<AnchorLabel>> {
    if !(thresholds.positive_iou > thresholds.negative_iou) {
        return Err(Error::InvalidParameter(format!(
            "positive IoU threshold {} must exceed negative threshold {}",
            thresholds.positive_iou, thresholds.negative_iou
        )));
    }
    Ok(anchors
        .iter()
        .map(|anchor| {
            let abox = anchor.as_box();
            let mut best: Option<(usize, f64)> = None;
            for (idx, lesion) in lesions.iter().enumerate() {
                let iou = iou3d(&abox, lesion);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((idx, iou));
                }
            }
            match best {
                Some((idx, iou)) if iou > thresholds.positive_iou => {
                    let matched_box = lesions[idx];
                    AnchorLabel::Positive {
                        lesion_index: idx,
                        matched_box,
                        target: encode(&matched_box, anchor, 1.0),
                    }
                }
                Some((_, iou)) if iou >= thresholds.negative_iou => AnchorLabel::Ignored,
                _ => AnchorLabel::Negative,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(c: [f64; 3], d: f64) -> BoundingBox {
        BoundingBox::new(c, d).unwrap()
    }

    fn anchor_at(position: [f64; 3], size: f64) -> Anchor {
        Anchor {
            grid_index: [0, 0, 0],
            position,
            size,
            scale_index: 0,
        }
    }

    #[test]
    fn default_grid_count_and_first_position() {
        let anchors = anchor_grid(&AnchorGridConfig::default()).unwrap();
        assert_eq!(anchors.len(), 24 * 24 * 24 * 3);
        assert_eq!(anchors[0].position, [2.0, 2.0, 2.0]);
        assert_eq!(
            anchors.iter().take(3).map(|a| a.size).collect::<Vec<_>>(),
            vec![5.0, 10.0, 20.0]
        );
        let cfg = AnchorGridConfig::default();
        for (n, a) in anchors.iter().enumerate().step_by(977) {
            assert_eq!(anchor_index(&cfg, a.grid_index, a.scale_index), n);
        }
    }

    #[test]
    fn unit_factor_grid_sits_on_voxel_centers() {
        let cfg = AnchorGridConfig {
            patch_size: 96,
            grid_size: 96,
            anchor_sizes: vec![5.0],
        };
        let anchors = anchor_grid(&cfg).unwrap();
        let a = anchors[anchor_index(&cfg, [7, 0, 95], 0)];
        assert_eq!(a.position, [7.5, 0.5, 95.5]);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let cfg = AnchorGridConfig {
            patch_size: 96,
            grid_size: 25,
            anchor_sizes: vec![5.0],
        };
        assert!(matches!(anchor_grid(&cfg), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn iou_examples() {
        let a = cube([0.0, 0.0, 0.0], 4.0);
        assert_eq!(iou3d(&a, &a), 1.0);
        assert_eq!(iou3d(&a, &cube([10.0, 0.0, 0.0], 4.0)), 0.0);
        let b = cube([2.0, 0.0, 0.0], 4.0);
        assert!((iou3d(&a, &b) - 32.0 / 96.0).abs() < 1e-15);
    }

    #[test]
    fn encode_examples() {
        let a = anchor_at([48.0, 48.0, 48.0], 10.0);
        let t = encode(&cube([48.0, 48.0, 48.0], 10.0), &a, 1.0);
        assert_eq!(t.to_array(), [1.0, 0.0, 0.0, 0.0, 0.0]);
        let t = encode(&cube([53.0, 48.0, 48.0], 10.0), &a, 0.7);
        assert_eq!(t.to_array(), [0.7, 0.5, 0.0, 0.0, 0.0]);
        let t = encode(&cube([48.0, 48.0, 48.0], 10.0 * std::f64::consts::E), &a, 1.0);
        assert!((t.log_scale - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decode_examples() {
        let a = anchor_at([10.0, 20.0, 30.0], 20.0);
        let (b, p) = decode(&TargetVector::from_array([0.9, 0.0, 0.0, 0.0, 0.0]), &a);
        assert_eq!(p, 0.9);
        assert_eq!(b.center, [10.0, 20.0, 30.0]);
        assert_eq!(b.diameter, 20.0);
        let a = anchor_at([0.0, 0.0, 0.0], 5.0);
        let (b, _) = decode(&TargetVector::from_array([0.5, 0.0, 0.0, 0.0, 2f64.ln()]), &a);
        assert!((b.diameter - 10.0).abs() < 1e-12);
    }

    #[test]
    fn labels_without_lesions_are_negative() {
        let anchors = anchor_grid(&AnchorGridConfig {
            patch_size: 16,
            grid_size: 4,
            anchor_sizes: vec![5.0, 10.0],
        })
        .unwrap();
        let labels = assign_labels(&anchors, &[], LabelThresholds::default()).unwrap();
        assert!(labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn coincident_lesion_gives_unit_target() {
        let anchors = anchor_grid(&AnchorGridConfig::default()).unwrap();
        let lesion = anchors[1234].as_box();
        let labels = assign_labels(&anchors, &[lesion], LabelThresholds::default()).unwrap();
        match &labels[1234] {
            AnchorLabel::Positive { target, .. } => {
                assert_eq!(target.to_array(), [1.0, 0.0, 0.0, 0.0, 0.0])
            }
            other => panic!("expected positive, got {other:?}"),
        }
    }

    #[test]
    fn borderline_overlap_is_ignored() {
        let anchors = [anchor_at([0.0, 0.0, 0.0], 4.0)];
        let labels =
            assign_labels(&anchors, &[cube([2.0, 0.0, 0.0], 4.0)], LabelThresholds::default())
                .unwrap();
        assert_eq!(labels[0], AnchorLabel::Ignored);
    }

    #[test]
    fn max_iou_ties_go_to_lowest_index() {
        let anchors = [anchor_at([0.0, 0.0, 0.0], 10.0)];
        let left = cube([-1.0, 0.0, 0.0], 10.0);
        let right = cube([1.0, 0.0, 0.0], 10.0);
        let labels = assign_labels(&anchors, &[right, left], LabelThresholds::default()).unwrap();
        match labels[0] {
            AnchorLabel::Positive { lesion_index, .. } => assert_eq!(lesion_index, 0),
            ref other => panic!("expected positive, got {other:?}"),
        }
    }

    #[test]
    fn inverted_thresholds_rejected() {
        let t = LabelThresholds {
            positive_iou: 0.02,
            negative_iou: 0.5,
        };
        assert!(assign_labels(&[], &[], t).is_err());
    }

    /// Centered cube of side d inside an anchor of side l has IoU
    /// min(d,l)^3 / max(d,l)^3.
    #[test]
    fn centered_lesion_status_matches_brute_force() {
        for &l in &[5.0, 10.0, 20.0] {
            let anchors = [anchor_at([48.0, 48.0, 48.0], l)];
            for step in 1..=400 {
                let d = step as f64 * 0.1;
                let lesion = cube([48.0, 48.0, 48.0], d);
                let ratio: f64 = d.min(l) / d.max(l);
                let expected_pos = ratio.powi(3) > 0.5;
                let labels =
                    assign_labels(&anchors, &[lesion], LabelThresholds::default()).unwrap();
                assert_eq!(labels[0].is_positive(), expected_pos, "l={l} d={d}");
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (
            prop::array::uniform3(-20.0f64..20.0),
            0.1f64..15.0,
        )
            .prop_map(|(c, d)| BoundingBox { center: c, diameter: d })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou3d(&a, &b);
            prop_assert_eq!(ab, iou3d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou3d(&a, &a), 1.0);
        }

        #[test]
        fn decode_inverts_encode(b in arb_box(), pos in prop::array::uniform3(0.0f64..96.0),
                                 scale in 0usize..3, p in 0.0f64..1.0) {
            let a = anchor_at(pos, [5.0, 10.0, 20.0][scale]);
            let (back, q) = decode(&encode(&b, &a, p), &a);
            prop_assert_eq!(q, p);
            for axis in 0..3 {
                prop_assert!((back.center[axis] - b.center[axis]).abs() <= 1e-9 * b.center[axis].abs().max(1.0));
            }
            prop_assert!((back.diameter - b.diameter).abs() <= 1e-9 * b.diameter);
        }

        #[test]
        fn positive_set_ignores_lesion_order(lesions in prop::collection::vec(arb_box(), 0..5), seed in any::<u64>()) {
            let anchors = anchor_grid(&AnchorGridConfig { patch_size: 16, grid_size: 4, anchor_sizes: vec![5.0, 10.0] }).unwrap();
            let lesions: Vec<BoundingBox> = lesions.into_iter().map(|b| b.translated([8.0, 8.0, 8.0])).collect();
            let mut shuffled = lesions.clone();
            let n = shuffled.len();
            if n > 1 {
                shuffled.rotate_left((seed % n as u64) as usize);
            }
            let a = assign_labels(&anchors, &lesions, LabelThresholds::default()).unwrap();
            let b = assign_labels(&anchors, &shuffled, LabelThresholds::default()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.name(), y.name());
            }
        }
    }
}
