//! Per-anchor detection loss, patch aggregation with hard-negative mining and
//! a finite-difference gradient checker.
//!
//! The per-anchor loss is binary cross-entropy on the probability plus
//! `lambda_reg * p* * |g - g*|_1` over the four geometric components
//! `g = (dx, dy, dz, ds)`. The probability is not part of the L1 term.

use serde::{Deserialize, Serialize};

use crate::anchors::{Anchor, AnchorLabel, TargetVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub lambda_reg: f64,
    /// Probabilities are clamped to `[eps, 1 - eps]` before taking logs.
    pub eps: f64,
    pub hard_neg_k: usize,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda_reg: 0.5,
            eps: 1e-7,
            hard_neg_k: 2,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::InvalidParameter("lambda_reg must be >= 0".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::InvalidParameter("eps must lie in (0, 0.5)".into()));
        }
        if self.hard_neg_k == 0 {
            return Err(Error::InvalidParameter("hard_neg_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPrediction {
    pub anchor: Anchor,
    pub t: TargetVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLoss {
    pub value: f64,
    /// Partial derivatives with respect to `(p, dx, dy, dz, ds)`.
    pub grad: [f64; 5],
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn anchor_loss(pred: &TargetVector, label: &AnchorLabel, params: &LossParams) -> Result<AnchorLoss> {
    let (p_raw, lo, hi) = (pred.p, params.eps, 1.0 - params.eps);
    let p = p_raw.clamp(lo, hi);
    // clamp has zero slope outside the interval
    let inside = p_raw > lo && p_raw < hi;
    let mut grad = [0.0; 5];
    let value = match label {
        AnchorLabel::Ignored => return Err(Error::UnexpectedLabel("ignored")),
        AnchorLabel::Negative => {
            if inside {
                grad[0] = 1.0 / (1.0 - p);
            }
            -(1.0 - p).ln()
        }
        AnchorLabel::Positive { target, .. } => {
            if inside {
                grad[0] = -1.0 / p;
            }
            let (g, g_star) = (pred.geometry(), target.geometry());
            let mut l1 = 0.0;
            for i in 0..4 {
                let d = g[i] - g_star[i];
                l1 += d.abs();
                grad[i + 1] = params.lambda_reg * sign(d);
            }
            -p.ln() + params.lambda_reg * l1
        }
    };
    Ok(AnchorLoss { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchLoss {
    pub value: f64,
    pub positives: Vec<usize>,
    /// Indices of the mined negatives, highest loss first.
    pub hard_negatives: Vec<usize>,
}

/// Mean anchor loss over every positive anchor plus the `hard_neg_k`
/// negatives with the largest loss. Ties in the negative ranking go to the
/// lower index.
pub fn patch_loss(preds: &[AnchorPrediction], labels: &[AnchorLabel], params: &LossParams) -> Result<PatchLoss> {
    params.validate()?;
    if preds.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut selected_losses = Vec::new();
    for (i, (pred, label)) in preds.iter().zip(labels).enumerate() {
        match label {
            AnchorLabel::Ignored => {}
            AnchorLabel::Positive { .. } => {
                positives.push(i);
                selected_losses.push(anchor_loss(&pred.t, label, params)?.value);
            }
            AnchorLabel::Negative => negatives.push((i, anchor_loss(&pred.t, label, params)?.value)),
        }
    }
    negatives.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    negatives.truncate(params.hard_neg_k);
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::EmptySelection);
    }
    selected_losses.extend(negatives.iter().map(|n| n.1));
    // summing in value order makes the result independent of anchor order
    selected_losses.sort_by(f64::total_cmp);
    let value = selected_losses.iter().sum::<f64>() / selected_losses.len() as f64;
    Ok(PatchLoss {
        value,
        positives,
        hard_negatives: negatives.into_iter().map(|n| n.0).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn skipped(&self) -> Vec<usize> {
        self.coordinates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.skipped)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Compares `analytic` against central differences of `f` at `point`.
/// Coordinates flagged in `skip` (non-differentiable points) are reported
/// but excluded from the maximum.
pub fn grad_check<F>(f: F, analytic: &[f64], point: &[f64], h: f64, tol: f64, skip: &[bool]) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::InvalidParameter("gradient and point lengths differ".into()));
    }
    let mut x = point.to_vec();
    let mut coordinates = Vec::with_capacity(point.len());
    let mut max_rel_error = 0.0f64;
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        let rel_error = if scale < 1e-12 {
            0.0
        } else {
            (analytic[i] - numeric).abs() / scale
        };
        let skipped = skip.get(i).copied().unwrap_or(false);
        if !skipped {
            max_rel_error = max_rel_error.max(rel_error);
        }
        coordinates.push(CoordinateCheck {
            analytic: analytic[i],
            numeric,
            rel_error,
            skipped,
        });
    }
    Ok(GradCheckReport {
        coordinates,
        max_rel_error,
        passed: max_rel_error <= tol,
    })
}

/// Gradient check of [`anchor_loss`], skipping L1 components within `10 h`
/// of their kink.
pub fn check_anchor_loss(
    pred: &TargetVector,
    label: &AnchorLabel,
    params: &LossParams,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic = anchor_loss(pred, label, params)?.grad;
    let mut skip = [false; 5];
    if let AnchorLabel::Positive { target, .. } = label {
        let (g, g_star) = (pred.geometry(), target.geometry());
        for i in 0..4 {
            skip[i + 1] = (g[i] - g_star[i]).abs() < 10.0 * h;
        }
    }
    let f = |x: &[f64]| {
        let t = TargetVector::from_array([x[0], x[1], x[2], x[3], x[4]]);
        anchor_loss(&t, label, params).map(|l| l.value).unwrap_or(f64::NAN)
    };
    grad_check(f, &analytic, &pred.to_array(), h, tol, &skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::BoundingBox;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn positive(geometry: [f64; 4]) -> AnchorLabel {
        AnchorLabel::Positive {
            lesion_index: 0,
            matched_box: BoundingBox::new([0.0; 3], 1.0).unwrap(),
            target: TargetVector::from_array([1.0, geometry[0], geometry[1], geometry[2], geometry[3]]),
        }
    }

    fn pred(p: f64, g: [f64; 4]) -> AnchorPrediction {
        AnchorPrediction {
            anchor: crate::anchors::Anchor {
                grid_index: [0; 3],
                position: [0.0; 3],
                size: 5.0,
                scale_index: 0,
            },
            t: TargetVector::from_array([p, g[0], g[1], g[2], g[3]]),
        }
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let params = LossParams::default();
        let l = anchor_loss(&pred(1.0 - params.eps, [0.1; 4]).t, &positive([0.1; 4]), &params).unwrap();
        assert!(l.value < 1e-6);
    }

    #[test]
    fn half_probability_costs_ln2() {
        let params = LossParams::default();
        let l = anchor_loss(&pred(0.5, [0.2; 4]).t, &positive([0.2; 4]), &params).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);
        let l = anchor_loss(&pred(0.5, [3.0, -2.0, 1.0, 9.0]).t, &AnchorLabel::Negative, &params).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);
        assert_eq!(&l.grad[1..], &[0.0; 4]);
    }

    #[test]
    fn regression_term_is_weighted_l1() {
        let params = LossParams::default();
        let l = anchor_loss(&pred(0.5, [0.5, 0.0, -0.25, 1.0]).t, &positive([0.0; 4]), &params).unwrap();
        assert!((l.value - (LN_2 + 0.5 * 1.75)).abs() < 1e-12);
        assert_eq!(&l.grad[1..], &[0.5, 0.0, -0.5, 0.5]);
    }

    #[test]
    fn ignored_label_rejected() {
        let r = anchor_loss(&pred(0.5, [0.0; 4]).t, &AnchorLabel::Ignored, &LossParams::default());
        assert!(matches!(r, Err(Error::UnexpectedLabel(_))));
    }

    #[test]
    fn patch_loss_top_two_negatives() {
        let params = LossParams::default();
        let preds: Vec<_> = [0.9, 0.5, 0.1].iter().map(|&p| pred(p, [0.0; 4])).collect();
        let labels = vec![AnchorLabel::Negative; 3];
        let l = patch_loss(&preds, &labels, &params).unwrap();
        assert_eq!(l.hard_negatives, vec![0, 1]);
        let expected = (-(0.1f64).ln() + LN_2) / 2.0;
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 1.4979).abs() < 1e-4);
    }

    #[test]
    fn patch_loss_one_positive_five_negatives() {
        let params = LossParams::default();
        let mut preds = vec![pred(0.8, [0.0; 4])];
        let mut labels = vec![positive([0.0; 4])];
        for p in [0.1, 0.2, 0.3, 0.4, 0.05] {
            preds.push(pred(p, [0.0; 4]));
            labels.push(AnchorLabel::Negative);
        }
        let l = patch_loss(&preds, &labels, &params).unwrap();
        assert_eq!(l.positives, vec![0]);
        assert_eq!(l.hard_negatives, vec![4, 3]);
        let expected = (-(0.8f64).ln() - (0.6f64).ln() - (0.7f64).ln()) / 3.0;
        assert!((l.value - expected).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_empty_selection() {
        let preds = vec![pred(0.5, [0.0; 4]); 4];
        let labels = vec![AnchorLabel::Ignored; 4];
        assert!(matches!(
            patch_loss(&preds, &labels, &LossParams::default()),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn checker_on_quadratic() {
        let r = grad_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-4, 1e-6, &[]).unwrap();
        assert!((r.coordinates[0].numeric - 6.0).abs() < 1e-6);
        assert!(r.passed);
        assert!(grad_check(|x| x[0], &[1.0], &[0.0], 0.0, 1e-6, &[]).is_err());
    }

    #[test]
    fn kink_coordinates_are_skipped() {
        let label = positive([0.0, 0.3, 0.0, 0.0]);
        let r = check_anchor_loss(&pred(0.4, [0.0, 0.1, 0.2, 0.3]).t, &label, &LossParams::default(), 1e-5, 1e-4)
            .unwrap();
        assert_eq!(r.skipped(), vec![1]);
        assert!(r.passed);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(p in 0.02f64..0.98, g in prop::array::uniform4(-2.0f64..2.0),
                                               gs in prop::array::uniform4(-2.0f64..2.0), pos in any::<bool>()) {
            let label = if pos { positive(gs) } else { AnchorLabel::Negative };
            let r = check_anchor_loss(&pred(p, g).t, &label, &LossParams::default(), 1e-5, 1e-4).unwrap();
            prop_assert!(r.passed, "{:?}", r);
        }

        #[test]
        fn loss_nonnegative_and_decreasing_in_p(p in 0.01f64..0.98, dp in 0.001f64..0.01, g in prop::array::uniform4(-1.0f64..1.0)) {
            let params = LossParams::default();
            let label = positive([0.0; 4]);
            let a = anchor_loss(&pred(p, g).t, &label, &params).unwrap().value;
            let b = anchor_loss(&pred(p + dp, g).t, &label, &params).unwrap().value;
            prop_assert!(a >= 0.0);
            prop_assert!(b < a);
        }

        #[test]
        fn patch_loss_permutation_invariant(ps in prop::collection::vec((0.01f64..0.99, 0u8..3), 1..12), rot in 0usize..12) {
            let params = LossParams::default();
            let preds: Vec<_> = ps.iter().map(|&(p, _)| pred(p, [0.1, 0.0, 0.0, 0.0])).collect();
            let labels: Vec<_> = ps.iter().map(|&(_, k)| match k {
                0 => positive([0.0; 4]),
                1 => AnchorLabel::Negative,
                _ => AnchorLabel::Ignored,
            }).collect();
            let a = patch_loss(&preds, &labels, &params);
            let mut pr = preds.clone();
            let mut lr = labels.clone();
            let r = rot % preds.len();
            pr.rotate_left(r);
            lr.rotate_left(r);
            let b = patch_loss(&pr, &lr, &params);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.value.to_bits(), b.value.to_bits()),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
