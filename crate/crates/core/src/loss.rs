//! Training losses for keypoint heatmaps and offsets, with analytic
//! gradients and a central-difference checker.
//!
//! Reductions run in row-major order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Role;
use crate::grid::Grid2;
use crate::targets::TargetBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
    /// Predictions are clamped to `[clamp_eps, 1 - clamp_eps]` before `ln`.
    pub clamp_eps: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            clamp_eps: 1e-12,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal exponents must satisfy alpha > 0 and beta >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// Object count used for normalisation. Images without lesions normalise by 1.
pub fn effective_objects(n_objects: usize) -> usize {
    n_objects.max(1)
}

fn check_focal_inputs(
    pred: &Grid2<f64>,
    target: &Grid2<f64>,
    n_objects: usize,
    p: &FocalParams,
) -> Result<()> {
    p.validate()?;
    target.ensure_shape(pred.rows(), pred.cols())?;
    if n_objects == 0 && !pred.as_slice().is_empty() {
        return Err(Error::ZeroObjects);
    }
    Ok(())
}

/// Penalty-reduced pixel-wise focal loss.
///
/// Cells with target exactly 1 contribute `(1-y)^a ln y`; every other cell
/// contributes `(1-Y)^b y^a ln(1-y)`. The sum is negated and divided by
/// `n_objects`.
pub fn focal_loss(
    pred: &Grid2<f64>,
    target: &Grid2<f64>,
    n_objects: usize,
    p: &FocalParams,
) -> Result<f64> {
    check_focal_inputs(pred, target, n_objects, p)?;
    let eps = p.clamp_eps;
    let mut sum = 0.0;
    for (&yhat, &y) in pred.as_slice().iter().zip(target.as_slice()) {
        let q = yhat.clamp(eps, 1.0 - eps);
        sum += if y == 1.0 {
            (1.0 - q).powf(p.alpha) * q.ln()
        } else {
            (1.0 - y).powf(p.beta) * q.powf(p.alpha) * (1.0 - q).ln()
        };
    }
    Ok(-sum / n_objects as f64)
}

/// Analytic `dL/dpred`. Cells clamped by `clamp_eps` get gradient 0.
pub fn focal_loss_grad(
    pred: &Grid2<f64>,
    target: &Grid2<f64>,
    n_objects: usize,
    p: &FocalParams,
) -> Result<Grid2<f64>> {
    check_focal_inputs(pred, target, n_objects, p)?;
    let eps = p.clamp_eps;
    let n = n_objects as f64;
    let (a, b) = (p.alpha, p.beta);
    let data = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&q, &y)| {
            if q < eps || q > 1.0 - eps {
                return 0.0;
            }
            let d = if y == 1.0 {
                -a * (1.0 - q).powf(a - 1.0) * q.ln() + (1.0 - q).powf(a) / q
            } else {
                let w = (1.0 - y).powf(b);
                w * (a * q.powf(a - 1.0) * (1.0 - q).ln() - q.powf(a) / (1.0 - q))
            };
            -d / n
        })
        .collect();
    Grid2::from_vec(pred.rows(), pred.cols(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothL1 {
    /// Transition between the quadratic and linear branches.
    pub breakpoint: f64,
}

impl Default for SmoothL1 {
    fn default() -> Self {
        Self { breakpoint: 1.0 }
    }
}

impl SmoothL1 {
    pub fn value(&self, x: f64) -> f64 {
        let b = self.breakpoint;
        if x.abs() < b {
            0.5 * x * x / b
        } else {
            x.abs() - 0.5 * b
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let b = self.breakpoint;
        if x.abs() < b {
            x / b
        } else {
            x.signum()
        }
    }
}

/// Smooth L1 with the usual breakpoint at `|x| = 1`.
pub fn smooth_l1(x: f64) -> f64 {
    SmoothL1::default().value(x)
}

fn check_offsets(pred: &[Grid2<f64>; 8], targets: &TargetBundle) -> Result<()> {
    let (rows, cols) = (targets.bundle.rows(), targets.bundle.cols());
    for g in pred {
        g.ensure_shape(rows, cols)?;
    }
    Ok(())
}

/// Offset regression loss read only at ground-truth cells of the four
/// extreme roles, normalised by the annotation count. Zero when there are no
/// annotations.
pub fn offset_loss(pred: &[Grid2<f64>; 8], targets: &TargetBundle, sl1: &SmoothL1) -> Result<f64> {
    check_offsets(pred, targets)?;
    if targets.n_objects == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for k in 0..targets.n_objects {
        for role in Role::EXTREMES {
            let cell = targets.gt_cells[role.index()][k];
            let i = 2 * role.index();
            sum += sl1.value(pred[i].get(cell.row, cell.col) - cell.dx);
            sum += sl1.value(pred[i + 1].get(cell.row, cell.col) - cell.dy);
        }
    }
    Ok(sum / targets.n_objects as f64)
}

/// Analytic gradient of [`offset_loss`] with respect to every offset plane.
pub fn offset_loss_grad(
    pred: &[Grid2<f64>; 8],
    targets: &TargetBundle,
    sl1: &SmoothL1,
) -> Result<[Grid2<f64>; 8]> {
    check_offsets(pred, targets)?;
    let (rows, cols) = (targets.bundle.rows(), targets.bundle.cols());
    let mut grad: [Grid2<f64>; 8] = std::array::from_fn(|_| Grid2::zeros(rows, cols));
    if targets.n_objects == 0 {
        return Ok(grad);
    }
    let n = targets.n_objects as f64;
    for k in 0..targets.n_objects {
        for role in Role::EXTREMES {
            let cell = targets.gt_cells[role.index()][k];
            let i = 2 * role.index();
            *grad[i].get_mut(cell.row, cell.col) +=
                sl1.derivative(pred[i].get(cell.row, cell.col) - cell.dx) / n;
            *grad[i + 1].get_mut(cell.row, cell.col) +=
                sl1.derivative(pred[i + 1].get(cell.row, cell.col) - cell.dy) / n;
        }
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub max_rel_err: f64,
    /// Index of the worst cell in the flattened input, if any cell was checked.
    pub worst_cell: Option<usize>,
    pub rel_errors: Vec<f64>,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` at `input`.
///
/// Relative error per cell is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = 1e-8`, so vanishing gradients are compared absolutely. Cells for
/// which `skip` returns true are reported with error 0.
pub fn finite_diff_check<F>(
    loss: F,
    input: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    skip: impl Fn(usize) -> bool,
) -> Result<GradientReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    if input.len() != analytic.len() {
        return Err(Error::SizeMismatch(format!(
            "input has {} cells, gradient has {}",
            input.len(),
            analytic.len()
        )));
    }
    const FLOOR: f64 = 1e-8;
    let mut x = input.to_vec();
    let mut rel_errors = Vec::with_capacity(input.len());
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..input.len() {
        if skip(i) {
            rel_errors.push(0.0);
            continue;
        }
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        rel_errors.push(err);
        if worst.is_none_or(|(_, w)| err > w) {
            worst = Some((i, err));
        }
    }
    let max_rel_err = worst.map_or(0.0, |(_, e)| e);
    Ok(GradientReport {
        max_rel_err,
        worst_cell: worst.map(|(i, _)| i),
        rel_errors,
        passed: max_rel_err < tol,
    })
}

/// Checks [`focal_loss_grad`] against central differences of
/// [`focal_loss`], one cell at a time.
///
/// The loss is a sum of independent per-cell terms, so each partial
/// derivative is differenced on that cell alone (a 1x1 loss with the same
/// target and object count). Differencing the full sum instead would bury
/// small partials under rounding of the total, about `ulp(L) / h`. Cells
/// whose stencil `[q - h, q + h]` leaves the clamp interior are skipped.
pub fn check_focal_gradient(
    pred: &Grid2<f64>,
    target: &Grid2<f64>,
    n_objects: usize,
    p: &FocalParams,
    h: f64,
    tol: f64,
) -> Result<GradientReport> {
    let analytic = focal_loss_grad(pred, target, n_objects, p)?;
    let (eps, q) = (p.clamp_eps, pred.as_slice());
    let mut report = GradientReport {
        max_rel_err: 0.0,
        worst_cell: None,
        rel_errors: Vec::with_capacity(q.len()),
        passed: true,
    };
    for (i, (&qi, &yi)) in q.iter().zip(target.as_slice()).enumerate() {
        if qi - h < eps || qi + h > 1.0 - eps {
            report.rel_errors.push(0.0);
            continue;
        }
        let y = Grid2::filled(1, 1, yi);
        let cell = |x: &[f64]| {
            focal_loss(&Grid2::filled(1, 1, x[0]), &y, n_objects, p).unwrap_or(f64::NAN)
        };
        let one = finite_diff_check(cell, &[qi], &[analytic.as_slice()[i]], h, tol, |_| false)?;
        let err = one.max_rel_err;
        report.rel_errors.push(err);
        if report.worst_cell.is_none() || err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst_cell = Some(i);
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ExtremePoints, Point2};
    use crate::targets::{render_targets, TargetConfig};

    fn grid(rows: usize, cols: usize, v: &[f64]) -> Grid2<f64> {
        Grid2::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn worked_focal_example() {
        let pred = Grid2::filled(2, 2, 0.5);
        let target = grid(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let l = focal_loss(&pred, &target, 1, &FocalParams::default()).unwrap();
        let expected = 4.0 * 0.25 * std::f64::consts::LN_2;
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let target = grid(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let l = focal_loss(&target, &target, 2, &FocalParams::default()).unwrap();
        assert!(l.abs() < 1e-9, "{l}");
    }

    // Branch-explicit reference for Gaussian-shoulder targets.
    #[test]
    fn shoulder_targets_use_negative_branch() {
        let pred = grid(1, 3, &[0.3, 0.6, 0.9]);
        let target = grid(1, 3, &[0.5, 0.999, 1.0]);
        let p = FocalParams::default();
        let neg = |yhat: f64, y: f64| (1.0 - y).powi(4) * yhat.powi(2) * (1.0 - yhat).ln();
        let pos = |yhat: f64| (1.0 - yhat).powi(2) * yhat.ln();
        let expected = -(neg(0.3, 0.5) + neg(0.6, 0.999) + pos(0.9)) / 3.0;
        let got = focal_loss(&pred, &target, 3, &p).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn focal_errors() {
        let a = Grid2::filled(2, 2, 0.5);
        let b = Grid2::filled(2, 3, 0.0);
        assert!(matches!(
            focal_loss(&a, &b, 1, &FocalParams::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            focal_loss(&a, &a, 0, &FocalParams::default()),
            Err(Error::ZeroObjects)
        ));
        assert_eq!(effective_objects(0), 1);
    }

    #[test]
    fn doubling_objects_halves_loss() {
        let pred = grid(2, 2, &[0.2, 0.7, 0.4, 0.9]);
        let target = grid(2, 2, &[1.0, 0.3, 0.0, 0.8]);
        let p = FocalParams::default();
        let one = focal_loss(&pred, &target, 3, &p).unwrap();
        let two = focal_loss(&pred, &target, 6, &p).unwrap();
        assert_eq!(two, one / 2.0);
    }

    #[test]
    fn clamped_cells_have_zero_gradient() {
        let pred = grid(1, 3, &[0.0, 1.0, 0.5]);
        let target = grid(1, 3, &[1.0, 0.0, 0.0]);
        let g = focal_loss_grad(&pred, &target, 1, &FocalParams::default()).unwrap();
        assert_eq!(g.get(0, 0), 0.0);
        assert_eq!(g.get(0, 1), 0.0);
        assert!(g.get(0, 2) != 0.0);
    }

    #[test]
    fn symmetric_inputs_give_symmetric_gradient() {
        let pred = grid(3, 3, &[0.1, 0.4, 0.1, 0.4, 0.8, 0.4, 0.1, 0.4, 0.1]);
        let target = grid(3, 3, &[0.0, 0.6, 0.0, 0.6, 1.0, 0.6, 0.0, 0.6, 0.0]);
        let g = focal_loss_grad(&pred, &target, 1, &FocalParams::default()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(g.get(r, c), g.get(c, r));
                assert_eq!(g.get(r, c), g.get(2 - r, 2 - c));
            }
        }
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        let s = SmoothL1::default();
        assert_eq!(s.derivative(1.0), 1.0);
        assert_eq!(s.derivative(-1.0), -1.0);
        assert!((s.derivative(1.0 - 1e-12) - 1.0).abs() < 1e-11);
        assert!((smooth_l1(1.0 - 1e-9) - smooth_l1(1.0)).abs() < 1e-8);
    }

    fn single_target() -> TargetBundle {
        let e = ExtremePoints::new(
            Point2::new(10.0, 7.0),
            Point2::new(5.0, 13.0),
            Point2::new(13.0, 22.0),
            Point2::new(21.0, 14.5),
        );
        render_targets(&[e], 8, 8, 4, &TargetConfig::default()).unwrap()
    }

    fn target_offsets(t: &TargetBundle) -> [Grid2<f64>; 8] {
        std::array::from_fn(|i| t.bundle.offsets[i].to_f64())
    }

    #[test]
    fn offset_loss_examples() {
        let t = single_target();
        let exact = target_offsets(&t);
        let sl1 = SmoothL1::default();
        assert_eq!(offset_loss(&exact, &t, &sl1).unwrap(), 0.0);

        let mut shifted = exact.clone();
        for role in Role::EXTREMES {
            let cell = t.gt_cells[role.index()][0];
            let i = 2 * role.index();
            shifted[i].set(cell.row, cell.col, cell.dx + 0.5);
            shifted[i + 1].set(cell.row, cell.col, cell.dy + 0.5);
        }
        assert_eq!(offset_loss(&shifted, &t, &sl1).unwrap(), 1.0);

        // cells away from ground truth do not matter
        let mut noisy = exact.clone();
        for g in noisy.iter_mut() {
            g.set(7, 7, 3.0);
            g.set(0, 7, -2.0);
        }
        assert_eq!(offset_loss(&noisy, &t, &sl1).unwrap(), 0.0);
    }

    #[test]
    fn offset_loss_without_objects_is_zero() {
        let t = render_targets(&[], 4, 4, 4, &TargetConfig::default()).unwrap();
        let pred: [Grid2<f64>; 8] = std::array::from_fn(|_| Grid2::filled(4, 4, 0.3));
        assert_eq!(offset_loss(&pred, &t, &SmoothL1::default()).unwrap(), 0.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient_both_ways() {
        let input = vec![0.3; 6];
        let report = finite_diff_check(|_| 2.5, &input, &[0.0; 6], 1e-6, 1e-5, |_| false).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed);
    }
}
