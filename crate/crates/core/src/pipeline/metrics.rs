//! Depth error statistics, trajectory accumulation and absolute trajectory
//! error after least-squares alignment.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::warp::{DepthMap, ValidityMask};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    /// Fraction of pixels with `max(pred/gt, gt/pred) < 1.25`.
    pub delta: f64,
}

impl DepthMetrics {
    /// Plain average of several results.
    pub fn mean(items: &[DepthMetrics]) -> DepthMetrics {
        let n = items.len().max(1) as f64;
        let mut m = DepthMetrics::default();
        for i in items {
            m.abs_rel += i.abs_rel / n;
            m.sq_rel += i.sq_rel / n;
            m.rmse += i.rmse / n;
            m.delta += i.delta / n;
        }
        m
    }
}

pub const DELTA_THRESHOLD: f64 = 1.25;

fn usable(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

fn check_dims(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::invalid(format!(
            "prediction is {}×{} but ground truth is {}×{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// `pred · median(gt)/median(pred)`, medians over pixels with usable
/// ground truth and a finite prediction.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMap> {
    check_dims(pred, gt)?;
    let (p, g): (Vec<f64>, Vec<f64>) = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(p, g)| p.is_finite() && usable(**g))
        .map(|(p, g)| (*p, *g))
        .unzip();
    if p.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let mp = median(p);
    if !(mp > 0.0) {
        return Err(Error::DegeneratePrediction(format!("median predicted depth is {mp}")));
    }
    Ok(pred.scaled(median(g) / mp))
}

/// Statistics over pixels inside `mask` where both maps are usable.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<DepthMetrics> {
    check_dims(pred, gt)?;
    if mask.width() != gt.width() || mask.height() != gt.height() {
        return Err(Error::invalid("mask and depth maps differ in size"));
    }
    let mut n = 0usize;
    let mut m = DepthMetrics::default();
    let mut sq = 0.0;
    for ((&p, &g), &keep) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if !(keep && usable(p) && usable(g)) {
            continue;
        }
        n += 1;
        let e = p - g;
        m.abs_rel += e.abs() / g;
        m.sq_rel += e * e / g;
        sq += e * e;
        if (p / g).max(g / p) < DELTA_THRESHOLD {
            m.delta += 1.0;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: m.abs_rel / nf,
        sq_rel: m.sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        delta: m.delta / nf,
    })
}

/// Median scaling followed by [`depth_metrics`] over the usable
/// ground-truth pixels.
pub fn evaluate_depth(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    let scaled = median_scale(pred, gt)?;
    depth_metrics(&scaled, gt, &gt.valid_mask())
}

/// Chains relative motions into poses relative to the first frame:
/// `P_0 = I`, `P_{i+1} = P_i·T_i`, where `T_i` is the camera motion from
/// frame i to frame i+1 as used by the warp.
pub fn accumulate_trajectory(relative: &[PoseSE3]) -> Vec<PoseSE3> {
    let mut out = Vec::with_capacity(relative.len() + 1);
    let mut acc = PoseSE3::identity();
    out.push(acc);
    for t in relative {
        acc = acc.compose(t);
        out.push(acc);
    }
    out
}

/// `x ↦ s·R·x + t` taking predicted positions onto ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub ate_rmse: f64,
    pub alignment: Alignment,
    /// Per-pose position error after alignment.
    pub residuals: Vec<f64>,
}

/// Relative size below which a singular value counts as zero.
const COLLINEAR_TOL: f64 = 1e-10;

/// Closed-form least-squares similarity (or rigid, when `rigid`) alignment
/// of `pred` onto `gt`.
pub fn align(pred: &[Vector3<f64>], gt: &[Vector3<f64>], rigid: bool) -> Result<Alignment> {
    let n = pred.len();
    if n != gt.len() {
        return Err(Error::Alignment(format!("{n} predicted positions against {} ground-truth", gt.len())));
    }
    if n < 3 {
        return Err(Error::Alignment(format!("need at least 3 poses, got {n}")));
    }
    let nf = n as f64;
    let mp = pred.iter().sum::<Vector3<f64>>() / nf;
    let mg = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut gt_cov = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dg * dp.transpose();
        gt_cov += dg * dg.transpose();
        var_p += dp.norm_squared();
    }
    cov /= nf;
    var_p /= nf;
    let gs = gt_cov.symmetric_eigenvalues();
    let mut gs: Vec<f64> = gs.iter().copied().collect();
    gs.sort_by(|a, b| b.total_cmp(a));
    if !(gs[0] > 0.0) || gs[1] <= COLLINEAR_TOL * gs[0] {
        return Err(Error::Alignment("ground-truth positions are collinear".into()));
    }
    if !(var_p > 0.0) || !var_p.is_finite() {
        return Err(Error::Alignment("predicted positions do not spread".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if rigid {
        1.0
    } else {
        (svd.singular_values[0] + svd.singular_values[1] + s[(2, 2)] * svd.singular_values[2]) / var_p
    };
    let translation = mg - rotation * mp * scale;
    Ok(Alignment {
        rotation,
        translation,
        scale,
    })
}

/// RMSE of camera positions after [`align`].
pub fn ate(pred: &[PoseSE3], gt: &[PoseSE3], rigid: bool) -> Result<AteResult> {
    let p: Vec<Vector3<f64>> = pred.iter().map(|x| x.translation).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|x| x.translation).collect();
    ate_positions(&p, &g, rigid)
}

pub fn ate_positions(pred: &[Vector3<f64>], gt: &[Vector3<f64>], rigid: bool) -> Result<AteResult> {
    let alignment = align(pred, gt, rigid)?;
    let residuals: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (alignment.apply(p) - g).norm()).collect();
    let ate_rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(AteResult {
        ate_rmse,
        alignment,
        residuals,
    })
}

/// Length of the diagonal of the axis-aligned box around the positions.
pub fn bbox_diagonal(poses: &[PoseSE3]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in poses {
        lo = lo.inf(&p.translation);
        hi = hi.sup(&p.translation);
    }
    (hi - lo).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn zero_median_prediction_is_degenerate() {
        let gt = DepthMap::constant(3, 1, 2.0);
        let pred = DepthMap::new(3, 1, vec![0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(median_scale(&pred, &gt), Err(Error::DegeneratePrediction(_))));
        let bad_gt = DepthMap::new(3, 1, vec![0.0, f64::NAN, -1.0]).unwrap();
        assert!(matches!(median_scale(&gt, &bad_gt), Err(Error::NoValidPixels)));
    }

    #[test]
    fn rigid_alignment_keeps_unit_scale() {
        let g: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 0.0)).collect();
        let p: Vec<Vector3<f64>> = g.iter().map(|x| x * 2.0).collect();
        let r = ate_positions(&p, &g, true).unwrap();
        assert_eq!(r.alignment.scale, 1.0);
        assert!(r.ate_rmse > 0.1);
        let s = ate_positions(&p, &g, false).unwrap();
        assert!((s.alignment.scale - 0.5).abs() < 1e-12);
        assert!(s.ate_rmse < 1e-12);
    }

    #[test]
    fn degenerate_trajectories_are_rejected() {
        let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(ate_positions(&line, &line, false), Err(Error::Alignment(_))));
        assert!(matches!(ate_positions(&line[..2], &line[..2], false), Err(Error::Alignment(_))));
        let bent: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, (i % 2) as f64, 0.0)).collect();
        let still = vec![Vector3::zeros(); 5];
        assert!(matches!(ate_positions(&still, &bent, false), Err(Error::Alignment(_))));
    }

    #[test]
    fn bbox_diagonal_of_unit_cube_corners() {
        let p = [Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)].map(|t| PoseSE3::new(crate::RotationMatrix::identity(), t));
        assert!((bbox_diagonal(&p) - 3f64.sqrt()).abs() < 1e-15);
    }
}
