//! Overlap tests, distributional distance (squared MMD), and displacement
//! metrics over rollout bundles.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::kinematics::box_corners;
use crate::math;

/// Separating-axis overlap test for two oriented boxes given by their corner
/// lists. Touching edges count as overlap.
pub fn obb_overlap(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
    // the 4 candidate axes are the edge normals of both boxes (2 unique each)
    let axes = |c: &[(f64, f64); 4]| {
        [
            (c[1].0 - c[0].0, c[1].1 - c[0].1),
            (c[3].0 - c[0].0, c[3].1 - c[0].1),
        ]
    };
    for (ax, ay) in axes(a).into_iter().chain(axes(b)) {
        let norm = math::hypot(ax, ay);
        if norm == 0.0 {
            continue;
        }
        let (nx, ny) = (ax / norm, ay / norm);
        let project = |c: &[(f64, f64); 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(x, y) in c {
                let p = x * nx + y * ny;
                lo = lo.min(p);
                hi = hi.max(p);
            }
            (lo, hi)
        };
        let (alo, ahi) = project(a);
        let (blo, bhi) = project(b);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Overlap test on poses and footprints.
pub fn boxes_overlap(pose_a: (f64, f64, f64), shape_a: (f64, f64), pose_b: (f64, f64, f64), shape_b: (f64, f64)) -> bool {
    obb_overlap(&box_corners(pose_a, shape_a), &box_corners(pose_b, shape_b))
}

/// Fraction of agents that overlap another agent at any step.
/// `tracks[i]` lists `(x, y, psi, valid)` per step; `shapes[i]` is `(l, w)`.
pub fn collision_rate(tracks: &[Vec<(f64, f64, f64, bool)>], shapes: &[(f64, f64)]) -> f64 {
    let n = tracks.len();
    if n == 0 {
        return 0.0;
    }
    let mut hit = alloc::vec![false; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if hit[i] && hit[j] {
                continue;
            }
            let steps = tracks[i].len().min(tracks[j].len());
            for t in 0..steps {
                let (xi, yi, pi, vi) = tracks[i][t];
                let (xj, yj, pj, vj) = tracks[j][t];
                if vi && vj && boxes_overlap((xi, yi, pi), shapes[i], (xj, yj, pj), shapes[j]) {
                    hit[i] = true;
                    hit[j] = true;
                    break;
                }
            }
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / n as f64
}

/// Squared maximum mean discrepancy (V-statistic) with a Gaussian kernel.
/// The bandwidth is the median pairwise distance over the pooled samples
/// (median of the upper-triangle distances; falls back to 1 when degenerate).
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], sigma: Option<f64>) -> Result<f64, CoreError> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::Metric("mmd needs non-empty sample sets".to_string()));
    }
    let dim = a[0].len();
    if a.iter().chain(b.iter()).any(|v| v.len() != dim) {
        return Err(CoreError::Metric("mmd samples have mixed dimensionality".to_string()));
    }
    let sigma = match sigma {
        Some(s) if s > 0.0 => s,
        Some(_) => return Err(CoreError::Metric("mmd bandwidth must be positive".to_string())),
        None => median_pairwise_distance(a, b),
    };
    let kern = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        math::exp(-d2 / (2.0 * sigma * sigma))
    };
    let mean_kernel = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut s = 0.0;
        for xi in x {
            for yj in y {
                s += kern(xi, yj);
            }
        }
        s / (x.len() * y.len()) as f64
    };
    let v = mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
    // the V-statistic is nonnegative; clip the rounding dust
    Ok(v.max(0.0))
}

fn median_pairwise_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            let d2: f64 = pooled[i]
                .iter()
                .zip(pooled[j].iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            dists.push(math::sqrt(d2));
        }
    }
    dists.sort_by(|x, y| x.total_cmp(y));
    let m = dists.len();
    let med = if m == 0 {
        0.0
    } else if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Displacement metrics over `K` rollouts of one agent against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementMetrics {
    pub ade_avg: f64,
    pub ade_min: f64,
    pub fde_avg: f64,
    pub fde_min: f64,
    /// Mean pairwise inter-rollout displacement averaged over steps.
    pub add: f64,
    /// Mean pairwise inter-rollout displacement at the final step.
    pub fdd: f64,
    /// Set when K == 1 and the diversity terms are vacuously zero.
    pub single_rollout: bool,
}

/// Compute ADE/FDE (against `gt`) and ADD/FDD (between rollouts) over `K`
/// rollouts. All tracks must share the same positive length.
pub fn displacement_metrics(rollouts: &[Vec<(f64, f64)>], gt: &[(f64, f64)]) -> Result<DisplacementMetrics, CoreError> {
    if rollouts.is_empty() || gt.is_empty() {
        return Err(CoreError::Metric("displacement metrics need rollouts and ground truth".to_string()));
    }
    let steps = gt.len();
    if rollouts.iter().any(|r| r.len() != steps) {
        return Err(CoreError::Metric("rollout length mismatch".to_string()));
    }
    let k = rollouts.len();
    let mut ade_sum = 0.0;
    let mut ade_min = f64::INFINITY;
    let mut fde_sum = 0.0;
    let mut fde_min = f64::INFINITY;
    for r in rollouts {
        let ade = r
            .iter()
            .zip(gt)
            .map(|(&p, &q)| math::dist2(p, q))
            .sum::<f64>()
            / steps as f64;
        let fde = math::dist2(r[steps - 1], gt[steps - 1]);
        ade_sum += ade;
        fde_sum += fde;
        ade_min = ade_min.min(ade);
        fde_min = fde_min.min(fde);
    }
    let (mut add, mut fdd) = (0.0, 0.0);
    if k > 1 {
        let pairs = (k * (k - 1) / 2) as f64;
        for i in 0..k {
            for j in (i + 1)..k {
                let mut step_sum = 0.0;
                for t in 0..steps {
                    step_sum += math::dist2(rollouts[i][t], rollouts[j][t]);
                }
                add += step_sum / steps as f64;
                fdd += math::dist2(rollouts[i][steps - 1], rollouts[j][steps - 1]);
            }
        }
        add /= pairs;
        fdd /= pairs;
    }
    Ok(DisplacementMetrics {
        ade_avg: ade_sum / k as f64,
        ade_min,
        fde_avg: fde_sum / k as f64,
        fde_min,
        add,
        fdd,
        single_rollout: k == 1,
    })
}
