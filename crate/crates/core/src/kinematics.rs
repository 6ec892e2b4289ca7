//! First-order bicycle model, the 33x33 motion vocabulary, and the
//! Average-Corner-Error search that produces ground-truth motion labels.

use alloc::vec::Vec;

use crate::math::{self, wrap_angle};

/// Number of bins per control axis.
pub const CONTROL_BINS: usize = 33;
/// Regular motion labels (33 x 33).
pub const MOTION_VOCAB: usize = CONTROL_BINS * CONTROL_BINS;
/// The special start label appended after the regular grid.
pub const MOTION_START: usize = MOTION_VOCAB;
/// Full vocabulary size including the start label.
pub const MOTION_VOCAB_FULL: usize = MOTION_VOCAB + 1;

pub const ACCEL_RANGE: (f64, f64) = (-10.0, 10.0);
pub const YAW_RATE_RANGE: (f64, f64) = (-core::f64::consts::FRAC_PI_2, core::f64::consts::FRAC_PI_2);

/// Kinematic state: position, heading, scalar speed.
///
/// Speed may go negative through integration (reversing); no clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

/// Index into the 1090-entry motion vocabulary.
///
/// Indices `0..1088` flatten an `(accel, yaw_rate)` grid as
/// `accel_bin * 33 + yaw_bin`; index 1089 is the start label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionLabel(pub usize);

impl MotionLabel {
    pub const START: MotionLabel = MotionLabel(MOTION_START);

    pub fn is_start(self) -> bool {
        self.0 == MOTION_START
    }

    /// Decode to the `(accel, yaw_rate)` pair; `None` for the start label.
    pub fn controls(self) -> Option<(f64, f64)> {
        if self.is_start() {
            return None;
        }
        debug_assert!(self.0 < MOTION_VOCAB);
        let ai = self.0 / CONTROL_BINS;
        let wi = self.0 % CONTROL_BINS;
        Some((grid_value(ACCEL_RANGE, ai), grid_value(YAW_RATE_RANGE, wi)))
    }
}

fn grid_value(range: (f64, f64), i: usize) -> f64 {
    // same arithmetic as math::linspace so decoded controls match the vocab bit-exactly
    let step = (range.1 - range.0) / (CONTROL_BINS - 1) as f64;
    range.0 + step * i as f64
}

/// All 1089 `(accel, yaw_rate)` pairs in flattening order (accel outer).
pub fn motion_vocab() -> Vec<(f64, f64)> {
    let accels = math::linspace(ACCEL_RANGE.0, ACCEL_RANGE.1, CONTROL_BINS);
    let yaws = math::linspace(YAW_RATE_RANGE.0, YAW_RATE_RANGE.1, CONTROL_BINS);
    let mut v = Vec::with_capacity(MOTION_VOCAB);
    for &a in &accels {
        for &w in &yaws {
            v.push((a, w));
        }
    }
    v
}

/// First-order bicycle-model update. The new heading and new speed feed the
/// displacement, in that order:
/// `psi' = wrap(psi + w*dt); v' = v + a*dt; x' = x + v'*cos(psi')*dt; y' = y + v'*sin(psi')*dt`.
pub fn step_bicycle(s: KinState, accel: f64, yaw_rate: f64, dt: f64) -> KinState {
    debug_assert!(dt > 0.0);
    let psi = wrap_angle(s.psi + yaw_rate * dt);
    let v = s.v + accel * dt;
    KinState {
        x: s.x + v * math::cos(psi) * dt,
        y: s.y + v * math::sin(psi) * dt,
        psi,
        v,
    }
}

/// Corners of the oriented `l x w` box centered at the pose, in fixed order:
/// front-left, front-right, rear-right, rear-left.
pub fn box_corners(pose: (f64, f64, f64), shape: (f64, f64)) -> [(f64, f64); 4] {
    let (x, y, psi) = pose;
    let (hl, hw) = (shape.0 / 2.0, shape.1 / 2.0);
    let local = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)];
    let mut out = [(0.0, 0.0); 4];
    for (o, (lx, ly)) in out.iter_mut().zip(local) {
        let (rx, ry) = math::rotate(lx, ly, psi);
        *o = (x + rx, y + ry);
    }
    out
}

/// Average Corner Error: mean Euclidean distance between corresponding corners.
pub fn ace(cand: &[(f64, f64); 4], gt: &[(f64, f64); 4]) -> f64 {
    cand.iter()
        .zip(gt)
        .map(|(a, b)| math::dist2(*a, *b))
        .sum::<f64>()
        / 4.0
}

/// Search all 1089 control candidates for the label whose bicycle-model
/// rollout best matches the ground-truth next pose under ACE. Ties break to
/// the lowest index.
pub fn best_motion_label(s: KinState, shape: (f64, f64), gt_next_pose: (f64, f64, f64), dt: f64) -> (MotionLabel, f64) {
    let gt_corners = box_corners(gt_next_pose, shape);
    let mut best = (MotionLabel(0), f64::INFINITY);
    for (idx, (a, w)) in motion_vocab().into_iter().enumerate() {
        let next = step_bicycle(s, a, w, dt);
        let err = ace(&box_corners((next.x, next.y, next.psi), shape), &gt_corners);
        if err < best.1 {
            best = (MotionLabel(idx), err);
        }
    }
    best
}
