//! Polyline slicing into fixed-budget map segments, per-point features, and
//! nearest-valid-segment anchor queries.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::math::{self, wrap_angle};
use crate::scenario::ScenarioDescription;

/// Target arc length of one segment, meters.
pub const SEGMENT_LENGTH: f64 = 10.0;
/// Maximum point records per segment.
pub const MAX_POINTS: usize = 30;
/// Scene-wide segment budget.
pub const MAX_SEGMENTS: usize = 3000;
/// Per-point feature width.
pub const FEATURE_DIM: usize = 27;

/// One chord between two consecutive polyline points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub start: [f64; 3],
    pub end: [f64; 3],
}

impl PointRecord {
    pub fn length(&self) -> f64 {
        let d = [
            self.end[0] - self.start[0],
            self.end[1] - self.start[1],
            self.end[2] - self.start[2],
        ];
        math::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    }

    /// Heading of the start->end chord.
    pub fn heading(&self) -> f64 {
        math::atan2(self.end[1] - self.start[1], self.end[0] - self.start[0])
    }

    pub fn midpoint(&self) -> (f64, f64) {
        (
            (self.start[0] + self.end[0]) / 2.0,
            (self.start[1] + self.end[1]) / 2.0,
        )
    }
}

/// A <= 10 m slice of a polyline; the anchor frame for relative encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSegment {
    pub segment_id: usize,
    pub source: String,
    pub semantic_type: crate::scenario::SemanticType,
    pub records: Vec<PointRecord>,
    /// Mean of record midpoints.
    pub center: (f64, f64),
    /// Circular mean of chord headings.
    pub heading: f64,
    /// Summed chord length.
    pub total_length: f64,
}

impl MapSegment {
    fn from_records(source: &str, semantic: crate::scenario::SemanticType, records: Vec<PointRecord>) -> Self {
        debug_assert!(!records.is_empty());
        let n = records.len() as f64;
        let (mut cx, mut cy) = (0.0, 0.0);
        let (mut sh, mut ch) = (0.0, 0.0);
        let mut total = 0.0;
        for r in &records {
            let (mx, my) = r.midpoint();
            cx += mx;
            cy += my;
            let h = r.heading();
            sh += math::sin(h);
            ch += math::cos(h);
            total += r.length();
        }
        MapSegment {
            segment_id: 0,
            source: source.to_string(),
            semantic_type: semantic,
            records,
            center: (cx / n, cy / n),
            heading: math::atan2(sh, ch),
            total_length: total,
        }
    }

    /// 12 semantic indicator flags.
    pub fn semantic_flags(&self) -> [bool; 12] {
        let mut f = [false; 12];
        f[self.semantic_type.index()] = true;
        f
    }
}

/// Slice every polyline into ~10 m segments of <= 30 records. If the scene
/// exceeds 3000 segments, keep the ones closest to the reference pose, ids
/// renumbered 0..M-1 in retained order.
pub fn segment_polylines(
    scenario: &ScenarioDescription,
    ref_x: f64,
    ref_y: f64,
) -> Result<Vec<MapSegment>, CoreError> {
    if scenario.polylines.is_empty() {
        return Err(CoreError::Map("scenario has no polylines".to_string()));
    }
    let mut segments = Vec::new();
    for poly in &scenario.polylines {
        let mut acc: Vec<PointRecord> = Vec::new();
        let mut acc_len = 0.0;
        for w in poly.points.windows(2) {
            let rec = PointRecord { start: w[0], end: w[1] };
            let len = rec.length();
            if !acc.is_empty() && (acc_len + len > SEGMENT_LENGTH || acc.len() >= MAX_POINTS) {
                segments.push(MapSegment::from_records(&poly.id, poly.semantic_type, core::mem::take(&mut acc)));
                acc_len = 0.0;
            }
            acc.push(rec);
            acc_len += len;
        }
        if !acc.is_empty() {
            segments.push(MapSegment::from_records(&poly.id, poly.semantic_type, acc));
        }
    }
    if segments.len() > MAX_SEGMENTS {
        // stable sort keeps original order among equidistant segments
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.sort_by(|&a, &b| {
            math::dist2(segments[a].center, (ref_x, ref_y))
                .total_cmp(&math::dist2(segments[b].center, (ref_x, ref_y)))
        });
        let mut keep: Vec<bool> = alloc::vec![false; segments.len()];
        for &i in order.iter().take(MAX_SEGMENTS) {
            keep[i] = true;
        }
        let mut retained = Vec::with_capacity(MAX_SEGMENTS);
        for (i, s) in segments.into_iter().enumerate() {
            if keep[i] {
                retained.push(s);
            }
        }
        segments = retained;
    }
    for (i, s) in segments.iter_mut().enumerate() {
        s.segment_id = i;
    }
    Ok(segments)
}

/// 30x27 per-point feature matrix. Rows beyond the record count are zero.
///
/// Column layout per valid point: start xyz, end xyz, unit direction xyz,
/// heading / sin / cos, chord length, 12 semantic one-hots, total segment
/// length, valid mask.
pub fn point_features(segment: &MapSegment) -> Vec<[f64; FEATURE_DIM]> {
    let mut rows = alloc::vec![[0.0; FEATURE_DIM]; MAX_POINTS];
    let flags = segment.semantic_flags();
    for (row, rec) in rows.iter_mut().zip(&segment.records) {
        let len = rec.length();
        let dir = if len > 0.0 {
            [
                (rec.end[0] - rec.start[0]) / len,
                (rec.end[1] - rec.start[1]) / len,
                (rec.end[2] - rec.start[2]) / len,
            ]
        } else {
            [0.0; 3]
        };
        let h = rec.heading();
        row[0..3].copy_from_slice(&rec.start);
        row[3..6].copy_from_slice(&rec.end);
        row[6..9].copy_from_slice(&dir);
        row[9] = h;
        row[10] = math::sin(h);
        row[11] = math::cos(h);
        row[12] = len;
        for (k, &f) in flags.iter().enumerate() {
            row[13 + k] = if f { 1.0 } else { 0.0 };
        }
        row[25] = segment.total_length;
        row[26] = 1.0;
    }
    rows
}

/// Nearest segment by center distance among segments whose heading deviates
/// from the query by less than 90 degrees. Ties break to the lowest id.
pub fn nearest_valid_segment(pose: (f64, f64, f64), segments: &[MapSegment]) -> Result<usize, CoreError> {
    let (x, y, psi) = pose;
    segments
        .iter()
        .filter(|s| math::abs(wrap_angle(psi - s.heading)) < core::f64::consts::FRAC_PI_2)
        .min_by(|a, b| {
            math::dist2(a.center, (x, y))
                .total_cmp(&math::dist2(b.center, (x, y)))
                .then(a.segment_id.cmp(&b.segment_id))
        })
        .map(|s| s.segment_id)
        .ok_or(CoreError::NoAnchor)
}

/// Heading-filtered anchor lookup with the distance-only fallback. Returns
/// `(segment_id, used_fallback)`; `None` only when there are no segments.
pub fn nearest_anchor_segment(pose: (f64, f64, f64), segments: &[MapSegment]) -> Option<(usize, bool)> {
    match nearest_valid_segment(pose, segments) {
        Ok(id) => Some((id, false)),
        Err(_) => segments
            .iter()
            .min_by(|a, b| {
                math::dist2(a.center, (pose.0, pose.1))
                    .total_cmp(&math::dist2(b.center, (pose.0, pose.1)))
                    .then(a.segment_id.cmp(&b.segment_id))
            })
            .map(|s| (s.segment_id, true)),
    }
}
