//! Segment-relative agent state encoding, 81-bin quantization, and the
//! decode back to global pose/velocity.



use crate::error::CoreError;
use crate::map_codec::MapSegment;
use crate::math::{self, wrap_angle};

/// Bins per relative-state field.
pub const RS_BINS: usize = 81;
/// Relative-state fields, in decode order: l, w, h, u, v, dpsi, vx, vy.
pub const RS_FIELDS: usize = 8;

/// Per-field quantization ranges. Exposed through the run config so other
/// datasets can retune them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRanges {
    /// (lo, hi) per field in the order l, w, h, u, v, dpsi, vx, vy.
    pub fields: [(f64, f64); RS_FIELDS],
}

impl Default for QuantRanges {
    fn default() -> Self {
        QuantRanges {
            fields: [
                (0.5, 10.0),                                                   // length
                (0.5, 3.0),                                                    // width
                (0.5, 4.0),                                                    // height
                (-10.0, 10.0),                                                 // u
                (-10.0, 10.0),                                                 // v
                (-core::f64::consts::FRAC_PI_2, core::f64::consts::FRAC_PI_2), // dpsi
                (0.0, 30.0),                                                   // vx (longitudinal)
                (-10.0, 10.0),                                                 // vy (lateral)
            ],
        }
    }
}

impl QuantRanges {
    pub fn validate(&self) -> Result<(), CoreError> {
        for (i, (lo, hi)) in self.fields.iter().enumerate() {
            if !(lo < hi) {
                return Err(CoreError::Config(alloc::format!(
                    "quantization range {i} has lo >= hi ({lo} >= {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Quantize a value to the nearest of `n` bin centers linearly spaced on
/// `[lo, hi]` inclusive. Out-of-range values clamp; ties go to the lower bin.
/// Returns `(bin, clamped)`.
pub fn quantize(value: f64, lo: f64, hi: f64, n: usize) -> (usize, bool) {
    debug_assert!(lo < hi && n >= 2);
    let clamped = value < lo || value > hi;
    let v = value.clamp(lo, hi);
    let step = (hi - lo) / (n - 1) as f64;
    let t = (v - lo) / step;
    // ceil(t - 0.5): nearest center with midpoint ties resolved downward
    let idx = libm::ceil(t - 0.5);
    let idx = if idx < 0.0 { 0 } else { idx as usize };
    (idx.min(n - 1), clamped)
}

/// Center of bin `i`.
pub fn dequantize(bin: usize, lo: f64, hi: f64, n: usize) -> f64 {
    debug_assert!(bin < n);
    let step = (hi - lo) / (n - 1) as f64;
    lo + step * bin as f64
}

/// 8-field agent state in a segment's local frame, continuous and quantized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    pub l: f64,
    pub w: f64,
    pub h: f64,
    /// Longitudinal offset from the segment center.
    pub u: f64,
    /// Lateral offset from the segment center.
    pub v: f64,
    /// Heading residual relative to the segment heading.
    pub dpsi: f64,
    /// Velocity in the segment frame.
    pub vx: f64,
    pub vy: f64,
    pub bins: [usize; RS_FIELDS],
    /// Set when any continuous field was clamped to its range during quantization.
    pub clamped: bool,
}

impl RelativeState {
    pub fn fields(&self) -> [f64; RS_FIELDS] {
        [self.l, self.w, self.h, self.u, self.v, self.dpsi, self.vx, self.vy]
    }

    /// Rebuild a relative state from sampled bins (fields at bin centers).
    pub fn from_bins(bins: [usize; RS_FIELDS], ranges: &QuantRanges) -> Self {
        let f: alloc::vec::Vec<f64> = bins
            .iter()
            .zip(&ranges.fields)
            .map(|(&b, &(lo, hi))| dequantize(b, lo, hi, RS_BINS))
            .collect();
        RelativeState {
            l: f[0],
            w: f[1],
            h: f[2],
            u: f[3],
            v: f[4],
            dpsi: f[5],
            vx: f[6],
            vy: f[7],
            bins,
            clamped: false,
        }
    }
}

/// Global agent state consumed/produced by the codec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Express a global agent state in the segment's local frame and quantize.
pub fn encode_relative(state: GlobalState, shape: [f64; 3], segment: &MapSegment, ranges: &QuantRanges) -> RelativeState {
    let phi = segment.heading;
    let (cx, cy) = segment.center;
    let (dx, dy) = (state.x - cx, state.y - cy);
    let (u, v) = math::rotate(dx, dy, -phi);
    let dpsi = wrap_angle(state.psi - phi);
    let (vx, vy) = math::rotate(state.vx, state.vy, -phi);
    let cont = [shape[0], shape[1], shape[2], u, v, dpsi, vx, vy];
    let mut bins = [0usize; RS_FIELDS];
    let mut clamped = false;
    for (i, (&val, &(lo, hi))) in cont.iter().zip(&ranges.fields).enumerate() {
        let (b, c) = quantize(val, lo, hi, RS_BINS);
        bins[i] = b;
        clamped |= c;
    }
    RelativeState {
        l: cont[0],
        w: cont[1],
        h: cont[2],
        u,
        v,
        dpsi,
        vx,
        vy,
        bins,
        clamped,
    }
}

/// Decode a relative state back to a global pose and velocity.
pub fn decode_global(r: &RelativeState, segment: &MapSegment) -> GlobalState {
    let phi = segment.heading;
    let (cx, cy) = segment.center;
    let (c, s) = (math::cos(phi), math::sin(phi));
    GlobalState {
        x: cx + r.u * c - r.v * s,
        y: cy + r.u * s + r.v * c,
        psi: wrap_angle(phi + r.dpsi),
        vx: r.vx * c - r.vy * s,
        vy: r.vx * s + r.vy * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_codec::PointRecord;
    use alloc::string::ToString;
    use alloc::vec;

    pub(crate) fn segment_at(cx: f64, cy: f64, heading: f64) -> MapSegment {
        // a synthetic 2 m segment centered at (cx, cy) pointing along `heading`
        let (dx, dy) = math::rotate(1.0, 0.0, heading);
        MapSegment {
            segment_id: 0,
            source: "s".to_string(),
            semantic_type: crate::scenario::SemanticType::Lane,
            records: vec![PointRecord {
                start: [cx - dx, cy - dy, 0.0],
                end: [cx + dx, cy + dy, 0.0],
            }],
            center: (cx, cy),
            heading,
            total_length: 2.0,
        }
    }

    #[test]
    fn identity_frame() {
        let seg = segment_at(0.0, 0.0, 0.0);
        let r = encode_relative(
            GlobalState { x: 0.0, y: 0.0, psi: 0.0, vx: 0.0, vy: 0.0 },
            [4.0, 2.0, 1.5],
            &seg,
            &QuantRanges::default(),
        );
        assert_eq!((r.u, r.v, r.dpsi, r.vx, r.vy), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(!r.clamped);
    }

    #[test]
    fn lateral_offset() {
        // rotate-translate oracle: 3 m left of a segment heading +x
        let seg = segment_at(0.0, 0.0, 0.0);
        let r = encode_relative(
            GlobalState { x: 0.0, y: 3.0, psi: 0.0, vx: 0.0, vy: 0.0 },
            [4.0, 2.0, 1.5],
            &seg,
            &QuantRanges::default(),
        );
        assert!(r.u.abs() < 1e-12);
        assert!((r.v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_beyond_range() {
        let seg = segment_at(0.0, 0.0, 0.0);
        let r = encode_relative(
            GlobalState { x: 15.0, y: 0.0, psi: 0.0, vx: 0.0, vy: 0.0 },
            [4.0, 2.0, 1.5],
            &seg,
            &QuantRanges::default(),
        );
        assert_eq!(r.bins[3], 80); // u clamped to the top bin
        assert!(r.clamped);
    }

    #[test]
    fn decode_identity_and_substitution() {
        let seg = segment_at(5.0, 2.0, core::f64::consts::FRAC_PI_2);
        let r = RelativeState {
            l: 4.0,
            w: 2.0,
            h: 1.5,
            u: 0.0,
            v: 0.0,
            dpsi: 0.0,
            vx: 0.0,
            vy: 0.0,
            bins: [0; 8],
            clamped: false,
        };
        let g = decode_global(&r, &seg);
        assert!((g.x - 5.0).abs() < 1e-12 && (g.y - 2.0).abs() < 1e-12);
        assert!((g.psi - core::f64::consts::FRAC_PI_2).abs() < 1e-12);

        // u=1 on a segment heading pi/2 at origin -> (0, 1)
        let seg = segment_at(0.0, 0.0, core::f64::consts::FRAC_PI_2);
        let g = decode_global(&RelativeState { u: 1.0, ..r }, &seg);
        assert!(g.x.abs() < 1e-12 && (g.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn continuous_round_trip_exact() {
        let seg = segment_at(3.0, -2.0, 0.7);
        let s = GlobalState { x: 4.0, y: -1.0, psi: 1.1, vx: 3.0, vy: -0.5 };
        let r = encode_relative(s, [4.0, 2.0, 1.5], &seg, &QuantRanges::default());
        let g = decode_global(&r, &seg);
        assert!((g.x - s.x).abs() < 1e-12);
        assert!((g.y - s.y).abs() < 1e-12);
        assert!((g.psi - s.psi).abs() < 1e-12);
        assert!((g.vx - s.vx).abs() < 1e-12);
        assert!((g.vy - s.vy).abs() < 1e-12);
    }

    #[test]
    fn quantize_boundaries() {
        assert_eq!(quantize(-10.0, -10.0, 10.0, 81), (0, false));
        assert_eq!(dequantize(0, -10.0, 10.0, 81), -10.0);
        assert_eq!(quantize(0.0, -10.0, 10.0, 81), (40, false));
        assert_eq!(dequantize(40, -10.0, 10.0, 81), 0.0);
        assert_eq!(quantize(10.0, -10.0, 10.0, 81), (80, false));
        assert_eq!(quantize(11.0, -10.0, 10.0, 81).1, true);
        // midpoint tie resolves to the lower bin
        assert_eq!(quantize(-10.0 + 0.125, -10.0, 10.0, 81).0, 0);
    }

    #[test]
    fn quantize_monotone_and_bounded() {
        let mut prev = 0;
        for i in 0..=400 {
            let x = -10.0 + 20.0 * i as f64 / 400.0;
            let (b, _) = quantize(x, -10.0, 10.0, 81);
            assert!(b >= prev);
            prev = b;
            let err = (dequantize(b, -10.0, 10.0, 81) - x).abs();
            assert!(err <= 0.125 + 1e-12, "x={x} err={err}");
        }
    }
}
