//! Static SVG rendering of a scenario: map polylines plus agent trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use scenestreamer_core::scenario::ScenarioDescription;

use crate::error::{AppError, AppResult};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn render_svg(s: &ScenarioDescription) -> String {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut see = |x: f64, y: f64| {
        min.0 = min.0.min(x);
        min.1 = min.1.min(y);
        max.0 = max.0.max(x);
        max.1 = max.1.max(y);
    };
    for p in &s.polylines {
        for q in &p.points {
            see(q[0], q[1]);
        }
    }
    for a in &s.agents {
        for st in a.states.iter().filter(|st| st.valid) {
            see(st.x, st.y);
        }
    }
    if !min.0.is_finite() {
        min = (0.0, 0.0);
        max = (1.0, 1.0);
    }
    let pad = 10.0;
    let w = (max.0 - min.0) + 2.0 * pad;
    let h = (max.1 - min.1) + 2.0 * pad;
    let scale = 800.0 / w.max(h).max(1.0);
    // y flipped so north is up
    let tx = |x: f64| (x - min.0 + pad) * scale;
    let ty = |y: f64| (max.1 - y + pad) * scale;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">",
        w * scale, h * scale, w * scale, h * scale
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    for p in &s.polylines {
        let pts: Vec<String> = p
            .points
            .iter()
            .map(|q| format!("{:.2},{:.2}", tx(q[0]), ty(q[1])))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"1\"/>",
            pts.join(" ")
        );
    }
    for (i, a) in s.agents.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = a
            .states
            .iter()
            .filter(|st| st.valid)
            .map(|st| format!("{:.2},{:.2}", tx(st.x), ty(st.y)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        // dot at the first valid pose
        if let Some(st) = a.states.iter().find(|st| st.valid) {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>",
                tx(st.x),
                ty(st.y)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn save_svg(s: &ScenarioDescription, path: &Path) -> AppResult<()> {
    fs::write(path, render_svg(s))
        .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))
}
