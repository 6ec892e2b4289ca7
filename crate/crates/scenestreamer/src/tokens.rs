//! Token-stream JSONL export: one token per line (group, step, owner, intra
//! index, anchor, payload, target) plus a per-stream summary, for inspection
//! and cross-implementation diffing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use scenestreamer_core::sequence::{Owner, Payload, Target, Token, TokenSequence};

use crate::error::{AppError, AppResult};

pub fn token_to_json(t: &Token) -> Value {
    let owner = t.owner.map(|o| match o {
        Owner::TrafficLight(id) => json!({"kind": "tl", "id": id}),
        Owner::Agent(id) => json!({"kind": "agent", "id": id}),
    });
    let anchor = t
        .anchor
        .map(|a| json!({"x": a.x, "y": a.y, "psi": a.psi, "t": a.t}));
    let payload = match &t.payload {
        Payload::Tl { tl_id, state, map_id } => {
            json!({"tl_id": tl_id, "state": state.index(), "map_id": map_id})
        }
        Payload::AsStart => json!({}),
        Payload::Soa { aid } => json!({"aid": aid}),
        Payload::TypeTok { aid, kind } => json!({"aid": aid, "type": kind.index()}),
        Payload::Ms { aid, kind, map_id } => {
            json!({"aid": aid, "type": kind.index(), "map_id": map_id})
        }
        Payload::Rs { aid, kind, map_id, bins } => {
            json!({"aid": aid, "type": kind.index(), "map_id": map_id, "bins": bins})
        }
        Payload::AsEnd { aid } => json!({"aid": aid}),
        Payload::Mo { aid, kind, label, vel, shape } => json!({
            "aid": aid,
            "type": kind.index(),
            "label": label.0,
            "vel": [vel.0, vel.1],
            "shape": shape,
        }),
    };
    let target = t.target.map(|tgt| match tgt {
        Target::TlNext(c) => json!({"head": "tl", "class": c}),
        Target::TypeOrEnd(c) => json!({"head": "type", "class": c}),
        Target::MapId(c) => json!({"head": "map", "class": c}),
        Target::RsBins(b) => json!({"head": "rs", "bins": b}),
        Target::Motion(c) => json!({"head": "motion", "class": c}),
    });
    json!({
        "group": t.group.name(),
        "step": t.step,
        "owner": owner,
        "intra": t.intra,
        "anchor": anchor,
        "payload": payload,
        "target": target,
    })
}

/// Per-stream summary line: token and target counts by group/head.
pub fn stream_summary(seq: &TokenSequence) -> Value {
    let mut by_group: std::collections::BTreeMap<&str, usize> = Default::default();
    let mut targets = 0usize;
    for t in &seq.tokens {
        *by_group.entry(t.group.name()).or_default() += 1;
        if t.target.is_some() {
            targets += 1;
        }
    }
    json!({
        "num_tokens": seq.tokens.len(),
        "num_steps": seq.num_steps,
        "targets": targets,
        "by_group": by_group,
    })
}

/// Write one token per line; the first line is the summary.
pub fn write_token_jsonl(seq: &TokenSequence, path: &Path) -> AppResult<()> {
    let file = File::create(path)
        .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, v: &Value| -> AppResult<()> {
        let line = serde_json::to_string(v).map_err(|e| AppError::Runtime(e.to_string()))?;
        writeln!(w, "{line}").map_err(AppError::from)
    };
    emit(&mut w, &stream_summary(seq))?;
    for t in &seq.tokens {
        emit(&mut w, &token_to_json(t))?;
    }
    Ok(())
}
