//! On-disk scenario format: a single JSON document per scenario.
//!
//! Top-level keys: `scenario_id`, `dt`, `num_steps`,
//! `polylines[] {id, type, points[[x,y,z]]}`,
//! `agents[] {id, type, shape[l,w,h], states[[x,y,psi,vx,vy,valid]]}`,
//! `traffic_lights[] {id, segment, stop_point[x,y], heading, states[int]}`,
//! `sdc_index`. Unknown keys are ignored on read and never emitted on write.
//! All units SI, angles in radians, `valid` written as 0/1.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use scenestreamer_core::scenario::{
    AgentRecord, AgentState, AgentType, MapPolyline, ScenarioDescription, SemanticType, TlState,
    TrafficLightRecord,
};

use crate::error::{AppError, AppResult};

pub fn load_scenario(path: &Path) -> AppResult<ScenarioDescription> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    let mut s = scenario_from_json_str(&text)
        .map_err(|e| AppError::Validation(format!("{}: {e}", path.display())))?;
    s.normalize();
    s.validate()
        .map_err(|e| AppError::Validation(format!("{}: {e}", path.display())))?;
    Ok(s)
}

pub fn save_scenario(s: &ScenarioDescription, path: &Path) -> AppResult<()> {
    s.validate()?;
    let text = serde_json::to_string_pretty(&scenario_to_json(s))
        .map_err(|e| AppError::Runtime(format!("serialize: {e}")))?;
    fs::write(path, text + "\n")
        .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn scenario_to_json(s: &ScenarioDescription) -> Value {
    json!({
        "scenario_id": s.scenario_id,
        "dt": s.dt,
        "num_steps": s.num_steps,
        "polylines": s.polylines.iter().map(|p| json!({
            "id": p.id,
            "type": p.semantic_type.name(),
            "points": p.points.iter().map(|q| json!([q[0], q[1], q[2]])).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "agents": s.agents.iter().map(|a| json!({
            "id": a.agent_id,
            "type": a.kind.index(),
            "shape": [a.shape[0], a.shape[1], a.shape[2]],
            "states": a.states.iter().map(|st| json!([
                st.x, st.y, st.psi, st.vx, st.vy, if st.valid { 1 } else { 0 },
            ])).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "traffic_lights": s.traffic_lights.iter().map(|tl| json!({
            "id": tl.tl_id,
            "segment": tl.attached_segment,
            "stop_point": [tl.stop_point.0, tl.stop_point.1],
            "heading": tl.heading,
            "states": tl.states.iter().map(|st| st.index()).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "sdc_index": s.sdc_index,
    })
}

/// Parse a scenario document, reporting line/column on syntax errors and a
/// field path on shape errors.
pub fn scenario_from_json_str(text: &str) -> Result<ScenarioDescription, String> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| format!("parse failure at line {}, column {}: {e}", e.line(), e.column()))?;
    scenario_from_json(&root)
}

pub fn scenario_from_json(root: &Value) -> Result<ScenarioDescription, String> {
    let obj = as_object(root, "$")?;
    let scenario_id = as_str(field(obj, "scenario_id", "$")?, "$.scenario_id")?.to_string();
    let dt = as_f64(field(obj, "dt", "$")?, "$.dt")?;
    let num_steps = as_usize(field(obj, "num_steps", "$")?, "$.num_steps")?;
    let sdc_index = as_usize(field(obj, "sdc_index", "$")?, "$.sdc_index")?;

    let mut polylines = Vec::new();
    for (i, v) in as_array(field(obj, "polylines", "$")?, "$.polylines")?.iter().enumerate() {
        let at = format!("$.polylines[{i}]");
        let p = as_object(v, &at)?;
        let id = as_str(field(p, "id", &at)?, &format!("{at}.id"))?.to_string();
        let ty_name = as_str(field(p, "type", &at)?, &format!("{at}.type"))?;
        let semantic_type = SemanticType::from_name(ty_name)
            .ok_or_else(|| format!("{at}.type: unknown semantic type {ty_name:?}"))?;
        let mut points = Vec::new();
        for (j, q) in as_array(field(p, "points", &at)?, &format!("{at}.points"))?.iter().enumerate() {
            let pat = format!("{at}.points[{j}]");
            let coords = fixed_numbers::<3>(q, &pat)?;
            points.push(coords);
        }
        polylines.push(MapPolyline { id, semantic_type, points });
    }

    let mut agents = Vec::new();
    for (i, v) in as_array(field(obj, "agents", "$")?, "$.agents")?.iter().enumerate() {
        let at = format!("$.agents[{i}]");
        let a = as_object(v, &at)?;
        let agent_id = as_usize(field(a, "id", &at)?, &format!("{at}.id"))? as u32;
        let kind_idx = as_usize(field(a, "type", &at)?, &format!("{at}.type"))?;
        let kind = AgentType::from_index(kind_idx as u32)
            .ok_or_else(|| format!("{at}.type: unknown agent type {kind_idx}"))?;
        let shape = fixed_numbers::<3>(field(a, "shape", &at)?, &format!("{at}.shape"))?;
        let mut states = Vec::new();
        for (j, st) in as_array(field(a, "states", &at)?, &format!("{at}.states"))?.iter().enumerate() {
            let sat = format!("{at}.states[{j}]");
            let arr = as_array(st, &sat)?;
            if arr.len() != 6 {
                return Err(format!("{sat}: expected 6 entries, found {}", arr.len()));
            }
            let mut f = [0.0; 5];
            for (k, slot) in f.iter_mut().enumerate() {
                *slot = as_f64(&arr[k], &format!("{sat}[{k}]"))?;
            }
            let valid = as_flag(&arr[5], &format!("{sat}[5]"))?;
            states.push(AgentState { x: f[0], y: f[1], psi: f[2], vx: f[3], vy: f[4], valid });
        }
        agents.push(AgentRecord { agent_id, kind, shape, states });
    }

    let mut traffic_lights = Vec::new();
    for (i, v) in as_array(field(obj, "traffic_lights", "$")?, "$.traffic_lights")?.iter().enumerate() {
        let at = format!("$.traffic_lights[{i}]");
        let tl = as_object(v, &at)?;
        let tl_id = as_usize(field(tl, "id", &at)?, &format!("{at}.id"))? as u32;
        let attached_segment = as_usize(field(tl, "segment", &at)?, &format!("{at}.segment"))?;
        let sp = fixed_numbers::<2>(field(tl, "stop_point", &at)?, &format!("{at}.stop_point"))?;
        let heading = as_f64(field(tl, "heading", &at)?, &format!("{at}.heading"))?;
        let mut states = Vec::new();
        for (j, st) in as_array(field(tl, "states", &at)?, &format!("{at}.states"))?.iter().enumerate() {
            let sat = format!("{at}.states[{j}]");
            let idx = as_usize(st, &sat)?;
            let state = TlState::from_index(idx as u32)
                .ok_or_else(|| format!("{sat}: signal state {idx} outside 0..=3"))?;
            states.push(state);
        }
        traffic_lights.push(TrafficLightRecord {
            tl_id,
            attached_segment,
            stop_point: (sp[0], sp[1]),
            heading,
            states,
        });
    }

    Ok(ScenarioDescription {
        scenario_id,
        dt,
        num_steps,
        polylines,
        agents,
        traffic_lights,
        sdc_index,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, at: &str) -> Result<&'a Value, String> {
    obj.get(key).ok_or_else(|| format!("{at}: missing field {key:?}"))
}

fn as_object<'a>(v: &'a Value, at: &str) -> Result<&'a Map<String, Value>, String> {
    v.as_object().ok_or_else(|| format!("{at}: expected an object"))
}

fn as_array<'a>(v: &'a Value, at: &str) -> Result<&'a Vec<Value>, String> {
    v.as_array().ok_or_else(|| format!("{at}: expected an array"))
}

fn as_str<'a>(v: &'a Value, at: &str) -> Result<&'a str, String> {
    v.as_str().ok_or_else(|| format!("{at}: expected a string"))
}

fn as_f64(v: &Value, at: &str) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{at}: expected a number"))
}

fn as_usize(v: &Value, at: &str) -> Result<usize, String> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| format!("{at}: expected a non-negative integer"))
}

/// Accept both `true/false` and `0/1` for validity flags.
fn as_flag(v: &Value, at: &str) -> Result<bool, String> {
    if let Some(b) = v.as_bool() {
        return Ok(b);
    }
    match v.as_u64() {
        Some(0) => Ok(false),
        Some(1) => Ok(true),
        _ => Err(format!("{at}: expected a boolean or 0/1")),
    }
}

fn fixed_numbers<const N: usize>(v: &Value, at: &str) -> Result<[f64; N], String> {
    let arr = as_array(v, at)?;
    if arr.len() != N {
        return Err(format!("{at}: expected {N} entries, found {}", arr.len()));
    }
    let mut out = [0.0; N];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = as_f64(&arr[k], &format!("{at}[{k}]"))?;
    }
    Ok(out)
}
