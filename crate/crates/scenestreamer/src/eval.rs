//! Evaluation report: per-attribute MMD over initial states and displacement
//! metrics over K rollouts against ground truth.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use scenestreamer_core::math;
use scenestreamer_core::metrics::{displacement_metrics, mmd};
use scenestreamer_core::scenario::{AgentType, ScenarioDescription};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Vehicles within 50 m of the ego at their first valid step.
    Strict,
    /// All agents of any type.
    Relaxed,
}

impl Protocol {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "strict" => Some(Protocol::Strict),
            "relaxed" => Some(Protocol::Relaxed),
            _ => None,
        }
    }
}

const STRICT_RADIUS: f64 = 50.0;

/// Initial-state attribute samples from one scenario set.
fn attribute_samples(
    scenarios: &[ScenarioDescription],
    protocol: Protocol,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pos = Vec::new();
    let mut head = Vec::new();
    let mut size = Vec::new();
    let mut vel = Vec::new();
    for s in scenarios {
        let ego0 = s.agents.get(s.sdc_index).and_then(|e| {
            e.first_valid_step().map(|t| (e.states[t].x, e.states[t].y))
        });
        for a in &s.agents {
            let Some(t) = a.first_valid_step() else { continue };
            let st = &a.states[t];
            if protocol == Protocol::Strict {
                if a.kind != AgentType::Vehicle {
                    continue;
                }
                match ego0 {
                    Some(e) if math::dist2(e, (st.x, st.y)) <= STRICT_RADIUS => {}
                    _ => continue,
                }
            }
            pos.push(vec![st.x, st.y]);
            // heading as (sin, cos) avoids the wrap discontinuity
            head.push(vec![math::sin(st.psi), math::cos(st.psi)]);
            size.push(vec![a.shape[0], a.shape[1], a.shape[2]]);
            vel.push(vec![st.vx, st.vy]);
        }
    }
    (pos, head, size, vel)
}

/// Build the evaluation report. `pred_sets` holds K rollout sets, each keyed
/// by ground-truth scenario id; every set must cover every gt scenario.
pub fn evaluate(
    pred_sets: &[BTreeMap<String, ScenarioDescription>],
    gt: &[ScenarioDescription],
    protocol: Protocol,
) -> AppResult<Value> {
    if pred_sets.is_empty() || gt.is_empty() {
        return Err(AppError::Validation(
            "evaluation needs predictions and ground truth".to_string(),
        ));
    }
    for (k, set) in pred_sets.iter().enumerate() {
        for g in gt {
            if !set.contains_key(&g.scenario_id) {
                return Err(AppError::Validation(format!(
                    "pairing error: rollout set {k} has no scenario {:?}",
                    g.scenario_id
                )));
            }
        }
    }

    // MMD over pooled initial states, first rollout set vs gt
    let preds0: Vec<ScenarioDescription> = gt
        .iter()
        .map(|g| pred_sets[0][&g.scenario_id].clone())
        .collect();
    let (pa, ha, sa, va) = attribute_samples(&preds0, protocol);
    let (pb, hb, sb, vb) = attribute_samples(gt, protocol);
    let mmd_of = |a: &[Vec<f64>], b: &[Vec<f64>], name: &str| -> AppResult<f64> {
        mmd(a, b, None).map_err(|e| AppError::Validation(format!("mmd over {name}: {e}")))
    };
    let mmd_position = mmd_of(&pa, &pb, "position")?;
    let mmd_heading = mmd_of(&ha, &hb, "heading")?;
    let mmd_size = mmd_of(&sa, &sb, "size")?;
    let mmd_velocity = mmd_of(&va, &vb, "velocity")?;

    // displacement: per gt agent, tracks over jointly-valid steps, averaged
    // over agents with at least one comparable step
    let mut sums = [0.0f64; 6];
    let mut agents = 0usize;
    for g in gt {
        for ga in &g.agents {
            let mut rollouts: Vec<Vec<(f64, f64)>> = Vec::new();
            let mut gt_track: Vec<(f64, f64)> = Vec::new();
            // steps valid in gt and in every rollout set
            let preds: Vec<&ScenarioDescription> = pred_sets
                .iter()
                .map(|set| &set[&g.scenario_id])
                .collect();
            let pred_agents: Vec<_> = preds
                .iter()
                .map(|p| p.agents.iter().find(|a| a.agent_id == ga.agent_id))
                .collect();
            if pred_agents.iter().any(|a| a.is_none()) {
                continue;
            }
            let pred_agents: Vec<_> = pred_agents.into_iter().map(Option::unwrap).collect();
            let steps: Vec<usize> = (0..g.num_steps)
                .filter(|&t| {
                    ga.valid(t)
                        && pred_agents
                            .iter()
                            .all(|a| t < a.states.len() && a.states[t].valid)
                })
                .collect();
            if steps.is_empty() {
                continue;
            }
            for a in &pred_agents {
                rollouts.push(steps.iter().map(|&t| (a.states[t].x, a.states[t].y)).collect());
            }
            for &t in &steps {
                gt_track.push((ga.states[t].x, ga.states[t].y));
            }
            let m = displacement_metrics(&rollouts, &gt_track)?;
            for (acc, v) in sums.iter_mut().zip([m.ade_avg, m.ade_min, m.fde_avg, m.fde_min, m.add, m.fdd]) {
                *acc += v;
            }
            agents += 1;
        }
    }
    if agents == 0 {
        return Err(AppError::Validation(
            "pairing error: no comparable agents between predictions and ground truth".to_string(),
        ));
    }
    let n = agents as f64;
    Ok(json!({
        "mmd_position": mmd_position,
        "mmd_heading": mmd_heading,
        "mmd_size": mmd_size,
        "mmd_velocity": mmd_velocity,
        "ade_avg": sums[0] / n,
        "ade_min": sums[1] / n,
        "fde_avg": sums[2] / n,
        "fde_min": sums[3] / n,
        "add": sums[4] / n,
        "fdd": sums[5] / n,
    }))
}
