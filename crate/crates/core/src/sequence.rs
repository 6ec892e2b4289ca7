//! Token stream assembly, group-causal attention masking, KNN pruning, and
//! relative geometric deltas.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::kinematics::{best_motion_label, MotionLabel};
use crate::map_codec::{nearest_anchor_segment, MapSegment};
use crate::math::{self, wrap_angle};
use crate::scenario::{AgentType, ScenarioDescription, TlState};
use crate::state_codec::{encode_relative, GlobalState, QuantRanges, RS_FIELDS};

/// Token group tags for the decoder stream (MAP tokens live on the encoder
/// side and never enter the self-attention stream).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenGroup {
    Map,
    Tl,
    AsStart,
    AsSoa,
    AsType,
    AsMs,
    AsRs,
    AsEnd,
    Mo,
}

impl TokenGroup {
    pub fn name(self) -> &'static str {
        match self {
            TokenGroup::Map => "MAP",
            TokenGroup::Tl => "TL",
            TokenGroup::AsStart => "AS_START",
            TokenGroup::AsSoa => "AS_SOA",
            TokenGroup::AsType => "AS_TYPE",
            TokenGroup::AsMs => "AS_MS",
            TokenGroup::AsRs => "AS_RS",
            TokenGroup::AsEnd => "AS_END",
            TokenGroup::Mo => "MO",
        }
    }

    /// Logical region within a step: TL < AS < MO.
    pub fn region(self) -> u8 {
        match self {
            TokenGroup::Map => 0,
            TokenGroup::Tl => 0,
            TokenGroup::Mo => 2,
            _ => 1,
        }
    }

    pub fn is_agent_state(self) -> bool {
        self.region() == 1
    }
}

/// Identity a token belongs to; traffic lights and agents use separate
/// namespaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    TrafficLight(u32),
    Agent(u32),
}

/// Geometric anchor `(x, y, psi, t)` used for relative attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub t: i64,
}

/// Group-specific discrete content carried by a token.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tl {
        tl_id: u32,
        state: TlState,
        map_id: usize,
    },
    AsStart,
    Soa {
        aid: u32,
    },
    TypeTok {
        aid: u32,
        kind: AgentType,
    },
    Ms {
        aid: u32,
        kind: AgentType,
        map_id: usize,
    },
    Rs {
        aid: u32,
        kind: AgentType,
        map_id: usize,
        bins: [usize; RS_FIELDS],
    },
    /// Embedded identically to a speculative start-of-agent token; supervised
    /// with the end sentinel class.
    AsEnd {
        aid: u32,
    },
    Mo {
        aid: u32,
        kind: AgentType,
        label: MotionLabel,
        /// Agent velocity in its own local frame.
        vel: (f64, f64),
        shape: [f64; 3],
    },
}

/// Supervision attached to a token, consumed by the matching head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Next-step signal state, 4-way.
    TlNext(usize),
    /// Agent type or the end sentinel (class [`TYPE_END_CLASS`]).
    TypeOrEnd(usize),
    /// Map segment id, masked to in-scene segments.
    MapId(usize),
    /// 8 quantized relative-state bins.
    RsBins([usize; RS_FIELDS]),
    /// Next motion label (never the start label).
    Motion(usize),
}

/// Class index of the end-of-agent-states sentinel in the type head output.
pub const TYPE_END_CLASS: usize = 3;
/// Type head vocabulary: three agent categories plus the end sentinel.
pub const TYPE_VOCAB: usize = 4;

/// One token of the autoregressive stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub group: TokenGroup,
    pub step: usize,
    pub owner: Option<Owner>,
    /// Intra-step index within the AS region (start = 0, agent j occupies
    /// 4j+1..4j+4, end = 4N+1); `None` outside the AS region.
    pub intra: Option<usize>,
    pub anchor: Option<Anchor>,
    pub payload: Payload,
    pub target: Option<Target>,
}

/// Token stream flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceMode {
    /// Traffic-light and motion tokens only.
    Pretrain,
    /// All dynamic token groups.
    Full,
}

/// A flattened per-scenario stream with per-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub num_steps: usize,
    pub mode: SequenceMode,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Dense boolean attention mask; `true` = attention allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub n_q: usize,
    pub n_k: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_q: usize, n_k: usize, allow: bool) -> Self {
        AttentionMask {
            n_q,
            n_k,
            data: alloc::vec![allow; n_q * n_k],
        }
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.data[q * self.n_k + k]
    }

    #[inline]
    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.data[q * self.n_k + k] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.data[q * self.n_k..(q + 1) * self.n_k]
    }

    /// Row-major copy of the full mask.
    pub fn to_flat(&self) -> Vec<bool> {
        self.data.clone()
    }
}

/// Options for [`build_sequence`].
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Cap on simultaneously tokenized agents; the most dynamic ones win.
    pub max_agents: usize,
    pub ranges: QuantRanges,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            max_agents: 128,
            ranges: QuantRanges::default(),
        }
    }
}

fn agent_local_velocity(psi: f64, vx: f64, vy: f64) -> (f64, f64) {
    math::rotate(vx, vy, -psi)
}

/// Rank agents by cumulative movement and keep the `max_agents` most dynamic.
fn retained_agents(scenario: &ScenarioDescription, max_agents: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scenario.agents.len()).collect();
    if idx.len() <= max_agents {
        return idx;
    }
    let movement: Vec<f64> = scenario
        .agents
        .iter()
        .map(|a| {
            let mut d = 0.0;
            for t in 0..a.states.len().saturating_sub(1) {
                if a.states[t].valid && a.states[t + 1].valid {
                    d += math::dist2(
                        (a.states[t].x, a.states[t].y),
                        (a.states[t + 1].x, a.states[t + 1].y),
                    );
                }
            }
            d
        })
        .collect();
    idx.sort_by(|&a, &b| movement[b].total_cmp(&movement[a]).then(a.cmp(&b)));
    idx.truncate(max_agents);
    idx.sort();
    idx
}

/// Assemble the autoregressive token stream for a ground-truth scenario.
pub fn build_sequence(
    scenario: &ScenarioDescription,
    segments: &[MapSegment],
    mode: SequenceMode,
    opts: &BuildOptions,
) -> Result<TokenSequence, CoreError> {
    if segments.is_empty() {
        return Err(CoreError::Consistency("no map segments".to_string()));
    }
    for tl in &scenario.traffic_lights {
        if tl.attached_segment >= segments.len() {
            return Err(CoreError::Consistency(alloc::format!(
                "traffic light {} attached to segment {} but only {} segments exist",
                tl.tl_id,
                tl.attached_segment,
                segments.len()
            )));
        }
    }

    let retained = retained_agents(scenario, opts.max_agents);
    let num_steps = scenario.num_steps;
    let mut tokens = Vec::new();

    // precompute per-agent GT motion labels for step transitions t -> t+1
    let mut labels: Vec<Vec<Option<MotionLabel>>> = Vec::new();
    for &ai in &retained {
        let a = &scenario.agents[ai];
        let mut per_step = alloc::vec![None; num_steps];
        for t in 0..num_steps.saturating_sub(1) {
            if a.valid(t) && a.valid(t + 1) {
                let st = &a.states[t];
                let speed = math::hypot(st.vx, st.vy);
                // signed speed: negative when the velocity opposes the heading
                let along = st.vx * math::cos(st.psi) + st.vy * math::sin(st.psi);
                let v = if along < 0.0 { -speed } else { speed };
                let kin = crate::kinematics::KinState { x: st.x, y: st.y, psi: st.psi, v };
                let (label, _) = best_motion_label(
                    kin,
                    (a.shape[0], a.shape[1]),
                    a.pose(t + 1),
                    scenario.dt,
                );
                per_step[t] = Some(label);
            }
        }
        labels.push(per_step);
    }

    for t in 0..num_steps {
        // traffic-light block
        for tl in &scenario.traffic_lights {
            let target = if t + 1 < num_steps {
                Some(Target::TlNext(tl.states[t + 1].index()))
            } else {
                None
            };
            tokens.push(Token {
                group: TokenGroup::Tl,
                step: t,
                owner: Some(Owner::TrafficLight(tl.tl_id)),
                intra: None,
                anchor: Some(Anchor {
                    x: tl.stop_point.0,
                    y: tl.stop_point.1,
                    psi: tl.heading,
                    t: t as i64,
                }),
                payload: Payload::Tl {
                    tl_id: tl.tl_id,
                    state: tl.states[t],
                    map_id: tl.attached_segment,
                },
                target,
            });
        }

        let step_agents: Vec<usize> = retained
            .iter()
            .copied()
            .filter(|&ai| scenario.agents[ai].valid(t))
            .collect();

        if mode == SequenceMode::Full {
            tokens.push(Token {
                group: TokenGroup::AsStart,
                step: t,
                owner: None,
                intra: Some(0),
                anchor: None,
                payload: Payload::AsStart,
                target: None,
            });
            for (slot, &ai) in step_agents.iter().enumerate() {
                let a = &scenario.agents[ai];
                let st = &a.states[t];
                let aid = a.agent_id;
                let pose = a.pose(t);
                let (seg_id, _) = nearest_anchor_segment(pose, segments)
                    .ok_or_else(|| CoreError::Consistency("no segments for anchor".to_string()))?;
                let seg = &segments[seg_id];
                let rel = encode_relative(
                    GlobalState { x: st.x, y: st.y, psi: st.psi, vx: st.vx, vy: st.vy },
                    a.shape,
                    seg,
                    &opts.ranges,
                );
                let base = 4 * slot + 1;
                tokens.push(Token {
                    group: TokenGroup::AsSoa,
                    step: t,
                    owner: Some(Owner::Agent(aid)),
                    intra: Some(base),
                    anchor: None,
                    payload: Payload::Soa { aid },
                    // the hidden state here decides: new agent of which type,
                    // or the end sentinel
                    target: Some(Target::TypeOrEnd(a.kind.index())),
                });
                tokens.push(Token {
                    group: TokenGroup::AsType,
                    step: t,
                    owner: Some(Owner::Agent(aid)),
                    intra: Some(base + 1),
                    anchor: None,
                    payload: Payload::TypeTok { aid, kind: a.kind },
                    target: Some(Target::MapId(seg_id)),
                });
                tokens.push(Token {
                    group: TokenGroup::AsMs,
                    step: t,
                    owner: Some(Owner::Agent(aid)),
                    intra: Some(base + 2),
                    anchor: Some(Anchor {
                        x: seg.center.0,
                        y: seg.center.1,
                        psi: seg.heading,
                        t: t as i64,
                    }),
                    payload: Payload::Ms { aid, kind: a.kind, map_id: seg_id },
                    // the hidden state here conditions the relative-state head
                    target: Some(Target::RsBins(rel.bins)),
                });
                tokens.push(Token {
                    group: TokenGroup::AsRs,
                    step: t,
                    owner: Some(Owner::Agent(aid)),
                    intra: Some(base + 3),
                    anchor: Some(Anchor { x: st.x, y: st.y, psi: st.psi, t: t as i64 }),
                    payload: Payload::Rs { aid, kind: a.kind, map_id: seg_id, bins: rel.bins },
                    target: None,
                });
            }
            let end_aid = step_agents
                .iter()
                .map(|&ai| scenario.agents[ai].agent_id + 1)
                .max()
                .unwrap_or(0);
            tokens.push(Token {
                group: TokenGroup::AsEnd,
                step: t,
                owner: None,
                intra: Some(4 * step_agents.len() + 1),
                anchor: None,
                payload: Payload::AsEnd { aid: end_aid },
                target: Some(Target::TypeOrEnd(TYPE_END_CLASS)),
            });
        }

        // motion block
        for (ri, &ai) in retained.iter().enumerate() {
            let a = &scenario.agents[ai];
            if !a.valid(t) {
                continue;
            }
            let st = &a.states[t];
            let first_valid = a.first_valid_step() == Some(t);
            let label = if first_valid {
                MotionLabel::START
            } else {
                labels[ri][t - 1].unwrap_or(MotionLabel::START)
            };
            let target = labels[ri][t].map(|l| Target::Motion(l.0));
            tokens.push(Token {
                group: TokenGroup::Mo,
                step: t,
                owner: Some(Owner::Agent(a.agent_id)),
                intra: None,
                anchor: Some(Anchor { x: st.x, y: st.y, psi: st.psi, t: t as i64 }),
                payload: Payload::Mo {
                    aid: a.agent_id,
                    kind: a.kind,
                    label,
                    vel: agent_local_velocity(st.psi, st.vx, st.vy),
                    shape: a.shape,
                },
                target,
            });
        }
    }

    Ok(TokenSequence { tokens, num_steps, mode })
}

/// Exact token count for a population profile: per step, `lights` TL tokens,
/// the AS region (`full` mode only), and one MO token per valid agent.
pub fn expected_token_count(lights: usize, agents_per_step: &[usize], mode: SequenceMode) -> usize {
    agents_per_step
        .iter()
        .map(|&n| {
            lights
                + n
                + if mode == SequenceMode::Full { 4 * n + 2 } else { 0 }
        })
        .sum()
}

/// Whether query token `q` may attend to key token `k` under the group-causal
/// rules.
pub fn attention_allowed(q: &Token, k: &Token) -> bool {
    if k.step == q.step {
        let (rq, rk) = (q.group.region(), k.group.region());
        if rq == rk {
            if q.group.is_agent_state() {
                // strict left-to-right causality inside the AS region
                return k.intra.unwrap_or(0) <= q.intra.unwrap_or(0);
            }
            // TL and MO blocks are generated in one batch: free intra-group attention
            return true;
        }
        // logically preceding group at the same step
        return rk < rq;
    }
    if k.step + 1 == q.step {
        // any group at the last step
        return true;
    }
    if k.step < q.step {
        // same object earlier, any group
        return match (q.owner, k.owner) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
    }
    false
}

/// Build the dense group-causal self-attention mask for a sequence.
pub fn group_causal_mask(seq: &TokenSequence) -> AttentionMask {
    let n = seq.len();
    let mut m = AttentionMask::new(n, n, false);
    for qi in 0..n {
        for ki in 0..n {
            if attention_allowed(&seq.tokens[qi], &seq.tokens[ki]) {
                m.set(qi, ki, true);
            }
        }
    }
    m
}

/// Prune an existing mask so that every anchored query keeps only its `k`
/// nearest anchored keys (Euclidean x-y distance). Unanchored queries and
/// keys are unaffected.
pub fn knn_prune(q_anchors: &[Option<Anchor>], k_anchors: &[Option<Anchor>], mask: &mut AttentionMask, k: usize) {
    debug_assert!(k >= 1);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for qi in 0..mask.n_q {
        let qa = match &q_anchors[qi] {
            Some(a) => *a,
            None => continue,
        };
        cand.clear();
        for ki in 0..mask.n_k {
            if !mask.get(qi, ki) {
                continue;
            }
            if let Some(ka) = &k_anchors[ki] {
                cand.push((math::dist2((qa.x, qa.y), (ka.x, ka.y)), ki));
            }
        }
        if cand.len() <= k {
            continue;
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, ki) in &cand[k..] {
            mask.set(qi, ki, false);
        }
    }
}

/// KNN-prune the self-attention mask of a sequence.
pub fn knn_mask(seq: &TokenSequence, base: &AttentionMask, k: usize) -> AttentionMask {
    let anchors: Vec<Option<Anchor>> = seq.tokens.iter().map(|t| t.anchor).collect();
    let mut m = base.clone();
    knn_prune(&anchors, &anchors, &mut m, k);
    m
}

/// Positional delta of the key expressed in the query's local frame, plus the
/// step difference. Returns `(dx, dy, dpsi, dt, has_anchor)`.
pub fn relative_deltas(q: Option<&Anchor>, k: Option<&Anchor>) -> (f64, f64, f64, f64, bool) {
    match (q, k) {
        (Some(qa), Some(ka)) => {
            let (dx, dy) = math::rotate(ka.x - qa.x, ka.y - qa.y, -qa.psi);
            (
                dx,
                dy,
                wrap_angle(ka.psi - qa.psi),
                (ka.t - qa.t) as f64,
                true,
            )
        }
        _ => (0.0, 0.0, 0.0, 0.0, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_codec::segment_polylines;
    use crate::scenario::*;
    use alloc::string::String;
    use alloc::vec;

    /// 1 agent on a straight lane plus 1 light, `steps` steps.
    fn tiny_scenario(steps: usize) -> (ScenarioDescription, Vec<MapSegment>) {
        let mut s = ScenarioDescription {
            scenario_id: String::from("tiny"),
            dt: 0.5,
            num_steps: steps,
            polylines: vec![MapPolyline {
                id: String::from("lane"),
                semantic_type: SemanticType::Lane,
                points: (0..40).map(|i| [i as f64 * 2.0, 0.0, 0.0]).collect(),
            }],
            agents: vec![AgentRecord {
                agent_id: 0,
                kind: AgentType::Vehicle,
                shape: [4.0, 2.0, 1.5],
                states: (0..steps)
                    .map(|t| AgentState {
                        x: 2.0 + 4.0 * t as f64,
                        y: 0.0,
                        psi: 0.0,
                        vx: 8.0,
                        vy: 0.0,
                        valid: true,
                    })
                    .collect(),
            }],
            traffic_lights: vec![],
            sdc_index: 0,
        };
        let segments = segment_polylines(&s, 0.0, 0.0).unwrap();
        s.traffic_lights.push(TrafficLightRecord {
            tl_id: 0,
            attached_segment: 0,
            stop_point: (10.0, 0.0),
            heading: 0.0,
            states: vec![TlState::Green; steps],
        });
        (s, segments)
    }

    #[test]
    fn token_count_full_mode() {
        let (s, segs) = tiny_scenario(2);
        let seq = build_sequence(&s, &segs, SequenceMode::Full, &BuildOptions::default()).unwrap();
        // per step: 1 TL + 1 START + 4 AS + 1 END + 1 MO = 8
        assert_eq!(seq.len(), 16);
        assert_eq!(expected_token_count(1, &[1, 1], SequenceMode::Full), 16);
    }

    #[test]
    fn pretrain_mode_has_no_agent_state_tokens() {
        let (s, segs) = tiny_scenario(3);
        let seq = build_sequence(&s, &segs, SequenceMode::Pretrain, &BuildOptions::default()).unwrap();
        assert!(seq.tokens.iter().all(|t| !t.group.is_agent_state()));
        assert_eq!(seq.len(), expected_token_count(1, &[1, 1, 1], SequenceMode::Pretrain));
    }

    #[test]
    fn invalid_next_step_drops_motion_target() {
        let (mut s, segs) = tiny_scenario(3);
        s.agents[0].states[1].valid = false;
        let seq = build_sequence(&s, &segs, SequenceMode::Full, &BuildOptions::default()).unwrap();
        let mo0 = seq
            .tokens
            .iter()
            .find(|t| t.group == TokenGroup::Mo && t.step == 0)
            .unwrap();
        assert!(mo0.target.is_none());
    }

    #[test]
    fn first_appearance_uses_start_label() {
        let (s, segs) = tiny_scenario(3);
        let seq = build_sequence(&s, &segs, SequenceMode::Full, &BuildOptions::default()).unwrap();
        let mo0 = seq
            .tokens
            .iter()
            .find(|t| t.group == TokenGroup::Mo && t.step == 0)
            .unwrap();
        match &mo0.payload {
            Payload::Mo { label, .. } => assert!(label.is_start()),
            _ => unreachable!(),
        }
        let mo1 = seq
            .tokens
            .iter()
            .find(|t| t.group == TokenGroup::Mo && t.step == 1)
            .unwrap();
        match &mo1.payload {
            Payload::Mo { label, .. } => assert!(!label.is_start()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn mask_examples_from_rules() {
        let (s, segs) = tiny_scenario(2);
        let seq = build_sequence(&s, &segs, SequenceMode::Full, &BuildOptions::default()).unwrap();
        let mask = group_causal_mask(&seq);
        let find = |group: TokenGroup, step: usize| {
            seq.tokens
                .iter()
                .position(|t| t.group == group && t.step == step)
                .unwrap()
        };
        // MO at t attends to TL at t
        assert!(mask.get(find(TokenGroup::Mo, 0), find(TokenGroup::Tl, 0)));
        // TL at t attends to MO at t-1
        assert!(mask.get(find(TokenGroup::Tl, 1), find(TokenGroup::Mo, 0)));
        // TL at t does NOT attend to MO at t
        assert!(!mask.get(find(TokenGroup::Tl, 0), find(TokenGroup::Mo, 0)));
        // AS_SOA does not see the RS token that follows it
        assert!(!mask.get(find(TokenGroup::AsSoa, 0), find(TokenGroup::AsRs, 0)));
        // but RS sees SOA (left-to-right)
        assert!(mask.get(find(TokenGroup::AsRs, 0), find(TokenGroup::AsSoa, 0)));
        // nothing attends to the future
        for q in 0..seq.len() {
            for k in 0..seq.len() {
                if seq.tokens[k].step > seq.tokens[q].step {
                    assert!(!mask.get(q, k));
                }
            }
        }
    }

    #[test]
    fn as_region_strict_order_across_agents() {
        // two agents: RS of agent 0 must not see SOA of agent 1
        let (mut s, segs) = tiny_scenario(2);
        let mut second = s.agents[0].clone();
        second.agent_id = 1;
        for st in &mut second.states {
            st.y = 4.0;
        }
        s.agents.push(second);
        let seq = build_sequence(&s, &segs, SequenceMode::Full, &BuildOptions::default()).unwrap();
        let mask = group_causal_mask(&seq);
        let pos = |group: TokenGroup, aid: u32| {
            seq.tokens
                .iter()
                .position(|t| {
                    t.group == group && t.step == 0 && t.owner == Some(Owner::Agent(aid))
                })
                .unwrap()
        };
        assert!(!mask.get(pos(TokenGroup::AsRs, 0), pos(TokenGroup::AsSoa, 1)));
        assert!(mask.get(pos(TokenGroup::AsRs, 1), pos(TokenGroup::AsSoa, 0)));
    }

    #[test]
    fn knn_keeps_nearest() {
        let mk = |x: f64| {
            Some(Anchor { x, y: 0.0, psi: 0.0, t: 0 })
        };
        let q = vec![mk(0.0), None];
        let k = vec![mk(1.0), mk(2.0), mk(9.0), None];
        let mut mask = AttentionMask::new(2, 4, true);
        knn_prune(&q, &k, &mut mask, 2);
        // farthest anchored key masked for the anchored query
        assert!(mask.get(0, 0) && mask.get(0, 1) && !mask.get(0, 2));
        // unanchored key untouched
        assert!(mask.get(0, 3));
        // unanchored query row unchanged
        assert!((0..4).all(|ki| mask.get(1, ki)));
        // k >= candidates leaves everything allowed
        let mut mask2 = AttentionMask::new(2, 4, true);
        knn_prune(&q, &k, &mut mask2, 3);
        assert!((0..4).all(|ki| mask2.get(0, ki)));
    }

    #[test]
    fn delta_examples() {
        let a = Anchor { x: 0.0, y: 0.0, psi: core::f64::consts::FRAC_PI_2, t: 1 };
        let same = relative_deltas(Some(&a), Some(&a));
        assert_eq!(same, (0.0, 0.0, 0.0, 0.0, true));
        // key 1 m ahead of a query heading pi/2
        let k = Anchor { x: 0.0, y: 1.0, psi: core::f64::consts::FRAC_PI_2, t: 1 };
        let (dx, dy, dpsi, dt, ok) = relative_deltas(Some(&a), Some(&k));
        assert!((dx - 1.0).abs() < 1e-12 && dy.abs() < 1e-12);
        assert_eq!((dpsi, dt, ok), (0.0, 0.0, true));
        // same position, key one step earlier
        let k2 = Anchor { t: 0, ..a };
        let d = relative_deltas(Some(&a), Some(&k2));
        assert_eq!(d.3, -1.0);
        // missing anchor flags
        assert_eq!(relative_deltas(Some(&a), None).4, false);
    }
}
