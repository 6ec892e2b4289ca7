//! Closed-loop simulation: batched traffic-light and motion sampling, agent
//! injection with rejection sampling, state forcing, retirement, and exact
//! replay from a decision log.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::kinematics::{best_motion_label, step_bicycle, KinState, MotionLabel, MOTION_START};
use crate::map_codec::{nearest_anchor_segment, MapSegment};
use crate::math;
use crate::model::{ForwardOut, Model};
use crate::nn::{nucleus_probs, sample_categorical, softmax};
use crate::scenario::{
    AgentRecord, AgentState, AgentType, ScenarioDescription, TlState, TrafficLightRecord,
};
use crate::sequence::{
    Anchor, Owner, Payload, SequenceMode, Token, TokenGroup, TokenSequence, TYPE_END_CLASS,
};
use crate::state_codec::{decode_global, encode_relative, GlobalState, QuantRanges, RelativeState, RS_BINS, RS_FIELDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Existing agents only; the first transitions replay ground truth.
    MotionPrediction,
    /// Everything model-driven from the initial frame.
    FullGeneration,
    /// Ground-truth agents replayed exactly; new agents injected until a
    /// population target is reached.
    Densification,
    /// Like full generation, but the ego agent replays ground truth.
    ClosedLoop,
}

impl RolloutMode {
    pub fn name(self) -> &'static str {
        match self {
            RolloutMode::MotionPrediction => "motion_prediction",
            RolloutMode::FullGeneration => "full_generation",
            RolloutMode::Densification => "densification",
            RolloutMode::ClosedLoop => "closed_loop",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "motion_prediction" => RolloutMode::MotionPrediction,
            "full_generation" => RolloutMode::FullGeneration,
            "densification" => RolloutMode::Densification,
            "closed_loop" => RolloutMode::ClosedLoop,
            _ => return None,
        })
    }

    fn uses_agent_state_tokens(self) -> bool {
        self != RolloutMode::MotionPrediction
    }

    fn injects(self) -> bool {
        self.uses_agent_state_tokens()
    }

    /// Whether traffic lights replay the source scenario instead of the
    /// model's TL head.
    fn gt_traffic_lights(self) -> bool {
        matches!(self, RolloutMode::MotionPrediction | RolloutMode::Densification)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    pub seed: u64,
    /// Steps to simulate; defaults to the source scenario's length. May
    /// exceed it in modes that do not replay ground truth.
    pub horizon: Option<usize>,
    /// Map-id-stage resamples before an injection attempt is abandoned.
    pub max_inject_retries: usize,
    /// Agents farther than this from every map segment center retire.
    pub retire_distance: f64,
    /// Densification keeps injecting until this many agents are alive.
    pub densify_target: usize,
    /// While below `densify_target`, force the end-sentinel logit to -inf so
    /// injection cannot stop early.
    pub force_end_logit_off: bool,
    /// Motion-prediction transitions replayed from ground truth before the
    /// model takes over.
    pub forced_gt_steps: usize,
    /// Hard cap on simultaneously alive agents and on the injected id space.
    pub max_agents: usize,
    pub ranges: QuantRanges,
}

impl RolloutConfig {
    pub fn new(mode: RolloutMode, seed: u64) -> Self {
        RolloutConfig {
            mode,
            seed,
            horizon: None,
            max_inject_retries: 5,
            retire_distance: 20.0,
            densify_target: 0,
            force_end_logit_off: mode == RolloutMode::Densification,
            forced_gt_steps: 2,
            max_agents: 128,
            ranges: QuantRanges::default(),
        }
    }
}

/// Everything stochastic (or ground-truth-forced) that shaped a rollout, in
/// decision order. Feeding it back through [`replay`] reproduces the rollout
/// bit for bit without a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Tl(TlState),
    TypeOrEnd(usize),
    MapId(usize),
    RsBins([usize; RS_FIELDS]),
    Motion(usize),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecisionLog(pub Vec<Decision>);

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub scenario: ScenarioDescription,
    pub log: DecisionLog,
    /// Ids of agents the engine injected (absent from the source scenario).
    pub injected: Vec<u32>,
    /// Final token stream, useful for inspection.
    pub tokens: Vec<Token>,
}

struct SimAgent {
    id: u32,
    kind: AgentType,
    shape: [f64; 3],
    kin: KinState,
    vel_global: (f64, f64),
    last_label: MotionLabel,
    /// Index into the source scenario for ground-truth-backed agents.
    gt_index: Option<usize>,
    alive: bool,
    states: Vec<AgentState>,
}

impl SimAgent {
    fn pose(&self) -> (f64, f64, f64) {
        (self.kin.x, self.kin.y, self.kin.psi)
    }

    fn footprint(&self) -> (f64, f64) {
        (self.shape[0], self.shape[1])
    }
}

struct Engine<'a> {
    model: Option<&'a Model>,
    scenario: &'a ScenarioDescription,
    segments: &'a [MapSegment],
    cfg: &'a RolloutConfig,
    t_total: usize,
    rng: ChaCha8Rng,
    tokens: Vec<Token>,
    agents: Vec<SimAgent>,
    /// Sampled traffic-light states, `[light][step]`.
    tls: Vec<Vec<TlState>>,
    out_log: Vec<Decision>,
    replay_log: Option<&'a [Decision]>,
    cursor: usize,
    next_id: u32,
    /// TL token positions of the latest step, aligned with scenario lights.
    tl_positions: Vec<usize>,
    /// (engine agent index, MO token position) of the latest step.
    mo_positions: Vec<(usize, usize)>,
}

/// Run a model-driven rollout.
pub fn rollout(
    model: &Model,
    scenario: &ScenarioDescription,
    segments: &[MapSegment],
    cfg: &RolloutConfig,
) -> Result<RolloutResult, CoreError> {
    Engine::new(Some(model), scenario, segments, cfg, None)?.run()
}

/// Re-run a rollout from its decision log; no model needed, output is
/// bit-identical to the original.
pub fn replay(
    scenario: &ScenarioDescription,
    segments: &[MapSegment],
    cfg: &RolloutConfig,
    log: &DecisionLog,
) -> Result<RolloutResult, CoreError> {
    Engine::new(None, scenario, segments, cfg, Some(&log.0))?.run()
}

impl<'a> Engine<'a> {
    fn new(
        model: Option<&'a Model>,
        scenario: &'a ScenarioDescription,
        segments: &'a [MapSegment],
        cfg: &'a RolloutConfig,
        replay_log: Option<&'a [Decision]>,
    ) -> Result<Self, CoreError> {
        scenario.validate()?;
        if segments.is_empty() {
            return Err(CoreError::Map("rollout needs map segments".to_string()));
        }
        if model.is_none() && replay_log.is_none() {
            return Err(CoreError::Validation("rollout needs a model or a log".to_string()));
        }
        let t_total = cfg.horizon.unwrap_or(scenario.num_steps);
        if t_total == 0 {
            return Err(CoreError::Config("rollout horizon must be at least 1".to_string()));
        }
        let mut agents = Vec::new();
        for (gi, a) in scenario.agents.iter().enumerate() {
            if !a.valid(0) {
                continue; // late arrivals are left to the injection machinery
            }
            let st = &a.states[0];
            let v = signed_speed(st.psi, st.vx, st.vy);
            agents.push(SimAgent {
                id: gi as u32,
                kind: a.kind,
                shape: a.shape,
                kin: KinState { x: st.x, y: st.y, psi: st.psi, v },
                vel_global: (st.vx, st.vy),
                last_label: MotionLabel::START,
                gt_index: Some(gi),
                alive: true,
                states: alloc::vec![AgentState::INVALID; t_total],
            });
        }
        let next_id = scenario.agents.len() as u32;
        Ok(Engine {
            model,
            scenario,
            segments,
            cfg,
            t_total,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            tokens: Vec::new(),
            agents,
            tls: alloc::vec![Vec::new(); scenario.traffic_lights.len()],
            out_log: Vec::new(),
            replay_log,
            cursor: 0,
            next_id,
            tl_positions: Vec::new(),
            mo_positions: Vec::new(),
        })
    }

    fn seq(&self) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens.clone(),
            num_steps: self.t_total,
            mode: if self.cfg.mode.uses_agent_state_tokens() {
                SequenceMode::Full
            } else {
                SequenceMode::Pretrain
            },
        }
    }

    fn forward(&self) -> Result<Option<ForwardOut>, CoreError> {
        match self.model {
            Some(m) => Ok(Some(m.forward(&self.seq(), self.segments, false)?)),
            None => Ok(None),
        }
    }

    /// Record a decision; in replay mode the logged value wins.
    fn decide(&mut self, computed: Decision) -> Result<Decision, CoreError> {
        let d = match self.replay_log {
            Some(log) => {
                let d = log.get(self.cursor).cloned().ok_or_else(|| {
                    CoreError::Consistency("decision log exhausted".to_string())
                })?;
                self.cursor += 1;
                if core::mem::discriminant(&d) != core::mem::discriminant(&computed) {
                    return Err(CoreError::Consistency(
                        "decision log out of order".to_string(),
                    ));
                }
                d
            }
            None => computed,
        };
        self.out_log.push(d.clone());
        Ok(d)
    }

    fn run(mut self) -> Result<RolloutResult, CoreError> {
        let t_total = self.t_total;
        for t in 0..t_total {
            self.tl_block(t)?;
            if self.cfg.mode.uses_agent_state_tokens() {
                self.as_block(t)?;
            }
            self.mo_block(t)?;
            for a in &mut self.agents {
                if a.alive {
                    a.states[t] = AgentState {
                        x: a.kin.x,
                        y: a.kin.y,
                        psi: a.kin.psi,
                        vx: a.vel_global.0,
                        vy: a.vel_global.1,
                        valid: true,
                    };
                }
            }
            if t + 1 < t_total {
                self.advance(t)?;
            }
        }
        self.export()
    }

    /// Append the step's TL tokens; states come from ground truth, the TL
    /// head, or the replay log.
    fn tl_block(&mut self, t: usize) -> Result<(), CoreError> {
        let n = self.scenario.traffic_lights.len();
        let mut states = Vec::with_capacity(n);
        if n > 0 {
            let use_gt = t == 0 || self.cfg.mode.gt_traffic_lights();
            let mut fo = if use_gt { None } else { self.forward()? };
            for (li, tl) in self.scenario.traffic_lights.iter().enumerate() {
                let computed = if use_gt {
                    // past the source's length, hold the last known state
                    let idx = t.min(tl.states.len() - 1);
                    Decision::Tl(tl.states[idx])
                } else if let Some(fo) = fo.as_mut() {
                    let model = self.model.unwrap();
                    let logits = model.tl_logits(fo, self.tl_positions[li]);
                    let probs = softmax(&logits);
                    let idx = sample_categorical(&probs, &mut self.rng);
                    Decision::Tl(TlState::from_index(idx as u32).unwrap_or(TlState::Unknown))
                } else {
                    // replay without a model: placeholder, the log wins
                    Decision::Tl(TlState::Unknown)
                };
                match self.decide(computed)? {
                    Decision::Tl(s) => states.push(s),
                    _ => unreachable!(),
                }
            }
        }
        self.tl_positions.clear();
        for (li, tl) in self.scenario.traffic_lights.iter().enumerate() {
            self.tl_positions.push(self.tokens.len());
            self.tls[li].push(states[li]);
            self.tokens.push(Token {
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
                    state: states[li],
                    map_id: tl.attached_segment,
                },
                target: None,
            });
        }
        Ok(())
    }

    /// Agent-state tokens for an existing agent, from its current (or
    /// ground-truth) state.
    fn push_agent_state(&mut self, t: usize, ai: usize, slot: usize) -> Result<(), CoreError> {
        let a = &self.agents[ai];
        let (pose, vel) = (a.pose(), a.vel_global);
        let seg_id = nearest_anchor_segment(pose, self.segments)
            .map(|(id, _)| id)
            .ok_or(CoreError::NoAnchor)?;
        let seg = &self.segments[seg_id];
        let rel = encode_relative(
            GlobalState { x: pose.0, y: pose.1, psi: pose.2, vx: vel.0, vy: vel.1 },
            a.shape,
            seg,
            &self.cfg.ranges,
        );
        let (aid, kind) = (a.id, a.kind);
        let base = 4 * slot + 1;
        self.tokens.push(Token {
            group: TokenGroup::AsSoa,
            step: t,
            owner: Some(Owner::Agent(aid)),
            intra: Some(base),
            anchor: None,
            payload: Payload::Soa { aid },
            target: None,
        });
        self.tokens.push(Token {
            group: TokenGroup::AsType,
            step: t,
            owner: Some(Owner::Agent(aid)),
            intra: Some(base + 1),
            anchor: None,
            payload: Payload::TypeTok { aid, kind },
            target: None,
        });
        self.tokens.push(Token {
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
            payload: Payload::Ms { aid, kind, map_id: seg_id },
            target: None,
        });
        self.tokens.push(Token {
            group: TokenGroup::AsRs,
            step: t,
            owner: Some(Owner::Agent(aid)),
            intra: Some(base + 3),
            anchor: Some(Anchor { x: pose.0, y: pose.1, psi: pose.2, t: t as i64 }),
            payload: Payload::Rs { aid, kind, map_id: seg_id, bins: rel.bins },
            target: None,
        });
        Ok(())
    }

    fn alive_count(&self) -> usize {
        self.agents.iter().filter(|a| a.alive).count()
    }

    fn as_block(&mut self, t: usize) -> Result<(), CoreError> {
        self.tokens.push(Token {
            group: TokenGroup::AsStart,
            step: t,
            owner: None,
            intra: Some(0),
            anchor: None,
            payload: Payload::AsStart,
            target: None,
        });
        let alive: Vec<usize> = (0..self.agents.len())
            .filter(|&i| self.agents[i].alive)
            .collect();
        let mut slot = 0;
        for ai in alive {
            self.push_agent_state(t, ai, slot)?;
            slot += 1;
        }
        // injection loop
        loop {
            let can_inject = self.cfg.mode.injects()
                && self.alive_count() < self.cfg.max_agents
                && (self.next_id as usize) < self.cfg.max_agents;
            if !can_inject {
                self.push_end(t, slot);
                return Ok(());
            }
            let spec_aid = self.next_id;
            let spec_pos = self.tokens.len();
            self.tokens.push(Token {
                group: TokenGroup::AsSoa,
                step: t,
                owner: Some(Owner::Agent(spec_aid)),
                intra: Some(4 * slot + 1),
                anchor: None,
                payload: Payload::Soa { aid: spec_aid },
                target: None,
            });
            let mask_end = self.cfg.force_end_logit_off
                && self.alive_count() < self.cfg.densify_target;
            let computed = if let Some(model) = self.model {
                let mut fo = model.forward(&self.seq(), self.segments, false)?;
                let mut logits = model.type_logits(&mut fo, spec_pos);
                if mask_end {
                    logits[TYPE_END_CLASS] = f64::NEG_INFINITY;
                }
                let probs = softmax(&logits);
                Decision::TypeOrEnd(sample_categorical(&probs, &mut self.rng))
            } else {
                Decision::TypeOrEnd(TYPE_END_CLASS)
            };
            let choice = match self.decide(computed)? {
                Decision::TypeOrEnd(c) => c,
                _ => unreachable!(),
            };
            if choice == TYPE_END_CLASS {
                // the speculative token becomes the end sentinel
                let tok = &mut self.tokens[spec_pos];
                tok.group = TokenGroup::AsEnd;
                tok.owner = None;
                tok.payload = Payload::AsEnd { aid: spec_aid };
                return Ok(());
            }
            let kind = AgentType::from_index(choice as u32).ok_or_else(|| {
                CoreError::Sampling("type head produced an unknown class".to_string())
            })?;
            match self.inject(t, slot, spec_aid, kind)? {
                true => {
                    self.next_id += 1;
                    slot += 1;
                }
                false => {
                    // all attempts rejected: retract and close the block
                    self.tokens.truncate(spec_pos);
                    self.push_end(t, slot);
                    return Ok(());
                }
            }
        }
    }

    fn push_end(&mut self, t: usize, slot: usize) {
        self.tokens.push(Token {
            group: TokenGroup::AsEnd,
            step: t,
            owner: None,
            intra: Some(4 * slot + 1),
            anchor: None,
            payload: Payload::AsEnd { aid: self.next_id },
            target: None,
        });
    }

    /// Sample map id + relative state for a new agent, with rejection. The
    /// speculative SOA is already in the stream. Returns false if every
    /// attempt was rejected (tokens are rolled back by the caller).
    fn inject(
        &mut self,
        t: usize,
        slot: usize,
        aid: u32,
        kind: AgentType,
    ) -> Result<bool, CoreError> {
        let base = 4 * slot + 1;
        let type_pos = self.tokens.len();
        self.tokens.push(Token {
            group: TokenGroup::AsType,
            step: t,
            owner: Some(Owner::Agent(aid)),
            intra: Some(base + 1),
            anchor: None,
            payload: Payload::TypeTok { aid, kind },
            target: None,
        });
        let stage_start = self.tokens.len();
        for _attempt in 0..self.cfg.max_inject_retries {
            self.tokens.truncate(stage_start);
            let computed = if let Some(model) = self.model {
                let mut fo = model.forward(&self.seq(), self.segments, false)?;
                let logits = model.map_logits(&mut fo, type_pos, self.segments.len());
                let probs = softmax(&logits);
                Decision::MapId(sample_categorical(&probs, &mut self.rng))
            } else {
                Decision::MapId(0)
            };
            let map_id = match self.decide(computed)? {
                Decision::MapId(m) => m,
                _ => unreachable!(),
            };
            if map_id >= self.segments.len() {
                return Err(CoreError::Consistency("sampled map id out of range".to_string()));
            }
            let seg = &self.segments[map_id];
            let ms_pos = self.tokens.len();
            self.tokens.push(Token {
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
                payload: Payload::Ms { aid, kind, map_id },
                target: None,
            });
            let computed = if let Some(model) = self.model {
                let mut fo = model.forward(&self.seq(), self.segments, false)?;
                let mut bins = [0usize; RS_FIELDS];
                for f in 0..RS_FIELDS {
                    let logits = model.rs_next_logits(&mut fo, ms_pos, &bins[..f]);
                    let probs = softmax(&logits);
                    bins[f] = sample_categorical(&probs, &mut self.rng);
                }
                Decision::RsBins(bins)
            } else {
                Decision::RsBins([0; RS_FIELDS])
            };
            let bins = match self.decide(computed)? {
                Decision::RsBins(b) => b,
                _ => unreachable!(),
            };
            if let Some(agent) = self.try_accept(bins, kind, aid) {
                self.tokens.push(Token {
                    group: TokenGroup::AsRs,
                    step: t,
                    owner: Some(Owner::Agent(aid)),
                    intra: Some(base + 3),
                    anchor: Some(Anchor {
                        x: agent.kin.x,
                        y: agent.kin.y,
                        psi: agent.kin.psi,
                        t: t as i64,
                    }),
                    payload: Payload::Rs { aid, kind, map_id, bins },
                    target: None,
                });
                self.agents.push(agent);
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Validate sampled bins and build the agent; `None` means rejection.
    fn try_accept(&self, bins: [usize; RS_FIELDS], kind: AgentType, aid: u32) -> Option<SimAgent> {
        // positions quantized onto a range edge are almost surely outside it
        if bins[3] == 0 || bins[3] == RS_BINS - 1 || bins[4] == 0 || bins[4] == RS_BINS - 1 {
            return None;
        }
        // the map id decided the frame; bins decode within it
        let map_id = match self.tokens.last()?.payload {
            Payload::Ms { map_id, .. } => map_id,
            _ => return None,
        };
        let rel = RelativeState::from_bins(bins, &self.cfg.ranges);
        let g = decode_global(&rel, &self.segments[map_id]);
        let shape = [rel.l, rel.w, rel.h];
        let cand_box = crate::kinematics::box_corners((g.x, g.y, g.psi), (shape[0], shape[1]));
        for a in &self.agents {
            if !a.alive {
                continue;
            }
            let other = crate::kinematics::box_corners(a.pose(), a.footprint());
            if crate::metrics::obb_overlap(&cand_box, &other) {
                return None;
            }
        }
        Some(SimAgent {
            id: aid,
            kind,
            shape,
            kin: KinState {
                x: g.x,
                y: g.y,
                psi: g.psi,
                v: signed_speed(g.psi, g.vx, g.vy),
            },
            vel_global: (g.vx, g.vy),
            last_label: MotionLabel::START,
            gt_index: None,
            alive: true,
            states: alloc::vec![AgentState::INVALID; self.t_total],
        })
    }

    fn mo_block(&mut self, t: usize) -> Result<(), CoreError> {
        self.mo_positions.clear();
        for ai in 0..self.agents.len() {
            if !self.agents[ai].alive {
                continue;
            }
            let a = &self.agents[ai];
            let local_vel = math::rotate(a.vel_global.0, a.vel_global.1, -a.kin.psi);
            self.mo_positions.push((ai, self.tokens.len()));
            self.tokens.push(Token {
                group: TokenGroup::Mo,
                step: t,
                owner: Some(Owner::Agent(a.id)),
                intra: None,
                anchor: Some(Anchor { x: a.kin.x, y: a.kin.y, psi: a.kin.psi, t: t as i64 }),
                payload: Payload::Mo {
                    aid: a.id,
                    kind: a.kind,
                    label: a.last_label,
                    vel: local_vel,
                    shape: a.shape,
                },
                target: None,
            });
        }
        Ok(())
    }

    /// Whether this agent's next state is copied from ground truth instead
    /// of the bicycle model.
    fn state_forced(&self, a: &SimAgent) -> bool {
        match self.cfg.mode {
            RolloutMode::Densification => a.gt_index.is_some(),
            RolloutMode::ClosedLoop => a.gt_index == Some(self.scenario.sdc_index),
            _ => false,
        }
    }

    /// Whether this agent's next motion label replays ground truth.
    fn label_forced(&self, a: &SimAgent, t: usize) -> bool {
        if self.state_forced(a) {
            return true;
        }
        self.cfg.mode == RolloutMode::MotionPrediction
            && a.gt_index.is_some()
            && t < self.cfg.forced_gt_steps
    }

    fn gt_next_pose(&self, a: &SimAgent, t: usize) -> Option<(f64, f64, f64)> {
        let gi = a.gt_index?;
        let rec = &self.scenario.agents[gi];
        if t + 1 < self.scenario.num_steps && rec.valid(t + 1) {
            Some(rec.pose(t + 1))
        } else {
            None
        }
    }

    /// Sample/force transition labels at step t, advance every agent to
    /// t + 1, then retire strays.
    fn advance(&mut self, t: usize) -> Result<(), CoreError> {
        let mut fo = if self.model.is_some()
            && self
                .mo_positions
                .iter()
                .any(|&(ai, _)| !self.label_forced(&self.agents[ai], t))
        {
            self.forward()?
        } else {
            None
        };
        let dt = self.scenario.dt;
        let positions = self.mo_positions.clone();
        for (ai, pos) in positions {
            let forced = self.label_forced(&self.agents[ai], t);
            let computed = if forced {
                let a = &self.agents[ai];
                let label = match self.gt_next_pose(a, t) {
                    Some(gt) => best_motion_label(a.kin, (a.shape[0], a.shape[1]), gt, dt).0,
                    None => MotionLabel(544), // hold course when truth runs out
                };
                Decision::Motion(label.0)
            } else if let Some(fo) = fo.as_mut() {
                let model = self.model.unwrap();
                let mut logits = model.motion_logits(fo, pos);
                logits[MOTION_START] = f64::NEG_INFINITY;
                let p = model.cfg.nucleus_p;
                let probs = nucleus_probs(&logits, p);
                Decision::Motion(sample_categorical(&probs, &mut self.rng))
            } else {
                Decision::Motion(544)
            };
            let label = match self.decide(computed)? {
                Decision::Motion(l) => l,
                _ => unreachable!(),
            };
            if label >= MOTION_START {
                return Err(CoreError::Sampling("start label sampled as a transition".to_string()));
            }
            let label = MotionLabel(label);
            let a = &mut self.agents[ai];
            a.last_label = label;
            let state_forced = match self.cfg.mode {
                RolloutMode::Densification => a.gt_index.is_some(),
                RolloutMode::ClosedLoop => a.gt_index == Some(self.scenario.sdc_index),
                _ => false,
            };
            let gt_next = a.gt_index.and_then(|gi| {
                let rec = &self.scenario.agents[gi];
                (t + 1 < self.scenario.num_steps && rec.valid(t + 1))
                    .then(|| rec.states[t + 1])
            });
            match (state_forced, gt_next) {
                (true, Some(st)) => {
                    a.kin = KinState {
                        x: st.x,
                        y: st.y,
                        psi: st.psi,
                        v: signed_speed(st.psi, st.vx, st.vy),
                    };
                    a.vel_global = (st.vx, st.vy);
                }
                _ => {
                    let (acc, w) = label.controls().unwrap();
                    a.kin = step_bicycle(a.kin, acc, w, dt);
                    a.vel_global = (
                        a.kin.v * math::cos(a.kin.psi),
                        a.kin.v * math::sin(a.kin.psi),
                    );
                }
            }
        }
        // retirement: model-driven agents too far from every segment; the
        // population stays constant in motion prediction
        if self.cfg.mode == RolloutMode::MotionPrediction {
            return Ok(());
        }
        for ai in 0..self.agents.len() {
            if !self.agents[ai].alive || self.state_forced(&self.agents[ai]) {
                continue;
            }
            let (x, y) = (self.agents[ai].kin.x, self.agents[ai].kin.y);
            let near = self
                .segments
                .iter()
                .any(|s| math::dist2((x, y), s.center) <= self.cfg.retire_distance);
            if !near {
                self.agents[ai].alive = false;
            }
        }
        Ok(())
    }

    fn export(self) -> Result<RolloutResult, CoreError> {
        let mut agents = Vec::new();
        let mut sdc_index = 0;
        for (i, a) in self.agents.iter().enumerate() {
            if a.gt_index == Some(self.scenario.sdc_index) {
                sdc_index = i;
            }
            agents.push(AgentRecord {
                agent_id: a.id,
                kind: a.kind,
                shape: a.shape,
                states: a.states.clone(),
            });
        }
        let traffic_lights = self
            .scenario
            .traffic_lights
            .iter()
            .zip(&self.tls)
            .map(|(tl, states)| TrafficLightRecord {
                tl_id: tl.tl_id,
                attached_segment: tl.attached_segment,
                stop_point: tl.stop_point,
                heading: tl.heading,
                states: states.clone(),
            })
            .collect();
        let mut scenario = ScenarioDescription {
            scenario_id: alloc::format!(
                "{}-{}-{}",
                self.scenario.scenario_id,
                self.cfg.mode.name(),
                self.cfg.seed
            ),
            dt: self.scenario.dt,
            num_steps: self.t_total,
            polylines: self.scenario.polylines.clone(),
            agents,
            traffic_lights,
            sdc_index,
        };
        scenario.normalize();
        scenario.validate()?;
        let injected = self
            .agents
            .iter()
            .filter(|a| a.gt_index.is_none())
            .map(|a| a.id)
            .collect();
        Ok(RolloutResult {
            scenario,
            log: DecisionLog(self.out_log),
            injected,
            tokens: self.tokens,
        })
    }
}

/// Speed along the heading; negative when reversing.
fn signed_speed(psi: f64, vx: f64, vy: f64) -> f64 {
    let speed = math::hypot(vx, vy);
    let along = vx * math::cos(psi) + vy * math::sin(psi);
    if along < 0.0 {
        -speed
    } else {
        speed
    }
}
