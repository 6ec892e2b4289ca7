//! Scenario container: map polylines, agent tracks, traffic-light tracks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::kinematics::{box_corners, step_bicycle, KinState};
use crate::math::{self, wrap_angle};
use crate::metrics::obb_overlap;

/// Default simulation rate: 2 Hz.
pub const DEFAULT_DT: f64 = 0.5;
/// Default horizon: 19 discrete steps.
pub const DEFAULT_NUM_STEPS: usize = 19;
/// Speed cap used by the synthetic corpus generator.
pub const SYNTH_V_MAX: f64 = 30.0;

/// Agent category. Vehicles are ordered first in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AgentType {
    Vehicle = 0,
    Pedestrian = 1,
    Cyclist = 2,
}

impl AgentType {
    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            0 => Some(AgentType::Vehicle),
            1 => Some(AgentType::Pedestrian),
            2 => Some(AgentType::Cyclist),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Traffic-light signal state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlState {
    Unknown = 0,
    Green = 1,
    Yellow = 2,
    Red = 3,
}

impl TlState {
    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            0 => Some(TlState::Unknown),
            1 => Some(TlState::Green),
            2 => Some(TlState::Yellow),
            3 => Some(TlState::Red),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The 12 map semantic categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticType {
    Lane = 0,
    Sidewalk = 1,
    RoadBoundaryLine = 2,
    RoadLine = 3,
    BrokenLine = 4,
    SolidLine = 5,
    YellowLine = 6,
    WhiteLine = 7,
    Driveway = 8,
    Crosswalk = 9,
    SpeedBump = 10,
    StopSign = 11,
}

impl SemanticType {
    pub const ALL: [SemanticType; 12] = [
        SemanticType::Lane,
        SemanticType::Sidewalk,
        SemanticType::RoadBoundaryLine,
        SemanticType::RoadLine,
        SemanticType::BrokenLine,
        SemanticType::SolidLine,
        SemanticType::YellowLine,
        SemanticType::WhiteLine,
        SemanticType::Driveway,
        SemanticType::Crosswalk,
        SemanticType::SpeedBump,
        SemanticType::StopSign,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticType::Lane => "lane",
            SemanticType::Sidewalk => "sidewalk",
            SemanticType::RoadBoundaryLine => "road_boundary_line",
            SemanticType::RoadLine => "road_line",
            SemanticType::BrokenLine => "broken_line",
            SemanticType::SolidLine => "solid_line",
            SemanticType::YellowLine => "yellow_line",
            SemanticType::WhiteLine => "white_line",
            SemanticType::Driveway => "driveway",
            SemanticType::Crosswalk => "crosswalk",
            SemanticType::SpeedBump => "speed_bump",
            SemanticType::StopSign => "stop_sign",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.name() == name)
    }
}

/// One polyline of the vectorized map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPolyline {
    pub id: String,
    pub semantic_type: SemanticType,
    /// Ordered (x, y, z) points in meters.
    pub points: Vec<[f64; 3]>,
}

/// Per-step agent state sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

impl AgentState {
    pub const INVALID: AgentState = AgentState {
        x: 0.0,
        y: 0.0,
        psi: 0.0,
        vx: 0.0,
        vy: 0.0,
        valid: false,
    };
}

/// One traffic participant and its track over the scenario horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub agent_id: u32,
    pub kind: AgentType,
    /// (length, width, height) in meters.
    pub shape: [f64; 3],
    pub states: Vec<AgentState>,
}

impl AgentRecord {
    pub fn pose(&self, t: usize) -> (f64, f64, f64) {
        let s = &self.states[t];
        (s.x, s.y, s.psi)
    }

    pub fn valid(&self, t: usize) -> bool {
        self.states[t].valid
    }

    /// First step with a valid state, if any.
    pub fn first_valid_step(&self) -> Option<usize> {
        self.states.iter().position(|s| s.valid)
    }
}

/// A traffic light attached to a map segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLightRecord {
    pub tl_id: u32,
    /// Index of the map segment the light resides in.
    pub attached_segment: usize,
    pub stop_point: (f64, f64),
    pub heading: f64,
    pub states: Vec<TlState>,
}

/// Ground-truth scenario container.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDescription {
    pub scenario_id: String,
    pub dt: f64,
    pub num_steps: usize,
    pub polylines: Vec<MapPolyline>,
    pub agents: Vec<AgentRecord>,
    pub traffic_lights: Vec<TrafficLightRecord>,
    pub sdc_index: usize,
}

impl ScenarioDescription {
    /// Wrap all headings to `[-pi, pi)`. Applied on load so downstream codecs
    /// see one convention.
    pub fn normalize(&mut self) {
        for a in &mut self.agents {
            for s in &mut a.states {
                s.psi = wrap_angle(s.psi);
            }
        }
        for tl in &mut self.traffic_lights {
            tl.heading = wrap_angle(tl.heading);
        }
    }

    /// Check every container invariant, naming the offending field.
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.dt > 0.0) {
            return Err(CoreError::Validation(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.num_steps == 0 {
            return Err(CoreError::Validation("num_steps must be >= 1".to_string()));
        }
        if self.sdc_index >= self.agents.len() {
            return Err(CoreError::Validation(format!(
                "sdc_index {} out of range ({} agents)",
                self.sdc_index,
                self.agents.len()
            )));
        }
        for p in &self.polylines {
            if p.points.len() < 2 {
                return Err(CoreError::Validation(format!(
                    "polyline {} has {} points, need >= 2",
                    p.id,
                    p.points.len()
                )));
            }
            for pt in &p.points {
                if !pt.iter().all(|c| c.is_finite()) {
                    return Err(CoreError::Validation(format!(
                        "polyline {} has non-finite coordinates",
                        p.id
                    )));
                }
            }
        }
        for a in &self.agents {
            if a.states.len() != self.num_steps {
                return Err(CoreError::Validation(format!(
                    "agent {} track has {} entries, expected num_steps={}",
                    a.agent_id,
                    a.states.len(),
                    self.num_steps
                )));
            }
            if !a.shape.iter().all(|&c| c > 0.0 && c.is_finite()) {
                return Err(CoreError::Validation(format!(
                    "agent {} shape must be positive and finite",
                    a.agent_id
                )));
            }
            for (t, s) in a.states.iter().enumerate() {
                if s.valid {
                    let finite = s.x.is_finite()
                        && s.y.is_finite()
                        && s.psi.is_finite()
                        && s.vx.is_finite()
                        && s.vy.is_finite();
                    if !finite {
                        return Err(CoreError::Validation(format!(
                            "agent {} valid at step {t} but pose is non-finite",
                            a.agent_id
                        )));
                    }
                    if !(-core::f64::consts::PI..core::f64::consts::PI).contains(&s.psi) {
                        return Err(CoreError::Validation(format!(
                            "agent {} heading {} at step {t} not wrapped to [-pi, pi)",
                            a.agent_id, s.psi
                        )));
                    }
                }
            }
        }
        for tl in &self.traffic_lights {
            if tl.states.len() != self.num_steps {
                return Err(CoreError::Validation(format!(
                    "traffic light {} track has {} entries, expected num_steps={}",
                    tl.tl_id,
                    tl.states.len(),
                    self.num_steps
                )));
            }
        }
        Ok(())
    }

    /// Centroid of the map bounding box; the reference pose when no ego state
    /// exists (mapless full generation).
    pub fn map_bbox_centroid(&self) -> (f64, f64) {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.polylines {
            for pt in &p.points {
                lo.0 = lo.0.min(pt[0]);
                lo.1 = lo.1.min(pt[1]);
                hi.0 = hi.0.max(pt[0]);
                hi.1 = hi.1.max(pt[1]);
            }
        }
        ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0)
    }

    /// Pose of the ego agent at the given step, if valid.
    pub fn sdc_pose(&self, t: usize) -> Option<(f64, f64, f64)> {
        let a = self.agents.get(self.sdc_index)?;
        if a.valid(t) {
            Some(a.pose(t))
        } else {
            None
        }
    }
}

/// Synthetic scenario templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Straight,
    Intersection,
    Curve,
}

impl Template {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "straight" => Some(Template::Straight),
            "intersection" => Some(Template::Intersection),
            "curve" => Some(Template::Curve),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Intersection => "intersection",
            Template::Curve => "curve",
        }
    }
}

fn straight_polyline(id: &str, ty: SemanticType, from: (f64, f64), to: (f64, f64), spacing: f64) -> MapPolyline {
    let len = math::dist2(from, to);
    let n = libm::ceil(len / spacing) as usize + 1;
    let n = n.max(2);
    let points = (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            [from.0 + f * (to.0 - from.0), from.1 + f * (to.1 - from.1), 0.0]
        })
        .collect();
    MapPolyline {
        id: id.to_string(),
        semantic_type: ty,
        points,
    }
}

fn arc_polyline(id: &str, ty: SemanticType, center: (f64, f64), radius: f64, a0: f64, a1: f64, spacing: f64) -> MapPolyline {
    let len = radius * (a1 - a0).abs();
    let n = (libm::ceil(len / spacing) as usize + 1).max(2);
    let points = (0..n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / (n - 1) as f64;
            [center.0 + radius * math::cos(a), center.1 + radius * math::sin(a), 0.0]
        })
        .collect();
    MapPolyline {
        id: id.to_string(),
        semantic_type: ty,
        points,
    }
}

struct Seat {
    kind: AgentType,
    start: KinState,
    accel: f64,
    yaw_rate: f64,
    shape: [f64; 3],
}

/// Roll a constant-control bicycle trajectory into a 19-step agent track.
fn roll_track(seat: &Seat, num_steps: usize, dt: f64) -> Vec<AgentState> {
    let mut states = Vec::with_capacity(num_steps);
    let mut s = seat.start;
    for _ in 0..num_steps {
        states.push(AgentState {
            x: s.x,
            y: s.y,
            psi: wrap_angle(s.psi),
            vx: s.v * math::cos(s.psi),
            vy: s.v * math::sin(s.psi),
            valid: true,
        });
        s = step_bicycle(s, seat.accel, seat.yaw_rate, dt);
    }
    states
}

/// Deterministic desk-scale corpus generator. Agents follow constant-control
/// bicycle trajectories so their ground-truth motion labels are on-grid.
pub fn synth_scenario(template: Template, num_agents: usize, seed: u64) -> Result<ScenarioDescription, CoreError> {
    if num_agents < 1 {
        return Err(CoreError::Config("num_agents must be >= 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (template as u64) << 32);
    let dt = DEFAULT_DT;
    let num_steps = DEFAULT_NUM_STEPS;

    let mut polylines = Vec::new();
    let mut seats: Vec<Seat> = Vec::new();

    match template {
        Template::Straight => {
            let length = 280.0;
            let lane_ys = [0.0, 4.0];
            for (i, y) in lane_ys.iter().enumerate() {
                polylines.push(straight_polyline(
                    &format!("lane_{i}"),
                    SemanticType::Lane,
                    (0.0, *y),
                    (length, *y),
                    2.0,
                ));
            }
            polylines.push(straight_polyline("edge_l", SemanticType::RoadBoundaryLine, (0.0, -2.0), (length, -2.0), 2.0));
            polylines.push(straight_polyline("edge_r", SemanticType::RoadBoundaryLine, (0.0, 6.0), (length, 6.0), 2.0));
            polylines.push(straight_polyline("mid", SemanticType::BrokenLine, (0.0, 2.0), (length, 2.0), 2.0));

            let slots_per_lane = 6usize;
            if num_agents > slots_per_lane * lane_ys.len() {
                return Err(CoreError::Placement(format!(
                    "straight template fits at most {} agents, requested {num_agents}",
                    slots_per_lane * lane_ys.len()
                )));
            }
            for i in 0..num_agents {
                let lane = i % lane_ys.len();
                let slot = i / lane_ys.len();
                let x0 = 4.0 + 20.0 * slot as f64 + rng.gen_range(0.0..3.0);
                let v = rng.gen_range(6.0..12.0);
                seats.push(Seat {
                    kind: AgentType::Vehicle,
                    start: KinState {
                        x: x0,
                        y: lane_ys[lane],
                        psi: 0.0,
                        v,
                    },
                    accel: 0.0,
                    yaw_rate: 0.0,
                    shape: [4.5, 2.0, 1.6],
                });
            }
        }
        Template::Curve => {
            let center = (0.0, 0.0);
            let radius = 60.0;
            let a0 = -0.9;
            let a1 = 1.6;
            polylines.push(arc_polyline("lane_in", SemanticType::Lane, center, radius, a0, a1, 2.0));
            polylines.push(arc_polyline("lane_out", SemanticType::Lane, center, radius + 4.0, a0, a1, 2.0));
            polylines.push(arc_polyline("edge_in", SemanticType::RoadBoundaryLine, center, radius - 2.0, a0, a1, 2.0));
            polylines.push(arc_polyline("edge_out", SemanticType::RoadBoundaryLine, center, radius + 6.0, a0, a1, 2.0));

            let slots = 8usize;
            if num_agents > slots {
                return Err(CoreError::Placement(format!(
                    "curve template fits at most {slots} agents, requested {num_agents}"
                )));
            }
            for i in 0..num_agents {
                let cyclist = num_agents >= 2 && i == num_agents - 1;
                let r = if i % 2 == 0 { radius } else { radius + 4.0 };
                let ang = a0 + 0.16 * i as f64 + rng.gen_range(0.0..0.04);
                let v = if cyclist { rng.gen_range(3.0..5.0) } else { rng.gen_range(6.0..10.0) };
                seats.push(Seat {
                    kind: if cyclist { AgentType::Cyclist } else { AgentType::Vehicle },
                    start: KinState {
                        x: center.0 + r * math::cos(ang),
                        y: center.1 + r * math::sin(ang),
                        psi: wrap_angle(ang + core::f64::consts::FRAC_PI_2),
                        v,
                    },
                    accel: 0.0,
                    yaw_rate: v / r,
                    shape: if cyclist { [1.8, 0.8, 1.7] } else { [4.5, 2.0, 1.6] },
                });
            }
        }
        Template::Intersection => {
            let half = 120.0;
            // east-west road
            polylines.push(straight_polyline("ew_lane_e", SemanticType::Lane, (-half, -2.0), (half, -2.0), 2.0));
            polylines.push(straight_polyline("ew_lane_w", SemanticType::Lane, (half, 2.0), (-half, 2.0), 2.0));
            // north-south road
            polylines.push(straight_polyline("ns_lane_n", SemanticType::Lane, (-2.0, -half), (-2.0, half), 2.0));
            polylines.push(straight_polyline("ns_lane_s", SemanticType::Lane, (2.0, half), (2.0, -half), 2.0));
            polylines.push(straight_polyline("cross_s", SemanticType::Crosswalk, (-6.0, -7.0), (6.0, -7.0), 1.5));
            polylines.push(straight_polyline("walk_s", SemanticType::Sidewalk, (-half, -9.0), (half, -9.0), 2.0));

            let lanes: [((f64, f64), f64); 4] = [
                ((-half + 5.0, -2.0), 0.0),                          // eastbound
                ((half - 5.0, 2.0), core::f64::consts::PI),          // westbound
                ((-2.0, -half + 5.0), core::f64::consts::FRAC_PI_2), // northbound
                ((2.0, half - 5.0), -core::f64::consts::FRAC_PI_2),  // southbound
            ];
            let slots_per_lane = 4usize;
            if num_agents > slots_per_lane * lanes.len() {
                return Err(CoreError::Placement(format!(
                    "intersection template fits at most {} agents, requested {num_agents}",
                    slots_per_lane * lanes.len()
                )));
            }
            for i in 0..num_agents {
                let pedestrian = num_agents >= 3 && i == num_agents - 1;
                if pedestrian {
                    let x0 = -20.0 + rng.gen_range(0.0..4.0);
                    seats.push(Seat {
                        kind: AgentType::Pedestrian,
                        start: KinState {
                            x: x0,
                            y: -9.0,
                            psi: 0.0,
                            v: rng.gen_range(1.0..1.5),
                        },
                        accel: 0.0,
                        yaw_rate: 0.0,
                        shape: [0.8, 0.8, 1.8],
                    });
                    continue;
                }
                let lane = i % lanes.len();
                let slot = i / lanes.len();
                let ((x0, y0), psi) = lanes[lane];
                let back = 22.0 * slot as f64 + rng.gen_range(0.0..3.0);
                let v = rng.gen_range(5.0..9.0);
                seats.push(Seat {
                    kind: AgentType::Vehicle,
                    start: KinState {
                        x: x0 - back * math::cos(psi),
                        y: y0 - back * math::sin(psi),
                        psi: wrap_angle(psi),
                        v,
                    },
                    accel: 0.0,
                    yaw_rate: 0.0,
                    shape: [4.5, 2.0, 1.6],
                });
            }
        }
    }

    // vehicles first, then pedestrians, then cyclists
    seats.sort_by_key(|s| s.kind as u8);

    let agents: Vec<AgentRecord> = seats
        .iter()
        .enumerate()
        .map(|(i, seat)| AgentRecord {
            agent_id: i as u32,
            kind: seat.kind,
            shape: seat.shape,
            states: roll_track(seat, num_steps, dt),
        })
        .collect();

    // initial bounding boxes must not overlap
    for i in 0..agents.len() {
        for j in (i + 1)..agents.len() {
            let (a, b) = (&agents[i], &agents[j]);
            let ca = box_corners(a.pose(0), (a.shape[0], a.shape[1]));
            let cb = box_corners(b.pose(0), (b.shape[0], b.shape[1]));
            if obb_overlap(&ca, &cb) {
                return Err(CoreError::Placement(format!(
                    "agents {} and {} overlap at step 0",
                    a.agent_id, b.agent_id
                )));
            }
        }
    }

    let mut scenario = ScenarioDescription {
        scenario_id: format!("synth_{}_{}_{}", template.name(), num_agents, seed),
        dt,
        num_steps,
        polylines,
        agents,
        traffic_lights: Vec::new(),
        sdc_index: 0,
    };

    if template == Template::Intersection {
        // one light guarding the eastbound approach; attach to the nearest segment
        let segments = crate::map_codec::segment_polylines(&scenario, scenario.agents[0].pose(0).0, scenario.agents[0].pose(0).1)?;
        let stop = (-6.0, -2.0);
        let attached = segments
            .iter()
            .min_by(|a, b| {
                math::dist2(a.center, stop)
                    .total_cmp(&math::dist2(b.center, stop))
            })
            .map(|s| s.segment_id)
            .unwrap_or(0);
        let states = (0..num_steps)
            .map(|t| match t % 12 {
                0..=7 => TlState::Green,
                8..=9 => TlState::Yellow,
                _ => TlState::Red,
            })
            .collect();
        scenario.traffic_lights.push(TrafficLightRecord {
            tl_id: 0,
            attached_segment: attached,
            stop_point: stop,
            heading: 0.0,
            states,
        });
    }

    scenario.validate()?;
    Ok(scenario)
}
