//! Scenario data model: lane polylines, lane-graph connectivity, agent
//! tracks, relative-coordinate features and map-exploration queries.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frenet::RefPath;

/// Scenario timestep in seconds (10 Hz).
pub const DT: f64 = 0.1;
/// History states including the current one (1.1 s).
pub const T_HIST: usize = 11;
/// Future states after the current one (8 s).
pub const T_FUTURE: usize = 80;
/// `sin(ω·k·DT)`: a sinusoid sampled at future step `k`.
pub fn wave(omega: f64, step: usize) -> f64 {
    (omega * (step as f64 * DT)).sin()
}

pub const DEFAULT_LANE_WIDTH: f64 = 3.7;
pub const DEFAULT_EXTENT: Extent = Extent {
    length: 4.8,
    width: 2.0,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("polyline {id}: {reason}")]
    BadPolyline { id: u32, reason: String },
    #[error("edge ({src}, {dst}) references unknown lane {missing}")]
    DanglingEdge { src: u32, dst: u32, missing: u32 },
    #[error("neighbor edge ({src}, {dst}, {relation:?}) has no symmetric counterpart")]
    AsymmetricNeighbor {
        src: u32,
        dst: u32,
        relation: Relation,
    },
    #[error("agent {agent_id}: {reason}")]
    BadAgent { agent_id: u32, reason: String },
    #[error("scenario: {0}")]
    BadScenario(String),
    #[error("unknown lane id {0}")]
    UnknownLane(u32),
    #[error("agent index {index} out of range ({count} agents)")]
    UnknownAgent { index: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Driving,
    Shoulder,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolyline")]
pub struct MapPolyline {
    pub id: u32,
    pub points: Vec<[f64; 2]>,
    pub lane_type: LaneType,
    pub width: f64,
}

#[derive(Deserialize)]
struct RawPolyline {
    id: u32,
    points: Vec<[f64; 2]>,
    lane_type: LaneType,
    width: f64,
}

impl TryFrom<RawPolyline> for MapPolyline {
    type Error = SceneError;
    fn try_from(r: RawPolyline) -> Result<Self> {
        MapPolyline::new(r.id, r.points, r.lane_type, r.width)
    }
}

impl MapPolyline {
    pub fn new(id: u32, points: Vec<[f64; 2]>, lane_type: LaneType, width: f64) -> Result<Self> {
        let bad = |reason: &str| SceneError::BadPolyline {
            id,
            reason: reason.to_string(),
        };
        if points.len() < 2 {
            return Err(bad("needs at least two points"));
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("consecutive duplicate points"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite coordinate"));
        }
        if !(width > 0.0) {
            return Err(bad("width must be positive"));
        }
        Ok(Self {
            id,
            points,
            lane_type,
            width,
        })
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Predecessor,
    Successor,
    LeftNeighbor,
    RightNeighbor,
}

impl Relation {
    pub fn inverse(self) -> Relation {
        match self {
            Relation::Predecessor => Relation::Successor,
            Relation::Successor => Relation::Predecessor,
            Relation::LeftNeighbor => Relation::RightNeighbor,
            Relation::RightNeighbor => Relation::LeftNeighbor,
        }
    }
}

/// Directed lane-graph edge `(src, dst, relation)`: `dst` is the `relation` of `src`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneEdge(pub u32, pub u32, pub Relation);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneGraph {
    pub edges: Vec<LaneEdge>,
}

impl LaneGraph {
    /// Build a graph, adding the missing inverse of every edge.
    pub fn with_inverses(edges: impl IntoIterator<Item = LaneEdge>) -> Self {
        let mut set = BTreeSet::new();
        for LaneEdge(s, d, r) in edges {
            set.insert(LaneEdge(s, d, r));
            set.insert(LaneEdge(d, s, r.inverse()));
        }
        Self {
            edges: set.into_iter().collect(),
        }
    }

    /// Targets of `relation` from `src`, smallest id first.
    pub fn targets(&self, src: u32, relation: Relation) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .edges
            .iter()
            .filter(|e| e.0 == src && e.2 == relation)
            .map(|e| e.1)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn relation(&self, src: u32, dst: u32) -> Option<Relation> {
        self.edges
            .iter()
            .find(|e| e.0 == src && e.1 == dst)
            .map(|e| e.2)
    }

    fn validate(&self, ids: &BTreeSet<u32>) -> Result<()> {
        for &LaneEdge(s, d, r) in &self.edges {
            for id in [s, d] {
                if !ids.contains(&id) {
                    return Err(SceneError::DanglingEdge {
                        src: s,
                        dst: d,
                        missing: id,
                    });
                }
            }
            if matches!(r, Relation::LeftNeighbor | Relation::RightNeighbor)
                && !self.edges.contains(&LaneEdge(d, s, r.inverse()))
            {
                return Err(SceneError::AsymmetricNeighbor {
                    src: s,
                    dst: d,
                    relation: r,
                });
            }
        }
        Ok(())
    }
}

/// Pose `(x, y, heading)`; serialized as a three-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl From<[f64; 3]> for AgentState {
    fn from(a: [f64; 3]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            heading: a[2],
        }
    }
}

impl From<AgentState> for [f64; 3] {
    fn from(s: AgentState) -> Self {
        [s.x, s.y, s.heading]
    }
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Express a world point in this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Map a point in this pose's frame back to the world.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Extent {
    pub length: f64,
    pub width: f64,
}

impl From<[f64; 2]> for Extent {
    fn from(a: [f64; 2]) -> Self {
        Self {
            length: a[0],
            width: a[1],
        }
    }
}

impl From<Extent> for [f64; 2] {
    fn from(e: Extent) -> Self {
        [e.length, e.width]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: u32,
    pub extent: Extent,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn new(agent_id: u32, states: Vec<AgentState>) -> Self {
        Self {
            agent_id,
            extent: DEFAULT_EXTENT,
            states,
        }
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(AgentState::position).collect()
    }
}

/// Pose `j` in the frame of pose `i`, plus the relative heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelFeature {
    pub dx: f64,
    pub dy: f64,
    pub cos_dh: f64,
    pub sin_dh: f64,
}

impl RelFeature {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.cos_dh, self.sin_dh]
    }
}

pub fn relative_feature(pose_i: &AgentState, pose_j: &AgentState) -> RelFeature {
    let [dx, dy] = pose_i.to_local(pose_j.position());
    let dh = wrap_angle(pose_j.heading - pose_i.heading);
    RelFeature {
        dx,
        dy,
        cos_dh: dh.cos(),
        sin_dh: dh.sin(),
    }
}

/// World state: map, connectivity, and agent tracks split at `t_now`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScenario")]
pub struct Scenario {
    pub polylines: Vec<MapPolyline>,
    #[serde(rename = "edges")]
    pub graph: LaneGraph,
    pub agents: Vec<AgentTrack>,
    pub t_now: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct RawScenario {
    polylines: Vec<MapPolyline>,
    edges: LaneGraph,
    agents: Vec<AgentTrack>,
    t_now: usize,
    dt: f64,
    #[serde(default)]
    meta: Option<serde_json::Value>,
}

impl TryFrom<RawScenario> for Scenario {
    type Error = SceneError;
    fn try_from(r: RawScenario) -> Result<Self> {
        let s = Scenario {
            polylines: r.polylines,
            graph: r.edges,
            agents: r.agents,
            t_now: r.t_now,
            dt: r.dt,
            meta: r.meta,
        };
        s.validate()?;
        Ok(s)
    }
}

impl Scenario {
    pub fn new(
        polylines: Vec<MapPolyline>,
        graph: LaneGraph,
        agents: Vec<AgentTrack>,
        t_now: usize,
    ) -> Result<Self> {
        let s = Scenario {
            polylines,
            graph,
            agents,
            t_now,
            dt: DT,
            meta: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for p in &self.polylines {
            if !ids.insert(p.id) {
                return Err(SceneError::BadPolyline {
                    id: p.id,
                    reason: "duplicate id".into(),
                });
            }
        }
        self.graph.validate(&ids)?;
        if self.agents.is_empty() {
            return Err(SceneError::BadScenario("needs at least one agent".into()));
        }
        if (self.dt - DT).abs() > 1e-12 {
            return Err(SceneError::BadScenario(format!(
                "dt must be {DT}, got {}",
                self.dt
            )));
        }
        for a in &self.agents {
            let bad = |reason: String| SceneError::BadAgent {
                agent_id: a.agent_id,
                reason,
            };
            if !(a.extent.length > 0.0 && a.extent.width > 0.0) {
                return Err(bad("extent must be positive".into()));
            }
            if self.t_now >= a.states.len() {
                return Err(bad(format!(
                    "t_now {} outside track of length {}",
                    self.t_now,
                    a.states.len()
                )));
            }
            if a
                .states
                .iter()
                .any(|s| !(s.x.is_finite() && s.y.is_finite() && s.heading.is_finite()))
            {
                return Err(bad("non-finite state".into()));
            }
        }
        Ok(())
    }

    pub fn polyline(&self, id: u32) -> Result<&MapPolyline> {
        self.polylines
            .iter()
            .find(|p| p.id == id)
            .ok_or(SceneError::UnknownLane(id))
    }

    pub fn driving_lanes(&self) -> impl Iterator<Item = &MapPolyline> {
        self.polylines
            .iter()
            .filter(|p| p.lane_type == LaneType::Driving)
    }

    pub fn agent(&self, index: usize) -> Result<&AgentTrack> {
        self.agents.get(index).ok_or(SceneError::UnknownAgent {
            index,
            count: self.agents.len(),
        })
    }

    /// State of agent `index` at `t_now`.
    pub fn current_state(&self, index: usize) -> Result<AgentState> {
        Ok(self.agent(index)?.states[self.t_now])
    }

    /// Number of timesteps every track shares.
    pub fn horizon(&self) -> usize {
        self.agents.iter().map(|a| a.states.len()).min().unwrap_or(0)
    }

    /// Rigidly transform the whole scenario so `anchor` becomes the origin with zero heading.
    pub fn normalize_to_frame(&self, anchor: &AgentState) -> Scenario {
        let mut out = self.clone();
        for p in &mut out.polylines {
            for pt in &mut p.points {
                *pt = anchor.to_local(*pt);
            }
        }
        for a in &mut out.agents {
            for s in &mut a.states {
                let [x, y] = anchor.to_local(s.position());
                *s = AgentState::new(x, y, s.heading - anchor.heading);
            }
        }
        out
    }

    /// Apply a rigid transform: rotate by `angle` about the origin, then translate.
    pub fn transformed(&self, angle: f64, tx: f64, ty: f64) -> Scenario {
        let frame = AgentState {
            x: tx,
            y: ty,
            heading: angle,
        };
        let mut out = self.clone();
        for p in &mut out.polylines {
            for pt in &mut p.points {
                *pt = frame.to_world(*pt);
            }
        }
        for a in &mut out.agents {
            for s in &mut a.states {
                let [x, y] = frame.to_world(s.position());
                *s = AgentState::new(x, y, s.heading + angle);
            }
        }
        out
    }

    pub fn lane_query(&self, query: &LaneQuery) -> Result<Vec<u32>> {
        lane_query(self, query)
    }
}

/// Target of a lane query: an agent (resolved to its current lane) or a lane id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaneRef {
    Agent(usize),
    Lane(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaneQuery {
    CurrentLane(usize),
    LeftLane(LaneRef),
    RightLane(LaneRef),
    RightmostLane(LaneRef),
    LeftmostLane(LaneRef),
    SuccessorChain(LaneRef, usize),
    /// Road-edge polyline bounding the road on the right of the lane.
    RightEdge(LaneRef),
    /// Road-edge polyline bounding the road on the left of the lane.
    LeftEdge(LaneRef),
}

/// Minimum distance from `p` to the polyline.
fn distance_to_polyline(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len2 = ex * ex + ey * ey;
            let u = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
            (p[0] - a[0] - u * ex).hypot(p[1] - a[1] - u * ey)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Driving lane closest to `p`, or `None` when farther than twice the lane width.
pub fn lane_at_point(scenario: &Scenario, p: [f64; 2]) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for lane in scenario.driving_lanes() {
        let d = distance_to_polyline(p, &lane.points);
        if d > 2.0 * lane.width {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && lane.id < bid),
        };
        if better {
            best = Some((d, lane.id));
        }
    }
    best.map(|(_, id)| id)
}

fn follow_to_fixed_point(scenario: &Scenario, start: u32, relation: Relation) -> u32 {
    let mut cur = start;
    let mut seen = BTreeSet::from([start]);
    while let Some(&next) = scenario.graph.targets(cur, relation).first() {
        if !seen.insert(next) {
            break;
        }
        cur = next;
    }
    cur
}

fn road_edge(scenario: &Scenario, lane: u32, right: bool) -> Result<Vec<u32>> {
    let outer = follow_to_fixed_point(
        scenario,
        lane,
        if right {
            Relation::RightNeighbor
        } else {
            Relation::LeftNeighbor
        },
    );
    let poly = scenario.polyline(outer)?;
    let path = match RefPath::from_points(&poly.points) {
        Ok(p) => p,
        Err(_) => return Ok(vec![]),
    };
    let mut best: Option<(f64, u32)> = None;
    for e in scenario
        .polylines
        .iter()
        .filter(|p| p.lane_type == LaneType::Edge)
    {
        let mid = e.points[e.points.len() / 2];
        let c = path.project(mid);
        let on_side = if right { c.d < 0.0 } else { c.d > 0.0 };
        if !on_side || c.d.abs() > 2.0 * poly.width {
            continue;
        }
        if best.map_or(true, |(bd, bid)| c.d.abs() < bd || (c.d.abs() == bd && e.id < bid)) {
            best = Some((c.d.abs(), e.id));
        }
    }
    Ok(best.map(|(_, id)| vec![id]).unwrap_or_default())
}

pub fn lane_query(scenario: &Scenario, query: &LaneQuery) -> Result<Vec<u32>> {
    let resolve = |r: &LaneRef| -> Result<Option<u32>> {
        match *r {
            LaneRef::Agent(i) => {
                let s = scenario.current_state(i)?;
                Ok(lane_at_point(scenario, s.position()))
            }
            LaneRef::Lane(id) => scenario.polyline(id).map(|_| Some(id)),
        }
    };
    let out = match query {
        LaneQuery::CurrentLane(i) => resolve(&LaneRef::Agent(*i))?.into_iter().collect(),
        LaneQuery::LeftLane(r) | LaneQuery::RightLane(r) => {
            let rel = if matches!(query, LaneQuery::LeftLane(_)) {
                Relation::LeftNeighbor
            } else {
                Relation::RightNeighbor
            };
            match resolve(r)? {
                Some(id) => scenario.graph.targets(id, rel).into_iter().take(1).collect(),
                None => vec![],
            }
        }
        LaneQuery::RightmostLane(r) => resolve(r)?
            .map(|id| follow_to_fixed_point(scenario, id, Relation::RightNeighbor))
            .into_iter()
            .collect(),
        LaneQuery::LeftmostLane(r) => resolve(r)?
            .map(|id| follow_to_fixed_point(scenario, id, Relation::LeftNeighbor))
            .into_iter()
            .collect(),
        LaneQuery::SuccessorChain(r, depth) => match resolve(r)? {
            Some(id) => {
                let mut chain = vec![id];
                let mut cur = id;
                for _ in 0..*depth {
                    match scenario.graph.targets(cur, Relation::Successor).first() {
                        Some(&n) if !chain.contains(&n) => {
                            chain.push(n);
                            cur = n;
                        }
                        _ => break,
                    }
                }
                chain
            }
            None => vec![],
        },
        LaneQuery::RightEdge(r) | LaneQuery::LeftEdge(r) => match resolve(r)? {
            Some(id) => road_edge(scenario, id, matches!(query, LaneQuery::RightEdge(_)))?,
            None => vec![],
        },
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(x: f64, y: f64, h: f64) -> AgentState {
        AgentState::new(x, y, h)
    }

    fn close(a: [f64; 4], b: [f64; 4]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn relative_feature_examples() {
        let p = pose(3.0, -2.0, 0.4);
        assert!(close(relative_feature(&p, &p).to_array(), [0., 0., 1., 0.]));
        let f = relative_feature(&pose(0., 0., 0.), &pose(1., 2., PI / 2.));
        assert!(close(f.to_array(), [1., 2., 0., 1.]));
        let f = relative_feature(&pose(1., 1., PI / 2.), &pose(1., 3., PI / 2.));
        assert!(close(f.to_array(), [2., 0., 1., 0.]));
    }

    #[test]
    fn wrap_angle_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.1 - 2.0 * PI) - 0.1).abs() < 1e-12);
    }

    fn three_lane_road() -> Scenario {
        let lanes: Vec<MapPolyline> = (0..3)
            .map(|i| {
                let y = i as f64 * DEFAULT_LANE_WIDTH;
                MapPolyline::new(
                    i,
                    vec![[0.0, y], [50.0, y], [100.0, y]],
                    LaneType::Driving,
                    DEFAULT_LANE_WIDTH,
                )
                .unwrap()
            })
            .collect();
        // lane 0 is rightmost (lowest y when driving along +x)
        let graph = LaneGraph::with_inverses([
            LaneEdge(0, 1, Relation::LeftNeighbor),
            LaneEdge(1, 2, Relation::LeftNeighbor),
        ]);
        let agent = AgentTrack::new(7, vec![pose(20.0, DEFAULT_LANE_WIDTH + 0.3, 0.0)]);
        Scenario::new(lanes, graph, vec![agent], 0).unwrap()
    }

    #[test]
    fn lane_queries_on_three_lane_road() {
        let s = three_lane_road();
        assert_eq!(s.lane_query(&LaneQuery::CurrentLane(0)).unwrap(), vec![1]);
        // brute force: rightmost = lane whose centerline has the smallest lateral coordinate
        let brute = s
            .driving_lanes()
            .min_by(|a, b| a.points[0][1].partial_cmp(&b.points[0][1]).unwrap())
            .unwrap()
            .id;
        let q = LaneQuery::RightmostLane(LaneRef::Agent(0));
        assert_eq!(s.lane_query(&q).unwrap(), vec![brute]);
        assert_eq!(
            s.lane_query(&LaneQuery::RightmostLane(LaneRef::Lane(0))).unwrap(),
            vec![0]
        );
        assert_eq!(
            s.lane_query(&LaneQuery::LeftmostLane(LaneRef::Lane(0))).unwrap(),
            vec![2]
        );
        assert_eq!(
            s.lane_query(&LaneQuery::SuccessorChain(LaneRef::Lane(1), 0)).unwrap(),
            vec![1]
        );
        assert_eq!(
            s.lane_query(&LaneQuery::LeftLane(LaneRef::Lane(2))).unwrap(),
            Vec::<u32>::new()
        );
        assert_eq!(
            s.lane_query(&LaneQuery::LeftLane(LaneRef::Lane(9))),
            Err(SceneError::UnknownLane(9))
        );
    }

    #[test]
    fn far_agent_has_no_current_lane() {
        let mut s = three_lane_road();
        s.agents[0].states[0] = pose(20.0, 40.0, 0.0);
        assert!(s.lane_query(&LaneQuery::CurrentLane(0)).unwrap().is_empty());
    }

    #[test]
    fn current_lane_tie_breaks_to_smallest_id() {
        let mut s = three_lane_road();
        s.agents[0].states[0] = pose(20.0, DEFAULT_LANE_WIDTH / 2.0, 0.0);
        assert_eq!(s.lane_query(&LaneQuery::CurrentLane(0)).unwrap(), vec![0]);
    }

    #[test]
    fn asymmetric_neighbors_rejected() {
        let s = three_lane_road();
        let graph = LaneGraph {
            edges: vec![LaneEdge(0, 1, Relation::LeftNeighbor)],
        };
        let err = Scenario::new(s.polylines.clone(), graph, s.agents.clone(), 0).unwrap_err();
        assert!(matches!(err, SceneError::AsymmetricNeighbor { .. }));
    }

    #[test]
    fn polyline_invariants() {
        assert!(MapPolyline::new(0, vec![[0., 0.]], LaneType::Driving, 3.7).is_err());
        assert!(MapPolyline::new(0, vec![[0., 0.], [0., 0.]], LaneType::Driving, 3.7).is_err());
        assert!(MapPolyline::new(0, vec![[0., 0.], [1., 0.]], LaneType::Driving, 0.0).is_err());
    }

    #[test]
    fn normalize_identity_and_anchor() {
        let s = three_lane_road();
        assert_eq!(s.normalize_to_frame(&pose(0., 0., 0.)), s);
        let anchor = s.current_state(0).unwrap();
        let n = s.normalize_to_frame(&anchor);
        let a = n.current_state(0).unwrap();
        assert!(a.x.abs() < 1e-12 && a.y.abs() < 1e-12 && a.heading.abs() < 1e-12);
    }

    #[test]
    fn json_schema_field_order() {
        let s = three_lane_road();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.starts_with("{\"polylines\":[{\"id\":0,\"points\":[[0.0,0.0]"));
        assert!(text.contains("\"lane_type\":\"driving\",\"width\":3.7"));
        assert!(text.contains("\"edges\":[[0,1,\"left_neighbor\"]"));
        assert!(text.contains("\"agents\":[{\"agent_id\":7,\"extent\":[4.8,2.0],\"states\":[[20.0,"));
        assert!(text.ends_with("\"t_now\":0,\"dt\":0.1}"));
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
