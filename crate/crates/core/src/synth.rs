//! Procedural road maps, agent tracks, labeled behavior fixtures and
//! JSONL datasets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frenet::{FrenetCoord, FrenetError, RefPath};
use crate::metrics::outside_lanes;
use crate::scene::{
    wave, AgentState, AgentTrack, LaneEdge, LaneGraph, LaneType, MapPolyline, Relation, Scenario,
    SceneError, DEFAULT_LANE_WIDTH, DT, T_FUTURE, T_HIST,
};

/// Total states per generated track.
pub const TRACK_LEN: usize = T_HIST + T_FUTURE;
/// Minimum center distance between any two generated agents at every step.
pub const MIN_SEPARATION: f64 = 10.0;
pub const LEFT_EDGE_ID: u32 = 100;
pub const RIGHT_EDGE_ID: u32 = 101;

const SAMPLE_SPACING: f64 = 2.0;
const END_MARGIN: f64 = 5.0;
const MAX_ATTEMPTS: usize = 400;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid map spec: {0}")]
    BadSpec(String),
    #[error("map too short: route of {length:.1} m cannot hold {needed:.1} m of travel")]
    MapTooShort { length: f64, needed: f64 },
    #[error("could only place {placed} of {requested} agents")]
    Crowded { placed: usize, requested: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Frenet(#[from] FrenetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Straight,
    Curve,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub kind: MapKind,
    pub lanes: usize,
    pub length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

impl MapSpec {
    pub fn straight(lanes: usize, length: f64) -> Self {
        Self {
            kind: MapKind::Straight,
            lanes,
            length,
            radius: None,
        }
    }

    pub fn curve(lanes: usize, length: f64, radius: f64) -> Self {
        Self {
            kind: MapKind::Curve,
            lanes,
            length,
            radius: Some(radius),
        }
    }

    pub fn merge(lanes: usize, length: f64) -> Self {
        Self {
            kind: MapKind::Merge,
            lanes,
            length,
            radius: None,
        }
    }
}

/// Generated road: lane ids `0..lanes` run right to left; a merge map adds
/// the ramp as lane `lanes`, whose successor is lane 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadMap {
    pub polylines: Vec<MapPolyline>,
    pub graph: LaneGraph,
    pub lane_width: f64,
}

impl RoadMap {
    pub fn driving_lane_ids(&self) -> Vec<u32> {
        self.polylines
            .iter()
            .filter(|p| p.lane_type == LaneType::Driving)
            .map(|p| p.id)
            .collect()
    }

    pub fn lane(&self, id: u32) -> Result<&MapPolyline> {
        self.polylines
            .iter()
            .find(|p| p.id == id)
            .ok_or(SynthError::Scene(SceneError::UnknownLane(id)))
    }

    /// Reference path from the start of `lane`, continuing through its
    /// successors past the point where each one is joined.
    pub fn route(&self, lane: u32) -> Result<RefPath> {
        let mut chain = vec![self.lane(lane)?];
        let mut cur = lane;
        while let Some(&next) = self.graph.targets(cur, Relation::Successor).first() {
            if chain.iter().any(|p| p.id == next) {
                break;
            }
            chain.push(self.lane(next)?);
            cur = next;
        }
        Ok(RefPath::from_joined(chain)?)
    }

    pub fn scenario(&self, agents: Vec<AgentTrack>) -> Result<Scenario> {
        Ok(Scenario::new(
            self.polylines.clone(),
            self.graph.clone(),
            agents,
            T_HIST - 1,
        )?)
    }
}

/// Pose along the road reference line at arc length `u`.
type RefLine = Box<dyn Fn(f64) -> ([f64; 2], f64)>;

fn straight_line() -> RefLine {
    Box::new(|u| ([u, 0.0], 0.0))
}

/// Straight lead-in, a constant-radius arc turning `sign` (+1 left), then straight.
fn curve_line(length: f64, radius: f64, sign: f64) -> RefLine {
    let lead = 0.25 * length;
    let arc = (length - lead).min(0.75 * PI * radius);
    Box::new(move |u| {
        if u <= lead {
            return ([u, 0.0], 0.0);
        }
        let a = (u.min(lead + arc) - lead) / radius;
        let cx = lead;
        let cy = sign * radius;
        let p = [cx + radius * a.sin(), cy - sign * radius * a.cos()];
        let h = sign * a;
        if u <= lead + arc {
            (p, h)
        } else {
            let r = u - lead - arc;
            ([p[0] + r * h.cos(), p[1] + r * h.sin()], h)
        }
    })
}

fn offset(line: &RefLine, u: f64, o: f64) -> [f64; 2] {
    let (p, h) = line(u);
    [p[0] - o * h.sin(), p[1] + o * h.cos()]
}

fn samples(length: f64) -> Vec<f64> {
    let n = (length / SAMPLE_SPACING).ceil().max(1.0) as usize;
    (0..=n).map(|i| length * i as f64 / n as f64).collect()
}

/// Quintic smoothstep on `[0, 1]` with zero first and second derivatives at the ends.
pub fn quintic(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Ramp geometry for merge maps: parallel to lane 0 one lane width to the
/// right, tapering into lane 0 over the last `MERGE_TAPER` metres.
pub const MERGE_TAPER: f64 = 40.0;

fn merge_end(length: f64) -> f64 {
    0.5 * length
}

fn ramp_offset(x: f64, length: f64, w: f64) -> f64 {
    let end = merge_end(length);
    -w * (1.0 - quintic((x - (end - MERGE_TAPER)) / MERGE_TAPER))
}

/// Generate a map in its canonical frame: lane 0 centerline starts at the
/// origin heading +x. Curves turn left or right depending on `seed`.
pub fn gen_map(spec: &MapSpec, seed: u64) -> Result<RoadMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DEFAULT_LANE_WIDTH;
    if spec.lanes == 0 {
        return Err(SynthError::BadSpec("lanes must be at least 1".into()));
    }
    if !(spec.length.is_finite() && spec.length >= 50.0) {
        return Err(SynthError::BadSpec(format!(
            "length must be at least 50 m, got {}",
            spec.length
        )));
    }
    let n = spec.lanes;
    let line = match spec.kind {
        MapKind::Straight => straight_line(),
        MapKind::Merge => {
            if spec.length < 2.0 * (MERGE_TAPER + 40.0) {
                return Err(SynthError::BadSpec(format!(
                    "merge needs length >= {} m",
                    2.0 * (MERGE_TAPER + 40.0)
                )));
            }
            straight_line()
        }
        MapKind::Curve => {
            let r = spec
                .radius
                .ok_or_else(|| SynthError::BadSpec("curve needs a radius".into()))?;
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // the innermost road edge must keep a positive radius
            let inner = if sign > 0.0 { n as f64 * w } else { w };
            if !(r.is_finite() && r > inner) {
                return Err(SynthError::BadSpec(format!(
                    "radius {r} too small for {n} lanes"
                )));
            }
            curve_line(spec.length, r, sign)
        }
    };
    let us = samples(spec.length);
    let mut polylines = Vec::new();
    let mut edges = Vec::new();
    for i in 0..n {
        let o = i as f64 * w;
        let pts = us.iter().map(|&u| offset(&line, u, o)).collect();
        polylines.push(MapPolyline::new(i as u32, pts, LaneType::Driving, w)?);
        if i + 1 < n {
            edges.push(LaneEdge(i as u32, i as u32 + 1, Relation::LeftNeighbor));
        }
    }
    let left = us
        .iter()
        .map(|&u| offset(&line, u, (n as f64 - 0.5) * w))
        .collect();
    polylines.push(MapPolyline::new(LEFT_EDGE_ID, left, LaneType::Edge, w)?);
    let right = if spec.kind == MapKind::Merge {
        us.iter()
            .map(|&u| {
                let o = if u <= merge_end(spec.length) {
                    ramp_offset(u, spec.length, w)
                } else {
                    0.0
                };
                [u, o - 0.5 * w]
            })
            .collect()
    } else {
        us.iter().map(|&u| offset(&line, u, -0.5 * w)).collect()
    };
    polylines.push(MapPolyline::new(RIGHT_EDGE_ID, right, LaneType::Edge, w)?);
    if spec.kind == MapKind::Merge {
        let ramp = n as u32;
        let pts = samples(merge_end(spec.length))
            .into_iter()
            .map(|x| [x, ramp_offset(x, spec.length, w)])
            .collect();
        polylines.push(MapPolyline::new(ramp, pts, LaneType::Driving, w)?);
        edges.push(LaneEdge(ramp, 0, Relation::Successor));
    }
    Ok(RoadMap {
        polylines,
        graph: LaneGraph::with_inverses(edges),
        lane_width: w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorMix {
    /// Probability an agent changes lanes when a neighbor exists.
    pub lane_change: f64,
    /// Probability an agent is stopped for the whole track.
    pub stopped: f64,
    /// Probability a moving agent changes speed once.
    pub speed_change: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        Self {
            lane_change: 0.3,
            stopped: 0.05,
            speed_change: 0.5,
        }
    }
}

fn heading_at(route: &RefPath, s: f64) -> f64 {
    let cum = route.cum_s();
    let k = cum.partition_point(|&x| x <= s).clamp(1, route.seg_dir().len()) - 1;
    let t = route.seg_dir()[k];
    t[1].atan2(t[0])
}

/// Build a track from Frenet samples along `route`. Headings follow the
/// direction of motion, or the path tangent where the agent barely moves or
/// `along_path` is set.
pub fn track_from_frenet(
    agent_id: u32,
    route: &RefPath,
    s: &[f64],
    d: &[f64],
    along_path: bool,
) -> Result<AgentTrack> {
    let pts = s
        .iter()
        .zip(d)
        .map(|(&s, &d)| route.to_cartesian(FrenetCoord { s, d }))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let n = pts.len();
    let states = (0..n)
        .map(|k| {
            let (a, b) = (pts[k.saturating_sub(1)], pts[(k + 1).min(n - 1)]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let h = if along_path || dx.hypot(dy) < 1e-3 {
                heading_at(route, s[k])
            } else {
                dy.atan2(dx)
            };
            AgentState::new(pts[k][0], pts[k][1], h)
        })
        .collect();
    Ok(AgentTrack::new(agent_id, states))
}

fn integrate(s0: f64, v: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(v.len());
    s.push(s0);
    for k in 1..v.len() {
        let prev = s[k - 1];
        s.push(prev + 0.5 * (v[k - 1] + v[k]) * DT);
    }
    s
}

fn times() -> impl Iterator<Item = f64> {
    (0..TRACK_LEN).map(|k| k as f64 * DT)
}

fn duration() -> f64 {
    (TRACK_LEN - 1) as f64 * DT
}

struct Candidate {
    lane: u32,
    speeds: Vec<f64>,
    lateral: Vec<f64>,
}

fn sample_candidate(map: &RoadMap, mix: &BehaviorMix, rng: &mut ChaCha8Rng) -> Candidate {
    let lanes = map.driving_lane_ids();
    let lane = lanes[rng.gen_range(0..lanes.len())];
    if rng.gen_bool(mix.stopped.clamp(0.0, 1.0)) {
        return Candidate {
            lane,
            speeds: vec![0.0; TRACK_LEN],
            lateral: vec![0.0; TRACK_LEN],
        };
    }
    let v0 = rng.gen_range(5.0..15.0);
    let speeds = if rng.gen_bool(mix.speed_change.clamp(0.0, 1.0)) {
        // peak accel 1.5·|dv|/tau <= 2 m/s²
        let dv = rng.gen_range(-4.0..4.0);
        let tau = rng.gen_range(3.0..6.0);
        let tc = rng.gen_range(0.0..duration() - tau);
        times().map(|t| v0 + dv * smoothstep((t - tc) / tau)).collect()
    } else {
        vec![v0; TRACK_LEN]
    };
    let mut lateral = vec![0.0; TRACK_LEN];
    if rng.gen_bool(mix.lane_change.clamp(0.0, 1.0)) {
        let mut sides = Vec::new();
        if !map.graph.targets(lane, Relation::LeftNeighbor).is_empty() {
            sides.push(1.0);
        }
        if !map.graph.targets(lane, Relation::RightNeighbor).is_empty() {
            sides.push(-1.0);
        }
        if !sides.is_empty() {
            let side = sides[rng.gen_range(0..sides.len())];
            let tau = rng.gen_range(3.0..5.0);
            let t0 = rng.gen_range(0.0..duration() - tau);
            for (l, t) in lateral.iter_mut().zip(times()) {
                *l = side * map.lane_width * quintic((t - t0) / tau);
            }
        }
    }
    Candidate {
        lane,
        speeds,
        lateral,
    }
}

fn min_distance(a: &AgentTrack, b: &AgentTrack) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .map(|(p, q)| (p.x - q.x).hypot(p.y - q.y))
        .fold(f64::INFINITY, f64::min)
}

fn place_agents(
    map: &RoadMap,
    n: usize,
    mix: &BehaviorMix,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AgentTrack>> {
    let mut routes = BTreeMap::new();
    for id in map.driving_lane_ids() {
        routes.insert(id, map.route(id)?);
    }
    let driving: Vec<&MapPolyline> = map
        .polylines
        .iter()
        .filter(|p| p.lane_type == LaneType::Driving)
        .collect();
    let mut placed: Vec<AgentTrack> = Vec::new();
    let mut shortfall: Option<(f64, f64)> = None;
    for _ in 0..MAX_ATTEMPTS {
        if placed.len() == n {
            break;
        }
        let c = sample_candidate(map, mix, rng);
        let route = &routes[&c.lane];
        let travel = integrate(0.0, &c.speeds)[TRACK_LEN - 1];
        let room = route.length() - 2.0 * END_MARGIN - travel;
        if room < 0.0 {
            shortfall = Some((route.length(), travel + 2.0 * END_MARGIN));
            continue;
        }
        let s = integrate(END_MARGIN + rng.gen_range(0.0..=room), &c.speeds);
        let track = track_from_frenet(placed.len() as u32, route, &s, &c.lateral, false)?;
        if track
            .states
            .iter()
            .any(|st| outside_lanes(driving.iter().copied(), st.position()))
        {
            continue;
        }
        if placed
            .iter()
            .any(|o| min_distance(o, &track) < MIN_SEPARATION)
        {
            continue;
        }
        placed.push(track);
    }
    if placed.is_empty() {
        if let Some((length, needed)) = shortfall {
            return Err(SynthError::MapTooShort { length, needed });
        }
    }
    Ok(placed)
}

/// `n` agents with lane-following tracks of `TRACK_LEN` states, pairwise at
/// least `MIN_SEPARATION` apart at every step and inside the driving lanes.
pub fn gen_agents(map: &RoadMap, n: usize, mix: &BehaviorMix, seed: u64) -> Result<Vec<AgentTrack>> {
    if n == 0 {
        return Err(SynthError::BadSpec("need at least one agent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placed = place_agents(map, n, mix, &mut rng)?;
    if placed.len() < n {
        return Err(SynthError::Crowded {
            placed: placed.len(),
            requested: n,
        });
    }
    Ok(placed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub maps: Vec<MapSpec>,
    /// Inclusive range of requested agents per scenario.
    pub agents: [usize; 2],
    pub mix: BehaviorMix,
    /// Apply a random rigid transform to every scenario.
    pub transform: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            maps: vec![
                MapSpec::straight(2, 250.0),
                MapSpec::straight(3, 250.0),
                MapSpec::curve(2, 250.0, 120.0),
                MapSpec::curve(3, 250.0, 160.0),
                MapSpec::merge(2, 250.0),
            ],
            agents: [2, 6],
            mix: BehaviorMix::default(),
            transform: true,
        }
    }
}

/// One training scenario. Scenes that cannot hold the requested count keep
/// the agents that fit (at least one).
pub fn gen_scenario(spec: &DatasetSpec, seed: u64) -> Result<Scenario> {
    if spec.maps.is_empty() {
        return Err(SynthError::BadSpec("no map specs".into()));
    }
    let [lo, hi] = spec.agents;
    if lo == 0 || hi < lo {
        return Err(SynthError::BadSpec(format!("bad agent range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map_spec = &spec.maps[rng.gen_range(0..spec.maps.len())];
    let map = gen_map(map_spec, rng.gen())?;
    let n = rng.gen_range(lo..=hi);
    let agents = place_agents(&map, n, &spec.mix, &mut rng)?;
    if agents.is_empty() {
        return Err(SynthError::Crowded {
            placed: 0,
            requested: n,
        });
    }
    let scene = map.scenario(agents)?;
    Ok(if spec.transform {
        let angle = rng.gen_range(-PI..PI);
        let (tx, ty) = (rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
        scene.transformed(angle, tx, ty)
    } else {
        scene
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seeds: Vec<u64>,
    pub spec: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// `count` scenarios with seeds `seed, seed+1, ...`, generated across threads.
pub fn gen_dataset(spec: &DatasetSpec, count: usize, seed: u64) -> Result<(Vec<Scenario>, Manifest)> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(count.max(1));
    let chunk = count.div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<Scenario>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|&s| gen_scenario(spec, s)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });
    let mut scenes = Vec::with_capacity(count);
    for p in parts {
        scenes.extend(p?);
    }
    Ok((
        scenes,
        Manifest {
            count,
            seeds,
            spec: spec.clone(),
            config_hash: None,
        },
    ))
}

/// Manifest path written next to a dataset file.
pub fn manifest_path(data: &Path) -> std::path::PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    data.with_file_name(name)
}

pub fn write_dataset(path: &Path, scenes: &[Scenario], manifest: &Manifest) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scenario>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    CutIn,
    OutOfRoad,
    Yield,
    Rightmost,
    Weaving,
    Reverse,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 6] = [
        FixtureKind::CutIn,
        FixtureKind::OutOfRoad,
        FixtureKind::Yield,
        FixtureKind::Rightmost,
        FixtureKind::Weaving,
        FixtureKind::Reverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FixtureKind::CutIn => "cut_in",
            FixtureKind::OutOfRoad => "out_of_road",
            FixtureKind::Yield => "yield",
            FixtureKind::Rightmost => "rightmost",
            FixtureKind::Weaving => "weaving",
            FixtureKind::Reverse => "reverse",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A scenario whose ground-truth future exhibits `kind`. Agent `actor`
/// performs the behavior; `other` is the counterpart where one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub scenario: Scenario,
    pub actor: usize,
    pub other: Option<usize>,
    pub params: BTreeMap<String, f64>,
}

const FIXTURE_LENGTH: f64 = 300.0;
const T_NOW_S: f64 = (T_HIST - 1) as f64 * DT;

fn const_speed(s0: f64, v: f64) -> Vec<f64> {
    times().map(|t| s0 + v * t).collect()
}

fn blend(t0: f64, tau: f64, amount: f64) -> Vec<f64> {
    times().map(|t| amount * quintic((t - t0) / tau)).collect()
}

fn fixture(
    kind: FixtureKind,
    map: &RoadMap,
    agents: Vec<AgentTrack>,
    other: Option<usize>,
    params: BTreeMap<String, f64>,
) -> Result<Fixture> {
    let mut scenario = map.scenario(agents)?;
    let mut meta = serde_json::Map::new();
    meta.insert("fixture".into(), kind.name().into());
    meta.insert("actor".into(), 0.into());
    if let Some(o) = other {
        meta.insert("other".into(), o.into());
    }
    meta.insert("params".into(), serde_json::to_value(&params)?);
    scenario.meta = Some(serde_json::Value::Object(meta));
    Ok(Fixture {
        kind,
        scenario,
        actor: 0,
        other,
        params,
    })
}

/// Labeled fixture in the canonical map frame (lane 0 along the x axis).
pub fn gen_fixture(kind: FixtureKind, seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1c7);
    match kind {
        FixtureKind::CutIn => cut_in(&mut rng),
        FixtureKind::OutOfRoad => out_of_road(&mut rng),
        FixtureKind::Yield => yield_fixture(&mut rng),
        FixtureKind::Rightmost => rightmost(&mut rng),
        FixtureKind::Weaving => {
            let amp = rng.gen_range(0.8..1.5);
            let omega = rng.gen_range(0.5..1.2);
            weaving_fixture(amp, omega, rng.gen())
        }
        FixtureKind::Reverse => reverse(&mut rng),
    }
}

fn cut_in(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let map = gen_map(&MapSpec::straight(2, FIXTURE_LENGTH), 0)?;
    let (lane0, lane1) = (map.route(0)?, map.route(1)?);
    let w = map.lane_width;
    let v_victim = rng.gen_range(8.0..11.0);
    let dv = rng.gen_range(1.5..2.5);
    let lead = rng.gen_range(3.0..6.0);
    let t_lc = T_NOW_S + rng.gen_range(0.5..1.5);
    let tau = rng.gen_range(3.0..4.0);
    let victim_s = const_speed(40.0, v_victim);
    let cutter_s0 = 40.0 + lead - dv * T_NOW_S;
    let cutter_s = const_speed(cutter_s0, v_victim + dv);
    let zeros = vec![0.0; TRACK_LEN];
    let agents = vec![
        track_from_frenet(0, &lane1, &cutter_s, &blend(t_lc, tau, -w), false)?,
        track_from_frenet(1, &lane0, &victim_s, &zeros, false)?,
        track_from_frenet(2, &lane0, &const_speed(15.0, v_victim), &zeros, false)?,
    ];
    let params = BTreeMap::from([
        ("victim_speed".into(), v_victim),
        ("speed_delta".into(), dv),
        ("lead".into(), lead),
        ("change_start".into(), t_lc),
        ("change_duration".into(), tau),
    ]);
    fixture(FixtureKind::CutIn, &map, agents, Some(1), params)
}

fn out_of_road(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let map = gen_map(&MapSpec::straight(2, FIXTURE_LENGTH), 0)?;
    let (lane0, lane1) = (map.route(0)?, map.route(1)?);
    let w = map.lane_width;
    let v = rng.gen_range(6.0..10.0);
    let beyond = rng.gen_range(2.0..3.0);
    let t0 = T_NOW_S + rng.gen_range(0.5..1.5);
    let tau = rng.gen_range(2.5..3.5);
    let agents = vec![
        track_from_frenet(
            0,
            &lane0,
            &const_speed(40.0, v),
            &blend(t0, tau, -(0.5 * w + beyond)),
            false,
        )?,
        track_from_frenet(1, &lane1, &const_speed(60.0, v), &vec![0.0; TRACK_LEN], false)?,
    ];
    let params = BTreeMap::from([
        ("speed".into(), v),
        ("beyond_edge".into(), beyond),
        ("start".into(), t0),
        ("duration".into(), tau),
    ]);
    fixture(FixtureKind::OutOfRoad, &map, agents, None, params)
}

fn yield_fixture(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let spec = MapSpec::merge(2, FIXTURE_LENGTH);
    let map = gen_map(&spec, 0)?;
    let ramp = map.route(2)?;
    let lane0 = map.route(0)?;
    let k_now = T_HIST - 1;
    let v0 = rng.gen_range(4.0..6.0);
    let x0 = rng.gen_range(85.0..92.0);
    let t_stop = rng.gen_range(2.5..4.5);
    let brake = 0.5 * v0 * t_stop;
    let decel = v0 / t_stop;
    let pass_after = rng.gen_range(0.5..1.5);
    let v1 = rng.gen_range(10.0..12.0);
    // agent 1 reaches the actor's stop point `pass_after` seconds after the stop
    let x1_now = x0 + brake - v1 * (t_stop + pass_after);
    let t_pass = T_NOW_S + t_stop + pass_after;
    let mut speeds = vec![v0; TRACK_LEN];
    for k in k_now + 1..TRACK_LEN {
        let t = k as f64 * DT;
        speeds[k] = if t < t_pass + 1.0 {
            (speeds[k - 1] - decel * DT).max(0.0)
        } else {
            speeds[k - 1] + 1.5 * DT
        };
    }
    let s_actor = integrate(0.0, &speeds);
    let shift = ramp.project([x0, -map.lane_width]).s - s_actor[k_now];
    let s_actor: Vec<f64> = s_actor.iter().map(|s| s + shift).collect();
    let s_other = const_speed(x1_now - v1 * T_NOW_S, v1);
    let zeros = vec![0.0; TRACK_LEN];
    let agents = vec![
        track_from_frenet(0, &ramp, &s_actor, &zeros, false)?,
        track_from_frenet(1, &lane0, &s_other, &zeros, false)?,
    ];
    let params = BTreeMap::from([
        ("ramp_speed".into(), v0),
        ("main_speed".into(), v1),
        ("brake_distance".into(), brake),
        ("pass_time".into(), t_pass),
    ]);
    fixture(FixtureKind::Yield, &map, agents, Some(1), params)
}

fn rightmost(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let map = gen_map(&MapSpec::straight(3, FIXTURE_LENGTH), 0)?;
    let w = map.lane_width;
    let start_lane: u32 = if rng.gen_bool(0.5) { 2 } else { 1 };
    let route = map.route(start_lane)?;
    let v = rng.gen_range(8.0..12.0);
    let mut t0 = T_NOW_S + rng.gen_range(0.3..0.8);
    let mut lateral = vec![0.0; TRACK_LEN];
    for _ in 0..start_lane {
        let tau = rng.gen_range(3.0..3.5);
        for (l, b) in lateral.iter_mut().zip(blend(t0, tau, -w)) {
            *l += b;
        }
        t0 += tau;
    }
    let agents = vec![
        track_from_frenet(0, &route, &const_speed(40.0, v), &lateral, false)?,
        track_from_frenet(1, &map.route(0)?, &const_speed(130.0, v), &vec![0.0; TRACK_LEN], false)?,
    ];
    let params = BTreeMap::from([("speed".into(), v), ("start_lane".into(), start_lane as f64)]);
    fixture(FixtureKind::Rightmost, &map, agents, None, params)
}

/// Weaving fixture: from `t_now` the actor's lateral offset from lane 0 is
/// `amp·sin(ω·k·DT)` at future step `k`; the history stays centered.
pub fn weaving_fixture(amp: f64, omega: f64, seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = gen_map(&MapSpec::straight(2, FIXTURE_LENGTH), 0)?;
    let v = rng.gen_range(6.0..10.0);
    let k_now = T_HIST - 1;
    let lateral: Vec<f64> = (0..TRACK_LEN)
        .map(|k| if k < k_now { 0.0 } else { amp * wave(omega, k - k_now) })
        .collect();
    let agents = vec![
        track_from_frenet(0, &map.route(0)?, &const_speed(40.0, v), &lateral, false)?,
        track_from_frenet(1, &map.route(1)?, &const_speed(70.0, v), &vec![0.0; TRACK_LEN], false)?,
    ];
    let params = BTreeMap::from([
        ("amplitude".into(), amp),
        ("omega".into(), omega),
        ("speed".into(), v),
    ]);
    fixture(FixtureKind::Weaving, &map, agents, None, params)
}

fn reverse(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let map = gen_map(&MapSpec::straight(2, FIXTURE_LENGTH), 0)?;
    let v = rng.gen_range(2.0..4.0);
    let zeros = vec![0.0; TRACK_LEN];
    let agents = vec![
        track_from_frenet(0, &map.route(0)?, &const_speed(120.0, -v), &zeros, true)?,
        track_from_frenet(1, &map.route(1)?, &const_speed(40.0, 8.0), &zeros, false)?,
    ];
    let params = BTreeMap::from([("speed".into(), -v)]);
    fixture(FixtureKind::Reverse, &map, agents, None, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::colliding_agents;
    use crate::scene::lane_at_point;

    #[test]
    fn straight_map_counts() {
        let m = gen_map(&MapSpec::straight(3, 200.0), 1).unwrap();
        assert_eq!(m.driving_lane_ids().len(), 3);
        let count = |r| m.graph.edges.iter().filter(|e| e.2 == r).count();
        assert_eq!(count(Relation::LeftNeighbor), 2);
        assert_eq!(count(Relation::RightNeighbor), 2);
        assert_eq!(m.graph.targets(0, Relation::LeftNeighbor), vec![1]);
        assert_eq!(m.graph.targets(2, Relation::RightNeighbor), vec![1]);
    }

    #[test]
    fn curve_inner_lane_is_shorter() {
        for seed in 0..6 {
            let m = gen_map(&MapSpec::curve(2, 200.0, 50.0), seed).unwrap();
            let (l0, l1) = (m.lane(0).unwrap().length(), m.lane(1).unwrap().length());
            // lane 1 sits left of lane 0: inner on left turns, outer on right turns
            let left_turn = m.lane(0).unwrap().points.last().unwrap()[1] > 0.0;
            assert_eq!(l1 < l0, left_turn, "seed {seed}: {l0} {l1}");
            assert!((l0 - l1).abs() > 1.0);
        }
    }

    #[test]
    fn lane_centers_are_one_width_apart() {
        let m = gen_map(&MapSpec::curve(3, 200.0, 80.0), 3).unwrap();
        let p0 = RefPath::from_polyline(m.lane(0).unwrap()).unwrap();
        for id in 1..3u32 {
            for q in &m.lane(id).unwrap().points[5..90] {
                let d = p0.project(*q).d;
                assert!((d - id as f64 * DEFAULT_LANE_WIDTH).abs() < 0.05, "{d}");
            }
        }
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(gen_map(&MapSpec::straight(0, 200.0), 0).is_err());
        assert!(gen_map(&MapSpec::straight(2, 10.0), 0).is_err());
        let mut c = MapSpec::curve(3, 200.0, 5.0);
        assert!((0..4).any(|s| gen_map(&c, s).is_err()));
        c.radius = None;
        assert!(gen_map(&c, 0).is_err());
        assert!(gen_map(&MapSpec::merge(2, 100.0), 0).is_err());
    }

    #[test]
    fn map_is_deterministic() {
        let spec = MapSpec::curve(2, 150.0, 60.0);
        assert_eq!(gen_map(&spec, 9).unwrap(), gen_map(&spec, 9).unwrap());
        let ds = DatasetSpec::default();
        let a = serde_json::to_string(&gen_scenario(&ds, 4).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_scenario(&ds, 4).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn merge_route_follows_successor() {
        let m = gen_map(&MapSpec::merge(2, 300.0), 0).unwrap();
        assert_eq!(m.graph.targets(2, Relation::Successor), vec![0]);
        let r = m.route(2).unwrap();
        assert!((r.length() - 300.0).abs() < 2.0, "{}", r.length());
        let end = *r.vertices().last().unwrap();
        assert!((end[0] - 300.0).abs() < 1e-9 && end[1].abs() < 1e-9);
    }

    #[test]
    fn constant_speed_agent() {
        let m = gen_map(&MapSpec::straight(1, 200.0), 0).unwrap();
        let r = m.route(0).unwrap();
        let s = const_speed(10.0, 10.0);
        let t = track_from_frenet(0, &r, &s, &vec![0.0; TRACK_LEN], false).unwrap();
        let proj = r.project_trajectory(&t.positions());
        assert!(proj.d.iter().all(|d| *d == 0.0));
        for w in proj.s.windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lane_change_lateral_is_monotone() {
        let b = blend(2.0, 4.0, DEFAULT_LANE_WIDTH);
        assert!(b.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(b[0], 0.0);
        assert_eq!(*b.last().unwrap(), DEFAULT_LANE_WIDTH);
    }

    #[test]
    fn generated_agents_are_separated_and_smooth() {
        let map = gen_map(&MapSpec::straight(3, 250.0), 2).unwrap();
        let mix = BehaviorMix {
            lane_change: 0.7,
            ..BehaviorMix::default()
        };
        let agents = gen_agents(&map, 4, &mix, 11).unwrap();
        assert_eq!(agents.len(), 4);
        for a in &agents {
            assert_eq!(a.states.len(), TRACK_LEN);
            let p = a.positions();
            let v: Vec<f64> = p
                .windows(2)
                .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) / DT)
                .collect();
            for w in v.windows(2) {
                assert!(((w[1] - w[0]) / DT).abs() <= 3.0 + 1e-6);
            }
        }
        let scene = map.scenario(agents).unwrap();
        assert!(colliding_agents(&scene).iter().all(|c| !c));
    }

    #[test]
    fn too_short_map_errors() {
        let map = gen_map(&MapSpec::straight(1, 50.0), 0).unwrap();
        let mix = BehaviorMix {
            stopped: 0.0,
            speed_change: 0.0,
            ..BehaviorMix::default()
        };
        assert!(matches!(
            gen_agents(&map, 1, &mix, 0),
            Err(SynthError::MapTooShort { .. })
        ));
    }

    #[test]
    fn reverse_fixture_moves_backward() {
        let f = gen_fixture(FixtureKind::Reverse, 3).unwrap();
        let a = &f.scenario.agents[0];
        assert!(a.states.windows(2).all(|w| w[1].x < w[0].x));
        assert!(a.states.iter().all(|s| s.heading == 0.0));
    }

    #[test]
    fn weaving_fixture_follows_wave() {
        let f = weaving_fixture(1.5, 0.5, 0).unwrap();
        let a = &f.scenario.agents[0];
        for k in 0..=T_FUTURE {
            assert_eq!(a.states[T_HIST - 1 + k].y, 1.5 * wave(0.5, k));
        }
    }

    #[test]
    fn cut_in_fixture_changes_into_victim_lane() {
        for seed in 0..5 {
            let f = gen_fixture(FixtureKind::CutIn, seed).unwrap();
            let s = &f.scenario;
            let lane = |i: usize, k: usize| lane_at_point(s, s.agents[i].states[k].position());
            assert_eq!(lane(0, s.t_now), Some(1));
            assert_eq!(lane(0, TRACK_LEN - 1), Some(0));
            assert!(colliding_agents(s).iter().all(|c| !c), "seed {seed}");
        }
    }

    #[test]
    fn dataset_roundtrip_and_manifest() {
        let spec = DatasetSpec::default();
        let (scenes, manifest) = gen_dataset(&spec, 3, 7).unwrap();
        assert_eq!(manifest.seeds, vec![7, 8, 9]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &scenes, &manifest).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), scenes);
        let m: Manifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(m, manifest);
    }
}
