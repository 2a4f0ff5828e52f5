//! Evaluation metrics: displacement errors, Jensen-Shannon distance bundle,
//! collision / off-road rates, scene collision rate and MMD.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{wrap_angle, AgentState, Extent, LaneType, MapPolyline, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("trajectory length mismatch: {sim} vs {gt}")]
    LengthMismatch { sim: usize, gt: usize },
    #[error("agent count mismatch: {sim} vs {gt}")]
    AgentMismatch { sim: usize, gt: usize },
    #[error("no samples for feature {0}")]
    EmptyFeature(&'static str),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Aggregate report. `jsd` is expressed in units of 10⁻².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ade: f64,
    pub fde: f64,
    pub jsd: f64,
    pub collision_rate: f64,
    pub offroad_rate: f64,
    pub scr: f64,
    pub mmd_o: f64,
    pub mmd_r: f64,
}

impl MetricReport {
    /// Fixed-order table used by the command line.
    pub fn table(&self) -> String {
        let rows = [
            ("ADE (m)", self.ade),
            ("FDE (m)", self.fde),
            ("JSD (x1e-2)", self.jsd),
            ("Collision", self.collision_rate),
            ("Off road", self.offroad_rate),
            ("SCR", self.scr),
            ("MMD_o", self.mmd_o),
            ("MMD_r", self.mmd_r),
        ];
        rows.iter()
            .map(|(k, v)| format!("{k:<12} {v:>10.4}\n"))
            .collect()
    }
}

/// Mean and final displacement error, averaged over agents.
pub fn ade_fde(sim: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<(f64, f64)> {
    if sim.len() != gt.len() {
        return Err(MetricError::AgentMismatch {
            sim: sim.len(),
            gt: gt.len(),
        });
    }
    if sim.is_empty() {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let (mut ade, mut fde) = (0.0, 0.0);
    for (a, b) in sim.iter().zip(gt) {
        if a.len() != b.len() || a.is_empty() {
            return Err(MetricError::LengthMismatch {
                sim: a.len(),
                gt: b.len(),
            });
        }
        let errs: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
            .collect();
        ade += errs.iter().sum::<f64>() / errs.len() as f64;
        fde += errs[errs.len() - 1];
    }
    let n = sim.len() as f64;
    Ok((ade / n, fde / n))
}

/// Future positions (`t_now + 1 ..`) of every agent.
pub fn future_positions(s: &Scenario) -> Vec<Vec<[f64; 2]>> {
    s.agents
        .iter()
        .map(|a| a.states[s.t_now + 1..].iter().map(AgentState::position).collect())
        .collect()
}

pub fn ade_fde_scenarios(sim: &Scenario, gt: &Scenario) -> Result<(f64, f64)> {
    ade_fde(&future_positions(sim), &future_positions(gt))
}

#[derive(Debug, Clone, Copy)]
struct Bins {
    lo: f64,
    hi: f64,
    count: usize,
}

const SPEED_BINS: Bins = Bins {
    lo: 0.0,
    hi: 30.0,
    count: 30,
};
const YAW_RATE_BINS: Bins = Bins {
    lo: -1.0,
    hi: 1.0,
    count: 40,
};
const ACCEL_BINS: Bins = Bins {
    lo: -8.0,
    hi: 8.0,
    count: 40,
};
const NEAREST_BINS: Bins = Bins {
    lo: 0.0,
    hi: 50.0,
    count: 50,
};

fn histogram(values: &[f64], bins: Bins) -> Vec<f64> {
    let mut h = vec![0.0; bins.count];
    let width = (bins.hi - bins.lo) / bins.count as f64;
    for &v in values {
        let idx = ((v - bins.lo) / width).floor();
        let idx = if idx.is_nan() {
            0
        } else {
            idx.clamp(0.0, (bins.count - 1) as f64) as usize
        };
        h[idx] += 1.0;
    }
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|x| *x /= total);
    }
    h
}

/// Jensen-Shannon distance (square root of the base-2 divergence) between
/// two normalized histograms.
pub fn js_distance(p: &[f64], q: &[f64]) -> f64 {
    let mut div = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            div += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            div += 0.5 * b * (b / m).log2();
        }
    }
    div.max(0.0).sqrt()
}

/// Per-step kinematic features of the future part of a scenario.
#[derive(Debug, Clone, Default)]
pub struct KinematicFeatures {
    pub speed: Vec<f64>,
    pub yaw_rate: Vec<f64>,
    pub accel: Vec<f64>,
    pub nearest: Vec<f64>,
}

pub fn kinematic_features(s: &Scenario) -> KinematicFeatures {
    let mut f = KinematicFeatures::default();
    let dt = s.dt;
    let t0 = s.t_now;
    for (i, a) in s.agents.iter().enumerate() {
        let st = &a.states;
        let speeds: Vec<f64> = st[t0..]
            .windows(2)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y) / dt)
            .collect();
        f.speed.extend(&speeds);
        f.yaw_rate.extend(
            st[t0..]
                .windows(2)
                .map(|w| wrap_angle(w[1].heading - w[0].heading) / dt),
        );
        f.accel.extend(speeds.windows(2).map(|w| (w[1] - w[0]) / dt));
        for t in t0 + 1..st.len() {
            let nearest = s
                .agents
                .iter()
                .enumerate()
                .filter(|&(j, b)| j != i && t < b.states.len())
                .map(|(_, b)| (b.states[t].x - st[t].x).hypot(b.states[t].y - st[t].y))
                .fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                f.nearest.push(nearest);
            }
        }
    }
    f
}

/// Mean Jensen-Shannon distance over speed, yaw rate, acceleration and
/// nearest-vehicle distance histograms. Features absent from both sides
/// are skipped.
pub fn jsd_bundle(real: &[Scenario], sim: &[Scenario]) -> Result<f64> {
    if real.is_empty() || sim.is_empty() {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let gather = |set: &[Scenario]| {
        let mut acc = KinematicFeatures::default();
        for s in set {
            let f = kinematic_features(s);
            acc.speed.extend(f.speed);
            acc.yaw_rate.extend(f.yaw_rate);
            acc.accel.extend(f.accel);
            acc.nearest.extend(f.nearest);
        }
        acc
    };
    let (fr, fs) = (gather(real), gather(sim));
    let pairs: [(&'static str, &Vec<f64>, &Vec<f64>, Bins); 4] = [
        ("speed", &fr.speed, &fs.speed, SPEED_BINS),
        ("angular_speed", &fr.yaw_rate, &fs.yaw_rate, YAW_RATE_BINS),
        ("acceleration", &fr.accel, &fs.accel, ACCEL_BINS),
        ("nearest_vehicle", &fr.nearest, &fs.nearest, NEAREST_BINS),
    ];
    let mut total = 0.0;
    let mut used = 0;
    for (name, a, b, bins) in pairs {
        match (a.is_empty(), b.is_empty()) {
            (true, true) => continue,
            (true, false) | (false, true) => return Err(MetricError::EmptyFeature(name)),
            _ => {}
        }
        total += js_distance(&histogram(a, bins), &histogram(b, bins));
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::EmptyFeature("all"));
    }
    Ok(total / used as f64)
}

/// Corners of an agent's oriented rectangle.
pub fn box_corners(state: &AgentState, extent: Extent) -> [[f64; 2]; 4] {
    let (hl, hw) = (extent.length / 2.0, extent.width / 2.0);
    [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|p| state.to_world(p))
}

/// Separating-axis overlap test; touching boxes do not overlap.
pub fn boxes_overlap(a: &AgentState, ea: Extent, b: &AgentState, eb: Extent) -> bool {
    let ca = box_corners(a, ea);
    let cb = box_corners(b, eb);
    let (sa, ca_) = a.heading.sin_cos();
    let (sb, cb_) = b.heading.sin_cos();
    let axes = [(sa, ca_), (ca_, -sa), (sb, cb_), (cb_, -sb)];
    for (s, c) in axes {
        let proj = |pts: &[[f64; 2]; 4]| {
            pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let v = p[0] * c + p[1] * s;
                (lo.min(v), hi.max(v))
            })
        };
        let (a_lo, a_hi) = proj(&ca);
        let (b_lo, b_hi) = proj(&cb);
        if a_hi <= b_lo || b_hi <= a_lo {
            return false;
        }
    }
    true
}

fn distance_to_segments(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len2 = ex * ex + ey * ey;
            let u = if len2 > 0.0 {
                (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (p[0] - a[0] - u * ex).hypot(p[1] - a[1] - u * ey)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Whether a point lies outside every driving-lane corridor.
pub fn is_offroad(s: &Scenario, p: [f64; 2]) -> bool {
    outside_lanes(s.driving_lanes(), p)
}

/// Whether a point lies outside the half-width corridor of every given lane.
pub fn outside_lanes<'a>(lanes: impl IntoIterator<Item = &'a MapPolyline>, p: [f64; 2]) -> bool {
    !lanes
        .into_iter()
        .any(|l| distance_to_segments(p, &l.points) <= l.width / 2.0)
}

/// Per-scene collision flags per agent over steps `t_now..`.
pub fn colliding_agents(s: &Scenario) -> Vec<bool> {
    let n = s.agents.len();
    let mut hit = vec![false; n];
    let horizon = s.horizon();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&s.agents[i], &s.agents[j]);
            let collide = (s.t_now..horizon).any(|t| {
                let (sa, sb) = (&a.states[t], &b.states[t]);
                // cheap reject on center distance
                let reach = (a.extent.length.hypot(a.extent.width) + b.extent.length.hypot(b.extent.width)) / 2.0;
                (sa.x - sb.x).hypot(sa.y - sb.y) < reach && boxes_overlap(sa, a.extent, sb, b.extent)
            });
            if collide {
                hit[i] = true;
                hit[j] = true;
            }
        }
    }
    hit
}

/// `(collision_rate, offroad_rate, scr)` over a set of scenes. Rates are
/// fractions of agents; `scr` is the fraction of scenes with a collision.
pub fn collision_offroad(scenes: &[Scenario]) -> (f64, f64, f64) {
    let (mut agents, mut collided, mut offroad, mut scenes_hit) = (0usize, 0usize, 0usize, 0usize);
    for s in scenes {
        let hits = colliding_agents(s);
        agents += hits.len();
        collided += hits.iter().filter(|&&h| h).count();
        if hits.iter().any(|&h| h) {
            scenes_hit += 1;
        }
        for a in &s.agents {
            if a.states[s.t_now..].iter().any(|st| is_offroad(s, st.position())) {
                offroad += 1;
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (
        frac(collided, agents),
        frac(offroad, agents),
        frac(scenes_hit, scenes.len()),
    )
}

/// Unbiased MMD² with a Gaussian kernel whose bandwidth is the median
/// pairwise distance of the pooled sample. Clamped at zero.
pub fn mmd(x: &[f64], y: &[f64]) -> Result<f64> {
    for v in [x, y] {
        if v.len() < 2 {
            return Err(MetricError::TooFewSamples {
                need: 2,
                got: v.len(),
            });
        }
    }
    let h = match median_bandwidth(x, y) {
        Some(h) => h,
        None => return Ok(0.0),
    };
    let k = |a: f64, b: f64| (-(a - b) * (a - b) / (2.0 * h * h)).exp();
    let within = |v: &[f64]| {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                s += k(v[i], v[j]);
            }
        }
        2.0 * s / (v.len() * (v.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &a in x {
        for &b in y {
            cross += k(a, b);
        }
    }
    let cross = cross / (x.len() * y.len()) as f64;
    let value = within(x) + within(y) - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Median pairwise distance of the pooled sample, `None` when every point
/// is identical. Falls back to the mean positive distance when the median
/// is zero.
pub fn median_bandwidth(x: &[f64], y: &[f64]) -> Option<f64> {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push((pooled[i] - pooled[j]).abs());
        }
    }
    if dists.iter().all(|&d| d == 0.0) {
        return None;
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if med > 0.0 {
        Some(med)
    } else {
        let pos: Vec<f64> = dists.into_iter().filter(|&d| d > 0.0).collect();
        Some(pos.iter().sum::<f64>() / pos.len() as f64)
    }
}

/// Per-agent distance to the nearest other agent, sampled at 1 Hz.
pub fn nearest_object_feature(scenes: &[Scenario]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in scenes {
        let f = kinematic_features(s);
        out.extend(f.nearest.iter().step_by(10));
    }
    out
}

/// Per-agent distance to the nearest road-edge polyline, sampled at 1 Hz.
pub fn road_edge_feature(scenes: &[Scenario]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in scenes {
        let edges: Vec<_> = s
            .polylines
            .iter()
            .filter(|p| p.lane_type == LaneType::Edge)
            .collect();
        if edges.is_empty() {
            continue;
        }
        for a in &s.agents {
            for st in a.states[s.t_now + 1..].iter().step_by(10) {
                let d = edges
                    .iter()
                    .map(|e| distance_to_segments(st.position(), &e.points))
                    .fold(f64::INFINITY, f64::min);
                out.push(d);
            }
        }
    }
    out
}

/// Deterministic stride subsample to at most `cap` values.
pub fn subsample(v: &[f64], cap: usize) -> Vec<f64> {
    if v.len() <= cap {
        return v.to_vec();
    }
    (0..cap).map(|i| v[i * v.len() / cap]).collect()
}

const MMD_CAP: usize = 1000;

/// Full report for paired real / simulated scenes (paired by index).
pub fn evaluate(real: &[Scenario], sim: &[Scenario]) -> Result<MetricReport> {
    if real.len() != sim.len() {
        return Err(MetricError::AgentMismatch {
            sim: sim.len(),
            gt: real.len(),
        });
    }
    let (mut ade, mut fde) = (0.0, 0.0);
    for (r, s) in real.iter().zip(sim) {
        let (a, f) = ade_fde_scenarios(s, r)?;
        ade += a;
        fde += f;
    }
    let n = real.len().max(1) as f64;
    let jsd = jsd_bundle(real, sim)?;
    let (collision_rate, offroad_rate, scr) = collision_offroad(sim);
    let mmd_or_zero = |a: Vec<f64>, b: Vec<f64>| -> Result<f64> {
        if a.len() < 2 || b.len() < 2 {
            return Ok(0.0);
        }
        mmd(&subsample(&a, MMD_CAP), &subsample(&b, MMD_CAP))
    };
    Ok(MetricReport {
        ade: ade / n,
        fde: fde / n,
        jsd: jsd * 100.0,
        collision_rate,
        offroad_rate,
        scr,
        mmd_o: mmd_or_zero(nearest_object_feature(real), nearest_object_feature(sim))?,
        mmd_r: mmd_or_zero(road_edge_feature(real), road_edge_feature(sim))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::DEFAULT_EXTENT;

    #[test]
    fn ade_fde_trivial_cases() {
        let gt = vec![(0..10).map(|i| [i as f64, 0.0]).collect::<Vec<_>>()];
        assert_eq!(ade_fde(&gt, &gt).unwrap(), (0.0, 0.0));
        let shifted = vec![gt[0].iter().map(|p| [p[0], p[1] + 2.0]).collect()];
        assert_eq!(ade_fde(&shifted, &gt).unwrap(), (2.0, 2.0));
        // offset grows linearly 0 -> 4 over 5 samples: mean 2, final 4
        let grow = vec![(0..5).map(|i| [i as f64, i as f64]).collect::<Vec<_>>()];
        let base = vec![(0..5).map(|i| [i as f64, 0.0]).collect::<Vec<_>>()];
        assert_eq!(ade_fde(&grow, &base).unwrap(), (2.0, 4.0));
        let short = vec![base[0][..3].to_vec()];
        assert!(matches!(ade_fde(&short, &base), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn js_distance_bounds() {
        assert_eq!(js_distance(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!((js_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_clips_to_edge_bins() {
        let h = histogram(&[-5.0, 0.5, 100.0], SPEED_BINS);
        assert_eq!(h[0], 2.0 / 3.0);
        assert_eq!(h[29], 1.0 / 3.0);
    }

    fn pose(x: f64, y: f64, h: f64) -> AgentState {
        AgentState::new(x, y, h)
    }

    #[test]
    fn sat_flips_at_contact() {
        let e = DEFAULT_EXTENT;
        // end to end along x: contact at 4.8 m
        assert!(!boxes_overlap(&pose(0., 0., 0.), e, &pose(4.8, 0., 0.), e));
        assert!(boxes_overlap(&pose(0., 0., 0.), e, &pose(4.8 - 1e-9, 0., 0.), e));
        // side by side: contact at 2.0 m
        assert!(!boxes_overlap(&pose(0., 0., 0.), e, &pose(0., 2.0, 0.), e));
        assert!(boxes_overlap(&pose(0., 0., 0.), e, &pose(0., 2.0 - 1e-9, 0.), e));
        // rotated 90°: the half-length of one meets the half-width of the other at 3.4 m
        let r = std::f64::consts::FRAC_PI_2;
        assert!(!boxes_overlap(&pose(0., 0., 0.), e, &pose(3.4 + 1e-9, 0., r), e));
        assert!(boxes_overlap(&pose(0., 0., 0.), e, &pose(3.4 - 1e-9, 0., r), e));
        // 45° diamond touching a box corner-on: distance = 2.4 + sqrt(2)*... checked symmetric
        let a = pose(0., 0., 0.3);
        let b = pose(3.0, 1.0, -0.7);
        assert_eq!(boxes_overlap(&a, e, &b, e), boxes_overlap(&b, e, &a, e));
    }

    #[test]
    fn mmd_identity_and_bandwidth() {
        let x = [0.0, 1.0, 3.0, 7.0];
        assert!(mmd(&x, &x).unwrap() < 1e-9);
        // pooled {0,1,3} ∪ {7}: pairwise distances 1,3,7,2,6,4 -> median (3+4)/2
        assert_eq!(median_bandwidth(&[0.0, 1.0, 3.0], &[7.0]), Some(3.5));
        assert_eq!(mmd(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(mmd(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mmd_hand_value() {
        // x = {0, 1}, y = {2, 3}; pooled distances 1,2,3,1,2,1 -> median 1.5
        let h: f64 = 1.5;
        let k = |d: f64| (-d * d / (2.0 * h * h)).exp();
        let expected = k(1.0) + k(1.0) - 2.0 * (k(2.0) + k(3.0) + k(1.0) + k(2.0)) / 4.0;
        assert!((mmd(&[0.0, 1.0], &[2.0, 3.0]).unwrap() - expected).abs() < 1e-12);
    }
}
