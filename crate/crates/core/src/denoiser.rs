//! Trajectory denoiser: PCA trajectory embedding, MiniPointNet map tokens
//! and stacked lane-lane / agent-lane / agent-agent relative attention,
//! wrapped in EDM preconditioning.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frenet::RefPath;
use crate::grad::{GradError, Tape, Tensor, Var};
use crate::scene::{relative_feature, AgentState, LaneType, Relation, Scenario, T_FUTURE, T_HIST};

/// States per trajectory window: history (with the current state) plus future.
pub const WINDOW: usize = T_HIST + T_FUTURE;
/// Flattened window dimension.
pub const WINDOW_DIM: usize = 2 * WINDOW;

const NOISE_FEATURES: usize = 7;
const POINT_FEATURES: usize = 4;
const LL_REL: usize = 9;
const AGENT_REL: usize = 4;
const REL_SCALE: f64 = 1.0 / 50.0;
const POINT_SCALE: f64 = 1.0 / 10.0;
const MASK_FILL: f64 = -1e9;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("pca: {0}")]
    Pca(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("input contains NaN or infinity")]
    NonFinite,
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DenoiserError>;

// ---------- PCA ----------

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k × dim`, rows orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component, descending.
    pub eigenvalues: Vec<f64>,
}

/// Top-`k` principal components of `samples` (population covariance).
pub fn fit_pca(samples: &[Vec<f64>], k: usize) -> Result<PcaBasis> {
    let n = samples.len();
    let dim = samples.first().map_or(0, |s| s.len());
    if dim == 0 {
        return Err(DenoiserError::Pca("no samples".into()));
    }
    if k > dim {
        return Err(DenoiserError::Pca(format!("k = {k} exceeds dimension {dim}")));
    }
    if n < k {
        return Err(DenoiserError::Pca(format!("{n} samples for k = {k}")));
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(DenoiserError::Pca("ragged samples".into()));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| samples[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        // deterministic sign: largest-magnitude entry positive
        let big = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |b, (i, x)| if x.abs() > b.1 { (i, x.abs()) } else { b })
            .0;
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(PcaBasis {
        mean,
        components,
        eigenvalues,
    })
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Common coefficient scale: the RMS of the raw coefficients, `√(Σλ_i/k)`.
    pub fn unit(&self) -> f64 {
        let u = (self.eigenvalues.iter().sum::<f64>() / self.k().max(1) as f64).sqrt();
        if u > 1e-12 {
            u
        } else {
            1.0
        }
    }

    /// Per-component scale `√λ_i / unit` (1 for degenerate directions).
    pub fn scales(&self) -> Vec<f64> {
        let u = self.unit();
        self.eigenvalues
            .iter()
            .map(|&l| if l > 1e-12 { l.sqrt() / u } else { 1.0 })
            .collect()
    }

    /// Coefficients `c_i·(y − μ)/scale_i`: every component has variance `unit²`.
    pub fn encode(&self, y: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(self.scales())
            .map(|(c, s)| c.iter().zip(y).zip(&self.mean).map(|((c, y), m)| c * (y - m)).sum::<f64>() / s)
            .collect()
    }

    pub fn decode(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut y = self.mean.clone();
        for ((c, &a), s) in self.components.iter().zip(coeffs).zip(self.scales()) {
            for (y, v) in y.iter_mut().zip(c) {
                *y += a * s * v;
            }
        }
        y
    }

    /// Pull a gradient with respect to the decoded vector back to coefficients.
    pub fn pullback(&self, grad_y: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(self.scales())
            .map(|(c, s)| s * c.iter().zip(grad_y).map(|(c, g)| c * g).sum::<f64>())
            .collect()
    }

    /// Largest `|<c_i, c_j> - δ_ij|` over component pairs.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Window of agent `i` (`T_HIST` history states through `T_FUTURE` future
/// states) flattened as `[x0, y0, x1, y1, ...]` in the agent's frame at `t_now`.
pub fn agent_window(scenario: &Scenario, i: usize) -> Result<Vec<f64>> {
    let a = scenario
        .agents
        .get(i)
        .ok_or_else(|| DenoiserError::Scenario(format!("no agent {i}")))?;
    let t = scenario.t_now;
    if t + 1 < T_HIST || a.states.len() < t + 1 + T_FUTURE {
        return Err(DenoiserError::Scenario(format!(
            "agent {i}: need {} history and {T_FUTURE} future states around t_now = {t}, track has {}",
            T_HIST - 1,
            a.states.len()
        )));
    }
    let pose = a.states[t];
    Ok(a.states[t + 1 - T_HIST..t + 1 + T_FUTURE]
        .iter()
        .flat_map(|s| pose.to_local(s.position()))
        .collect())
}

/// Positions of a flattened agent-frame window mapped back to the world.
pub fn window_to_world(pose: &AgentState, window: &[f64]) -> Vec<[f64; 2]> {
    window.chunks(2).map(|p| pose.to_world([p[0], p[1]])).collect()
}

// ---------- configuration and parameters ----------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub k: usize,
    pub max_agents: usize,
    pub max_map_tokens: usize,
    pub rel_hidden: usize,
    pub blocks: usize,
    /// Arc length covered by one map token (m).
    pub token_length: f64,
    pub points_per_token: usize,
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            k: 16,
            max_agents: 8,
            max_map_tokens: 32,
            rel_hidden: 32,
            blocks: 3,
            token_length: 16.0,
            points_per_token: 8,
            sigma_data: 1.0,
        }
    }
}

impl DenoiserConfig {
    /// Smaller network for quick CPU training.
    pub fn desk() -> Self {
        Self {
            hidden: 32,
            max_map_tokens: 16,
            rel_hidden: 16,
            ..Self::default()
        }
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Manifest `{name: shape}` plus little-endian f64 data in manifest order.
    pub fn save(&self, manifest: &Path, blob: &Path) -> Result<()> {
        let mut m = serde_json::Map::new();
        let mut bytes = Vec::with_capacity(self.count() * 8);
        for (n, t) in self.names.iter().zip(&self.tensors) {
            m.insert(n.clone(), serde_json::to_value(t.shape())?);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(manifest, serde_json::to_string_pretty(&serde_json::Value::Object(m))?)?;
        std::fs::write(blob, bytes)?;
        Ok(())
    }

    pub fn load(manifest: &Path, blob: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest)?;
        let m: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)?;
        let bytes = std::fs::read(blob)?;
        if bytes.len() % 8 != 0 {
            return Err(DenoiserError::Checkpoint("blob length not a multiple of 8".into()));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut out = Params::default();
        for (name, shape) in m {
            let shape: Vec<usize> = serde_json::from_value(shape)?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(DenoiserError::Checkpoint(format!("blob too short for '{name}'")));
            }
            out.insert(&name, Tensor::new(shape, data)?);
        }
        if values.next().is_some() {
            return Err(DenoiserError::Checkpoint("blob has trailing data".into()));
        }
        Ok(out)
    }
}

impl PcaBasis {
    pub fn to_params(&self) -> Params {
        let mut p = Params::default();
        p.insert("mean", Tensor::vector(self.mean.clone()));
        let k = self.k();
        let flat = self.components.iter().flatten().copied().collect();
        p.insert(
            "components",
            Tensor::new(vec![k, self.dim()], flat).expect("consistent shape"),
        );
        p.insert("eigenvalues", Tensor::vector(self.eigenvalues.clone()));
        p
    }

    pub fn from_params(p: &Params) -> Result<Self> {
        let get = |n: &str| {
            p.get(n)
                .ok_or_else(|| DenoiserError::Checkpoint(format!("pca missing '{n}'")))
        };
        let mean = get("mean")?.data().to_vec();
        let comps = get("components")?;
        if comps.shape().len() != 2 || comps.shape()[1] != mean.len() {
            return Err(DenoiserError::Checkpoint("pca component shape".into()));
        }
        Ok(Self {
            components: comps.data().chunks(mean.len()).map(|c| c.to_vec()).collect(),
            eigenvalues: get("eigenvalues")?.data().to_vec(),
            mean,
        })
    }
}

const ATTN_KINDS: [&str; 3] = ["ll", "al", "aa"];

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

/// Freshly initialized parameters; the output head starts at zero.
pub fn init_params(cfg: &DenoiserConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (cfg.hidden, cfg.rel_hidden);
    let mut p = Params::default();
    let lin = |p: &mut Params, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
        p.insert(&format!("{name}.w"), glorot(rng, i, o));
        p.insert(&format!("{name}.b"), Tensor::zeros(&[o]));
    };
    lin(&mut p, "pn.l1", POINT_FEATURES, d, &mut rng);
    lin(&mut p, "pn.l2", d, d, &mut rng);
    lin(&mut p, "emb.l1", cfg.k + NOISE_FEATURES, d, &mut rng);
    lin(&mut p, "emb.l2", d, d, &mut rng);
    for b in 0..cfg.blocks {
        for kind in ATTN_KINDS {
            let pre = format!("b{b}.{kind}");
            for m in ["q", "k", "v", "o"] {
                p.insert(&format!("{pre}.w{m}"), glorot(&mut rng, d, d));
            }
            let rdim = if kind == "ll" { LL_REL } else { AGENT_REL };
            lin(&mut p, &format!("{pre}.rel1"), rdim, h, &mut rng);
            lin(&mut p, &format!("{pre}.rel2"), h, d, &mut rng);
            lin(&mut p, &format!("{pre}.ff1"), d, d, &mut rng);
            lin(&mut p, &format!("{pre}.ff2"), d, d, &mut rng);
        }
    }
    p.insert("head.w", Tensor::zeros(&[d, cfg.k]));
    p.insert("head.b", Tensor::zeros(&[cfg.k]));
    p
}

// ---------- EDM preconditioning ----------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond(sigma: f64, sigma_data: f64) -> Precond {
    let (s2, d2) = (sigma * sigma, sigma_data * sigma_data);
    Precond {
        c_skip: d2 / (s2 + d2),
        c_out: sigma * sigma_data / (s2 + d2).sqrt(),
        c_in: 1.0 / (s2 + d2).sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

fn noise_features(c_noise: f64) -> [f64; NOISE_FEATURES] {
    let mut f = [0.0; NOISE_FEATURES];
    f[0] = c_noise;
    for (i, w) in [1.0, 2.0, 4.0].into_iter().enumerate() {
        f[1 + 2 * i] = (w * c_noise).sin();
        f[2 + 2 * i] = (w * c_noise).cos();
    }
    f
}

// ---------- scene encoding ----------

/// One chunk of a map polyline, resampled to a fixed point count.
#[derive(Debug, Clone, PartialEq)]
pub struct MapToken {
    pub lane: u32,
    pub chunk: usize,
    pub pose: AgentState,
    /// Point features in the token's own frame.
    pub points: Vec<[f64; POINT_FEATURES]>,
}

fn lane_tokens(scenario: &Scenario, cfg: &DenoiserConfig) -> Vec<MapToken> {
    let mut out = Vec::new();
    for poly in &scenario.polylines {
        if poly.lane_type == LaneType::Shoulder {
            continue;
        }
        let Ok(path) = RefPath::from_polyline(poly) else {
            continue;
        };
        let len = path.length();
        let chunks = (len / cfg.token_length).ceil().max(1.0) as usize;
        let step = len / chunks as f64;
        let flags = match poly.lane_type {
            LaneType::Driving => [1.0, 0.0],
            _ => [0.0, 1.0],
        };
        for c in 0..chunks {
            let (s0, s1) = (c as f64 * step, ((c + 1) as f64 * step).min(len));
            let pts: Vec<[f64; 2]> = (0..cfg.points_per_token)
                .map(|i| {
                    let s = s0 + (s1 - s0) * i as f64 / (cfg.points_per_token - 1).max(1) as f64;
                    path.to_cartesian(crate::frenet::FrenetCoord { s: s.min(len), d: 0.0 })
                        .expect("s within path")
                })
                .collect();
            let (a, b) = (pts[0], pts[pts.len() - 1]);
            let pose = AgentState::new(a[0], a[1], (b[1] - a[1]).atan2(b[0] - a[0]));
            let points = pts
                .iter()
                .map(|p| {
                    let l = pose.to_local(*p);
                    [l[0] * POINT_SCALE, l[1] * POINT_SCALE, flags[0], flags[1]]
                })
                .collect();
            out.push(MapToken {
                lane: poly.id,
                chunk: c,
                pose,
                points,
            });
        }
    }
    out
}

fn connectivity(scenario: &Scenario, a: &MapToken, b: &MapToken) -> usize {
    // one-hot slots: 0 none, 1 predecessor, 2 successor, 3 left, 4 right
    if a.lane == b.lane {
        return match b.chunk as i64 - a.chunk as i64 {
            1 => 2,
            -1 => 1,
            _ => 0,
        };
    }
    match scenario.graph.relation(a.lane, b.lane) {
        Some(Relation::Predecessor) => 1,
        Some(Relation::Successor) => 2,
        Some(Relation::LeftNeighbor) => 3,
        Some(Relation::RightNeighbor) => 4,
        None => 0,
    }
}

fn rel4(a: &AgentState, b: &AgentState) -> [f64; 4] {
    let f = relative_feature(a, b);
    [f.dx * REL_SCALE, f.dy * REL_SCALE, f.cos_dh, f.sin_dh]
}

/// Map tokens and relative-feature tables for one scenario; independent of
/// network parameters and of agents' future states.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoding {
    pub tokens: Vec<MapToken>,
    /// `[M, P, 4]` token point features.
    pub points: Tensor,
    /// `[M, M, 9]` lane-lane relative features with connectivity one-hot.
    pub rel_ll: Tensor,
    /// `[N, M, 4]` agent-lane relative features.
    pub rel_al: Tensor,
    /// `[N, N, 4]` agent-agent relative features.
    pub rel_aa: Tensor,
    /// `[N, N]` additive attention mask (0 or a large negative value).
    pub mask: Tensor,
    pub poses: Vec<AgentState>,
    pub valid: Vec<bool>,
}

impl SceneEncoding {
    pub fn agents(&self) -> usize {
        self.poses.len()
    }

    pub fn tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// Encode a scenario: the `max_map_tokens` tokens nearest to any agent at
/// `t_now` plus relative tables. `padding` extra masked agents are appended.
pub fn encode_scene_padded(scenario: &Scenario, cfg: &DenoiserConfig, padding: usize) -> Result<SceneEncoding> {
    let poses: Vec<AgentState> = (0..scenario.agents.len())
        .map(|i| scenario.current_state(i))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| DenoiserError::Scenario(e.to_string()))?;
    if poses.is_empty() {
        return Err(DenoiserError::Scenario("no agents".into()));
    }
    let mut tokens = lane_tokens(scenario, cfg);
    if tokens.is_empty() {
        return Err(DenoiserError::Scenario("no map polylines to encode".into()));
    }
    let dist = |t: &MapToken| {
        t.points
            .iter()
            .map(|p| t.pose.to_world([p[0] / POINT_SCALE, p[1] / POINT_SCALE]))
            .flat_map(|w| poses.iter().map(move |a| (w[0] - a.x).hypot(w[1] - a.y)))
            .fold(f64::INFINITY, f64::min)
    };
    let mut keyed: Vec<(f64, usize)> = tokens.iter().enumerate().map(|(i, t)| (dist(t), i)).collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = keyed.iter().take(cfg.max_map_tokens).map(|k| k.1).collect();
    keep.sort_unstable();
    tokens = keep.into_iter().map(|i| tokens[i].clone()).collect();

    let m = tokens.len();
    let p = cfg.points_per_token;
    let points = Tensor::new(
        vec![m, p, POINT_FEATURES],
        tokens.iter().flat_map(|t| t.points.iter().flatten().copied()).collect(),
    )?;
    let mut ll = Vec::with_capacity(m * m * LL_REL);
    for a in &tokens {
        for b in &tokens {
            ll.extend(rel4(&a.pose, &b.pose));
            let mut onehot = [0.0; 5];
            onehot[connectivity(scenario, a, b)] = 1.0;
            ll.extend(onehot);
        }
    }
    let mut all_poses = poses.clone();
    let mut valid = vec![true; poses.len()];
    for _ in 0..padding {
        all_poses.push(AgentState::new(0.0, 0.0, 0.0));
        valid.push(false);
    }
    let (rel_al, rel_aa, mask) = agent_tables(&tokens, &all_poses, &valid)?;
    Ok(SceneEncoding {
        tokens,
        points,
        rel_ll: Tensor::new(vec![m, m, LL_REL], ll)?,
        rel_al,
        rel_aa,
        mask,
        poses: all_poses,
        valid,
    })
}

fn agent_tables(tokens: &[MapToken], poses: &[AgentState], valid: &[bool]) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, m) = (poses.len(), tokens.len());
    let mut al = Vec::with_capacity(n * m * AGENT_REL);
    for a in poses {
        for t in tokens {
            al.extend(rel4(a, &t.pose));
        }
    }
    let mut aa = Vec::with_capacity(n * n * AGENT_REL);
    let mut mask = Vec::with_capacity(n * n);
    for a in poses {
        for (j, b) in poses.iter().enumerate() {
            aa.extend(rel4(a, b));
            mask.push(if valid[j] { 0.0 } else { MASK_FILL });
        }
    }
    Ok((
        Tensor::new(vec![n, m, AGENT_REL], al)?,
        Tensor::new(vec![n, n, AGENT_REL], aa)?,
        Tensor::new(vec![n, n], mask)?,
    ))
}

impl SceneEncoding {
    /// Same map tokens with agents moved to new poses (all valid).
    pub fn with_poses(&self, poses: Vec<AgentState>) -> Result<SceneEncoding> {
        let valid = vec![true; poses.len()];
        let (rel_al, rel_aa, mask) = agent_tables(&self.tokens, &poses, &valid)?;
        Ok(SceneEncoding {
            rel_al,
            rel_aa,
            mask,
            poses,
            valid,
            ..self.clone()
        })
    }
}

pub fn encode_scene(scenario: &Scenario, cfg: &DenoiserConfig) -> Result<SceneEncoding> {
    encode_scene_padded(scenario, cfg, 0)
}

// ---------- network ----------

/// Parameters bound onto a tape, as trainable leaves or constants.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &Params, trainable: bool) -> Self {
        let vars = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Leaf vars in parameter order.
    pub fn vars_in_order(&self, params: &Params) -> Vec<Var> {
        params.names().iter().map(|n| self.vars[n]).collect()
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DenoiserError::Checkpoint(format!("missing parameter '{name}'")))
    }
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// MiniPointNet: shared per-point MLP then max-pool over points.
/// `points` is `[M, P, 4]`; returns `[M, d]`.
pub fn point_net(tape: &mut Tape, p: &Bound, points: Var) -> Result<Var> {
    let h = linear(tape, p, "pn.l1", points)?;
    let h = tape.relu(h);
    let h = linear(tape, p, "pn.l2", h)?;
    Ok(tape.max_axis(h, 1)?)
}

/// Single-head attention with relative features added to keys and values:
/// `s_ij = q_i·(k_j + e_ij)/√d`, `out_i = Σ_j a_ij (v_j + e_ij)`, with
/// `e_ij = MLP(r_ij)`; then residual, layer norm and a feed-forward block.
fn rel_attention(
    tape: &mut Tape,
    p: &Bound,
    pre: &str,
    hq: Var,
    hk: Var,
    rel: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let w = |n: &str| p.get(&format!("{pre}.w{n}"));
    let q = tape.matmul(hq, w("q")?)?;
    let k = tape.matmul(hk, w("k")?)?;
    let v = tape.matmul(hk, w("v")?)?;
    let (n, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    let m = tape.shape(k)[0];
    let e = linear(tape, p, &format!("{pre}.rel1"), rel)?;
    let e = tape.relu(e);
    let e = linear(tape, p, &format!("{pre}.rel2"), e)?; // [n, m, d]
    let kt = tape.transpose(k)?;
    let s_content = tape.matmul(q, kt)?;
    let q3 = tape.reshape(q, &[n, d, 1])?;
    let s_rel = tape.matmul(e, q3)?;
    let s_rel = tape.reshape(s_rel, &[n, m])?;
    let s = tape.add(s_content, s_rel)?;
    let mut s = tape.scale(s, 1.0 / (d as f64).sqrt());
    if let Some(mk) = mask {
        s = tape.add(s, mk)?;
    }
    let a = tape.softmax(s)?;
    let av = tape.matmul(a, v)?;
    let a3 = tape.reshape(a, &[n, 1, m])?;
    let ae = tape.matmul(a3, e)?;
    let ae = tape.reshape(ae, &[n, d])?;
    let out = tape.add(av, ae)?;
    let out = tape.matmul(out, w("o")?)?;
    let h = tape.add(hq, out)?;
    let h = tape.layernorm(h)?;
    let f = linear(tape, p, &format!("{pre}.ff1"), h)?;
    let f = tape.relu(f);
    let f = linear(tape, p, &format!("{pre}.ff2"), f)?;
    let h = tape.add(h, f)?;
    Ok(tape.layernorm(h)?)
}

/// Map features after the point net (index 0) and after each block's
/// lane-lane layer (indices 1..=blocks).
pub fn lane_pass(tape: &mut Tape, p: &Bound, enc: &SceneEncoding, blocks: usize) -> Result<Vec<Var>> {
    let pts = tape.constant(enc.points.clone());
    let rel = tape.constant(enc.rel_ll.clone());
    let mut x = point_net(tape, p, pts)?;
    let mut out = vec![x];
    for b in 0..blocks {
        x = rel_attention(tape, p, &format!("b{b}.ll"), x, x, rel, None)?;
        out.push(x);
    }
    Ok(out)
}

/// Network output `F_θ` for `[N, k]` scaled inputs given per-block lane features.
fn agent_pass(
    tape: &mut Tape,
    p: &Bound,
    enc: &SceneEncoding,
    lanes: &[Var],
    x_in: Var,
    c_noise: f64,
) -> Result<Var> {
    let n = enc.agents();
    let feats = noise_features(c_noise);
    let nf = tape.constant(Tensor::new(
        vec![n, NOISE_FEATURES],
        (0..n).flat_map(|_| feats).collect(),
    )?);
    let inp = tape.concat(&[x_in, nf], 1)?;
    let h = linear(tape, p, "emb.l1", inp)?;
    let h = tape.relu(h);
    let mut h = linear(tape, p, "emb.l2", h)?;
    let rel_al = tape.constant(enc.rel_al.clone());
    let rel_aa = tape.constant(enc.rel_aa.clone());
    let mask = tape.constant(enc.mask.clone());
    for b in 0..lanes.len() - 1 {
        h = rel_attention(tape, p, &format!("b{b}.al"), h, lanes[b + 1], rel_al, None)?;
        h = rel_attention(tape, p, &format!("b{b}.aa"), h, h, rel_aa, Some(mask))?;
    }
    linear(tape, p, "head", h)
}

/// Preconditioned denoiser on a tape: `D = c_skip·x + c_out·F(c_in·x, c_noise)`.
/// `x` is `[N, k]`; `lanes` comes from [`lane_pass`] on the same tape.
pub fn denoise_on_tape(
    tape: &mut Tape,
    p: &Bound,
    enc: &SceneEncoding,
    lanes: &[Var],
    x: Var,
    sigma: f64,
    sigma_data: f64,
) -> Result<Var> {
    let c = precond(sigma, sigma_data);
    let x_in = tape.scale(x, c.c_in);
    let f = agent_pass(tape, p, enc, lanes, x_in, c.c_noise)?;
    let skip = tape.scale(x, c.c_skip);
    let out = tape.scale(f, c.c_out);
    Ok(tape.add(skip, out)?)
}

/// Trained denoiser: configuration, weights and the PCA basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Params,
    pub pca: PcaBasis,
}

/// Scene encoding with lane features precomputed for fixed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedScene {
    pub enc: SceneEncoding,
    pub lanes: Vec<Tensor>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, pca: PcaBasis, seed: u64) -> Self {
        let params = init_params(&config, seed);
        Self { config, params, pca }
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// Encode a scenario and run the static lane layers once.
    pub fn prepare(&self, scenario: &Scenario) -> Result<CachedScene> {
        self.prepare_encoding(encode_scene(scenario, &self.config)?)
    }

    /// Reuse cached lane features for agents at new poses.
    pub fn reposition(&self, scene: &CachedScene, poses: Vec<AgentState>) -> Result<CachedScene> {
        Ok(CachedScene {
            enc: scene.enc.with_poses(poses)?,
            lanes: scene.lanes.clone(),
        })
    }

    pub fn prepare_encoding(&self, enc: SceneEncoding) -> Result<CachedScene> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.params, false);
        let vars = lane_pass(&mut tape, &p, &enc, self.config.blocks)?;
        let lanes = vars.iter().map(|v| tape.value(*v).clone()).collect();
        Ok(CachedScene { enc, lanes })
    }

    fn check(&self, scene: &CachedScene, x: &[Vec<f64>], sigma: f64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DenoiserError::BadSigma(sigma));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DenoiserError::NonFinite);
        }
        if x.len() != scene.enc.agents() || x.iter().any(|r| r.len() != self.k()) {
            return Err(DenoiserError::Scenario(format!(
                "expected {} agents with {} coefficients",
                scene.enc.agents(),
                self.k()
            )));
        }
        Ok(())
    }

    fn bind_cached(&self, tape: &mut Tape, scene: &CachedScene) -> (Bound, Vec<Var>) {
        let p = Bound::new(tape, &self.params, false);
        let lanes = scene.lanes.iter().map(|t| tape.constant(t.clone())).collect();
        (p, lanes)
    }

    /// Denoised coefficients for every agent.
    pub fn denoise(&self, scene: &CachedScene, x: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
        self.check(scene, x, sigma)?;
        let mut tape = Tape::new();
        let (p, lanes) = self.bind_cached(&mut tape, scene);
        let xv = tape.constant(rows_to_tensor(x)?);
        let out = denoise_on_tape(&mut tape, &p, &scene.enc, &lanes, xv, sigma, self.config.sigma_data)?;
        Ok(tensor_to_rows(tape.value(out)))
    }

    /// Denoised coefficients and the vector-Jacobian product `Jᵀ·g` of the
    /// denoiser at `x`, where `g_fn` maps the output to `g`.
    pub fn denoise_vjp(
        &self,
        scene: &CachedScene,
        x: &[Vec<f64>],
        sigma: f64,
        g_fn: impl FnOnce(&[Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, String>,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check(scene, x, sigma)?;
        let mut tape = Tape::new();
        let (p, lanes) = self.bind_cached(&mut tape, scene);
        let xv = tape.leaf(rows_to_tensor(x)?);
        let out = denoise_on_tape(&mut tape, &p, &scene.enc, &lanes, xv, sigma, self.config.sigma_data)?;
        let d = tensor_to_rows(tape.value(out));
        let g = g_fn(&d).map_err(DenoiserError::Scenario)?;
        let gc = tape.constant(rows_to_tensor(&g)?);
        let prod = tape.mul(out, gc)?;
        let root = tape.sum(prod)?;
        let grads = tape.backward(root)?;
        let shape = tape.shape(xv).to_vec();
        Ok((d, tensor_to_rows(&grads.get_or_zeros(xv, &shape))))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        self.params.save(&dir.join("params.json"), &dir.join("params.bin"))?;
        self.pca.to_params().save(&dir.join("pca.json"), &dir.join("pca.bin"))?;
        Ok(())
    }

    /// Files a checkpoint directory must contain.
    pub const FILES: [&'static str; 5] = ["config.json", "params.json", "params.bin", "pca.json", "pca.bin"];

    pub fn load(dir: &Path) -> Result<Self> {
        for f in Self::FILES {
            if !dir.join(f).is_file() {
                return Err(DenoiserError::Checkpoint(format!(
                    "{} is missing {f}",
                    dir.display()
                )));
            }
        }
        let config: DenoiserConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let params = Params::load(&dir.join("params.json"), &dir.join("params.bin"))?;
        let pca = PcaBasis::from_params(&Params::load(&dir.join("pca.json"), &dir.join("pca.bin"))?)?;
        if pca.k() != config.k {
            return Err(DenoiserError::Checkpoint(format!(
                "pca has {} components, config says {}",
                pca.k(),
                config.k
            )));
        }
        if !params.is_finite() {
            return Err(DenoiserError::Checkpoint("non-finite weights".into()));
        }
        Ok(Self { config, params, pca })
    }
}

pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    Ok(Tensor::new(vec![rows.len(), cols], rows.iter().flatten().copied().collect())?)
}

pub fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data().chunks(cols.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scenario, DatasetSpec};

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            hidden: 8,
            k: 4,
            max_map_tokens: 6,
            rel_hidden: 4,
            blocks: 2,
            sigma_data: 2.0,
            ..DenoiserConfig::default()
        }
    }

    fn random_params(cfg: &DenoiserConfig, seed: u64) -> Params {
        // non-zero head so the network output matters
        let mut p = init_params(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        p.insert("head.w", glorot(&mut rng, cfg.hidden, cfg.k));
        p
    }

    fn identity_pca(k: usize) -> PcaBasis {
        PcaBasis {
            mean: vec![0.0; WINDOW_DIM],
            components: (0..k)
                .map(|i| (0..WINDOW_DIM).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            eigenvalues: vec![1.0; k],
        }
    }

    fn scene(seed: u64) -> Scenario {
        gen_scenario(&DatasetSpec::default(), seed).unwrap()
    }

    #[test]
    fn pca_identical_samples() {
        let s = vec![vec![1.0, 2.0, 3.0]; 5];
        let p = fit_pca(&s, 2).unwrap();
        assert_eq!(p.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(p.decode(&p.encode(&s[0])), s[0]);
    }

    #[test]
    fn pca_rank_two_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let samples: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                (0..10).map(|i| 1.0 + a * u[i] + b * v[i]).collect()
            })
            .collect();
        let p = fit_pca(&samples, 2).unwrap();
        assert!(p.orthonormality_error() < 1e-6);
        for s in &samples {
            let r = p.decode(&p.encode(s));
            assert!(r.iter().zip(s).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }

    #[test]
    fn pca_truncation_error_matches_discarded_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|i| rng.gen_range(-1.0..1.0) * (i + 1) as f64).collect())
            .collect();
        let full = fit_pca(&samples, 8).unwrap();
        let p = fit_pca(&samples, 3).unwrap();
        let mse: f64 = samples
            .iter()
            .map(|s| p.decode(&p.encode(s)).iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / samples.len() as f64;
        let discarded: f64 = full.eigenvalues[3..].iter().sum();
        assert!((mse - discarded).abs() < 1e-6, "{mse} vs {discarded}");
        // independent oracle: singular values of the centered data matrix
        let n = samples.len();
        let m = DMatrix::from_fn(n, 8, |i, j| samples[i][j] - full.mean[j]);
        let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().map(|s| s * s / n as f64).collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in sv.iter().zip(&full.eigenvalues) {
            assert!((a - b).abs() < 1e-8 * a.max(1.0));
        }
        assert!(fit_pca(&samples, 9).is_err());
    }

    #[test]
    fn point_net_is_permutation_invariant() {
        let cfg = small_cfg();
        let params = random_params(&cfg, 3);
        let pts: Vec<f64> = (0..8 * 4).map(|i| ((i * 7 % 11) as f64) * 0.1).collect();
        let mut perm = Vec::new();
        for r in [5, 2, 7, 0, 1, 6, 3, 4] {
            perm.extend_from_slice(&pts[r * 4..r * 4 + 4]);
        }
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &params, false);
            let x = tape.constant(Tensor::new(vec![1, 8, 4], data).unwrap());
            let y = point_net(&mut tape, &p, x).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(pts), run(perm));
    }

    #[test]
    fn encoding_is_translation_and_rotation_invariant() {
        let cfg = small_cfg();
        let s = scene(3);
        let a = encode_scene(&s, &cfg).unwrap();
        let b = encode_scene(&s.transformed(0.7, 120.0, -40.0), &cfg).unwrap();
        for (x, y) in [(&a.rel_ll, &b.rel_ll), (&a.rel_al, &b.rel_al), (&a.rel_aa, &b.rel_aa), (&a.points, &b.points)] {
            assert!(x.data().iter().zip(y.data()).all(|(u, v)| (u - v).abs() < 1e-9));
        }
    }

    #[test]
    fn duplicate_roads_get_identical_features() {
        let cfg = small_cfg();
        let s = scene(5);
        let mut two = s.clone();
        let offset = 10_000.0;
        for p in &s.polylines {
            let mut q = p.clone();
            q.id += 1000;
            q.points.iter_mut().for_each(|pt| pt[1] += offset);
            two.polylines.push(q);
        }
        let params = random_params(&cfg, 1);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &params, false);
        let enc = encode_scene_padded(&two, &DenoiserConfig { max_map_tokens: 1000, ..cfg.clone() }, 0).unwrap();
        let x = tape.constant(enc.points.clone());
        let y = point_net(&mut tape, &p, x).unwrap();
        let rows = tensor_to_rows(tape.value(y));
        let m = enc.tokens.len() / 2;
        for i in 0..m {
            assert_eq!(enc.tokens[i].lane + 1000, enc.tokens[i + m].lane);
            assert!(rows[i].iter().zip(&rows[i + m]).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn denoiser_limits_and_invariance() {
        let cfg = small_cfg();
        let s = scene(7);
        let den = Denoiser {
            params: random_params(&cfg, 2),
            pca: identity_pca(cfg.k),
            config: cfg.clone(),
        };
        let n = s.agents.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..cfg.k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let c = den.prepare(&s).unwrap();
        let small = den.denoise(&c, &x, 1e-4).unwrap();
        for (a, b) in small.iter().flatten().zip(x.iter().flatten()) {
            assert!((a - b).abs() < 1e-3);
        }
        let out = den.denoise(&c, &x, 1.3).unwrap();
        let c2 = den.prepare(&s.transformed(-2.1, 55.0, 300.0)).unwrap();
        let out2 = den.denoise(&c2, &x, 1.3).unwrap();
        for (a, b) in out.iter().flatten().zip(out2.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(den.denoise(&c, &x, 0.0).is_err());
        let mut bad = x.clone();
        bad[0][0] = f64::NAN;
        assert!(matches!(den.denoise(&c, &bad, 1.0), Err(DenoiserError::NonFinite)));
    }

    #[test]
    fn padding_does_not_change_real_agents() {
        let cfg = small_cfg();
        let mut s = scene(11);
        s.agents.truncate(1);
        let den = Denoiser {
            params: random_params(&cfg, 4),
            pca: identity_pca(cfg.k),
            config: cfg.clone(),
        };
        let x = vec![vec![0.3, -1.0, 2.0, 0.5]];
        let one = den.denoise(&den.prepare(&s).unwrap(), &x, 0.8).unwrap();
        let padded_enc = encode_scene_padded(&s, &cfg, 3).unwrap();
        let padded = den.prepare_encoding(padded_enc).unwrap();
        let mut xp = x.clone();
        xp.extend(vec![vec![5.0, 5.0, -5.0, 1.0]; 3]);
        let out = den.denoise(&padded, &xp, 0.8).unwrap();
        for (a, b) in one[0].iter().zip(&out[0]) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_with_mask() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.2, 0.3]).unwrap());
        let m = tape.constant(Tensor::new(vec![2, 3], vec![0.0, 0.0, MASK_FILL, 0.0, 0.0, MASK_FILL]).unwrap());
        let z = tape.add(s, m).unwrap();
        let a = tape.softmax(z).unwrap();
        for row in tape.value(a).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn encoding_ignores_future_states() {
        let cfg = small_cfg();
        let s = scene(13);
        let mut moved = s.clone();
        for a in &mut moved.agents {
            for st in &mut a.states[s.t_now + 1..] {
                st.x += 30.0;
            }
        }
        let den = Denoiser {
            params: random_params(&cfg, 5),
            pca: identity_pca(cfg.k),
            config: cfg,
        };
        assert_eq!(den.prepare(&s).unwrap(), den.prepare(&moved).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = small_cfg();
        let den = Denoiser {
            params: random_params(&cfg, 6),
            pca: identity_pca(cfg.k),
            config: cfg,
        };
        let dir = tempfile::tempdir().unwrap();
        den.save(dir.path()).unwrap();
        assert_eq!(Denoiser::load(dir.path()).unwrap(), den);
        std::fs::remove_file(dir.path().join("pca.bin")).unwrap();
        assert!(Denoiser::load(dir.path()).is_err());
    }

    #[test]
    fn window_roundtrip() {
        let s = scene(2);
        let w = agent_window(&s, 0).unwrap();
        assert_eq!(w.len(), WINDOW_DIM);
        assert!(w[2 * (T_HIST - 1)].abs() < 1e-9 && w[2 * (T_HIST - 1) + 1].abs() < 1e-9);
        let pose = s.current_state(0).unwrap();
        let back = window_to_world(&pose, &w);
        let orig = &s.agents[0].states[s.t_now + 1 - T_HIST..];
        for (p, q) in back.iter().zip(orig) {
            assert!((p[0] - q.x).abs() < 1e-9 && (p[1] - q.y).abs() < 1e-9);
        }
    }
}
