//! EDM noise schedule, denoiser training, the Heun ODE sampler with clamped
//! cost guidance, and closed-loop replanning.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::costdsl::{self, CostError, EvalContext, Program};
use crate::denoiser::{
    agent_window, denoise_on_tape, encode_scene, fit_pca, lane_pass, precond, rows_to_tensor, window_to_world,
    Bound, CachedScene, Denoiser, DenoiserConfig, DenoiserError, Params, PcaBasis, SceneEncoding,
};
use crate::grad::{Tape, Tensor};
use crate::scene::{AgentState, AgentTrack, Scenario, T_FUTURE, T_HIST};

/// Largest magnitude a guidance component may take after clamping.
pub const CLAMP_BOUND: f64 = 1.0 - 1e-9;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad schedule: {0}")]
    Schedule(String),
    #[error("bad guidance config: {0}")]
    Guidance(String),
    #[error("cost term '{term}': {msg}")]
    CostTerm { term: String, msg: String },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Grad(#[from] crate::grad::GradError),
    #[error("training diverged at step {step}: loss {loss} ({detail})")]
    Diverged { step: usize, loss: f64, detail: String },
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Coefficients per agent, `[N][k]`.
pub type Coeffs = Vec<Vec<f64>>;

// ---------- schedule ----------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps: 32,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64, steps: usize) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            rho,
            steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(DiffusionError::Schedule(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.steps == 0 {
            return Err(DiffusionError::Schedule("steps must be at least 1".into()));
        }
        if !(self.rho > 0.0) {
            return Err(DiffusionError::Schedule(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// EDM's defaults (σ ∈ [0.002, 80] for σ_data = 0.5) rescaled to `sigma_data`.
    pub fn for_data(sigma_data: f64, steps: usize) -> Self {
        let k = sigma_data / 0.5;
        Self {
            sigma_min: 0.002 * k,
            sigma_max: 80.0 * k,
            rho: 7.0,
            steps,
        }
    }

    /// `steps + 1` noise levels from `sigma_max` down to `sigma_min`, then 0.
    pub fn sigmas(&self) -> Vec<f64> {
        let n = self.steps;
        let (a, b) = (self.sigma_max.powf(1.0 / self.rho), self.sigma_min.powf(1.0 / self.rho));
        let mut out: Vec<f64> = (0..n)
            .map(|i| {
                let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                (a + f * (b - a)).powf(self.rho)
            })
            .collect();
        out.push(0.0);
        out
    }
}

// ---------- models ----------

/// Anything that denoises `[N][k]` coefficients at a noise level.
pub trait Model {
    /// `(agents, k)`.
    fn shape(&self) -> (usize, usize);
    fn sigma_data(&self) -> f64;
    fn c_skip(&self, sigma: f64) -> f64 {
        precond(sigma, self.sigma_data()).c_skip
    }
    fn denoise(&self, x: &[Vec<f64>], sigma: f64) -> Result<Coeffs>;
    /// Denoised output `D` and `Jᵀ·g(D)`, with `J = ∂D/∂x`.
    fn denoise_vjp(&self, x: &[Vec<f64>], sigma: f64, g: &mut dyn FnMut(&[Vec<f64>]) -> Result<Coeffs>)
        -> Result<(Coeffs, Coeffs)>;
}

/// The learned denoiser bound to one encoded scene.
pub struct SceneModel<'a> {
    pub denoiser: &'a Denoiser,
    pub scene: &'a CachedScene,
}

impl Model for SceneModel<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.scene.enc.agents(), self.denoiser.k())
    }

    fn sigma_data(&self) -> f64 {
        self.denoiser.config.sigma_data
    }

    fn denoise(&self, x: &[Vec<f64>], sigma: f64) -> Result<Coeffs> {
        Ok(self.denoiser.denoise(self.scene, x, sigma)?)
    }

    fn denoise_vjp(
        &self,
        x: &[Vec<f64>],
        sigma: f64,
        g: &mut dyn FnMut(&[Vec<f64>]) -> Result<Coeffs>,
    ) -> Result<(Coeffs, Coeffs)> {
        let mut failure = None;
        let out = self.denoiser.denoise_vjp(self.scene, x, sigma, |d| {
            g(d).map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                msg
            })
        });
        match (out, failure) {
            (_, Some(e)) => Err(e),
            (r, None) => Ok(r?),
        }
    }
}

/// Exact denoiser for data distributed as `N(μ, s²I)`:
/// `D(x; σ) = (s²x + σ²μ)/(s² + σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Coeffs,
    pub std: f64,
}

impl GaussianOracle {
    /// Analytic score of the data convolved with `N(0, σ²I)`.
    pub fn score(&self, x: &[Vec<f64>], sigma: f64) -> Coeffs {
        let v = self.std * self.std + sigma * sigma;
        x.iter()
            .zip(&self.mean)
            .map(|(r, m)| r.iter().zip(m).map(|(x, m)| (m - x) / v).collect())
            .collect()
    }
}

impl Model for GaussianOracle {
    fn shape(&self) -> (usize, usize) {
        (self.mean.len(), self.mean.first().map_or(0, |r| r.len()))
    }

    fn sigma_data(&self) -> f64 {
        self.std
    }

    fn denoise(&self, x: &[Vec<f64>], sigma: f64) -> Result<Coeffs> {
        let (s2, v2) = (self.std * self.std, sigma * sigma);
        Ok(x.iter()
            .zip(&self.mean)
            .map(|(r, m)| r.iter().zip(m).map(|(x, m)| (s2 * x + v2 * m) / (s2 + v2)).collect())
            .collect())
    }

    fn denoise_vjp(
        &self,
        x: &[Vec<f64>],
        sigma: f64,
        g: &mut dyn FnMut(&[Vec<f64>]) -> Result<Coeffs>,
    ) -> Result<(Coeffs, Coeffs)> {
        let d = self.denoise(x, sigma)?;
        let j = self.c_skip(sigma);
        let gd = g(&d)?;
        let vjp = gd.iter().map(|r| r.iter().map(|v| v * j).collect()).collect();
        Ok((d, vjp))
    }
}

pub fn score_from_denoiser(x: &[Vec<f64>], x_hat: &[Vec<f64>], sigma: f64) -> Coeffs {
    let inv = 1.0 / (sigma * sigma);
    x.iter()
        .zip(x_hat)
        .map(|(r, h)| r.iter().zip(h).map(|(x, h)| (h - x) * inv).collect())
        .collect()
}

// ---------- guidance ----------

/// A differentiable cost over clean coefficients.
pub trait Objective {
    fn value_grad(&self, x_hat: &[Vec<f64>]) -> Result<(f64, Coeffs)>;

    /// Gradient of the quadratic terms at `x_hat` and their constant
    /// per-agent Hessians, if the objective has any.
    fn quadratic_part(&self, _x_hat: &[Vec<f64>]) -> Result<Option<(Coeffs, Vec<DMatrix<f64>>)>> {
        Ok(None)
    }

    /// Called with each denoised estimate the guidance was computed at.
    fn record(&self, _x_hat: &[Vec<f64>]) {}
}

/// `weight·‖x − target‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub target: Coeffs,
    pub weight: f64,
}

impl Objective for Quadratic {
    fn value_grad(&self, x: &[Vec<f64>]) -> Result<(f64, Coeffs)> {
        let mut v = 0.0;
        let g = x
            .iter()
            .zip(&self.target)
            .map(|(r, t)| {
                r.iter()
                    .zip(t)
                    .map(|(x, t)| {
                        v += self.weight * (x - t) * (x - t);
                        2.0 * self.weight * (x - t)
                    })
                    .collect()
            })
            .collect();
        Ok((v, g))
    }

    fn quadratic_part(&self, x: &[Vec<f64>]) -> Result<Option<(Coeffs, Vec<DMatrix<f64>>)>> {
        let (_, g) = self.value_grad(x)?;
        let h = x
            .iter()
            .map(|r| DMatrix::identity(r.len(), r.len()) * (2.0 * self.weight))
            .collect();
        Ok(Some((g, h)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceMode {
    /// Gradient taken at the denoised output and scaled by `c_skip`.
    #[default]
    CleanSpace,
    /// Gradient backpropagated through the denoiser.
    ThroughDenoiser,
}

impl std::str::FromStr for GuidanceMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clean_space" => Ok(Self::CleanSpace),
            "through_denoiser" => Ok(Self::ThroughDenoiser),
            _ => Err(format!("unknown guidance mode '{s}' (clean_space, through_denoiser)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub mode: GuidanceMode,
    /// Proximal iterations per clean-space guidance evaluation.
    pub prox_iters: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            mode: GuidanceMode::CleanSpace,
            prox_iters: 8,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DiffusionError::Guidance(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

pub struct Guidance<'a> {
    pub config: GuidanceConfig,
    pub objective: &'a dyn Objective,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleStats {
    pub denoiser_calls: usize,
    pub guidance_evals: usize,
    /// Added guidance components outside (−1, 1); always zero.
    pub clamp_violations: usize,
    pub max_abs_guidance: f64,
}

impl SampleStats {
    pub fn merge(&mut self, o: &SampleStats) {
        self.denoiser_calls += o.denoiser_calls;
        self.guidance_evals += o.guidance_evals;
        self.clamp_violations += o.clamp_violations;
        self.max_abs_guidance = self.max_abs_guidance.max(o.max_abs_guidance);
    }
}

/// Unguided score, the clamped guidance term and the denoised output at `x`.
pub fn guided_score(
    model: &dyn Model,
    x: &[Vec<f64>],
    sigma: f64,
    guidance: Option<&Guidance>,
    stats: &mut SampleStats,
) -> Result<(Coeffs, Option<Coeffs>, Coeffs)> {
    stats.denoiser_calls += 1;
    let Some(gd) = guidance.filter(|g| g.config.lambda > 0.0) else {
        let d = model.denoise(x, sigma)?;
        return Ok((score_from_denoiser(x, &d, sigma), None, d));
    };
    stats.guidance_evals += 1;
    let lambda = gd.config.lambda;
    let (d, raw) = match gd.config.mode {
        GuidanceMode::CleanSpace => {
            let d = model.denoise(x, sigma)?;
            let sd2 = model.sigma_data().powi(2);
            let v = sigma * sigma * sd2 / (sigma * sigma + sd2);
            let z = proximal_target(gd.objective, &d, lambda * v, gd.config.prox_iters)?;
            // shift of the tilted posterior mean, expressed as a score term
            let raw: Coeffs = d
                .iter()
                .zip(&z)
                .map(|(dr, zr)| dr.iter().zip(zr).map(|(d, z)| (d - z) / (lambda * sigma * sigma)).collect())
                .collect();
            (d, raw)
        }
        GuidanceMode::ThroughDenoiser => {
            let mut f = |d: &[Vec<f64>]| gd.objective.value_grad(d).map(|(_, g)| g);
            model.denoise_vjp(x, sigma, &mut f)?
        }
    };
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DiffusionError::CostTerm {
            term: "guidance".into(),
            msg: "non-finite gradient".into(),
        });
    }
    let g: Coeffs = raw
        .iter()
        .map(|r| r.iter().map(|v| (-lambda * v).clamp(-CLAMP_BOUND, CLAMP_BOUND)).collect())
        .collect();
    for v in g.iter().flatten() {
        if v.abs() >= 1.0 {
            stats.clamp_violations += 1;
        }
        stats.max_abs_guidance = stats.max_abs_guidance.max(v.abs());
    }
    assert_eq!(stats.clamp_violations, 0, "guidance escaped the (-1, 1) clamp");
    gd.objective.record(&d);
    Ok((score_from_denoiser(x, &d, sigma), Some(g), d))
}

/// Approximate minimizer of `‖z − d‖²/(2t) + L(z)` starting from `d`.
///
/// Quadratic terms are handled exactly through their Hessians, the rest is
/// linearized at the current iterate, with a Levenberg damping that backs off
/// on steps that do not decrease the objective. One accepted step without
/// damping is the linearized update `z = d − t(I + tH)⁻¹∇L(d)`.
pub fn proximal_target(objective: &dyn Objective, d: &[Vec<f64>], t: f64, iters: usize) -> Result<Coeffs> {
    let energy = |z: &[Vec<f64>], l: f64| -> f64 {
        let dist: f64 = z
            .iter()
            .zip(d)
            .flat_map(|(zr, dr)| zr.iter().zip(dr).map(|(a, b)| (a - b) * (a - b)))
            .sum();
        dist / (2.0 * t) + l
    };
    let mut z: Coeffs = d.to_vec();
    let (l, mut grad) = objective.value_grad(&z)?;
    let mut e = energy(&z, l);
    let mut mu = 0.0;
    for _ in 0..iters {
        let quad = objective.quadratic_part(&z)?;
        let mut cand = Vec::with_capacity(z.len());
        for (i, zi) in z.iter().enumerate() {
            let n = zi.len();
            let h = match &quad {
                Some((_, hs)) => hs[i].clone(),
                None => DMatrix::zeros(n, n),
            };
            // solve (I/t + H + μI)·step = −(z − d)/t − ∇L(z)
            let a = DMatrix::identity(n, n) * (1.0 / t + mu) + &h;
            let rhs = DVector::from_iterator(n, (0..n).map(|j| -(zi[j] - d[i][j]) / t - grad[i][j]));
            let step = a
                .cholesky()
                .map(|c| c.solve(&rhs))
                .ok_or_else(|| DiffusionError::Guidance("quadratic Hessian not positive semidefinite".into()))?;
            cand.push(zi.iter().zip(step.iter()).map(|(z, s)| z + s).collect::<Vec<f64>>());
        }
        let (lc, gc) = objective.value_grad(&cand)?;
        let ec = energy(&cand, lc);
        if ec.is_finite() && ec <= e {
            z = cand;
            (grad, e) = (gc, ec);
            mu = if mu * t < 1e-3 { 0.0 } else { mu / 4.0 };
        } else {
            mu = if mu == 0.0 { 1.0 / t } else { mu * 4.0 };
        }
    }
    Ok(z)
}

fn derivative(
    model: &dyn Model,
    x: &[Vec<f64>],
    sigma: f64,
    guidance: Option<&Guidance>,
    stats: &mut SampleStats,
) -> Result<Coeffs> {
    let (score, g, _) = guided_score(model, x, sigma, guidance, stats)?;
    Ok(match g {
        None => score.iter().map(|r| r.iter().map(|s| -sigma * s).collect()).collect(),
        Some(g) => score
            .iter()
            .zip(&g)
            .map(|(r, gr)| r.iter().zip(gr).map(|(s, g)| -sigma * (s + g)).collect())
            .collect(),
    })
}

/// Initial noise `σ_max·ε` for a model shape.
pub fn initial_noise(shape: (usize, usize), sigma_max: f64, seed: u64) -> Coeffs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.0)
        .map(|_| (0..shape.1).map(|_| sigma_max * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Integrate the probability-flow ODE from `x` at `sigma_max` to zero with Heun steps.
pub fn sample_from(
    model: &dyn Model,
    schedule: &NoiseSchedule,
    mut x: Coeffs,
    guidance: Option<&Guidance>,
) -> Result<(Coeffs, SampleStats)> {
    schedule.validate()?;
    if let Some(g) = guidance {
        g.config.validate()?;
    }
    let mut stats = SampleStats::default();
    let sig = schedule.sigmas();
    for w in sig.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let d0 = derivative(model, &x, t0, guidance, &mut stats)?;
        let euler: Coeffs = axpy(&x, h, &d0);
        x = if t1 > 0.0 {
            let d1 = derivative(model, &euler, t1, guidance, &mut stats)?;
            x.iter()
                .zip(&d0)
                .zip(&d1)
                .map(|((r, a), b)| {
                    r.iter()
                        .zip(a)
                        .zip(b)
                        .map(|((x, a), b)| x + h * (0.5 * a + 0.5 * b))
                        .collect()
                })
                .collect()
        } else {
            euler
        };
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DiffusionError::Input("sampler produced non-finite values".into()));
    }
    Ok((x, stats))
}

fn axpy(x: &[Vec<f64>], h: f64, d: &[Vec<f64>]) -> Coeffs {
    x.iter()
        .zip(d)
        .map(|(r, dr)| r.iter().zip(dr).map(|(x, d)| x + h * d).collect())
        .collect()
}

pub fn sample(
    model: &dyn Model,
    schedule: &NoiseSchedule,
    seed: u64,
    guidance: Option<&Guidance>,
) -> Result<(Coeffs, SampleStats)> {
    schedule.validate()?;
    let x = initial_noise(model.shape(), schedule.sigma_max, seed);
    sample_from(model, schedule, x, guidance)
}

// ---------- known states ----------

/// Squared-distance condition on window positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownStatesCondition {
    pub timesteps: Vec<usize>,
    pub targets: Vec<[f64; 2]>,
    pub weight: f64,
}

impl KnownStatesCondition {
    pub fn new(timesteps: Vec<usize>, targets: Vec<[f64; 2]>, weight: f64) -> Result<Self> {
        if timesteps.len() != targets.len() {
            return Err(DiffusionError::Input("timesteps and targets differ in length".into()));
        }
        if !(weight >= 0.0) {
            return Err(DiffusionError::Input(format!("negative weight {weight}")));
        }
        Ok(Self {
            timesteps,
            targets,
            weight,
        })
    }

    fn check(&self, len: usize) -> Result<()> {
        match self.timesteps.iter().find(|&&t| t >= len) {
            Some(t) => Err(DiffusionError::Input(format!("known state at step {t} beyond horizon {len}"))),
            None => Ok(()),
        }
    }
}

pub fn known_states_cost(y: &[[f64; 2]], c: &KnownStatesCondition) -> Result<f64> {
    c.check(y.len())?;
    Ok(c.weight
        * c.timesteps
            .iter()
            .zip(&c.targets)
            .map(|(&t, p)| (y[t][0] - p[0]).powi(2) + (y[t][1] - p[1]).powi(2))
            .sum::<f64>())
}

pub fn known_states_grad(y: &[[f64; 2]], c: &KnownStatesCondition) -> Result<Vec<[f64; 2]>> {
    c.check(y.len())?;
    let mut g = vec![[0.0; 2]; y.len()];
    for (&t, p) in c.timesteps.iter().zip(&c.targets) {
        g[t][0] += 2.0 * c.weight * (y[t][0] - p[0]);
        g[t][1] += 2.0 * c.weight * (y[t][1] - p[1]);
    }
    Ok(g)
}

// ---------- scene objective ----------

/// Guidance cost for a scene: known-state conditions in each agent's window
/// frame plus an optional cost program over world-frame futures.
pub struct SceneObjective<'a> {
    pub pca: &'a PcaBasis,
    pub poses: Vec<AgentState>,
    pub known: Vec<Vec<KnownStatesCondition>>,
    pub program: Option<(&'a Program, EvalContext)>,
    /// Per-term program values at every evaluation, in call order.
    pub term_log: RefCell<Vec<Vec<(String, f64)>>>,
}

impl<'a> SceneObjective<'a> {
    pub fn new(pca: &'a PcaBasis, poses: Vec<AgentState>) -> Self {
        let known = vec![Vec::new(); poses.len()];
        Self {
            pca,
            poses,
            known,
            program: None,
            term_log: RefCell::new(Vec::new()),
        }
    }

    /// Pin each agent's window history to `history[i]` (world positions,
    /// oldest first, ending at the current state).
    pub fn with_history(mut self, history: &[Vec<[f64; 2]>], weight: f64) -> Result<Self> {
        for (i, h) in history.iter().enumerate() {
            if h.len() != T_HIST {
                return Err(DiffusionError::Input(format!("agent {i}: need {T_HIST} history states")));
            }
            let pose = self.poses[i];
            let targets = h.iter().map(|p| pose.to_local(*p)).collect();
            self.known[i].push(KnownStatesCondition::new((0..T_HIST).collect(), targets, weight)?);
        }
        Ok(self)
    }

    /// Pin agent `i` to world point `p` at window index `index`.
    pub fn with_waypoint(mut self, i: usize, index: usize, p: [f64; 2], weight: f64) -> Result<Self> {
        let pose = *self
            .poses
            .get(i)
            .ok_or_else(|| DiffusionError::Input(format!("no agent {i}")))?;
        self.known[i].push(KnownStatesCondition::new(vec![index], vec![pose.to_local(p)], weight)?);
        Ok(self)
    }

    pub fn with_program(mut self, program: &'a Program, scenario: &Scenario) -> Result<Self> {
        let ctx = EvalContext {
            trajectories: Vec::new(),
            refpaths: costdsl::resolve_refpaths(program, scenario)?,
            dt: scenario.dt,
        };
        program.validate(self.poses.len())?;
        self.program = Some((program, ctx));
        Ok(self)
    }

    /// Decoded windows in each agent's frame.
    pub fn local_windows(&self, coeffs: &[Vec<f64>]) -> Vec<Vec<[f64; 2]>> {
        coeffs
            .iter()
            .map(|c| self.pca.decode(c).chunks(2).map(|p| [p[0], p[1]]).collect())
            .collect()
    }

    pub fn world_windows(&self, coeffs: &[Vec<f64>]) -> Vec<Vec<[f64; 2]>> {
        coeffs
            .iter()
            .zip(&self.poses)
            .map(|(c, pose)| window_to_world(pose, &self.pca.decode(c)))
            .collect()
    }
}

impl SceneObjective<'_> {
    fn known_value_grad(&self, local: &[Vec<[f64; 2]>]) -> Result<(f64, Vec<Vec<[f64; 2]>>)> {
        let mut total = 0.0;
        let mut grads: Vec<Vec<[f64; 2]>> = local.iter().map(|w| vec![[0.0; 2]; w.len()]).collect();
        for (i, conds) in self.known.iter().enumerate() {
            for c in conds {
                total += known_states_cost(&local[i], c)?;
                for (g, d) in grads[i].iter_mut().zip(known_states_grad(&local[i], c)?) {
                    g[0] += d[0];
                    g[1] += d[1];
                }
            }
        }
        Ok((total, grads))
    }

    fn pull(&self, grads: &[Vec<[f64; 2]>]) -> Coeffs {
        grads
            .iter()
            .map(|g| {
                let flat: Vec<f64> = g.iter().flatten().copied().collect();
                self.pca.pullback(&flat)
            })
            .collect()
    }
}

impl Objective for SceneObjective<'_> {
    fn record(&self, coeffs: &[Vec<f64>]) {
        let Some((program, base)) = &self.program else { return };
        let ctx = EvalContext {
            trajectories: self.world_windows(coeffs).iter().map(|w| w[T_HIST - 1..].to_vec()).collect(),
            refpaths: base.refpaths.clone(),
            dt: base.dt,
        };
        if let Ok(v) = costdsl::evaluate(program, &ctx) {
            self.term_log.borrow_mut().push(v.terms);
        }
    }

    fn value_grad(&self, coeffs: &[Vec<f64>]) -> Result<(f64, Coeffs)> {
        let local = self.local_windows(coeffs);
        let (mut total, mut grads) = self.known_value_grad(&local)?;
        if let Some((program, base)) = &self.program {
            let world = self.world_windows(coeffs);
            let ctx = EvalContext {
                trajectories: world.iter().map(|w| w[T_HIST - 1..].to_vec()).collect(),
                refpaths: base.refpaths.clone(),
                dt: base.dt,
            };
            let (value, wg) = costdsl::gradient(program, &ctx)?;
            if let Some((name, v)) = value.terms.iter().find(|(_, v)| !v.is_finite()) {
                return Err(DiffusionError::CostTerm {
                    term: name.clone(),
                    msg: format!("evaluated to {v}"),
                });
            }
            total += value.total;
            for (i, ag) in wg.iter().enumerate() {
                let (s, c) = self.poses[i].heading.sin_cos();
                for (k, g) in ag.iter().enumerate() {
                    // world gradient rotated into the agent frame
                    let dst = &mut grads[i][T_HIST - 1 + k];
                    dst[0] += c * g[0] + s * g[1];
                    dst[1] += -s * g[0] + c * g[1];
                }
            }
        }
        Ok((total, self.pull(&grads)))
    }

    fn quadratic_part(&self, coeffs: &[Vec<f64>]) -> Result<Option<(Coeffs, Vec<DMatrix<f64>>)>> {
        if self.known.iter().all(|k| k.is_empty()) {
            return Ok(None);
        }
        let (_, grads) = self.known_value_grad(&self.local_windows(coeffs))?;
        let scales = self.pca.scales();
        let k = self.pca.k();
        let hs = self
            .known
            .iter()
            .map(|conds| {
                let mut h = DMatrix::zeros(k, k);
                for c in conds {
                    for &t in &c.timesteps {
                        for r in [2 * t, 2 * t + 1] {
                            let j = DVector::from_iterator(
                                k,
                                self.pca.components.iter().zip(&scales).map(|(comp, s)| s * comp[r]),
                            );
                            h += &j * j.transpose() * (2.0 * c.weight);
                        }
                    }
                }
                h
            })
            .collect();
        Ok(Some((self.pull(&grads), hs)))
    }
}

// ---------- simulation ----------

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub steps: usize,
    /// Explicit noise levels; by default EDM's schedule scaled to the model's `σ_data`.
    pub schedule: Option<NoiseSchedule>,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Weight of the history condition; zero disables it.
    pub history_weight: f64,
    /// World-frame endpoint per agent (`None` leaves the agent free).
    pub endpoints: Vec<Option<[f64; 2]>>,
    pub endpoint_weight: f64,
    /// Steps executed between replans; `T_FUTURE` or more plans once.
    pub replan_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            schedule: None,
            guidance: GuidanceConfig::default(),
            seed: 0,
            history_weight: 1.0,
            endpoints: Vec::new(),
            endpoint_weight: 1.0,
            replan_every: T_FUTURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutReport {
    pub plans: usize,
    /// Distance between each plan's current-time position and the executed state.
    pub splice_errors: Vec<f64>,
    pub stats: SampleStats,
    /// Program term values on the denoised estimate, one entry per sampler step.
    pub term_trace: Vec<Vec<(String, f64)>>,
}

fn heading_between(a: [f64; 2], b: [f64; 2], fallback: f64) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    if dx.hypot(dy) < 1e-3 {
        fallback
    } else {
        dy.atan2(dx)
    }
}

/// Sample futures for every agent, replanning every `replan_every` steps.
/// History comes from `scenario` up to `t_now`; the result has `T_FUTURE`
/// sampled states after it.
pub fn simulate(
    den: &Denoiser,
    scenario: &Scenario,
    program: Option<&Program>,
    cfg: &SimConfig,
) -> Result<(Scenario, RolloutReport)> {
    let schedule = cfg
        .schedule
        .unwrap_or_else(|| NoiseSchedule::for_data(den.config.sigma_data, cfg.steps));
    schedule.validate()?;
    cfg.guidance.validate()?;
    let n = scenario.agents.len();
    if n > den.config.max_agents {
        return Err(DiffusionError::Input(format!(
            "{n} agents exceed the model's limit of {}",
            den.config.max_agents
        )));
    }
    let t0 = scenario.t_now;
    if t0 + 1 < T_HIST {
        return Err(DiffusionError::Input(format!("t_now = {t0} leaves less than {T_HIST} history states")));
    }
    if cfg.replan_every == 0 {
        return Err(DiffusionError::Input("replan interval must be positive".into()));
    }
    if let Some(p) = program {
        p.validate(n)?;
    }
    let cached = den.prepare(scenario)?;
    let mut exec: Vec<Vec<AgentState>> = scenario.agents.iter().map(|a| a.states[..=t0].to_vec()).collect();
    let mut report = RolloutReport::default();
    let end = t0 + T_FUTURE;
    let mut t = t0;
    while t < end {
        let poses: Vec<AgentState> = exec.iter().map(|s| s[t]).collect();
        let scene = if t == t0 {
            cached.clone()
        } else {
            den.reposition(&cached, poses.clone())?
        };
        let model = SceneModel { denoiser: den, scene: &scene };
        let mut obj = SceneObjective::new(&den.pca, poses.clone());
        if cfg.history_weight > 0.0 {
            let hist: Vec<Vec<[f64; 2]>> = exec
                .iter()
                .map(|s| s[t + 1 - T_HIST..=t].iter().map(|st| st.position()).collect())
                .collect();
            obj = obj.with_history(&hist, cfg.history_weight)?;
        }
        for (i, e) in cfg.endpoints.iter().enumerate().take(n) {
            if let Some(p) = e {
                obj = obj.with_waypoint(i, T_HIST - 1 + (end - t), *p, cfg.endpoint_weight)?;
            }
        }
        if let Some(p) = program {
            obj = obj.with_program(p, scenario)?;
        }
        let guided = cfg.guidance.lambda > 0.0 && (program.is_some() || obj.known.iter().any(|k| !k.is_empty()));
        let g = Guidance {
            config: cfg.guidance,
            objective: &obj,
        };
        let seed = cfg.seed.wrapping_add(report.plans as u64);
        let (coeffs, stats) = sample(&model, &schedule, seed, guided.then_some(&g))?;
        report.stats.merge(&stats);
        report.plans += 1;
        // two evaluations per Heun step; keep the first of each pair
        report.term_trace.extend(obj.term_log.take().into_iter().step_by(2));
        let world = obj.world_windows(&coeffs);
        let local = obj.local_windows(&coeffs);
        let run = cfg.replan_every.min(end - t);
        for (i, states) in exec.iter_mut().enumerate() {
            let now = local[i][T_HIST - 1];
            report.splice_errors.push(now[0].hypot(now[1]));
            for k in 0..run {
                let p = world[i][T_HIST + k];
                let prev = states[t + k];
                states.push(AgentState::new(p[0], p[1], heading_between(prev.position(), p, prev.heading)));
            }
        }
        t += run;
    }
    let mut out = scenario.clone();
    for (a, states) in out.agents.iter_mut().zip(exec) {
        a.states = states;
    }
    Ok((out, report))
}

// ---------- training ----------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Log-normal noise level parameters, relative to `σ_data = 0.5`.
    pub p_mean: f64,
    pub p_std: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 2e-3,
            p_mean: -1.2,
            p_std: 1.2,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// One scene ready for training: its encoding and clean coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub enc: SceneEncoding,
    pub y: Coeffs,
}

/// PCA basis over every agent window plus `σ_data`, the RMS of the
/// equal-variance training coefficients, about `unit()` by construction.
pub fn fit_basis(scenes: &[Scenario], k: usize) -> Result<(PcaBasis, f64)> {
    let windows: Vec<Vec<f64>> = scenes
        .iter()
        .flat_map(|s| (0..s.agents.len()).map(move |i| agent_window(s, i)))
        .collect::<std::result::Result<_, _>>()?;
    let pca = fit_pca(&windows, k)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for w in &windows {
        for c in pca.encode(w) {
            sum += c * c;
            count += 1;
        }
    }
    Ok((pca, (sum / count as f64).sqrt()))
}

pub fn build_training_set(scenes: &[Scenario], pca: &PcaBasis, cfg: &DenoiserConfig) -> Result<Vec<TrainItem>> {
    scenes
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.agents.truncate(cfg.max_agents);
            let y = (0..s.agents.len())
                .map(|i| agent_window(&s, i).map(|w| pca.encode(&w)))
                .collect::<std::result::Result<_, _>>()?;
            Ok(TrainItem {
                enc: encode_scene(&s, cfg)?,
                y,
            })
        })
        .collect()
}

/// Weighted loss `λ(σ)·mean‖D(y + n; σ) − y‖²` and parameter gradients.
pub fn loss_and_grad(params: &Params, cfg: &DenoiserConfig, item: &TrainItem, sigma: f64, noise: &[Vec<f64>])
    -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params, true);
    let lanes = lane_pass(&mut tape, &p, &item.enc, cfg.blocks)?;
    let noisy: Coeffs = item
        .y
        .iter()
        .zip(noise)
        .map(|(y, n)| y.iter().zip(n).map(|(y, n)| y + n).collect())
        .collect();
    let x = tape.constant(rows_to_tensor(&noisy).map_err(DiffusionError::Denoiser)?);
    let d = denoise_on_tape(&mut tape, &p, &item.enc, &lanes, x, sigma, cfg.sigma_data)?;
    let y = tape.constant(rows_to_tensor(&item.y)?);
    let diff = tape.sub(d, y)?;
    let sq = tape.square(diff);
    let mean = tape.mean(sq)?;
    let sd = cfg.sigma_data;
    let weight = (sigma * sigma + sd * sd) / (sigma * sd).powi(2);
    let loss = tape.scale(mean, weight);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = p
        .vars_in_order(params)
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((value, out))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Train `den` in place; `on_step(step, loss)` is called after every update.
pub fn train(
    den: &mut Denoiser,
    items: &[TrainItem],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(DiffusionError::Input("empty training set".into()));
    }
    if cfg.batch == 0 {
        return Err(DiffusionError::Input("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // EDM's log-normal noise levels are stated for σ_data = 0.5
    let sigma_scale = den.config.sigma_data / 0.5;
    let mut adam = Adam::new(cfg.lr, &den.params);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut acc: Vec<Tensor> = den.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = &items[order[cursor]];
            cursor += 1;
            let z: f64 = rng.sample(StandardNormal);
            let sigma = sigma_scale * (cfg.p_mean + cfg.p_std * z).exp();
            let noise: Coeffs = item
                .y
                .iter()
                .map(|r| r.iter().map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let (loss, grads) = loss_and_grad(&den.params, &den.config, item, sigma, &noise)?;
            if !loss.is_finite() {
                return Err(DiffusionError::Diverged {
                    step,
                    loss,
                    detail: format!("sigma = {sigma:.4}"),
                });
            }
            batch_loss += loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (a, g) in a.data_mut().iter_mut().zip(g.data()) {
                    *a += g / cfg.batch as f64;
                }
            }
        }
        let norm = acc.iter().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(DiffusionError::Diverged {
                step,
                loss: batch_loss / cfg.batch as f64,
                detail: "non-finite gradient".into(),
            });
        }
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            acc.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|g| *g *= s));
        }
        adam.step(&mut den.params, &acc);
        let loss = batch_loss / cfg.batch as f64;
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok(report)
}

/// Track of an agent built from world positions, heading along motion.
pub fn track_from_positions(template: &AgentTrack, positions: &[[f64; 2]]) -> AgentTrack {
    let mut states: Vec<AgentState> = Vec::with_capacity(positions.len());
    for (i, p) in positions.iter().enumerate() {
        let h = match i {
            0 => positions.get(1).map_or(0.0, |q| heading_between(*p, *q, 0.0)),
            _ => heading_between(positions[i - 1], *p, states[i - 1].heading),
        };
        states.push(AgentState::new(p[0], p[1], h));
    }
    AgentTrack {
        states,
        ..template.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, WINDOW_DIM};
    use crate::synth::{gen_dataset, DatasetSpec};

    fn oracle(n: usize, k: usize, mu: f64, s: f64) -> GaussianOracle {
        GaussianOracle {
            mean: vec![vec![mu; k]; n],
            std: s,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::default();
        let sig = s.sigmas();
        assert_eq!(sig.len(), 33);
        assert!((sig[0] - 80.0).abs() < 1e-9 && (sig[31] - 0.002).abs() < 1e-12);
        assert_eq!(sig[32], 0.0);
        assert!(sig.windows(2).all(|w| w[0] > w[1]));
        assert!(NoiseSchedule::new(1.0, 0.5, 7.0, 4).is_err());
        assert!(NoiseSchedule::new(0.1, 1.0, 7.0, 0).is_err());
    }

    #[test]
    fn score_examples() {
        let x = vec![vec![1.0, 2.0]];
        assert_eq!(score_from_denoiser(&x, &x, 0.3), vec![vec![0.0, 0.0]]);
        let h = vec![vec![3.0, -2.0]];
        let a = score_from_denoiser(&x, &h, 0.5);
        let b = score_from_denoiser(&x, &h, 1.0);
        for (a, b) in a[0].iter().zip(&b[0]) {
            assert!((a / 4.0 - b).abs() < 1e-12);
        }
        let o = oracle(1, 3, 1.5, 0.7);
        let x = vec![vec![0.1, 4.0, -2.0]];
        let d = o.denoise(&x, 0.9).unwrap();
        let s = score_from_denoiser(&x, &d, 0.9);
        for (a, b) in s[0].iter().zip(&o.score(&x, 0.9)[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_oracle_sampling() {
        let (mu, s) = (2.0, 0.5);
        let o = oracle(256, 2, mu, s);
        let x0 = initial_noise((256, 2), 80.0, 0);
        let (x, _) = sample_from(&o, &NoiseSchedule::default(), x0.clone(), None).unwrap();
        let stats = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
        };
        for c in 0..2 {
            let (m, var) = stats(x.iter().map(|r| r[c]).collect());
            assert!((m - mu).abs() < 4.0 * s / 16.0, "mean {m}");
            assert!((var - s * s).abs() < 0.1 * s * s, "var {var}");
            // seed-independent: the exact flow is affine, x ↦ μ + s·(x − μ)/√(s² + σ_max²)
            let (m0, var0) = stats(x0.iter().map(|r| r[c]).collect());
            let gain = s / (s * s + 6400.0f64).sqrt();
            // 32 Heun steps reproduce the gain to within 2%
            assert!(((var / var0).sqrt() / gain - 1.0).abs() < 0.02);
            assert!(((m - mu) / ((m0 - mu) * gain) - 1.0).abs() < 0.02);
        }
        // second-order convergence towards the exact affine flow
        let x0 = initial_noise((8, 2), 80.0, 3);
        let o = o_small();
        let exact: Coeffs = x0
            .iter()
            .map(|r| r.iter().map(|x| mu + s * (x - mu) / (s * s + 6400.0f64).sqrt()).collect())
            .collect();
        let err = |steps| {
            let y = sample_from(&o, &NoiseSchedule { steps, ..Default::default() }, x0.clone(), None)
                .unwrap()
                .0;
            y.iter()
                .flatten()
                .zip(exact.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e32, e64, e128) = (err(32), err(64), err(128));
        assert!(e32 < 0.02 && e64 < e32 / 3.0 && e128 < e64 / 3.0, "{e32} {e64} {e128}");
    }

    fn o_small() -> GaussianOracle {
        oracle(8, 2, 2.0, 0.5)
    }

    #[test]
    fn quadratic_guidance_matches_conjugate_posterior() {
        let (mu, s, target, lambda) = (1.0, 1.0, 3.0, 0.1);
        let o = oracle(256, 16, mu, s);
        let q = Quadratic {
            target: vec![vec![target; 16]; 256],
            weight: 1.0,
        };
        let g = Guidance {
            config: GuidanceConfig {
                lambda,
                ..Default::default()
            },
            objective: &q,
        };
        let (x, stats) = sample(&o, &NoiseSchedule::default(), 4, Some(&g)).unwrap();
        let prec = 1.0 / (s * s) + 2.0 * lambda;
        let post = (mu / (s * s) + 2.0 * lambda * target) / prec;
        let n = 256.0 * 16.0;
        let m = x.iter().flatten().sum::<f64>() / n;
        let var = x.iter().flatten().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((m - post).abs() < 0.05 * post, "{m} vs {post}");
        assert!((var * prec - 1.0).abs() < 0.1, "{var} vs {}", 1.0 / prec);
        assert_eq!(stats.clamp_violations, 0);
        assert!(stats.max_abs_guidance < 1.0);
    }

    struct GradientOnly<'a>(&'a dyn Objective);

    impl Objective for GradientOnly<'_> {
        fn value_grad(&self, x: &[Vec<f64>]) -> Result<(f64, Coeffs)> {
            self.0.value_grad(x)
        }
    }

    #[test]
    fn modes_agree_when_jacobian_is_c_skip() {
        let o = oracle(8, 4, 1.0, 1.0);
        let q = Quadratic {
            target: vec![vec![3.0; 4]; 8],
            weight: 1.0,
        };
        let plain = GradientOnly(&q);
        let run = |mode| {
            let g = Guidance {
                config: GuidanceConfig {
                    lambda: 0.1,
                    mode,
                    prox_iters: 1,
                },
                objective: &plain,
            };
            sample(&o, &NoiseSchedule::default(), 4, Some(&g)).unwrap().0
        };
        let (x, y) = (run(GuidanceMode::CleanSpace), run(GuidanceMode::ThroughDenoiser));
        for (a, b) in x.iter().flatten().zip(y.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn guidance_is_additive_and_clamped() {
        let o = oracle(2, 3, 0.0, 1.0);
        let q = Quadratic {
            target: vec![vec![100.0; 3]; 2],
            weight: 5.0,
        };
        let g = Guidance {
            config: GuidanceConfig::default(),
            objective: &q,
        };
        let x = vec![vec![0.5, -0.2, 3.0], vec![1.0, 1.0, 1.0]];
        let mut st = SampleStats::default();
        let (score, gterm, _) = guided_score(&o, &x, 0.8, Some(&g), &mut st).unwrap();
        let (plain, none, _) = guided_score(&o, &x, 0.8, None, &mut st).unwrap();
        assert!(none.is_none());
        assert_eq!(score, plain);
        let gterm = gterm.unwrap();
        assert!(gterm.iter().flatten().all(|v| v.abs() < 1.0 && *v > 0.99));
    }

    #[test]
    fn zero_lambda_is_unguided() {
        let o = oracle(4, 3, 1.0, 0.8);
        let q = Quadratic {
            target: vec![vec![9.0; 3]; 4],
            weight: 1.0,
        };
        let g = Guidance {
            config: GuidanceConfig {
                lambda: 0.0,
                ..Default::default()
            },
            objective: &q,
        };
        let a = sample(&o, &NoiseSchedule::default(), 7, Some(&g)).unwrap().0;
        let b = sample(&o, &NoiseSchedule::default(), 7, None).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(sample(&o, &NoiseSchedule::default(), 7, None).unwrap().0, b);
    }

    #[test]
    fn known_states_examples() {
        let y = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        let c = KnownStatesCondition::new(vec![0, 2], vec![[0.0, 0.0], [2.0, 2.0]], 1.0).unwrap();
        assert_eq!(known_states_cost(&y, &c).unwrap(), 0.0);
        let c = KnownStatesCondition::new(vec![1], vec![[-2.0, -3.0]], 1.0).unwrap();
        assert_eq!(known_states_cost(&y, &c).unwrap(), 25.0);
        assert_eq!(known_states_grad(&y, &c).unwrap(), vec![[0.0, 0.0], [6.0, 8.0], [0.0, 0.0]]);
        let c = KnownStatesCondition::new(vec![3], vec![[0.0, 0.0]], 1.0).unwrap();
        assert!(known_states_cost(&y, &c).is_err());
    }

    #[test]
    fn scene_objective_gradient_matches_finite_differences() {
        let (scenes, _) = gen_dataset(&DatasetSpec::default(), 6, 3).unwrap();
        let (pca, _) = fit_basis(&scenes, 6).unwrap();
        let s = &scenes[0];
        let poses: Vec<AgentState> = (0..s.agents.len()).map(|i| s.current_state(i).unwrap()).collect();
        let prog = costdsl::builtin("speed_limit").unwrap().program();
        let hist: Vec<Vec<[f64; 2]>> = s
            .agents
            .iter()
            .map(|a| a.states[s.t_now + 1 - T_HIST..=s.t_now].iter().map(|p| p.position()).collect())
            .collect();
        let obj = SceneObjective::new(&pca, poses)
            .with_history(&hist, 0.3)
            .unwrap()
            .with_waypoint(0, 90, [5.0, 5.0], 0.2)
            .unwrap()
            .with_program(&prog, s)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Coeffs = (0..s.agents.len()).map(|_| (0..6).map(|_| rng.gen_range(-20.0..20.0)).collect()).collect();
        let (_, g) = obj.value_grad(&x).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            for j in 0..6 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i][j] += h;
                b[i][j] -= h;
                let fd = (obj.value_grad(&a).unwrap().0 - obj.value_grad(&b).unwrap().0) / (2.0 * h);
                assert!((fd - g[i][j]).abs() < 1e-4 * (1.0 + fd.abs()), "{i},{j}: {fd} vs {}", g[i][j]);
            }
        }
    }

    fn tiny_cfg(sigma_data: f64) -> DenoiserConfig {
        DenoiserConfig {
            hidden: 8,
            k: 4,
            max_map_tokens: 4,
            rel_hidden: 4,
            blocks: 1,
            sigma_data,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn init_loss_is_about_one_and_vanishes_at_low_sigma() {
        let (scenes, _) = gen_dataset(&DatasetSpec::default(), 20, 5).unwrap();
        let (pca, sd) = fit_basis(&scenes, 4).unwrap();
        let cfg = tiny_cfg(sd);
        let items = build_training_set(&scenes, &pca, &cfg).unwrap();
        let params = init_params(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        let trials = 400;
        for t in 0..trials {
            let item = &items[t % items.len()];
            let sigma = (-1.2 + 1.2 * rng.sample::<f64, _>(StandardNormal)).exp();
            let noise: Coeffs = item
                .y
                .iter()
                .map(|r| r.iter().map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            total += loss_and_grad(&params, &cfg, item, sigma, &noise).unwrap().0;
        }
        let mean = total / trials as f64;
        assert!((mean - 1.0).abs() < 0.35, "{mean}");
        // unweighted error near zero when sigma is tiny
        let sigma = 1e-4;
        let noise: Coeffs = items[0].y.iter().map(|r| vec![sigma; r.len()]).collect();
        let l = loss_and_grad(&params, &cfg, &items[0], sigma, &noise).unwrap().0;
        let w = (sigma * sigma + sd * sd) / (sigma * sd).powi(2);
        assert!(l / w < 1e-7);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let (scenes, _) = gen_dataset(&DatasetSpec::default(), 3, 8).unwrap();
        let (pca, sd) = fit_basis(&scenes, 4).unwrap();
        let cfg = tiny_cfg(sd);
        let items = build_training_set(&scenes, &pca, &cfg).unwrap();
        let mut params = init_params(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let noise: Coeffs = items[0].y.iter().map(|r| r.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let (_, grads) = loss_and_grad(&params, &cfg, &items[0], 0.7, &noise).unwrap();
        let h = 1e-6;
        for (pi, name) in params.names().to_vec().iter().enumerate() {
            let len = params.tensors()[pi].len();
            for idx in [0, len / 2, len - 1] {
                let mut a = params.clone();
                a.tensors_mut()[pi].data_mut()[idx] += h;
                let mut b = params.clone();
                b.tensors_mut()[pi].data_mut()[idx] -= h;
                let fa = loss_and_grad(&a, &cfg, &items[0], 0.7, &noise).unwrap().0;
                let fb = loss_and_grad(&b, &cfg, &items[0], 0.7, &noise).unwrap().0;
                let fd = (fa - fb) / (2.0 * h);
                let an = grads[pi].data()[idx];
                assert!((fd - an).abs() < 1e-4 * (1.0 + fd.abs().max(an.abs())), "{name}[{idx}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn overfits_a_single_scene() {
        let (scenes, _) = gen_dataset(&DatasetSpec::default(), 8, 21).unwrap();
        let (pca, sd) = fit_basis(&scenes, 4).unwrap();
        let cfg = DenoiserConfig {
            hidden: 16,
            ..tiny_cfg(sd)
        };
        let items = build_training_set(&scenes[..1], &pca, &cfg).unwrap();
        let mut den = Denoiser::new(cfg, pca, 3);
        let tc = TrainConfig {
            steps: 1500,
            batch: 4,
            lr: 5e-3,
            ..TrainConfig::default()
        };
        let r = train(&mut den, &items, &tc, |_, _| {}).unwrap();
        let first: f64 = r.losses[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = r.losses[r.losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(last < 0.2 * first, "{first} -> {last}");
        let scene = den.prepare(&scenes[0]).unwrap();
        let model = SceneModel { denoiser: &den, scene: &scene };
        let (x, _) = sample(&model, &NoiseSchedule::for_data(den.config.sigma_data, 32), 0, None).unwrap();
        let err: f64 = x
            .iter()
            .flatten()
            .zip(items[0].y.iter().flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = items[0].y.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 0.1 * scale, "{err} vs {scale}");
    }

    #[test]
    fn single_plan_matches_open_loop_and_rollouts_are_deterministic() {
        let (scenes, _) = gen_dataset(&DatasetSpec::default(), 4, 2).unwrap();
        let (pca, sd) = fit_basis(&scenes, 4).unwrap();
        let den = Denoiser::new(tiny_cfg(sd), pca, 1);
        let s = &scenes[0];
        let cfg = SimConfig {
            steps: 6,
            ..SimConfig::default()
        };
        let (a, ra) = simulate(&den, s, None, &cfg).unwrap();
        assert_eq!(ra.plans, 1);
        assert_eq!(a.agents[0].states.len(), s.t_now + 1 + T_FUTURE);
        assert_eq!(&a.agents[0].states[..=s.t_now], &s.agents[0].states[..=s.t_now]);
        let (b, _) = simulate(&den, s, None, &SimConfig { replan_every: 200, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        let closed = SimConfig { replan_every: 5, ..cfg };
        let (c, rc) = simulate(&den, s, None, &closed).unwrap();
        assert_eq!(rc.plans, 16);
        assert_eq!(simulate(&den, s, None, &closed).unwrap().0, c);
        assert!(c.agents.iter().all(|t| t.states.len() == s.t_now + 1 + T_FUTURE));
        assert_eq!(WINDOW_DIM, 182);
    }
}
