//! Helpers shared by the integration tests and the acceptance harness:
//! finite-difference gradient checks for tape ops and cost programs, and
//! reference paths for Frenet round trips.
#![allow(dead_code)]

use guidesim::costdsl::{self, EvalContext, Program};
use guidesim::frenet::{FrenetCoord, RefPath};
use guidesim::grad::{Tape, Tensor, Var};
use guidesim::scene::Scenario;
use guidesim::synth::{gen_fixture, FixtureKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative error with a small absolute floor so gradients near zero are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of checking one op or program over many random cases.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub cases: usize,
    pub compared: usize,
    /// Coordinates skipped because one-sided differences disagree (a kink).
    pub kinks: usize,
    pub max_err: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    fn record(&mut self, what: String, a: f64, n: f64, tol: f64) {
        let e = rel_err(a, n);
        self.compared += 1;
        self.max_err = self.max_err.max(e);
        if !(e < tol) {
            self.failures.push(format!("{what}: analytic {a:.6e} numeric {n:.6e} rel {e:.2e}"));
        }
    }
}

type Build = fn(&mut Tape, &[Var]) -> Var;
type Gen = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct OpSpec {
    pub name: &'static str,
    pub gen: Gen,
    pub build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, either sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.1, 2.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.gen_range(0..3) {
        0 => vec![rng.gen_range(1..6)],
        1 => vec![rng.gen_range(1..4), rng.gen_range(1..5)],
        _ => vec![rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4)],
    }
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = small_shape(rng);
    // half the time the right operand broadcasts over leading dims
    let rs = if rng.gen_bool(0.5) { vec![*s.last().unwrap()] } else { s.clone() };
    vec![rand_tensor(rng, &s, -2.0, 2.0), rand_tensor(rng, &rs, -2.0, 2.0)]
}

fn separated_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut p = pair(rng);
    let nb = p[1].len();
    let b = p[1].data().to_vec();
    for (i, a) in p[0].data_mut().iter_mut().enumerate() {
        let d = *a - b[i % nb];
        if d.abs() < 0.1 {
            *a += 0.2 * d.signum();
        }
    }
    p
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = small_shape(rng);
    vec![rand_tensor(rng, &s, -2.0, 2.0)]
}

fn one_nonzero(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = small_shape(rng);
    vec![away_from_zero(rng, &s)]
}

fn one_positive(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = small_shape(rng);
    vec![rand_tensor(rng, &s, 0.2, 3.0)]
}

fn one_matrix(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = [rng.gen_range(1..5), rng.gen_range(1..5)];
    vec![rand_tensor(rng, &s, -2.0, 2.0)]
}

fn one_nd(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = [rng.gen_range(1..4), rng.gen_range(2..5)];
    vec![rand_tensor(rng, &s, -2.0, 2.0)]
}

fn matmul_operands(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    match rng.gen_range(0..3) {
        0 => vec![rand_tensor(rng, &[m, k], -2.0, 2.0), rand_tensor(rng, &[k, n], -2.0, 2.0)],
        1 => {
            let b = rng.gen_range(1..3);
            vec![rand_tensor(rng, &[b, m, k], -2.0, 2.0), rand_tensor(rng, &[b, k, n], -2.0, 2.0)]
        }
        _ => {
            let b = rng.gen_range(1..3);
            vec![rand_tensor(rng, &[b, m, k], -2.0, 2.0), rand_tensor(rng, &[k, n], -2.0, 2.0)]
        }
    }
}

fn concat_operands(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let r = rng.gen_range(1..4);
    (0..rng.gen_range(1..4))
        .map(|_| {
            let c = rng.gen_range(1..4);
            rand_tensor(rng, &[r, c], -2.0, 2.0)
        })
        .collect()
}

fn last_axis(t: &Tape, v: Var) -> usize {
    t.shape(v).len() - 1
}

/// Every differentiable op on the tape with an input generator that keeps
/// away from its non-differentiable points.
pub fn op_specs() -> Vec<OpSpec> {
    macro_rules! op {
        ($name:expr, $gen:expr, |$t:ident, $x:ident| $body:expr) => {
            OpSpec {
                name: $name,
                gen: $gen,
                build: |$t: &mut Tape, $x: &[Var]| $body,
            }
        };
    }
    vec![
        op!("add", pair, |t, x| t.add(x[0], x[1]).unwrap()),
        op!("sub", pair, |t, x| t.sub(x[0], x[1]).unwrap()),
        op!("mul", pair, |t, x| t.mul(x[0], x[1]).unwrap()),
        op!("div", |r| {
            let mut p = pair(r);
            p[1] = away_from_zero(r, &p[1].shape().to_vec());
            p
        }, |t, x| t.div(x[0], x[1]).unwrap()),
        op!("minimum", separated_pair, |t, x| t.minimum(x[0], x[1]).unwrap()),
        op!("maximum", separated_pair, |t, x| t.maximum(x[0], x[1]).unwrap()),
        op!("atan2", |r| {
            let s = small_shape(r);
            vec![away_from_zero(r, &s), away_from_zero(r, &s)]
        }, |t, x| t.atan2(x[0], x[1]).unwrap()),
        op!("neg", one, |t, x| t.neg(x[0])),
        op!("scale", one, |t, x| t.scale(x[0], -1.7)),
        op!("add_scalar", one, |t, x| t.add_scalar(x[0], 0.3)),
        op!("relu", one_nonzero, |t, x| t.relu(x[0])),
        op!("sin", one, |t, x| t.sin(x[0])),
        op!("cos", one, |t, x| t.cos(x[0])),
        op!("exp", one, |t, x| t.exp(x[0])),
        op!("sqrt", one_positive, |t, x| t.sqrt(x[0])),
        op!("square", one, |t, x| t.square(x[0])),
        op!("abs", one_nonzero, |t, x| t.abs(x[0])),
        op!("tanh", one, |t, x| t.tanh(x[0])),
        op!("clamp", |r| {
            let s = small_shape(r);
            let mut v = rand_tensor(r, &s, -2.0, 2.0);
            for x in v.data_mut() {
                if (x.abs() - 1.0).abs() < 0.1 {
                    *x *= 1.3;
                }
            }
            vec![v]
        }, |t, x| t.clamp(x[0], -1.0, 1.0)),
        op!("matmul", matmul_operands, |t, x| t.matmul(x[0], x[1]).unwrap()),
        op!("transpose", one_matrix, |t, x| t.transpose(x[0]).unwrap()),
        op!("reshape", one_matrix, |t, x| {
            let n = t.value(x[0]).len();
            t.reshape(x[0], &[n]).unwrap()
        }),
        op!("sum", one, |t, x| t.sum(x[0]).unwrap()),
        op!("mean", one, |t, x| t.mean(x[0]).unwrap()),
        op!("max", one, |t, x| t.max(x[0]).unwrap()),
        op!("min", one, |t, x| t.min(x[0]).unwrap()),
        op!("sum_axis", one_nd, |t, x| t.sum_axis(x[0], 0).unwrap()),
        op!("mean_axis", one_nd, |t, x| t.mean_axis(x[0], 1).unwrap()),
        op!("max_axis", one_nd, |t, x| t.max_axis(x[0], 1).unwrap()),
        op!("min_axis", one_nd, |t, x| t.min_axis(x[0], 0).unwrap()),
        op!("softmax", one_nd, |t, x| t.softmax(x[0]).unwrap()),
        op!("layernorm", one_nd, |t, x| t.layernorm(x[0]).unwrap()),
        op!("gather", one_nd, |t, x| {
            let n = t.shape(x[0])[1];
            t.gather(x[0], 1, &[n - 1, 0, n - 1]).unwrap()
        }),
        op!("concat", concat_operands, |t, x| {
            let axis = last_axis(t, x[0]);
            t.concat(x, axis).unwrap()
        }),
    ]
}

/// `Σ w ⊙ op(inputs)` with fixed random weights, so every output entry
/// contributes to the checked gradient.
fn weighted_output(spec: &OpSpec, inputs: &[Tensor], weights: Option<&Tensor>) -> (f64, Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (spec.build)(&mut tape, &vars);
    let w = weights.cloned().unwrap_or_else(|| {
        let v = tape.value(out);
        let n = v.len();
        let data = (0..n).map(|i| 0.5 + ((i * 7919 % 13) as f64) / 13.0).collect();
        Tensor::new(v.shape().to_vec(), data).unwrap()
    });
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect();
    (value, w, g)
}

pub fn check_op(spec: &OpSpec, cases: usize, tol: f64, rng: &mut ChaCha8Rng) -> FdReport {
    let mut report = FdReport::default();
    let eval = |inputs: &[Tensor], w: &Tensor| weighted_output(spec, inputs, Some(w)).0;
    for case in 0..cases {
        let inputs = (spec.gen)(rng);
        let (_, w, grads) = weighted_output(spec, &inputs, None);
        for (k, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let shifted = |delta: f64| {
                    let mut xs = inputs.clone();
                    xs[k].data_mut()[j] += delta;
                    eval(&xs, &w)
                };
                let (fp, fm) = (shifted(FD_STEP), shifted(-FD_STEP));
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                report.record(
                    format!("{} case {case} input {k}[{j}]", spec.name),
                    grads[k].data()[j],
                    numeric,
                    tol,
                );
            }
        }
        report.cases += 1;
    }
    report
}

/// Scenario on which `program`'s lane queries resolve, searched among the
/// labeled fixtures.
pub fn scenario_for(program: &Program) -> Option<Scenario> {
    for kind in FixtureKind::ALL {
        for seed in 0..4 {
            let Ok(f) = gen_fixture(kind, seed) else { continue };
            if EvalContext::from_scenario(program, &f.scenario).is_ok() {
                return Some(f.scenario);
            }
        }
    }
    None
}

/// Central differences of the program total against its analytic gradient
/// on `coords_per_case` random trajectory coordinates of a perturbed
/// future. Coordinates where forward and backward differences disagree sit
/// on a kink (relu, projection segment change) and are skipped.
pub fn check_program(
    program: &Program,
    scenario: &Scenario,
    cases: usize,
    coords_per_case: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> FdReport {
    let mut report = FdReport::default();
    let base = costdsl::future_trajectories(scenario);
    let n_agents = base.len();
    let ctx0 = EvalContext::from_scenario(program, scenario).expect("program resolves on scenario");
    let total = |trajs: &Vec<Vec<[f64; 2]>>| {
        let ctx = EvalContext {
            trajectories: trajs.clone(),
            ..ctx0.clone()
        };
        costdsl::evaluate(program, &ctx).expect("evaluation succeeds").total
    };
    for case in 0..cases {
        let trajs: Vec<Vec<[f64; 2]>> = base
            .iter()
            .map(|t| {
                t.iter()
                    .map(|p| [p[0] + rng.gen_range(-0.5..0.5), p[1] + rng.gen_range(-0.5..0.5)])
                    .collect()
            })
            .collect();
        let ctx = EvalContext {
            trajectories: trajs.clone(),
            ..ctx0.clone()
        };
        let (_, grad) = costdsl::gradient(program, &ctx).expect("gradient succeeds");
        for _ in 0..coords_per_case {
            let a = rng.gen_range(0..n_agents);
            let t = rng.gen_range(0..trajs[a].len());
            let c = rng.gen_range(0..2);
            let at = |delta: f64| {
                let mut tr = trajs.clone();
                tr[a][t][c] += delta;
                total(&tr)
            };
            let f0 = total(&trajs);
            let (fp, fm) = (at(FD_STEP), at(-FD_STEP));
            let fwd = (fp - f0) / FD_STEP;
            let bwd = (f0 - fm) / FD_STEP;
            if rel_err(fwd, bwd) > 1e-2 {
                report.kinks += 1;
                continue;
            }
            report.record(
                format!("case {case} agent {a} step {t} coord {c}"),
                grad[a][t][c],
                (fp - fm) / (2.0 * FD_STEP),
                tol,
            );
        }
        report.cases += 1;
    }
    report
}

/// Straight path from `a` to `b` through `n` evenly spaced vertices.
pub fn straight_path(a: [f64; 2], b: [f64; 2], n: usize) -> RefPath {
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let u = i as f64 / (n - 1) as f64;
            [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
        })
        .collect();
    RefPath::from_points(&pts).unwrap()
}

/// Counter-clockwise arc of radius `r` about the origin spanning `angle`
/// radians from the positive x axis, discretized into `segments` pieces.
pub fn arc_path(r: f64, angle: f64, segments: usize) -> RefPath {
    let pts: Vec<[f64; 2]> = (0..=segments)
        .map(|i| {
            let th = angle * i as f64 / segments as f64;
            [r * th.cos(), r * th.sin()]
        })
        .collect();
    RefPath::from_points(&pts).unwrap()
}

/// Largest `|to_cartesian(project(p)) − p|` over `points`.
pub fn max_round_trip_error(path: &RefPath, points: &[[f64; 2]]) -> f64 {
    points
        .iter()
        .map(|&p| {
            let c: FrenetCoord = path.project(p);
            let q = path.to_cartesian(c).expect("projection lies on the path");
            (q[0] - p[0]).hypot(q[1] - p[1])
        })
        .fold(0.0, f64::max)
}

/// Random points near an arc of radius `r`: angle in the interior of the
/// span, radial offset strictly inside `max_offset`.
pub fn points_near_arc(rng: &mut ChaCha8Rng, r: f64, angle: f64, max_offset: f64, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let th = rng.gen_range(0.02 * angle..0.98 * angle);
            let rho = r + rng.gen_range(-max_offset..max_offset);
            [rho * th.cos(), rho * th.sin()]
        })
        .collect()
}

/// Text edits that always turn a printed program into malformed source.
pub const MUTATIONS: [&str; 5] = ["drop_close", "extra_close", "bad_form", "truncate", "leading_atom"];

/// Apply mutation `which` to `text`; `None` when it does not apply.
pub fn mutate(text: &str, which: &str, rng: &mut impl Rng) -> Option<String> {
    match which {
        "drop_close" => {
            let i = text.rfind(')')?;
            Some(format!("{}{}", &text[..i], &text[i + 1..]))
        }
        "extra_close" => Some(format!("{text})")),
        "bad_form" => text.find("(term").map(|i| format!("{}(tern{}", &text[..i], &text[i + 5..])),
        "truncate" => {
            // cut strictly inside some open form
            let mut depth = 0i32;
            let inside: Vec<usize> = text
                .char_indices()
                .filter_map(|(i, c)| {
                    match c {
                        '(' => depth += 1,
                        ')' => depth -= 1,
                        _ => {}
                    }
                    (depth > 0).then_some(i + c.len_utf8())
                })
                .collect();
            let cut = *inside.get(rng.gen_range(0..inside.len().max(1)))?;
            Some(text[..cut].to_string())
        }
        "leading_atom" => Some(format!("7 {text}")),
        _ => None,
    }
}
