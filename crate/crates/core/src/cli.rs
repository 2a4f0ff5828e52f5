//! Command-line front end: dataset synthesis, training, simulation, guided
//! sessions, evaluation and rendering.
//!
//! Settings resolve as flag, then config file (`key = value` lines, `#`
//! comments), then built-in default. Every output records the hash of the
//! resolved settings.

use std::collections::BTreeMap;
use std::error::Error;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::costdsl;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{self, GuidanceConfig, GuidanceMode, SimConfig, TrainConfig};
use crate::llmguide::{self, ChatClient, ChatClientConfig, LiveClient, MockClient, Outcome, Rollout, Verdict};
use crate::metrics;
use crate::render::{render_svg, RenderOptions};
use crate::scene::{Scenario, T_FUTURE};
use crate::synth::{self, DatasetSpec, FixtureKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GUIDANCE_FAILED: i32 = 3;

/// Overrides the default chat-completion endpoint.
pub const ENV_LLM_ENDPOINT: &str = "GUIDESIM_LLM_ENDPOINT";

type Res<T> = Result<T, Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(name = "guidesim", version, about = "Cost-guided traffic scenario generation")]
pub struct Cli {
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (JSONL) or a single labeled fixture.
    Synth(SynthArgs),
    /// Fit the PCA basis and train the denoiser.
    Train(TrainArgs),
    /// Sample futures for a scenario or a JSONL dataset.
    Simulate(SimulateArgs),
    /// Guided session: cost program from a file or from a language model.
    Guide(GuideArgs),
    /// Compare simulated scenes to real ones.
    Eval(EvalArgs),
    /// Draw a scenario as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset spec (JSON or YAML); built-in mix when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write one fixture of this kind instead of a dataset.
    #[arg(long)]
    pub fixture: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// PCA components.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplingArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scenario JSON, or a JSONL dataset (simulate only).
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Guidance scale.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// clean_space or through_denoiser.
    #[arg(long)]
    pub guidance_mode: Option<String>,
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Condition on the 11-step history.
    #[arg(long)]
    pub history_cond: bool,
    /// Replan every `replan_every` steps (default 5, i.e. 2 Hz).
    #[arg(long)]
    pub closed_loop: bool,
    #[arg(long)]
    pub replan_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// World endpoint `x,y` for `--agent`.
    #[arg(long, allow_hyphen_values = true)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub agent: Option<usize>,
    /// Use each agent's recorded final position as its endpoint.
    #[arg(long)]
    pub gt_endpoints: bool,
    /// Cost program to guide with.
    #[arg(long)]
    pub dsl: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GuideArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, conflicts_with = "describe")]
    pub dsl: Option<PathBuf>,
    #[arg(long, required_unless_present = "dsl")]
    pub describe: Option<String>,
    #[arg(long, conflicts_with = "mock", requires = "describe")]
    pub live: bool,
    /// YAML script of replies keyed by prompt-hash prefix.
    #[arg(long, requires = "describe")]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Success checker (cut_in, out_of_road, yield, rightmost); defaults to the scenario's fixture label.
    #[arg(long)]
    pub checker: Option<String>,
    /// Session log (JSON).
    #[arg(long)]
    pub log: PathBuf,
    /// Final scenario (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub real: PathBuf,
    /// JSONL file or directory of scenario JSON files, paired with `--real` by order.
    #[arg(long)]
    pub sim: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Draw the whole map instead of cropping to the agents.
    #[arg(long)]
    pub full_map: bool,
}

// ---------- settings ----------

/// Resolved settings for one command.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Res<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn new(config: Option<&Path>) -> Res<Self> {
        let file = match config {
            Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Res<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(s)) => s.parse().map_err(|e| format!("config key {key}: {e}"))?,
            (None, None) => default,
        };
        self.resolved.insert(key.into(), v.to_string());
        Ok(v)
    }

    /// Record a value that is not configurable from the file.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.into(), value.to_string());
    }

    pub fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        for (k, v) in &self.resolved {
            h.update(format!("\n{k}={v}").as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn meta(&self, command: &str) -> serde_json::Value {
        serde_json::json!({
            "command": command,
            "config_hash": self.hash(command),
            "settings": self.resolved,
        })
    }
}

fn with_meta(mut s: Scenario, meta: &serde_json::Value) -> Scenario {
    let mut m = match s.meta.take() {
        Some(serde_json::Value::Object(m)) => m,
        _ => serde_json::Map::new(),
    };
    m.insert("run".into(), meta.clone());
    s.meta = Some(serde_json::Value::Object(m));
    s
}

fn read_scenario(path: &Path) -> Res<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn write_jsonl(path: &Path, scenes: &[Scenario]) -> Res<()> {
    let mut text = String::new();
    for s in scenes {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_point(s: &str) -> Res<[f64; 2]> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("endpoint '{s}': expected x,y"))?;
    Ok([x.trim().parse()?, y.trim().parse()?])
}

// ---------- commands ----------

fn cmd_synth(a: SynthArgs, mut st: Settings) -> Res<()> {
    let seed = st.get("seed", a.seed, 0u64)?;
    if let Some(kind) = &a.fixture {
        let kind = FixtureKind::parse(kind).ok_or_else(|| format!("unknown fixture '{kind}'"))?;
        st.note("fixture", kind.name());
        let f = synth::gen_fixture(kind, seed)?;
        write_json(&a.out, &with_meta(f.scenario, &st.meta("synth")))?;
        return Ok(());
    }
    let n = st.get("n", a.n, 100usize)?;
    let spec: DatasetSpec = match &a.spec {
        Some(p) => serde_yaml::from_str(&std::fs::read_to_string(p)?)?,
        None => DatasetSpec::default(),
    };
    st.note("spec", serde_json::to_string(&spec)?);
    let (scenes, mut manifest) = synth::gen_dataset(&spec, n, seed)?;
    manifest.config_hash = Some(st.hash("synth"));
    synth::write_dataset(&a.out, &scenes, &manifest)?;
    eprintln!("wrote {} scenarios to {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs, mut st: Settings) -> Res<()> {
    let desk = DenoiserConfig::desk();
    let cfg = TrainConfig {
        steps: st.get("steps", a.steps, 1000usize)?,
        batch: st.get("batch", a.batch, 8usize)?,
        lr: st.get("lr", a.lr, 2e-3)?,
        seed: st.get("seed", a.seed, 0u64)?,
        ..TrainConfig::default()
    };
    let hidden = st.get("hidden", a.hidden, desk.hidden)?;
    let k = st.get("k", a.k, desk.k)?;
    st.note("data", a.data.display());
    let scenes = synth::read_dataset(&a.data)?;
    let (pca, sigma_data) = diffusion::fit_basis(&scenes, k)?;
    let dcfg = DenoiserConfig {
        hidden,
        k,
        sigma_data,
        ..desk
    };
    let items = diffusion::build_training_set(&scenes, &pca, &dcfg)?;
    let mut den = Denoiser::new(dcfg, pca, cfg.seed);
    let every = (cfg.steps / 20).max(1);
    let report = diffusion::train(&mut den, &items, &cfg, |s, l| {
        if s % every == 0 {
            eprintln!("step {s} loss {l:.4}");
        }
    })?;
    den.save(&a.out)?;
    let mut csv = format!("# config_hash={}\nstep,loss\n", st.hash("train"));
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(a.out.join("loss.csv"), csv)?;
    write_json(&a.out.join("meta.json"), &st.meta("train"))?;
    Ok(())
}

fn sim_config(s: &SamplingArgs, st: &mut Settings) -> Res<SimConfig> {
    let mode: GuidanceMode = st
        .get("guidance_mode", s.guidance_mode.clone(), "clean_space".to_string())?
        .parse()?;
    let closed = st.get("closed_loop", s.closed_loop.then_some(true), false)?;
    let history = st.get("history_cond", s.history_cond.then_some(true), false)?;
    let replan = st.get("replan_every", s.replan_every, if closed { 5 } else { T_FUTURE })?;
    Ok(SimConfig {
        steps: st.get("sampler_steps", s.steps, 32usize)?,
        seed: st.get("seed", s.seed, 0u64)?,
        guidance: GuidanceConfig {
            lambda: st.get("lambda", s.lambda, GuidanceConfig::default().lambda)?,
            mode,
            ..GuidanceConfig::default()
        },
        history_weight: if history { 1.0 } else { 0.0 },
        replan_every: replan,
        ..SimConfig::default()
    })
}

fn cmd_simulate(a: SimulateArgs, mut st: Settings) -> Res<()> {
    let den = Denoiser::load(&a.sampling.ckpt)?;
    let base = sim_config(&a.sampling, &mut st)?;
    let program = match &a.dsl {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            st.note("dsl", costdsl::print(&costdsl::parse(&text)?));
            Some(costdsl::parse(&text)?)
        }
        None => None,
    };
    let endpoint = a.endpoint.as_deref().map(parse_point).transpose()?;
    let agent = st.get("agent", a.agent, 0usize)?;
    if let Some(p) = endpoint {
        st.note("endpoint", format!("{},{}", p[0], p[1]));
    }
    let gt = st.get("gt_endpoints", a.gt_endpoints.then_some(true), false)?;
    st.note("scenario", a.sampling.scenario.display());
    let meta = st.meta("simulate");
    let run = |s: &Scenario, seed: u64| -> Res<Scenario> {
        let mut cfg = SimConfig { seed, ..base.clone() };
        if gt {
            cfg.endpoints = s.agents.iter().map(|t| t.states.last().map(|x| x.position())).collect();
        }
        if let Some(p) = endpoint {
            cfg.endpoints.resize(s.agents.len().max(cfg.endpoints.len()), None);
            *cfg.endpoints.get_mut(agent).ok_or_else(|| format!("no agent {agent}"))? = Some(p);
        }
        let (out, report) = diffusion::simulate(&den, s, program.as_ref(), &cfg)?;
        if report.stats.clamp_violations > 0 {
            return Err("guidance clamp violated".into());
        }
        Ok(with_meta(out, &meta))
    };
    if is_jsonl(&a.sampling.scenario) {
        let scenes = synth::read_dataset(&a.sampling.scenario)?;
        let out: Vec<Scenario> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| run(s, base.seed.wrapping_add(1000 * i as u64)))
            .collect::<Res<_>>()?;
        write_jsonl(&a.out, &out)?;
    } else {
        let s = read_scenario(&a.sampling.scenario)?;
        write_json(&a.out, &run(&s, base.seed)?)?;
    }
    Ok(())
}

fn checker_for(name: Option<&str>, scenario: &Scenario) -> Res<Option<fn(&Scenario) -> Verdict>> {
    let label = name.map(str::to_owned).or_else(|| {
        scenario
            .meta
            .as_ref()
            .and_then(|m| m.get("fixture"))
            .and_then(|v| v.as_str())
            .map(str::to_owned)
    });
    match label {
        None => Ok(None),
        Some(l) => match llmguide::checker_by_name(&l) {
            Ok(c) => Ok(Some(c)),
            // fixtures without a checker are accepted as-is unless one was asked for
            Err(e) if name.is_some() => Err(e.into()),
            Err(_) => Ok(None),
        },
    }
}

fn cmd_guide(a: GuideArgs, mut st: Settings) -> Res<i32> {
    let den = Denoiser::load(&a.sampling.ckpt)?;
    let cfg = sim_config(&a.sampling, &mut st)?;
    let scenario = read_scenario(&a.sampling.scenario)?;
    let max_iters = st.get("max_iters", a.max_iters, 3usize)?;
    let checker = checker_for(a.checker.as_deref(), &scenario)?;
    st.note("scenario", a.sampling.scenario.display());
    if let Some(c) = &a.checker {
        st.note("checker", c);
    }
    let (description, mut client): (String, Box<dyn ChatClient>) = match (&a.dsl, &a.describe) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)?;
            st.note("dsl", &text);
            let reply = format!("```\n{text}\n```");
            let script = BTreeMap::from([(String::new(), llmguide::MockReply::One(reply))]);
            (format!("program from {}", p.display()), Box::new(MockClient::new(script)?))
        }
        (None, Some(d)) => {
            st.note("describe", d);
            if let Some(m) = &a.mock {
                st.note("mock", m.display());
                (d.clone(), Box::new(MockClient::load(m)?))
            } else if a.live {
                let defaults = ChatClientConfig::default();
                let endpoint = std::env::var(ENV_LLM_ENDPOINT).unwrap_or(defaults.endpoint);
                let c = ChatClientConfig {
                    endpoint: st.get("llm_endpoint", None, endpoint)?,
                    model: st.get("llm_model", None, defaults.model)?,
                    temperature: st.get("llm_temperature", None, defaults.temperature)?,
                    max_tokens: st.get("llm_max_tokens", None, defaults.max_tokens)?,
                    api_key_env: st.get("llm_api_key_env", None, defaults.api_key_env)?,
                };
                (d.clone(), Box::new(LiveClient::new(c)?))
            } else {
                return Err("--describe needs --mock <script> or --live".into());
            }
        }
        (None, None) => unreachable!("clap requires --dsl or --describe"),
    };
    let meta = st.meta("guide");
    let mut sampler = |p: &costdsl::Program| -> Result<Rollout, String> {
        let (out, report) = diffusion::simulate(&den, &scenario, Some(p), &cfg).map_err(|e| e.to_string())?;
        Ok(Rollout {
            scenario: out,
            term_trace: report.term_trace,
        })
    };
    let accept = |_: &Scenario| Verdict {
        success: true,
        detail: "no checker; rollout accepted".into(),
    };
    let check: &dyn Fn(&Scenario) -> Verdict = match &checker {
        Some(c) => c,
        None => &accept,
    };
    let session = llmguide::run_session(&description, &scenario, &mut sampler, check, client.as_mut(), max_iters);
    write_json(&a.log, &serde_json::json!({ "meta": meta, "session": session }))?;
    if let (Some(out), Some(s)) = (&a.out, session.final_scenario()) {
        write_json(out, &with_meta(s.clone(), &meta))?;
    }
    eprintln!(
        "{} iteration(s), outcome {:?}",
        session.iterations.len(),
        session.outcome
    );
    Ok(match session.outcome {
        Outcome::Success | Outcome::UnderstandingOnly => EXIT_OK,
        Outcome::Failed => EXIT_GUIDANCE_FAILED,
        Outcome::Aborted { reason } => return Err(format!("session aborted: {reason}").into()),
    })
}

fn read_sim(path: &Path) -> Res<Vec<Scenario>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        files.iter().map(|p| read_scenario(p)).collect()
    } else {
        Ok(synth::read_dataset(path)?)
    }
}

fn cmd_eval(a: EvalArgs, mut st: Settings) -> Res<()> {
    st.note("real", a.real.display());
    st.note("sim", a.sim.display());
    let real = synth::read_dataset(&a.real)?;
    let sim = read_sim(&a.sim)?;
    let report = metrics::evaluate(&real, &sim)?;
    print!("{}", report.table());
    write_json(&a.report, &serde_json::json!({ "meta": st.meta("eval"), "report": report }))
}

fn cmd_render(a: RenderArgs, mut st: Settings) -> Res<()> {
    st.note("scenario", a.scenario.display());
    let full = st.get("full_map", a.full_map.then_some(true), false)?;
    let s = read_scenario(&a.scenario)?;
    let opts = RenderOptions {
        crop_to_agents: !full,
        comment: Some(format!("config_hash {}", st.hash("render"))),
        ..RenderOptions::default()
    };
    std::fs::write(&a.out, render_svg(&s, &opts))?;
    Ok(())
}

pub fn execute(cli: Cli) -> Res<i32> {
    let st = Settings::new(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, st).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(a, st).map(|_| EXIT_OK),
        Command::Simulate(a) => cmd_simulate(a, st).map(|_| EXIT_OK),
        Command::Guide(a) => cmd_guide(a, st),
        Command::Eval(a) => cmd_eval(a, st).map(|_| EXIT_OK),
        Command::Render(a) => cmd_render(a, st).map(|_| EXIT_OK),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
