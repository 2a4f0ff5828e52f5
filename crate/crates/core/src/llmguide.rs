//! Language-model authoring of cost programs: a staged understanding prompt,
//! response parsing, a refinement loop fed with sampled coordinates and
//! per-term costs, chat clients (live and scripted mock), and rule-based
//! success checkers for the fixture behaviors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::costdsl::{self, Program};
use crate::frenet::RefPath;
use crate::metrics::is_offroad;
use crate::scene::{lane_at_point, lane_query, LaneQuery, LaneRef, Scenario};
use crate::synth::FixtureKind;

/// Attempts after the first when the transport fails.
pub const TRANSPORT_RETRIES: usize = 3;
/// Re-asks with the parser message before an answer counts as failed.
pub const PARSE_REASKS: usize = 2;
/// Upper bound on the cut-in gap at the merge, metres.
pub const CUT_IN_MAX_GAP: f64 = 15.0;
/// Speed under which an agent counts as waiting, m/s.
pub const YIELD_SPEED: f64 = 1.0;
/// Off-road dwell needed by the out-of-road checker, seconds.
pub const OFF_ROAD_DWELL: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("client config: {0}")]
    Config(String),
    #[error("mock script: {0}")]
    Mock(String),
    #[error("unknown checker '{0}'")]
    Checker(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LlmError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// Hex SHA-256 of the messages, each rendered as `role\ncontent\n`.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m.role.as_bytes());
        h.update(b"\n");
        h.update(m.content.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

// ---------- clients ----------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatClientConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Environment variable holding the API key. The key itself is never stored or logged.
    pub api_key_env: String,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_tokens: 2048,
            api_key_env: "LLM_API_KEY".into(),
        }
    }
}

impl ChatClientConfig {
    pub fn validate_live(&self) -> Result<()> {
        if self.endpoint.trim().is_empty() {
            return Err(LlmError::Config("endpoint is empty".into()));
        }
        if self.model.trim().is_empty() {
            return Err(LlmError::Config("model is empty".into()));
        }
        Ok(())
    }
}

pub trait ChatClient {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String>;
}

/// Chat-completion client over HTTPS.
pub struct LiveClient {
    config: ChatClientConfig,
    key: String,
    agent: ureq::Agent,
}

impl LiveClient {
    pub fn new(config: ChatClientConfig) -> Result<Self> {
        config.validate_live()?;
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| LlmError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        Ok(Self { config, key, agent })
    }
}

impl ChatClient for LiveClient {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {}", self.key))
            .send_json(body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let v: serde_json::Value = resp.into_json().map_err(|e| LlmError::Transport(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| LlmError::Transport("response has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    One(String),
    /// Replayed in order on successive matches; the last entry repeats.
    Seq(Vec<String>),
}

/// Replays scripted replies keyed by a prefix of the prompt hash. The
/// longest matching prefix wins; the empty prefix matches every prompt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockClient {
    rules: BTreeMap<String, MockReply>,
    used: BTreeMap<String, usize>,
    /// Hashes of every prompt seen, in order.
    pub seen: Vec<String>,
}

impl MockClient {
    pub fn new(rules: BTreeMap<String, MockReply>) -> Result<Self> {
        for (k, v) in &rules {
            if !k.chars().all(|c| c.is_ascii_hexdigit()) {
                return Err(LlmError::Mock(format!("key '{k}' is not a hex prefix")));
            }
            if matches!(v, MockReply::Seq(s) if s.is_empty()) {
                return Err(LlmError::Mock(format!("key '{k}' has an empty reply list")));
            }
        }
        let rules = rules.into_iter().map(|(k, v)| (k.to_ascii_lowercase(), v)).collect();
        Ok(Self {
            rules,
            ..Self::default()
        })
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        Self::new(serde_yaml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_yaml(&std::fs::read_to_string(path)?)
    }
}

impl ChatClient for MockClient {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String> {
        let hash = prompt_hash(messages);
        self.seen.push(hash.clone());
        let key = self
            .rules
            .keys()
            .filter(|k| hash.starts_with(k.as_str()))
            .max_by_key(|k| k.len())
            .cloned()
            .ok_or_else(|| LlmError::Mock(format!("no reply scripted for prompt {hash}")))?;
        let n = self.used.entry(key.clone()).or_default();
        let reply = match &self.rules[&key] {
            MockReply::One(s) => s.clone(),
            MockReply::Seq(v) => v[(*n).min(v.len() - 1)].clone(),
        };
        *n += 1;
        Ok(reply)
    }
}

// ---------- prompts ----------

pub const GRAMMAR_REFERENCE: &str = "\
Cost programs are s-expressions. A program is a list of reference-path
declarations followed by weighted cost terms; sampling minimizes the
weighted sum of the terms.

  (refpath NAME QUERY)           bind a lane path
  (term NAME WEIGHT EXPR)        add WEIGHT * EXPR to the cost

QUERY is (KIND TARGET) with KIND one of current_lane, left_lane,
right_lane, rightmost_lane, leftmost_lane, left_edge, right_edge, or
(successor_chain TARGET DEPTH). TARGET is an agent aN or a lane id.

Per-step accessors (aN is agent N, counted from 0; R a refpath name):
  (x aN) (y aN) (heading aN) (speed aN) (accel aN)
  (s aN R)   arc length along R      (d aN R)  signed lateral offset, left positive
  (dist aN aM)                        distance between two agents
Operators, applied per step:
  neg abs sq sqrt relu sin cos exp    (unary)
  add sub mul div min max             (binary)
  (clamp LO HI e)  (sin_t OMEGA)  (diff_t e)
Reductions over time: mean_t sum_t min_t max_t, and (at K e) for step K,
where negative K counts from the end. Every term must be reduced to a
single number this way.
Numbers are decimal literals. Comments start with ';'.";

const COT_STEPS: [&str; 7] = [
    "Identify the events the description asks for.",
    "If there is more than one event, split the description into single events and handle each one separately.",
    "For each event, count the agents involved and name them as aN.",
    "For each agent, state its intended behavior.",
    "Decide whether each behavior is map-related (lanes, road edges) or not.",
    "For map-related behaviors, plan the lane queries that give the reference paths you need.",
    "Emit the cost program as a single fenced code block.",
];

const ANSWER_FORMAT: &str = "\
Answer in this format, one item per line, then the program:
EVENT <n>: <single event>
AGENTS <n>: <comma separated aN>
BEHAVIOR <aN>: <behavior>
MAP <n>: yes|no
QUERY: <lane query>
```
<cost program>
```";

/// Agents, positions, speeds and lanes at `t_now`, plus the lane graph.
pub fn scenario_summary(scenario: &Scenario) -> String {
    let mut out = String::new();
    let t = scenario.t_now;
    let _ = writeln!(out, "Agents at the current time:");
    for (i, a) in scenario.agents.iter().enumerate() {
        let s = a.states[t];
        let speed = if t > 0 {
            let p = a.states[t - 1];
            (s.x - p.x).hypot(s.y - p.y) / scenario.dt
        } else {
            0.0
        };
        let lane = lane_at_point(scenario, s.position()).map_or("none".to_string(), |l| l.to_string());
        let _ = writeln!(
            out,
            "  a{i}: position ({:.2}, {:.2}), heading {:.2} rad, speed {:.2} m/s, lane {lane}",
            s.x, s.y, s.heading, speed
        );
    }
    let _ = writeln!(out, "Lanes:");
    for l in scenario.driving_lanes() {
        let names = |q: LaneQuery| {
            lane_query(scenario, &q)
                .ok()
                .and_then(|v| v.first().map(|x| x.to_string()))
                .unwrap_or_else(|| "none".into())
        };
        let _ = writeln!(
            out,
            "  lane {}: left {}, right {}, length {:.1} m",
            l.id,
            names(LaneQuery::LeftLane(LaneRef::Lane(l.id))),
            names(LaneQuery::RightLane(LaneRef::Lane(l.id))),
            l.length()
        );
    }
    out
}

/// System and user messages for the staged understanding step.
pub fn build_understanding_prompt(description: &str, summary: &str) -> Vec<ChatMessage> {
    let mut system = String::from(
        "You write cost programs that steer a traffic simulator. The simulator samples \
         agent trajectories and lowers the cost you write.\n\n",
    );
    system.push_str(GRAMMAR_REFERENCE);
    system.push_str(
        "\n\nFor behaviors tied to the map, such as lane changes, staying in a lane or leaving \
         the road, prefer Frenet accessors (s and d along a refpath) over raw x and y.",
    );
    let mut user = String::from("Work through these steps in order:\n");
    for (i, s) in COT_STEPS.iter().enumerate() {
        let _ = writeln!(user, "{}. {s}", i + 1);
    }
    let _ = write!(user, "\nScenario:\n{summary}\nDescription: {description}\n\n{ANSWER_FORMAT}\n");
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventTrace {
    pub text: String,
    pub agents: Vec<String>,
    /// `(agent, behavior)` in answer order.
    pub behaviors: Vec<(String, String)>,
    pub map_related: bool,
}

/// Structured reading of one model answer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnderstandingTrace {
    pub events: Vec<EventTrace>,
    pub lane_queries: Vec<String>,
    /// Text of the last fenced block, if any.
    pub dsl: Option<String>,
    /// Why the answer was rejected; `None` when `program` is set.
    pub error: Option<String>,
    #[serde(skip)]
    pub program: Option<Program>,
}

impl UnderstandingTrace {
    pub fn failed(&self) -> bool {
        self.program.is_none()
    }
}

fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut cur: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match cur.take() {
                Some(b) => blocks.push(b.join("\n")),
                None => cur = Some(Vec::new()),
            }
        } else if let Some(b) = cur.as_mut() {
            b.push(line);
        }
    }
    blocks
}

fn split_label(line: &str) -> Option<(String, String)> {
    let (head, rest) = line.split_once(':')?;
    Some((head.trim().to_ascii_uppercase(), rest.trim().to_string()))
}

/// Read the labeled reasoning lines and the last fenced block, then parse
/// and validate the program against a scene with `agents` agents.
pub fn parse_response(text: &str, agents: usize) -> UnderstandingTrace {
    let mut trace = UnderstandingTrace::default();
    let mut in_block = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            in_block = !in_block;
            continue;
        }
        if in_block {
            continue;
        }
        let Some((head, rest)) = split_label(line) else { continue };
        let mut words = head.split_whitespace();
        match (words.next(), words.next()) {
            (Some("EVENT"), _) => trace.events.push(EventTrace {
                text: rest,
                ..EventTrace::default()
            }),
            (Some("AGENTS"), _) => {
                if let Some(e) = trace.events.last_mut() {
                    e.agents = rest.split(',').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect();
                }
            }
            (Some("BEHAVIOR"), Some(agent)) => {
                if let Some(e) = trace.events.last_mut() {
                    e.behaviors.push((agent.to_ascii_lowercase(), rest));
                }
            }
            (Some("MAP"), _) => {
                if let Some(e) = trace.events.last_mut() {
                    e.map_related = rest.to_ascii_lowercase().starts_with('y');
                }
            }
            (Some("QUERY"), _) => trace.lane_queries.push(rest),
            _ => {}
        }
    }
    let Some(dsl) = fenced_blocks(text).pop() else {
        trace.error = Some("no fenced program block in the answer".into());
        return trace;
    };
    trace.dsl = Some(dsl.clone());
    match costdsl::parse(&dsl) {
        Err(e) => trace.error = Some(e.to_string()),
        Ok(p) => match p.validate(agents) {
            Err(e) => trace.error = Some(e.to_string()),
            Ok(()) => trace.program = Some(p),
        },
    }
    trace
}

// ---------- refinement ----------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub detail: String,
}

impl Verdict {
    fn pass(detail: impl Into<String>) -> Self {
        Self {
            success: true,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self {
            success: false,
            detail: detail.into(),
        }
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Future positions at 1 Hz, rounded to centimetres.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoordinateTable {
    /// Seconds after the current time.
    pub times: Vec<f64>,
    /// `rows[k][i]` is agent `i` at `times[k]`.
    pub rows: Vec<Vec<[f64; 2]>>,
}

impl CoordinateTable {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let stride = (1.0 / scenario.dt).round().max(1.0) as usize;
        let mut table = Self::default();
        for t in (scenario.t_now..scenario.horizon()).step_by(stride) {
            table.times.push(round2((t - scenario.t_now) as f64 * scenario.dt));
            table.rows.push(
                scenario
                    .agents
                    .iter()
                    .map(|a| {
                        let p = a.states[t].position();
                        [round2(p[0]), round2(p[1])]
                    })
                    .collect(),
            );
        }
        table
    }
}

/// Feedback for one rollout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefinementInput {
    pub table: CoordinateTable,
    /// Per-term values on the denoised estimate, one entry per sampler step.
    pub term_history: Vec<Vec<(String, f64)>>,
    /// Per-term values on the executed futures.
    pub final_terms: Vec<(String, f64)>,
    pub verdict: Option<Verdict>,
    /// Sampling error, when the rollout did not complete.
    pub error: Option<String>,
}

impl RefinementInput {
    pub fn new(
        program: &Program,
        scenario: &Scenario,
        term_history: Vec<Vec<(String, f64)>>,
        verdict: Verdict,
    ) -> std::result::Result<Self, String> {
        let names: Vec<&str> = program.terms.iter().map(|t| t.name.as_str()).collect();
        for entry in &term_history {
            if entry.len() != names.len() || entry.iter().zip(&names).any(|((n, _), m)| n != m) {
                return Err("term history does not match the program's terms".into());
            }
        }
        let ctx = costdsl::EvalContext::from_scenario(program, scenario).map_err(|e| e.to_string())?;
        let final_terms = costdsl::evaluate(program, &ctx).map_err(|e| e.to_string())?.terms;
        Ok(Self {
            table: CoordinateTable::from_scenario(scenario),
            term_history,
            final_terms,
            verdict: Some(verdict),
            error: None,
        })
    }

    pub fn from_error(error: String) -> Self {
        Self {
            error: Some(error),
            ..Self::default()
        }
    }

    fn terms_near_zero(&self) -> bool {
        !self.final_terms.is_empty() && self.final_terms.iter().all(|(_, v)| v.abs() < 1e-3)
    }
}

fn history_rows(h: &[Vec<(String, f64)>]) -> Vec<usize> {
    if h.is_empty() {
        return Vec::new();
    }
    let stride = h.len().div_ceil(8);
    let mut rows: Vec<usize> = (0..h.len()).step_by(stride).collect();
    if rows.last() != Some(&(h.len() - 1)) {
        rows.push(h.len() - 1);
    }
    rows
}

/// Messages asking for a revised program after a rollout.
pub fn build_refinement_prompt(session: &GuidanceSession, input: &RefinementInput) -> Vec<ChatMessage> {
    let prior = session.iterations.last().map_or("", |it| it.dsl.as_str());
    let mut u = String::new();
    let _ = writeln!(u, "Description: {}\n", session.description);
    let _ = writeln!(u, "Scenario:\n{}", session.summary);
    let _ = writeln!(u, "Previous program:\n```\n{prior}\n```\n");
    if let Some(e) = &input.error {
        let _ = writeln!(u, "Sampling with this program failed: {e}\n");
    } else {
        let _ = writeln!(u, "Sampled future positions at 1 Hz (metres):");
        let agents = input.table.rows.first().map_or(0, Vec::len);
        let _ = write!(u, "  t(s)");
        for i in 0..agents {
            let _ = write!(u, " | a{i} x, y");
        }
        u.push('\n');
        for (t, row) in input.table.times.iter().zip(&input.table.rows) {
            let _ = write!(u, "  {t:.2}");
            for p in row {
                let _ = write!(u, " | {:.2}, {:.2}", p[0], p[1]);
            }
            u.push('\n');
        }
        let _ = writeln!(u, "\nTerm values during sampling (unweighted):");
        for k in history_rows(&input.term_history) {
            let vals: Vec<String> = input.term_history[k].iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
            let _ = writeln!(u, "  step {k}: {}", vals.join(", "));
        }
        let vals: Vec<String> = input.final_terms.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
        let _ = writeln!(u, "  executed: {}", vals.join(", "));
        if let Some(v) = &input.verdict {
            let _ = writeln!(
                u,
                "\nChecker verdict: {} ({})",
                if v.success { "success" } else { "failure" },
                v.detail
            );
            if !v.success && input.terms_near_zero() {
                let _ = writeln!(
                    u,
                    "Note: every term is close to zero but the checker failed, so the program does not \
                     express the description. Change the terms, not only the weights."
                );
            }
        }
    }
    let _ = write!(
        u,
        "\nJudge (a) whether the trajectories match the description, (b) whether each cost term is \
         correct, and (c) whether each term's weight is appropriate. Then emit a revised program.\n\n{ANSWER_FORMAT}\n"
    );
    vec![
        ChatMessage::system(format!(
            "You revise cost programs that steer a traffic simulator.\n\n{GRAMMAR_REFERENCE}"
        )),
        ChatMessage::user(u),
    ]
}

// ---------- sessions ----------

/// Result of sampling with one program.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub scenario: Scenario,
    pub term_trace: Vec<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub phase: String,
    pub prompt_hash: String,
    pub messages: Vec<ChatMessage>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub dsl: String,
    pub scenario: Option<Scenario>,
    pub refinement: RefinementInput,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failed,
    UnderstandingOnly,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSession {
    pub description: String,
    pub summary: String,
    pub max_iters: usize,
    pub understanding: Option<UnderstandingTrace>,
    pub iterations: Vec<Iteration>,
    pub exchanges: Vec<Exchange>,
    pub outcome: Outcome,
}

impl GuidanceSession {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn final_scenario(&self) -> Option<&Scenario> {
        self.iterations.last().and_then(|it| it.scenario.as_ref())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }
}

fn call(client: &mut dyn ChatClient, messages: &[ChatMessage]) -> Result<String> {
    let mut last = None;
    for _ in 0..=TRANSPORT_RETRIES {
        match client.complete(messages) {
            Ok(r) => return Ok(r),
            Err(LlmError::Transport(e)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(LlmError::Transport(last.unwrap_or_default()))
}

/// Parse, validate, and check that every refpath resolves in the scene.
fn read_answer(text: &str, scenario: &Scenario) -> UnderstandingTrace {
    let mut trace = parse_response(text, scenario.agents.len());
    if let Some(p) = &trace.program {
        if let Err(e) = costdsl::resolve_refpaths(p, scenario) {
            trace.error = Some(e.to_string());
            trace.program = None;
        }
    }
    trace
}

/// Ask, re-asking with the error message while the answer does not parse.
fn ask(
    client: &mut dyn ChatClient,
    phase: &str,
    mut messages: Vec<ChatMessage>,
    scenario: &Scenario,
    log: &mut Vec<Exchange>,
) -> Result<UnderstandingTrace> {
    let mut attempt = 0;
    loop {
        let response = call(client, &messages)?;
        log.push(Exchange {
            phase: phase.into(),
            prompt_hash: prompt_hash(&messages),
            messages: messages.clone(),
            response: response.clone(),
        });
        let trace = read_answer(&response, scenario);
        if !trace.failed() || attempt == PARSE_REASKS {
            return Ok(trace);
        }
        attempt += 1;
        let err = trace.error.clone().unwrap_or_default();
        messages.push(ChatMessage::assistant(response));
        messages.push(ChatMessage::user(format!(
            "The program was rejected: {err}\nEmit a corrected program in a single fenced code block."
        )));
    }
}

/// Understanding, then up to `max_iters` rounds of sample, check and refine.
/// Client failures end the session with an `Aborted` outcome; the returned
/// log is complete either way.
pub fn run_session(
    description: &str,
    scenario: &Scenario,
    sampler: &mut dyn FnMut(&Program) -> std::result::Result<Rollout, String>,
    checker: &dyn Fn(&Scenario) -> Verdict,
    client: &mut dyn ChatClient,
    max_iters: usize,
) -> GuidanceSession {
    let summary = scenario_summary(scenario);
    let mut session = GuidanceSession {
        description: description.into(),
        summary: summary.clone(),
        max_iters,
        understanding: None,
        iterations: Vec::new(),
        exchanges: Vec::new(),
        outcome: Outcome::Failed,
    };
    let prompt = build_understanding_prompt(description, &summary);
    let trace = match ask(client, "understanding", prompt, scenario, &mut session.exchanges) {
        Ok(t) => t,
        Err(e) => {
            session.outcome = Outcome::Aborted { reason: e.to_string() };
            return session;
        }
    };
    let mut program = trace.program.clone();
    session.understanding = Some(trace);
    if max_iters == 0 {
        session.outcome = Outcome::UnderstandingOnly;
        return session;
    }
    for i in 0..max_iters {
        let Some(p) = program.take() else {
            session.outcome = Outcome::Aborted {
                reason: "no valid program after re-asks".into(),
            };
            return session;
        };
        let (scene, refinement, verdict) = match sampler(&p) {
            Ok(r) => {
                let verdict = checker(&r.scenario);
                match RefinementInput::new(&p, &r.scenario, r.term_trace, verdict.clone()) {
                    Ok(input) => (Some(r.scenario), input, verdict),
                    Err(e) => (Some(r.scenario), RefinementInput::from_error(e.clone()), Verdict::fail(e)),
                }
            }
            Err(e) => (None, RefinementInput::from_error(e.clone()), Verdict::fail(e)),
        };
        session.iterations.push(Iteration {
            dsl: costdsl::print(&p),
            scenario: scene,
            refinement: refinement.clone(),
            verdict: verdict.clone(),
        });
        if verdict.success {
            session.outcome = Outcome::Success;
            return session;
        }
        if i + 1 == max_iters {
            break;
        }
        let prompt = build_refinement_prompt(&session, &refinement);
        match ask(client, "refinement", prompt, scenario, &mut session.exchanges) {
            Ok(t) => program = t.program,
            Err(e) => {
                session.outcome = Outcome::Aborted { reason: e.to_string() };
                return session;
            }
        }
    }
    session.outcome = Outcome::Failed;
    session
}

// ---------- checkers ----------

/// Checker for a behavior type; only the four guided types have one.
pub fn success_checker(kind: FixtureKind) -> Result<fn(&Scenario) -> Verdict> {
    match kind {
        FixtureKind::CutIn => Ok(check_cut_in),
        FixtureKind::OutOfRoad => Ok(check_out_of_road),
        FixtureKind::Yield => Ok(check_yield),
        FixtureKind::Rightmost => Ok(check_rightmost),
        other => Err(LlmError::Checker(other.name().into())),
    }
}

pub fn checker_by_name(name: &str) -> Result<fn(&Scenario) -> Verdict> {
    FixtureKind::parse(name)
        .ok_or_else(|| LlmError::Checker(name.into()))
        .and_then(success_checker)
}

/// Actor and counterpart from the scenario metadata, defaulting to 0 and 1.
pub fn roles(scenario: &Scenario) -> (usize, usize) {
    let get = |k: &str, d: usize| {
        scenario
            .meta
            .as_ref()
            .and_then(|m| m.get(k))
            .and_then(|v| v.as_u64())
            .map_or(d, |v| v as usize)
    };
    (get("actor", 0), get("other", 1))
}

fn lane_path(scenario: &Scenario, lane: u32) -> Option<RefPath> {
    scenario.polyline(lane).ok().and_then(|p| RefPath::from_polyline(p).ok())
}

/// The actor enters the counterpart's lane ahead of it with a gap under
/// `CUT_IN_MAX_GAP` at the first step they share a lane.
pub fn check_cut_in(scenario: &Scenario) -> Verdict {
    let (a, b) = roles(scenario);
    if a >= scenario.agents.len() || b >= scenario.agents.len() {
        return Verdict::fail("cut-in needs two agents");
    }
    let t0 = scenario.t_now;
    let pos = |i: usize, t: usize| scenario.agents[i].states[t].position();
    let start = lane_at_point(scenario, pos(a, t0));
    if start.is_some() && start == lane_at_point(scenario, pos(b, t0)) {
        return Verdict::fail("actor already shares the counterpart's lane");
    }
    for t in t0 + 1..scenario.horizon() {
        let (la, lb) = (lane_at_point(scenario, pos(a, t)), lane_at_point(scenario, pos(b, t)));
        if la.is_none() || la != lb {
            continue;
        }
        let Some(path) = lb.and_then(|l| lane_path(scenario, l)) else {
            return Verdict::fail("counterpart lane has no path");
        };
        let gap = path.project(pos(a, t)).s - path.project(pos(b, t)).s;
        let at = (t - t0) as f64 * scenario.dt;
        return if gap > 0.0 && gap < CUT_IN_MAX_GAP {
            Verdict::pass(format!("merged at {at:.1} s with gap {gap:.2} m"))
        } else {
            Verdict::fail(format!("merged at {at:.1} s with gap {gap:.2} m, outside (0, {CUT_IN_MAX_GAP}) m"))
        };
    }
    Verdict::fail("actor never entered the counterpart's lane")
}

/// The actor stays outside every driving-lane corridor for `OFF_ROAD_DWELL`.
pub fn check_out_of_road(scenario: &Scenario) -> Verdict {
    let (a, _) = roles(scenario);
    let Some(track) = scenario.agents.get(a) else {
        return Verdict::fail("no actor");
    };
    let need = (OFF_ROAD_DWELL / scenario.dt).round() as usize;
    let (mut run, mut best) = (0usize, 0usize);
    for s in &track.states[scenario.t_now..] {
        run = if is_offroad(scenario, s.position()) { run + 1 } else { 0 };
        best = best.max(run);
    }
    let secs = best as f64 * scenario.dt;
    if best >= need {
        Verdict::pass(format!("off road for {secs:.1} s"))
    } else {
        Verdict::fail(format!("longest off-road stretch {secs:.1} s"))
    }
}

/// The actor slows below `YIELD_SPEED` before the counterpart passes it
/// along the counterpart's lane.
pub fn check_yield(scenario: &Scenario) -> Verdict {
    let (a, b) = roles(scenario);
    if a >= scenario.agents.len() || b >= scenario.agents.len() {
        return Verdict::fail("yield needs two agents");
    }
    let t0 = scenario.t_now;
    let lane = lane_at_point(scenario, scenario.agents[b].states[t0].position());
    let Some(path) = lane.and_then(|l| lane_path(scenario, l)) else {
        return Verdict::fail("counterpart is not on a lane");
    };
    let (ta, tb) = (&scenario.agents[a].states, &scenario.agents[b].states);
    let pass = (t0..scenario.horizon()).find(|&t| path.project(tb[t].position()).s >= path.project(ta[t].position()).s);
    let Some(pass) = pass else {
        return Verdict::fail("counterpart never passed the actor");
    };
    let slow = (t0.max(1)..=pass).find(|&t| {
        let (p, q) = (ta[t - 1].position(), ta[t].position());
        (q[0] - p[0]).hypot(q[1] - p[1]) / scenario.dt < YIELD_SPEED
    });
    let at = (pass - t0) as f64 * scenario.dt;
    match slow {
        Some(t) => Verdict::pass(format!(
            "actor slowed at {:.1} s, counterpart passed at {at:.1} s",
            (t - t0) as f64 * scenario.dt
        )),
        None => Verdict::fail(format!("actor kept moving until the counterpart passed at {at:.1} s")),
    }
}

/// The actor ends on the rightmost lane of the road it started on.
pub fn check_rightmost(scenario: &Scenario) -> Verdict {
    let (a, _) = roles(scenario);
    let Some(track) = scenario.agents.get(a) else {
        return Verdict::fail("no actor");
    };
    let target = match lane_query(scenario, &LaneQuery::RightmostLane(LaneRef::Agent(a))) {
        Ok(v) if !v.is_empty() => v[0],
        _ => return Verdict::fail("actor is not on a lane"),
    };
    let end = track.states[scenario.horizon() - 1].position();
    match lane_at_point(scenario, end) {
        Some(l) if l == target => Verdict::pass(format!("ends on rightmost lane {l}")),
        Some(l) => Verdict::fail(format!("ends on lane {l}, rightmost is {target}")),
        None => Verdict::fail("ends off every lane"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentState;
    use crate::synth::gen_fixture;

    const GOOD: &str = "EVENT 1: a0 keeps under the limit\nAGENTS 1: a0\nBEHAVIOR a0: slow\nMAP 1: no\n\
                        ```\n(term speed_limit 1.0 (mean_t (sq (relu (sub (speed a0) 10.0)))))\n```\n";

    fn fixture(kind: FixtureKind) -> Scenario {
        gen_fixture(kind, 3).unwrap().scenario
    }

    #[test]
    fn understanding_prompt_contents() {
        let s = fixture(FixtureKind::CutIn);
        let m = build_understanding_prompt("vehicle drives at a speed limit 10m/s", &scenario_summary(&s));
        let all: String = m.iter().map(|m| m.content.clone()).collect();
        for step in COT_STEPS {
            assert!(all.contains(step));
        }
        assert!(all.contains("(refpath NAME QUERY)"));
        assert!(all.contains("split the description into single events"));
        assert!(all.contains("Frenet"));
        assert!(all.contains("a2: position"));
        let again = build_understanding_prompt("vehicle drives at a speed limit 10m/s", &scenario_summary(&s));
        assert_eq!(prompt_hash(&m), prompt_hash(&again));
    }

    #[test]
    fn parse_valid_and_cot_fields() {
        let t = parse_response(GOOD, 1);
        assert!(!t.failed(), "{:?}", t.error);
        assert_eq!(t.events.len(), 1);
        assert_eq!(t.events[0].agents, vec!["a0"]);
        assert_eq!(t.events[0].behaviors, vec![("a0".to_string(), "slow".to_string())]);
        assert!(!t.events[0].map_related);
    }

    #[test]
    fn parse_failures_carry_messages() {
        let t = parse_response("```\n(term x 1.0 (sq 1.0 2.0))\n```", 1);
        assert!(t.failed());
        assert!(t.error.unwrap().contains("line 1"));
        let t = parse_response("no program here", 1);
        assert!(t.failed());
        let t = parse_response("```\n(term x 1.0 (mean_t (speed a3)))\n```", 2);
        assert!(t.error.unwrap().contains("a3"));
    }

    #[test]
    fn last_block_wins() {
        let t = parse_response("```\n(term a 1.0 1.0)\n```\ntext\n```dsl\n(term b 2.0 (mean_t (speed a0)))\n```", 1);
        assert_eq!(t.program.unwrap().terms[0].name, "b");
    }

    #[test]
    fn mock_longest_prefix_and_sequences() {
        let msgs = vec![ChatMessage::user("hi")];
        let h = prompt_hash(&msgs);
        let yaml = format!("\"\": [first, second]\n\"{}\": exact\n", &h[..6]);
        let mut c = MockClient::from_yaml(&yaml).unwrap();
        assert_eq!(c.complete(&msgs).unwrap(), "exact");
        let other = vec![ChatMessage::user("other")];
        assert_eq!(c.complete(&other).unwrap(), "first");
        assert_eq!(c.complete(&other).unwrap(), "second");
        assert_eq!(c.complete(&other).unwrap(), "second");
        assert!(MockClient::from_yaml("\"zz\": x").is_err());
        let mut none = MockClient::from_yaml("\"ffff\": x").unwrap();
        assert!(matches!(none.complete(&other), Err(LlmError::Mock(_))));
    }

    struct Flaky {
        fails: usize,
        calls: usize,
    }

    impl ChatClient for Flaky {
        fn complete(&mut self, _: &[ChatMessage]) -> Result<String> {
            self.calls += 1;
            if self.calls <= self.fails {
                Err(LlmError::Transport("reset".into()))
            } else {
                Ok(GOOD.into())
            }
        }
    }

    fn echo_sampler(s: &Scenario) -> impl FnMut(&Program) -> std::result::Result<Rollout, String> + '_ {
        move |_| {
            Ok(Rollout {
                scenario: s.clone(),
                term_trace: Vec::new(),
            })
        }
    }

    #[test]
    fn transport_retries_then_abort() {
        let s = fixture(FixtureKind::Rightmost);
        let mut ok = Flaky { fails: 3, calls: 0 };
        let sess = run_session("d", &s, &mut echo_sampler(&s), &check_rightmost, &mut ok, 1);
        assert!(sess.succeeded());
        let mut bad = Flaky { fails: 4, calls: 0 };
        let sess = run_session("d", &s, &mut echo_sampler(&s), &check_rightmost, &mut bad, 1);
        assert!(matches!(sess.outcome, Outcome::Aborted { .. }));
        assert_eq!(bad.calls, 4);
    }

    #[test]
    fn max_iters_zero_is_understanding_only() {
        let s = fixture(FixtureKind::Rightmost);
        let mut c = MockClient::from_yaml(&format!("\"\": {:?}", GOOD)).unwrap();
        let mut calls = 0;
        let mut sampler = |_: &Program| {
            calls += 1;
            Err("unused".to_string())
        };
        let sess = run_session("d", &s, &mut sampler, &check_rightmost, &mut c, 0);
        assert_eq!(sess.outcome, Outcome::UnderstandingOnly);
        assert!(sess.iterations.is_empty());
        assert_eq!(calls, 0);
    }

    #[test]
    fn parse_reasks_are_bounded() {
        let s = fixture(FixtureKind::Rightmost);
        let mut c = MockClient::from_yaml("\"\": \"```\\n(term x\\n```\"").unwrap();
        let sess = run_session("d", &s, &mut echo_sampler(&s), &check_rightmost, &mut c, 3);
        assert_eq!(c.seen.len(), 1 + PARSE_REASKS);
        assert!(matches!(sess.outcome, Outcome::Aborted { .. }));
        assert!(sess.exchanges[1].messages.last().unwrap().content.contains("rejected"));
    }

    #[test]
    fn refinement_prompt_reports_terms_and_discrepancy() {
        let s = fixture(FixtureKind::CutIn);
        let p = costdsl::parse("(term zero 1.0 (mean_t (mul 0.0 (speed a0))))").unwrap();
        let trace = vec![vec![("zero".to_string(), 0.0)]; 32];
        let input = RefinementInput::new(&p, &s, trace, Verdict::fail("no merge")).unwrap();
        assert_eq!(input.table.times.len(), 9);
        assert_eq!(input.table.times[1], 1.0);
        let session = GuidanceSession {
            description: "vehicle 1 cuts in".into(),
            summary: scenario_summary(&s),
            max_iters: 2,
            understanding: None,
            iterations: vec![Iteration {
                dsl: costdsl::print(&p),
                scenario: None,
                refinement: input.clone(),
                verdict: Verdict::fail("no merge"),
            }],
            exchanges: vec![],
            outcome: Outcome::Failed,
        };
        let m = build_refinement_prompt(&session, &input);
        let u = &m[1].content;
        assert!(u.contains("every term is close to zero"));
        assert!(u.contains("step 0: zero 0.0000"));
        assert!(u.contains("(c) whether each term's weight"));
        let bad = vec![vec![("other".to_string(), 0.0)]];
        assert!(RefinementInput::new(&p, &s, bad, Verdict::fail("")).is_err());
    }

    #[test]
    fn coordinates_are_rounded() {
        let s = fixture(FixtureKind::Yield);
        let t = CoordinateTable::from_scenario(&s);
        for row in &t.rows {
            for p in row {
                assert_eq!(round2(p[0]), p[0]);
            }
        }
    }

    #[test]
    fn checkers_accept_ground_truth_fixtures() {
        for kind in [FixtureKind::CutIn, FixtureKind::OutOfRoad, FixtureKind::Yield, FixtureKind::Rightmost] {
            let check = success_checker(kind).unwrap();
            for seed in 0..20 {
                let s = gen_fixture(kind, seed).unwrap().scenario;
                let v = check(&s);
                assert!(v.success, "{} seed {seed}: {}", kind.name(), v.detail);
            }
        }
        assert!(success_checker(FixtureKind::Weaving).is_err());
        assert!(checker_by_name("flying").is_err());
    }

    #[test]
    fn stationary_agent_is_not_off_road() {
        let mut s = fixture(FixtureKind::OutOfRoad);
        let keep = s.agents[0].states[s.t_now];
        for st in &mut s.agents[0].states[s.t_now..] {
            *st = keep;
        }
        assert!(!check_out_of_road(&s).success);
    }

    #[test]
    fn rightmost_is_vacuous_on_rightmost_lane() {
        let mut s = fixture(FixtureKind::Rightmost);
        let other = s.agents[1].clone();
        s.agents[0].states = other.states.iter().map(|st| AgentState::new(st.x - 60.0, st.y, st.heading)).collect();
        assert!(check_rightmost(&s).success);
    }
}
