//! S-expression cost language over agent trajectories and Frenet
//! coordinates: parser with located errors, type checker, printer,
//! evaluator and reverse-mode gradients.
//!
//! ```text
//! program := (decl | term)+
//! decl    := "(refpath" NAME query ")"
//! query   := "(" QUERYKIND (agentref | laneid) [depth] ")"
//! term    := "(term" NAME FLOAT expr ")"
//! expr    := FLOAT | "(" OP expr* ")" | "(" ACCESSOR args ")"
//! ```
//! Comments run from `;` to end of line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::frenet::RefPath;
use crate::grad::{GradError, Tape, Tensor, Var};
use crate::scene::{wave, LaneQuery, LaneRef, Scenario, SceneError};

const MAX_DEPTH: usize = 128;

/// Parse or type error at a 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {col}: {msg}")]
pub struct DslError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Error)]
pub enum CostError {
    #[error(transparent)]
    Syntax(#[from] DslError),
    #[error("refpath '{name}': {reason}")]
    RefPath { name: String, reason: String },
    #[error("agent a{index} out of range ({count} agents)")]
    Agent { index: usize, count: usize },
    #[error("time index {index} out of range for {len} steps")]
    TimeIndex { index: i64, len: usize },
    #[error("trajectories need at least two steps, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T> = std::result::Result<T, CostError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Neg,
    Abs,
    Sq,
    Sqrt,
    Relu,
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reduce {
    Mean,
    Sum,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Accessor {
    X(usize),
    Y(usize),
    /// Direction of motion from forward differences.
    Heading(usize),
    Speed(usize),
    Accel(usize),
    S(usize, String),
    D(usize, String),
    Dist(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Access(Accessor),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Clamp(f64, f64, Box<Expr>),
    Reduce(Reduce, Box<Expr>),
    /// `sin(ω·k·dt)` at step `k`.
    SinT(f64),
    /// Value at step `k`; negative counts from the end.
    At(i64, Box<Expr>),
    /// Forward difference over dt, last step repeated.
    DiffT(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    CurrentLane,
    LeftLane,
    RightLane,
    RightmostLane,
    LeftmostLane,
    SuccessorChain,
    LeftEdge,
    RightEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Agent(usize),
    Lane(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub kind: QueryKind,
    pub target: Target,
    /// Only for `successor_chain`.
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decl {
    pub name: String,
    pub query: Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub name: String,
    pub weight: f64,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub decls: Vec<Decl>,
    pub terms: Vec<Term>,
}

const UNARY: [(&str, UnOp); 8] = [
    ("neg", UnOp::Neg),
    ("abs", UnOp::Abs),
    ("sq", UnOp::Sq),
    ("sqrt", UnOp::Sqrt),
    ("relu", UnOp::Relu),
    ("sin", UnOp::Sin),
    ("cos", UnOp::Cos),
    ("exp", UnOp::Exp),
];

const BINARY: [(&str, BinOp); 6] = [
    ("add", BinOp::Add),
    ("sub", BinOp::Sub),
    ("mul", BinOp::Mul),
    ("div", BinOp::Div),
    ("min", BinOp::Min),
    ("max", BinOp::Max),
];

const REDUCE: [(&str, Reduce); 4] = [
    ("mean_t", Reduce::Mean),
    ("sum_t", Reduce::Sum),
    ("min_t", Reduce::Min),
    ("max_t", Reduce::Max),
];

const QUERIES: [(&str, QueryKind); 8] = [
    ("current_lane", QueryKind::CurrentLane),
    ("left_lane", QueryKind::LeftLane),
    ("right_lane", QueryKind::RightLane),
    ("rightmost_lane", QueryKind::RightmostLane),
    ("leftmost_lane", QueryKind::LeftmostLane),
    ("successor_chain", QueryKind::SuccessorChain),
    ("left_edge", QueryKind::LeftEdge),
    ("right_edge", QueryKind::RightEdge),
];

fn name_of<T: PartialEq + Copy>(table: &[(&'static str, T)], v: T) -> &'static str {
    table.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("table is complete")
}

fn lookup<T: Copy>(table: &[(&'static str, T)], name: &str) -> Option<T> {
    table.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
}

// ---------- lexing ----------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    Atom(String),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> DslError {
    DslError {
        line,
        col,
        msg: msg.into(),
    }
}

fn lex(text: &str) -> std::result::Result<(Vec<Token>, (usize, usize)), DslError> {
    let mut out = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            ';' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            '(' | ')' => {
                chars.next();
                out.push(Token {
                    tok: if c == '(' { Tok::Open } else { Tok::Close },
                    line,
                    col,
                });
                col += 1;
            }
            c if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.') => {
                let start = col;
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.') {
                        s.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                out.push(Token {
                    tok: Tok::Atom(s),
                    line,
                    col: start,
                });
            }
            other => return Err(err(line, col, format!("unexpected character {other:?}"))),
        }
    }
    Ok((out, (line, col)))
}

// ---------- s-expression tree ----------

#[derive(Debug, Clone)]
enum SexpKind {
    Atom(String),
    List(Vec<Sexp>),
}

#[derive(Debug, Clone)]
struct Sexp {
    kind: SexpKind,
    line: usize,
    col: usize,
}

fn read_forms(tokens: &[Token], end: (usize, usize)) -> std::result::Result<Vec<Sexp>, DslError> {
    // explicit stack so hostile nesting cannot overflow the call stack
    let mut stack: Vec<(usize, usize, Vec<Sexp>)> = Vec::new();
    let mut top = Vec::new();
    for t in tokens {
        match &t.tok {
            Tok::Open => {
                if stack.len() >= MAX_DEPTH {
                    return Err(err(t.line, t.col, "nesting too deep"));
                }
                stack.push((t.line, t.col, Vec::new()));
            }
            Tok::Close => {
                let (line, col, items) = stack
                    .pop()
                    .ok_or_else(|| err(t.line, t.col, "unmatched ')'"))?;
                let node = Sexp {
                    kind: SexpKind::List(items),
                    line,
                    col,
                };
                match stack.last_mut() {
                    Some(parent) => parent.2.push(node),
                    None => top.push(node),
                }
            }
            Tok::Atom(s) => {
                let node = Sexp {
                    kind: SexpKind::Atom(s.clone()),
                    line: t.line,
                    col: t.col,
                };
                match stack.last_mut() {
                    Some(parent) => parent.2.push(node),
                    None => return Err(err(t.line, t.col, format!("'{s}' outside a form"))),
                }
            }
        }
    }
    if let Some((line, col, _)) = stack.last() {
        return Err(err(
            *line,
            *col,
            format!("unclosed '(' (input ends at line {}, column {})", end.0, end.1),
        ));
    }
    Ok(top)
}

// ---------- typed conversion ----------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Scalar,
    Series,
}

fn parse_float(s: &Sexp) -> std::result::Result<f64, DslError> {
    match &s.kind {
        SexpKind::Atom(a) if looks_numeric(a) => match a.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(err(s.line, s.col, format!("invalid number '{a}'"))),
        },
        SexpKind::Atom(a) => Err(err(s.line, s.col, format!("expected a number, got '{a}'"))),
        SexpKind::List(_) => Err(err(s.line, s.col, "expected a number, got a form")),
    }
}

fn looks_numeric(a: &str) -> bool {
    let b = a.trim_start_matches(['-', '+']);
    b.starts_with(|c: char| c.is_ascii_digit() || c == '.')
}

fn parse_int(s: &Sexp) -> std::result::Result<i64, DslError> {
    match &s.kind {
        SexpKind::Atom(a) => a
            .parse::<i64>()
            .map_err(|_| err(s.line, s.col, format!("expected an integer, got '{a}'"))),
        SexpKind::List(_) => Err(err(s.line, s.col, "expected an integer, got a form")),
    }
}

fn parse_agent(s: &Sexp) -> std::result::Result<usize, DslError> {
    if let SexpKind::Atom(a) = &s.kind {
        if let Some(d) = a.strip_prefix('a') {
            if !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(i) = d.parse() {
                    return Ok(i);
                }
            }
        }
    }
    Err(err(s.line, s.col, "expected an agent reference like a0"))
}

fn is_agent_ref(a: &str) -> bool {
    a.strip_prefix('a')
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

fn parse_name(s: &Sexp, what: &str) -> std::result::Result<String, DslError> {
    match &s.kind {
        SexpKind::Atom(a)
            if a.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_')
                && a.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                && !is_agent_ref(a) =>
        {
            Ok(a.clone())
        }
        SexpKind::Atom(a) => Err(err(s.line, s.col, format!("invalid {what} name '{a}'"))),
        SexpKind::List(_) => Err(err(s.line, s.col, format!("expected a {what} name"))),
    }
}

fn list<'a>(s: &'a Sexp) -> Option<(&'a str, &'a [Sexp])> {
    match &s.kind {
        SexpKind::List(items) => match items.first().map(|h| &h.kind) {
            Some(SexpKind::Atom(h)) => Some((h.as_str(), &items[1..])),
            _ => None,
        },
        SexpKind::Atom(_) => None,
    }
}

fn arity(s: &Sexp, op: &str, args: &[Sexp], n: usize) -> std::result::Result<(), DslError> {
    if args.len() != n {
        return Err(err(
            s.line,
            s.col,
            format!("'{op}' takes {n} argument{}, got {}", if n == 1 { "" } else { "s" }, args.len()),
        ));
    }
    Ok(())
}

struct Converter<'a> {
    refpaths: &'a BTreeSet<String>,
}

impl Converter<'_> {
    fn series(&self, s: &Sexp) -> std::result::Result<Expr, DslError> {
        match self.expr(s)? {
            (e, Ty::Series) => Ok(e),
            (_, Ty::Scalar) => Err(err(s.line, s.col, "expected a time series, got a scalar")),
        }
    }

    fn refpath(&self, s: &Sexp) -> std::result::Result<String, DslError> {
        let name = parse_name(s, "refpath")?;
        if !self.refpaths.contains(&name) {
            return Err(err(s.line, s.col, format!("undeclared refpath '{name}'")));
        }
        Ok(name)
    }

    fn expr(&self, s: &Sexp) -> std::result::Result<(Expr, Ty), DslError> {
        if let SexpKind::Atom(a) = &s.kind {
            if looks_numeric(a) {
                return Ok((Expr::Num(parse_float(s)?), Ty::Scalar));
            }
            return Err(err(s.line, s.col, format!("unexpected symbol '{a}'")));
        }
        let (op, args) = list(s).ok_or_else(|| err(s.line, s.col, "expected an operator"))?;
        if let Some(u) = lookup(&UNARY, op) {
            arity(s, op, args, 1)?;
            let (e, t) = self.expr(&args[0])?;
            return Ok((Expr::Unary(u, Box::new(e)), t));
        }
        if let Some(b) = lookup(&BINARY, op) {
            arity(s, op, args, 2)?;
            let (l, tl) = self.expr(&args[0])?;
            let (r, tr) = self.expr(&args[1])?;
            let t = if tl == Ty::Series || tr == Ty::Series {
                Ty::Series
            } else {
                Ty::Scalar
            };
            return Ok((Expr::Binary(b, Box::new(l), Box::new(r)), t));
        }
        if let Some(r) = lookup(&REDUCE, op) {
            arity(s, op, args, 1)?;
            return match self.expr(&args[0])? {
                (e, Ty::Series) => Ok((Expr::Reduce(r, Box::new(e)), Ty::Scalar)),
                (_, Ty::Scalar) => Err(err(
                    args[0].line,
                    args[0].col,
                    format!("'{op}' needs a time series; its argument is already reduced"),
                )),
            };
        }
        let agent = |i: usize| parse_agent(&args[i]);
        let acc = |a: Accessor| Ok((Expr::Access(a), Ty::Series));
        match op {
            "clamp" => {
                arity(s, op, args, 3)?;
                let (lo, hi) = (parse_float(&args[0])?, parse_float(&args[1])?);
                if lo > hi {
                    return Err(err(s.line, s.col, format!("clamp bounds {lo} > {hi}")));
                }
                let (e, t) = self.expr(&args[2])?;
                Ok((Expr::Clamp(lo, hi, Box::new(e)), t))
            }
            "sin_t" => {
                arity(s, op, args, 1)?;
                Ok((Expr::SinT(parse_float(&args[0])?), Ty::Series))
            }
            "at" => {
                arity(s, op, args, 2)?;
                let k = parse_int(&args[0])?;
                Ok((Expr::At(k, Box::new(self.series(&args[1])?)), Ty::Scalar))
            }
            "diff_t" => {
                arity(s, op, args, 1)?;
                Ok((Expr::DiffT(Box::new(self.series(&args[0])?)), Ty::Series))
            }
            "x" | "y" | "heading" | "speed" | "accel" => {
                arity(s, op, args, 1)?;
                let a = agent(0)?;
                acc(match op {
                    "x" => Accessor::X(a),
                    "y" => Accessor::Y(a),
                    "heading" => Accessor::Heading(a),
                    "speed" => Accessor::Speed(a),
                    _ => Accessor::Accel(a),
                })
            }
            "s" | "d" => {
                arity(s, op, args, 2)?;
                let (a, r) = (agent(0)?, self.refpath(&args[1])?);
                acc(if op == "s" {
                    Accessor::S(a, r)
                } else {
                    Accessor::D(a, r)
                })
            }
            "dist" => {
                arity(s, op, args, 2)?;
                acc(Accessor::Dist(agent(0)?, agent(1)?))
            }
            "term" | "refpath" => Err(err(s.line, s.col, format!("'{op}' is only allowed at top level"))),
            other => Err(err(s.line, s.col, format!("unknown operator '{other}'"))),
        }
    }
}

fn parse_query(s: &Sexp) -> std::result::Result<Query, DslError> {
    let (head, args) = list(s).ok_or_else(|| err(s.line, s.col, "expected a lane query like (current_lane a0)"))?;
    let kind = lookup(&QUERIES, head).ok_or_else(|| err(s.line, s.col, format!("unknown lane query '{head}'")))?;
    let max_args = if kind == QueryKind::SuccessorChain { 2 } else { 1 };
    if args.is_empty() || args.len() > max_args {
        return Err(err(
            s.line,
            s.col,
            format!("'{head}' takes {} argument(s), got {}", max_args, args.len()),
        ));
    }
    let target = match &args[0].kind {
        SexpKind::Atom(a) if is_agent_ref(a) => Target::Agent(parse_agent(&args[0])?),
        SexpKind::Atom(a) => Target::Lane(
            a.parse()
                .map_err(|_| err(args[0].line, args[0].col, format!("expected an agent or lane id, got '{a}'")))?,
        ),
        SexpKind::List(_) => return Err(err(args[0].line, args[0].col, "expected an agent or lane id")),
    };
    let depth = match args.get(1) {
        Some(d) => Some(
            usize::try_from(parse_int(d)?).map_err(|_| err(d.line, d.col, "depth must be non-negative"))?,
        ),
        None => None,
    };
    Ok(Query { kind, target, depth })
}

/// Parse and type-check a program.
pub fn parse(text: &str) -> std::result::Result<Program, DslError> {
    let (tokens, end) = lex(text)?;
    let forms = read_forms(&tokens, end)?;
    let mut declared = BTreeSet::new();
    let mut decls = Vec::new();
    for f in &forms {
        match list(f) {
            Some(("refpath", args)) => {
                arity(f, "refpath", args, 2)?;
                let name = parse_name(&args[0], "refpath")?;
                if !declared.insert(name.clone()) {
                    return Err(err(args[0].line, args[0].col, format!("duplicate refpath '{name}'")));
                }
                decls.push(Decl {
                    name,
                    query: parse_query(&args[1])?,
                });
            }
            Some(("term", _)) => {}
            Some((other, _)) => {
                return Err(err(f.line, f.col, format!("expected 'term' or 'refpath', got '{other}'")))
            }
            None => return Err(err(f.line, f.col, "expected 'term' or 'refpath'")),
        }
    }
    let conv = Converter { refpaths: &declared };
    let mut names = BTreeSet::new();
    let mut terms = Vec::new();
    for f in &forms {
        if let Some(("term", args)) = list(f) {
            arity(f, "term", args, 3)?;
            let name = parse_name(&args[0], "term")?;
            if !names.insert(name.clone()) {
                return Err(err(args[0].line, args[0].col, format!("duplicate term '{name}'")));
            }
            let weight = parse_float(&args[1])?;
            if weight < 0.0 {
                return Err(err(args[1].line, args[1].col, "term weight must be non-negative"));
            }
            let (expr, ty) = conv.expr(&args[2])?;
            if ty == Ty::Series {
                return Err(err(
                    args[2].line,
                    args[2].col,
                    "unreduced time dimension: wrap the expression in mean_t, sum_t, min_t, max_t or at",
                ));
            }
            terms.push(Term { name, weight, expr });
        }
    }
    if terms.is_empty() {
        return Err(err(end.0, end.1, "program has no terms"));
    }
    Ok(Program { decls, terms })
}

// ---------- printing ----------

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Agent(a) => write!(f, "a{a}"),
            Target::Lane(l) => write!(f, "{l}"),
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} {}", name_of(&QUERIES, self.kind), self.target)?;
        if let Some(d) = self.depth {
            write!(f, " {d}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Access(a) => match a {
                Accessor::X(i) => write!(f, "(x a{i})"),
                Accessor::Y(i) => write!(f, "(y a{i})"),
                Accessor::Heading(i) => write!(f, "(heading a{i})"),
                Accessor::Speed(i) => write!(f, "(speed a{i})"),
                Accessor::Accel(i) => write!(f, "(accel a{i})"),
                Accessor::S(i, r) => write!(f, "(s a{i} {r})"),
                Accessor::D(i, r) => write!(f, "(d a{i} {r})"),
                Accessor::Dist(i, j) => write!(f, "(dist a{i} a{j})"),
            },
            Expr::Unary(op, e) => write!(f, "({} {e})", name_of(&UNARY, *op)),
            Expr::Binary(op, l, r) => write!(f, "({} {l} {r})", name_of(&BINARY, *op)),
            Expr::Clamp(lo, hi, e) => write!(f, "(clamp {lo:?} {hi:?} {e})"),
            Expr::Reduce(op, e) => write!(f, "({} {e})", name_of(&REDUCE, *op)),
            Expr::SinT(w) => write!(f, "(sin_t {w:?})"),
            Expr::At(k, e) => write!(f, "(at {k} {e})"),
            Expr::DiffT(e) => write!(f, "(diff_t {e})"),
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.decls {
            writeln!(f, "(refpath {} {})", d.name, d.query)?;
        }
        for t in &self.terms {
            writeln!(f, "(term {} {:?} {})", t.name, t.weight, t.expr)?;
        }
        Ok(())
    }
}

/// Canonical text of a program; `parse(&print(p)) == p`.
pub fn print(program: &Program) -> String {
    program.to_string()
}

impl Program {
    /// Highest agent index referenced anywhere, if any.
    pub fn max_agent(&self) -> Option<usize> {
        fn walk(e: &Expr, m: &mut Option<usize>) {
            let mut see = |i: usize| *m = Some(m.map_or(i, |x: usize| x.max(i)));
            match e {
                Expr::Access(a) => match a {
                    Accessor::X(i)
                    | Accessor::Y(i)
                    | Accessor::Heading(i)
                    | Accessor::Speed(i)
                    | Accessor::Accel(i)
                    | Accessor::S(i, _)
                    | Accessor::D(i, _) => see(*i),
                    Accessor::Dist(i, j) => {
                        see(*i);
                        see(*j)
                    }
                },
                Expr::Unary(_, e) | Expr::Clamp(_, _, e) | Expr::Reduce(_, e) | Expr::At(_, e) | Expr::DiffT(e) => {
                    walk(e, m)
                }
                Expr::Binary(_, l, r) => {
                    walk(l, m);
                    walk(r, m)
                }
                Expr::Num(_) | Expr::SinT(_) => {}
            }
        }
        let mut m = None;
        for d in &self.decls {
            if let Target::Agent(a) = d.query.target {
                m = Some(m.map_or(a, |x: usize| x.max(a)));
            }
        }
        for t in &self.terms {
            walk(&t.expr, &mut m);
        }
        m
    }

    /// Check agent references against a scene with `agents` agents.
    pub fn validate(&self, agents: usize) -> Result<()> {
        match self.max_agent() {
            Some(i) if i >= agents => Err(CostError::Agent {
                index: i,
                count: agents,
            }),
            _ => Ok(()),
        }
    }
}

// ---------- evaluation ----------

/// Trajectories (per agent, `T` positions starting at the current step)
/// with the program's reference paths resolved against a scenario.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub refpaths: BTreeMap<String, RefPath>,
    pub dt: f64,
}

fn resolve_query(scenario: &Scenario, q: &Query) -> std::result::Result<Vec<u32>, SceneError> {
    let r = match q.target {
        Target::Agent(a) => LaneRef::Agent(a),
        Target::Lane(l) => LaneRef::Lane(l),
    };
    let lq = match q.kind {
        QueryKind::CurrentLane => match q.target {
            Target::Agent(a) => LaneQuery::CurrentLane(a),
            Target::Lane(l) => {
                scenario.polyline(l)?;
                return Ok(vec![l]);
            }
        },
        QueryKind::LeftLane => LaneQuery::LeftLane(r),
        QueryKind::RightLane => LaneQuery::RightLane(r),
        QueryKind::RightmostLane => LaneQuery::RightmostLane(r),
        QueryKind::LeftmostLane => LaneQuery::LeftmostLane(r),
        QueryKind::SuccessorChain => LaneQuery::SuccessorChain(r, q.depth.unwrap_or(1)),
        QueryKind::LeftEdge => LaneQuery::LeftEdge(r),
        QueryKind::RightEdge => LaneQuery::RightEdge(r),
    };
    scenario.lane_query(&lq)
}

/// Resolve every refpath declaration against `scenario` (agents' lanes at `t_now`).
pub fn resolve_refpaths(program: &Program, scenario: &Scenario) -> Result<BTreeMap<String, RefPath>> {
    let mut out = BTreeMap::new();
    for d in &program.decls {
        let fail = |reason: String| CostError::RefPath {
            name: d.name.clone(),
            reason,
        };
        let ids = resolve_query(scenario, &d.query).map_err(|e| fail(e.to_string()))?;
        if ids.is_empty() {
            return Err(fail(format!("{} matched no lane", d.query)));
        }
        let polys = ids
            .iter()
            .map(|&id| scenario.polyline(id))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fail(e.to_string()))?;
        let path = RefPath::from_joined(polys).map_err(|e| fail(e.to_string()))?;
        out.insert(d.name.clone(), path);
    }
    Ok(out)
}

impl EvalContext {
    pub fn new(program: &Program, scenario: &Scenario, trajectories: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        program.validate(trajectories.len())?;
        Ok(Self {
            trajectories,
            refpaths: resolve_refpaths(program, scenario)?,
            dt: scenario.dt,
        })
    }

    /// Context over the scenario's own future (`t_now` through the last step).
    pub fn from_scenario(program: &Program, scenario: &Scenario) -> Result<Self> {
        let trajs = future_trajectories(scenario);
        Self::new(program, scenario, trajs)
    }

    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len())
    }
}

/// Positions from `t_now` to the end of each track.
pub fn future_trajectories(scenario: &Scenario) -> Vec<Vec<[f64; 2]>> {
    scenario
        .agents
        .iter()
        .map(|a| a.states[scenario.t_now..].iter().map(|s| s.position()).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostValue {
    pub total: f64,
    /// `(name, unweighted value)` per term, in program order.
    pub terms: Vec<(String, f64)>,
}

struct Builder<'a> {
    tape: Tape,
    ctx: &'a EvalContext,
    leaves: Vec<Var>,
    t: usize,
    cache: BTreeMap<String, Var>,
}

impl<'a> Builder<'a> {
    fn new(ctx: &'a EvalContext) -> Result<Self> {
        let t = ctx.steps();
        if t < 2 {
            return Err(CostError::TooShort(t));
        }
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        for traj in &ctx.trajectories {
            if traj.len() != t {
                return Err(CostError::TooShort(traj.len().min(t)));
            }
            let data = traj.iter().flat_map(|p| [p[0], p[1]]).collect();
            leaves.push(tape.leaf(Tensor::new(vec![t, 2], data)?));
        }
        Ok(Self {
            tape,
            ctx,
            leaves,
            t,
            cache: BTreeMap::new(),
        })
    }

    fn agent(&self, a: usize) -> Result<Var> {
        self.leaves.get(a).copied().ok_or(CostError::Agent {
            index: a,
            count: self.leaves.len(),
        })
    }

    fn cached(&mut self, key: String, f: impl FnOnce(&mut Self) -> Result<Var>) -> Result<Var> {
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let v = f(self)?;
        self.cache.insert(key, v);
        Ok(v)
    }

    fn coord(&mut self, a: usize, axis: usize) -> Result<Var> {
        self.cached(format!("c{a}.{axis}"), |b| {
            let leaf = b.agent(a)?;
            let col = b.tape.gather(leaf, 1, &[axis])?;
            Ok(b.tape.reshape(col, &[b.t])?)
        })
    }

    /// Forward difference over dt with the last step repeated.
    fn diff(&mut self, v: Var) -> Result<Var> {
        let t = self.t;
        let hi = self.tape.gather(v, 0, &(1..t).collect::<Vec<_>>())?;
        let lo = self.tape.gather(v, 0, &(0..t - 1).collect::<Vec<_>>())?;
        let d = self.tape.sub(hi, lo)?;
        let d = self.tape.scale(d, 1.0 / self.ctx.dt);
        let mut idx: Vec<usize> = (0..t - 1).collect();
        idx.push(t - 2);
        Ok(self.tape.gather(d, 0, &idx)?)
    }

    fn velocity(&mut self, a: usize) -> Result<(Var, Var)> {
        let x = self.coord(a, 0)?;
        let y = self.coord(a, 1)?;
        let vx = self.cached(format!("vx{a}"), |b| b.diff(x))?;
        let vy = self.cached(format!("vy{a}"), |b| b.diff(y))?;
        Ok((vx, vy))
    }

    fn speed(&mut self, a: usize) -> Result<Var> {
        let (vx, vy) = self.velocity(a)?;
        self.cached(format!("v{a}"), |b| {
            let (x2, y2) = (b.tape.square(vx), b.tape.square(vy));
            let s = b.tape.add(x2, y2)?;
            Ok(b.tape.sqrt(s))
        })
    }

    fn frenet(&mut self, a: usize, r: &str, lateral: bool) -> Result<Var> {
        let key = format!("{}{a}.{r}", if lateral { "d" } else { "s" });
        self.cached(key, |b| {
            let path = b.ctx.refpaths.get(r).ok_or_else(|| CostError::RefPath {
                name: r.to_string(),
                reason: "not resolved in this context".into(),
            })?;
            let traj = &b.ctx.trajectories[a];
            let proj = path.project_trajectory(traj);
            let (vals, grads): (Vec<f64>, Vec<f64>) = if lateral {
                (proj.d.clone(), proj.linear.iter().flat_map(|l| l.d_grad).collect())
            } else {
                (proj.s.clone(), proj.linear.iter().flat_map(|l| l.s_grad).collect())
            };
            // value + g·(p − p̄): exact value, gradient of the frozen affine form
            let leaf = b.agent(a)?;
            let frozen = b.tape.constant(b.tape.value(leaf).clone());
            let delta = b.tape.sub(leaf, frozen)?;
            let g = b.tape.constant(Tensor::new(vec![b.t, 2], grads)?);
            let prod = b.tape.mul(delta, g)?;
            let lin = b.tape.sum_axis(prod, 1)?;
            let base = b.tape.constant(Tensor::vector(vals));
            Ok(b.tape.add(base, lin)?)
        })
    }

    fn access(&mut self, acc: &Accessor) -> Result<Var> {
        match acc {
            Accessor::X(a) => self.coord(*a, 0),
            Accessor::Y(a) => self.coord(*a, 1),
            Accessor::Heading(a) => {
                let (vx, vy) = self.velocity(*a)?;
                Ok(self.tape.atan2(vy, vx)?)
            }
            Accessor::Speed(a) => self.speed(*a),
            Accessor::Accel(a) => {
                let v = self.speed(*a)?;
                self.diff(v)
            }
            Accessor::S(a, r) => {
                self.agent(*a)?;
                self.frenet(*a, r, false)
            }
            Accessor::D(a, r) => {
                self.agent(*a)?;
                self.frenet(*a, r, true)
            }
            Accessor::Dist(a, b) => {
                let (xa, ya, xb, yb) = (self.coord(*a, 0)?, self.coord(*a, 1)?, self.coord(*b, 0)?, self.coord(*b, 1)?);
                let dx = self.tape.sub(xa, xb)?;
                let dy = self.tape.sub(ya, yb)?;
                let (dx2, dy2) = (self.tape.square(dx), self.tape.square(dy));
                let s = self.tape.add(dx2, dy2)?;
                Ok(self.tape.sqrt(s))
            }
        }
    }

    fn expr(&mut self, e: &Expr) -> Result<Var> {
        Ok(match e {
            Expr::Num(v) => self.tape.scalar(*v),
            Expr::Access(a) => self.access(a)?,
            Expr::Unary(op, e) => {
                let x = self.expr(e)?;
                let t = &mut self.tape;
                match op {
                    UnOp::Neg => t.neg(x),
                    UnOp::Abs => t.abs(x),
                    UnOp::Sq => t.square(x),
                    UnOp::Sqrt => t.sqrt(x),
                    UnOp::Relu => t.relu(x),
                    UnOp::Sin => t.sin(x),
                    UnOp::Cos => t.cos(x),
                    UnOp::Exp => t.exp(x),
                }
            }
            Expr::Binary(op, l, r) => {
                let (a, b) = (self.expr(l)?, self.expr(r)?);
                let t = &mut self.tape;
                match op {
                    BinOp::Add => t.add(a, b)?,
                    BinOp::Sub => t.sub(a, b)?,
                    BinOp::Mul => t.mul(a, b)?,
                    BinOp::Div => t.div(a, b)?,
                    BinOp::Min => t.minimum(a, b)?,
                    BinOp::Max => t.maximum(a, b)?,
                }
            }
            Expr::Clamp(lo, hi, e) => {
                let x = self.expr(e)?;
                self.tape.clamp(x, *lo, *hi)
            }
            Expr::Reduce(op, e) => {
                let x = self.expr(e)?;
                let t = &mut self.tape;
                match op {
                    Reduce::Mean => t.mean(x)?,
                    Reduce::Sum => t.sum(x)?,
                    Reduce::Min => t.min(x)?,
                    Reduce::Max => t.max(x)?,
                }
            }
            Expr::SinT(w) => self
                .tape
                .constant(Tensor::vector((0..self.t).map(|k| wave(*w, k)).collect())),
            Expr::At(k, e) => {
                let x = self.expr(e)?;
                let len = self.t as i64;
                let idx = if *k < 0 { len + k } else { *k };
                if !(0..len).contains(&idx) {
                    return Err(CostError::TimeIndex { index: *k, len: self.t });
                }
                let g = self.tape.gather(x, 0, &[idx as usize])?;
                self.tape.reshape(g, &[])?
            }
            Expr::DiffT(e) => {
                let x = self.expr(e)?;
                self.diff(x)?
            }
        })
    }

    /// Builds every term; returns the total and the per-term nodes.
    fn program(&mut self, p: &Program) -> Result<(Var, Vec<Var>)> {
        let mut terms = Vec::new();
        let mut total: Option<Var> = None;
        for t in &p.terms {
            let v = self.expr(&t.expr)?;
            let v = self.tape.reshape(v, &[])?;
            terms.push(v);
            let w = self.tape.scale(v, t.weight);
            total = Some(match total {
                None => w,
                Some(acc) => self.tape.add(acc, w)?,
            });
        }
        Ok((total.expect("programs have at least one term"), terms))
    }
}

/// Total cost `Σ weight·term` and the unweighted per-term values.
pub fn evaluate(program: &Program, ctx: &EvalContext) -> Result<CostValue> {
    let mut b = Builder::new(ctx)?;
    let (total, terms) = b.program(program)?;
    Ok(value_of(&b, program, total, &terms))
}

fn value_of(b: &Builder, program: &Program, total: Var, terms: &[Var]) -> CostValue {
    CostValue {
        total: b.tape.value(total).item(),
        terms: program
            .terms
            .iter()
            .zip(terms)
            .map(|(t, v)| (t.name.clone(), b.tape.value(*v).item()))
            .collect(),
    }
}

/// Cost plus its gradient with respect to every agent's positions.
pub fn gradient(program: &Program, ctx: &EvalContext) -> Result<(CostValue, Vec<Vec<[f64; 2]>>)> {
    let mut b = Builder::new(ctx)?;
    let (total, terms) = b.program(program)?;
    let value = value_of(&b, program, total, &terms);
    let grads = b.tape.backward(total)?;
    let out = b
        .leaves
        .iter()
        .map(|&leaf| {
            let g = grads.get_or_zeros(leaf, &[b.t, 2]);
            g.data().chunks(2).map(|c| [c[0], c[1]]).collect()
        })
        .collect();
    Ok((value, out))
}

// ---------- library ----------

/// A hand-written program for a named behavior. Agent `a0` is the actor and
/// `a1` the counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub name: &'static str,
    pub description: &'static str,
    pub source: &'static str,
}

impl Template {
    pub fn program(&self) -> Program {
        parse(self.source).expect("builtin templates parse")
    }
}

pub fn builtin_library() -> Vec<Template> {
    vec![
        Template {
            name: "speed_limit",
            description: "vehicle 0 stays under 10 m/s",
            source: "(term speed_limit 1.0 (mean_t (sq (relu (sub (speed a0) 10.0)))))",
        },
        Template {
            name: "target_point",
            description: "vehicle 0 ends near a target point ahead in its lane",
            source: "(refpath r (current_lane a0))\n\
                     (term target 1.0 (add (sq (sub (at -1 (s a0 r)) (add (at 0 (s a0 r)) 60.0))) (sq (at -1 (d a0 r)))))",
        },
        Template {
            name: "collision_avoidance",
            description: "vehicles 0 and 1 keep at least 5 m apart",
            source: "(term avoid 1.0 (mean_t (sq (relu (sub 5.0 (dist a0 a1))))))",
        },
        Template {
            name: "left_lane_change",
            description: "vehicle 0 changes into the lane on its left",
            source: "(refpath r (left_lane a0))\n\
                     (term left 1.0 (add (sq (at -1 (d a0 r))) (mean_t (sq (d a0 r)))))",
        },
        Template {
            name: "right_lane_change",
            description: "vehicle 0 changes into the lane on its right",
            source: "(refpath r (right_lane a0))\n\
                     (term right 1.0 (add (sq (at -1 (d a0 r))) (mean_t (sq (d a0 r)))))",
        },
        Template {
            name: "rightmost",
            description: "vehicle 0 moves to the rightmost lane",
            source: "(refpath r (rightmost_lane a0))\n\
                     (term rightmost 1.0 (add (sq (at -1 (d a0 r))) (mean_t (sq (d a0 r)))))",
        },
        Template {
            name: "cut_in",
            description: "vehicle 0 cuts in front of vehicle 1",
            source: "(refpath v (current_lane a1))\n\
                     (term merge 1.0 (add (sq (at -1 (d a0 v))) (mean_t (sq (d a0 v)))))\n\
                     (term ahead 1.0 (sq (relu (sub 6.0 (at -1 (sub (s a0 v) (s a1 v)))))))\n\
                     (term close 1.0 (sq (relu (sub (at -1 (sub (s a0 v) (s a1 v))) 12.0))))\n\
                     (term safe 1.0 (mean_t (sq (relu (sub 6.0 (dist a0 a1))))))",
        },
        Template {
            name: "yield",
            description: "vehicle 0 waits until vehicle 1 has passed",
            source: "(refpath r (current_lane a1))\n\
                     (term wait 1.0 (mean_t (mul (relu (sub (speed a0) 0.3)) (relu (add (sub (s a0 r) (s a1 r)) 5.0)))))",
        },
        Template {
            name: "reverse",
            description: "vehicle 0 drives backwards along its lane",
            source: "(refpath r (current_lane a0))\n\
                     (term reverse 1.0 (mean_t (sq (relu (add (diff_t (s a0 r)) 2.0)))))",
        },
        Template {
            name: "off_road",
            description: "vehicle 0 drives off the right side of the road",
            source: "(refpath e (right_edge a0))\n\
                     (term off_road 1.0 (mean_t (sq (relu (add (d a0 e) 2.0)))))",
        },
        Template {
            name: "weaving",
            description: "vehicle 0 weaves left and right within its lane",
            source: "(refpath r (current_lane a0))\n\
                     (term weave 1.0 (mean_t (sq (sub (d a0 r) (mul 1.5 (sin_t 0.5))))))",
        },
    ]
}

pub fn builtin(name: &str) -> Option<Template> {
    builtin_library().into_iter().find(|t| t.name == name)
}

// ---------- random programs ----------

fn random_float(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..5) {
        0 => rng.gen_range(-20i32..20) as f64,
        1 => rng.gen_range(-10.0..10.0),
        2 => rng.gen_range(0.0..1.0) * 1e-7,
        3 => rng.gen_range(1.0..9.0) * 1e20,
        _ => (rng.gen_range(0..1000) as f64) / 8.0,
    }
}

fn random_expr(rng: &mut impl Rng, ty: Ty, depth: usize, agents: usize, refs: &[String]) -> Expr {
    let agent = |rng: &mut _| Rng::gen_range(rng, 0..agents);
    let leaf_only = depth == 0;
    match ty {
        Ty::Scalar => {
            let choice = if leaf_only { 0 } else { rng.gen_range(0..6) };
            match choice {
                0 => Expr::Num(random_float(rng)),
                1 => {
                    let ops = [Reduce::Mean, Reduce::Sum, Reduce::Min, Reduce::Max];
                    Expr::Reduce(ops[rng.gen_range(0..4)], Box::new(random_expr(rng, Ty::Series, depth - 1, agents, refs)))
                }
                2 => Expr::At(
                    rng.gen_range(-3..3),
                    Box::new(random_expr(rng, Ty::Series, depth - 1, agents, refs)),
                ),
                3 => Expr::Unary(
                    UNARY[rng.gen_range(0..UNARY.len())].1,
                    Box::new(random_expr(rng, Ty::Scalar, depth - 1, agents, refs)),
                ),
                4 => Expr::Binary(
                    BINARY[rng.gen_range(0..BINARY.len())].1,
                    Box::new(random_expr(rng, Ty::Scalar, depth - 1, agents, refs)),
                    Box::new(random_expr(rng, Ty::Scalar, depth - 1, agents, refs)),
                ),
                _ => {
                    let a = random_float(rng);
                    let b = random_float(rng);
                    Expr::Clamp(a.min(b), a.max(b), Box::new(random_expr(rng, Ty::Scalar, depth - 1, agents, refs)))
                }
            }
        }
        Ty::Series => {
            let choice = if leaf_only { rng.gen_range(0..2) } else { rng.gen_range(0..6) };
            match choice {
                0 => {
                    let a = agent(rng);
                    Expr::Access(match rng.gen_range(0..8) {
                        0 => Accessor::X(a),
                        1 => Accessor::Y(a),
                        2 => Accessor::Heading(a),
                        3 => Accessor::Speed(a),
                        4 => Accessor::Accel(a),
                        5 if !refs.is_empty() => Accessor::S(a, refs[rng.gen_range(0..refs.len())].clone()),
                        6 if !refs.is_empty() => Accessor::D(a, refs[rng.gen_range(0..refs.len())].clone()),
                        _ => Accessor::Dist(a, agent(rng)),
                    })
                }
                1 => Expr::SinT(random_float(rng)),
                2 => Expr::DiffT(Box::new(random_expr(rng, Ty::Series, depth - 1, agents, refs))),
                3 => Expr::Unary(
                    UNARY[rng.gen_range(0..UNARY.len())].1,
                    Box::new(random_expr(rng, Ty::Series, depth - 1, agents, refs)),
                ),
                4 => {
                    let series_left = rng.gen_bool(0.5);
                    let s = random_expr(rng, Ty::Series, depth - 1, agents, refs);
                    let ty = if rng.gen_bool(0.5) { Ty::Series } else { Ty::Scalar };
                    let o = random_expr(rng, ty, depth - 1, agents, refs);
                    let op = BINARY[rng.gen_range(0..BINARY.len())].1;
                    if series_left {
                        Expr::Binary(op, Box::new(s), Box::new(o))
                    } else {
                        Expr::Binary(op, Box::new(o), Box::new(s))
                    }
                }
                _ => {
                    let a = random_float(rng);
                    let b = random_float(rng);
                    Expr::Clamp(a.min(b), a.max(b), Box::new(random_expr(rng, Ty::Series, depth - 1, agents, refs)))
                }
            }
        }
    }
}

/// A random well-typed program over `agents` agents, for fuzzing.
pub fn random_program(rng: &mut impl Rng, agents: usize) -> Program {
    let agents = agents.max(1);
    let n_decls = rng.gen_range(0..3);
    let mut decls = Vec::new();
    for i in 0..n_decls {
        let kind = QUERIES[rng.gen_range(0..QUERIES.len())].1;
        let target = if rng.gen_bool(0.7) {
            Target::Agent(rng.gen_range(0..agents))
        } else {
            Target::Lane(rng.gen_range(0..4))
        };
        let depth = (kind == QueryKind::SuccessorChain && rng.gen_bool(0.5)).then(|| rng.gen_range(0..4));
        decls.push(Decl {
            name: format!("r{i}"),
            query: Query { kind, target, depth },
        });
    }
    let refs: Vec<String> = decls.iter().map(|d| d.name.clone()).collect();
    let n_terms = rng.gen_range(1..4);
    let mut terms = Vec::new();
    for i in 0..n_terms {
        let weight = rng.gen_range(0..40) as f64 / 8.0;
        let depth = rng.gen_range(1..5);
        terms.push(Term {
            name: format!("t{i}"),
            weight,
            expr: random_expr(rng, Ty::Scalar, depth, agents, &refs),
        });
    }
    Program { decls, terms }
}
