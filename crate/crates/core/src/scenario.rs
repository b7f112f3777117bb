//! Declarative scenario files.
//!
//! One directive per line, `#` starts a comment, options are `key=value`:
//!
//! ```text
//! sim duration=500s seed=42
//! node n0
//! duplex-link n0 n2 bw=10Mb delay=10ms queue=droptail [limit=50] [buckets=16]
//! udp udp0 src=n0 sink=n3 fid=1 [color=Green]
//! cbr agent=udp0 size=1000 interval=5ms start=1s stop=499s
//! exp agent=udp0 size=1000 burst=800ms idle=2ms rate=5Mb start=0s stop=499s
//! trace file=out.tr
//! ```
//!
//! Bandwidths take `Mb`, `kb` or `b` (decimal bits/s); times take `s`, `ms`,
//! `us` or `ns` and may be fractional as long as they land on a whole
//! nanosecond. Names must be declared before they are referenced.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::engine::SimTime;
use crate::qdisc::{QdiscConfig, QdiscKind};
use crate::traffic::{CbrConfig, ExpOnOffConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioErrorKind {
    #[error("missing `sim` directive")]
    MissingSim,
    #[error("duplicate `{0}` directive")]
    DuplicateDirective(&'static str),
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("unknown option `{0}`")]
    UnknownKey(String),
    #[error("option `{0}` given twice")]
    DuplicateKey(String),
    #[error("missing option `{0}`")]
    MissingKey(&'static str),
    #[error("unknown unit in `{0}`")]
    UnknownUnit(String),
    #[error("invalid value `{value}` for `{key}`: {why}")]
    BadValue {
        key: String,
        value: String,
        why: &'static str,
    },
    #[error("`{0}` is not declared")]
    Undeclared(String),
    #[error("name `{0}` is already declared")]
    DuplicateName(String),
    #[error("expected {0}")]
    Syntax(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct ScenarioError {
    pub line: usize,
    pub kind: ScenarioErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub bandwidth: u64,
    pub delay: SimTime,
    pub qdisc: QdiscConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub name: String,
    pub src: String,
    pub sink: String,
    pub fid: u32,
    pub color: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Cbr(CbrConfig),
    Exp(ExpOnOffConfig),
}

impl GeneratorKind {
    pub fn stop(&self) -> SimTime {
        match self {
            GeneratorKind::Cbr(c) => c.stop,
            GeneratorKind::Exp(c) => c.stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub agent: String,
    pub kind: GeneratorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub duration: SimTime,
    pub seed: u64,
    pub nodes: Vec<String>,
    pub links: Vec<LinkSpec>,
    pub agents: Vec<AgentSpec>,
    pub generators: Vec<GeneratorSpec>,
    pub trace: Option<PathBuf>,
}

impl ScenarioSpec {
    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    pub fn agent_index(&self, name: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.name == name)
    }
}

/// Parses a time such as `10ms`, `0.005s` or `800ms` into nanoseconds.
pub fn parse_time(text: &str) -> Result<SimTime, ScenarioErrorKind> {
    let split = text
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let scale: u64 = match unit {
        "s" => 1_000_000_000,
        "ms" => 1_000_000,
        "us" => 1_000,
        "ns" => 1,
        _ => return Err(ScenarioErrorKind::UnknownUnit(text.to_string())),
    };
    let bad = |why| ScenarioErrorKind::BadValue {
        key: "time".into(),
        value: text.to_string(),
        why,
    };
    let (int, frac) = num.split_once('.').unwrap_or((num, ""));
    if int.is_empty() || frac.contains('.') || (num.contains('.') && frac.is_empty()) {
        return Err(bad("malformed number"));
    }
    let whole: u64 = int.parse().map_err(|_| bad("malformed number"))?;
    let mut nanos = whole.checked_mul(scale).ok_or_else(|| bad("too large"))?;
    let mut place = scale;
    for d in frac.bytes() {
        let digit = u64::from(d - b'0');
        if !place.is_multiple_of(10) {
            if digit != 0 {
                return Err(bad("finer than one nanosecond"));
            }
            continue;
        }
        place /= 10;
        nanos = nanos
            .checked_add(digit * place)
            .ok_or_else(|| bad("too large"))?;
    }
    Ok(SimTime::from_nanos(nanos))
}

/// Parses a bandwidth such as `10Mb`, `64kb` or `1200b` into bits/s.
pub fn parse_bits(text: &str) -> Result<u64, ScenarioErrorKind> {
    let split = text
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let scale = match unit {
        "Mb" => 1_000_000,
        "kb" => 1_000,
        "b" => 1,
        _ => return Err(ScenarioErrorKind::UnknownUnit(text.to_string())),
    };
    let bad = |why| ScenarioErrorKind::BadValue {
        key: "bandwidth".into(),
        value: text.to_string(),
        why,
    };
    let n: u64 = num.parse().map_err(|_| bad("malformed integer"))?;
    n.checked_mul(scale).ok_or_else(|| bad("too large"))
}

pub fn format_time(t: SimTime) -> String {
    let n = t.as_nanos();
    match n {
        0 => "0s".to_string(),
        _ if n.is_multiple_of(1_000_000_000) => format!("{}s", n / 1_000_000_000),
        _ if n.is_multiple_of(1_000_000) => format!("{}ms", n / 1_000_000),
        _ if n.is_multiple_of(1_000) => format!("{}us", n / 1_000),
        _ => format!("{n}ns"),
    }
}

pub fn format_bits(bps: u64) -> String {
    if bps.is_multiple_of(1_000_000) {
        format!("{}Mb", bps / 1_000_000)
    } else if bps.is_multiple_of(1_000) {
        format!("{}kb", bps / 1_000)
    } else {
        format!("{bps}b")
    }
}

/// `key=value` options of one directive.
struct Options {
    map: BTreeMap<String, String>,
}

impl Options {
    fn parse(tokens: &[&str], allowed: &[&str]) -> Result<Self, ScenarioErrorKind> {
        let mut map = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or(ScenarioErrorKind::Syntax("key=value option"))?;
            if !allowed.contains(&k) {
                return Err(ScenarioErrorKind::UnknownKey(k.to_string()));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ScenarioErrorKind::DuplicateKey(k.to_string()));
            }
        }
        Ok(Self { map })
    }

    fn opt(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn req(&self, key: &'static str) -> Result<&str, ScenarioErrorKind> {
        self.opt(key).ok_or(ScenarioErrorKind::MissingKey(key))
    }

    fn time(&self, key: &'static str) -> Result<SimTime, ScenarioErrorKind> {
        parse_time(self.req(key)?)
    }

    fn bits(&self, key: &'static str) -> Result<u64, ScenarioErrorKind> {
        parse_bits(self.req(key)?)
    }

    fn int<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, ScenarioErrorKind> {
        let v = self.req(key)?;
        v.parse().map_err(|_| ScenarioErrorKind::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            why: "expected a non-negative integer",
        })
    }

    fn opt_int<T: std::str::FromStr>(
        &self,
        key: &'static str,
    ) -> Result<Option<T>, ScenarioErrorKind> {
        match self.opt(key) {
            Some(_) => self.int(key).map(Some),
            None => Ok(None),
        }
    }
}

fn positive(key: &'static str, value: u64) -> Result<(), ScenarioErrorKind> {
    if value == 0 {
        return Err(ScenarioErrorKind::BadValue {
            key: key.to_string(),
            value: "0".to_string(),
            why: "must be positive",
        });
    }
    Ok(())
}

#[derive(Default)]
struct Builder {
    sim: Option<(SimTime, u64)>,
    nodes: Vec<String>,
    links: Vec<LinkSpec>,
    agents: Vec<AgentSpec>,
    generators: Vec<(usize, GeneratorSpec)>,
    trace: Option<PathBuf>,
    names: HashSet<String>,
    linked: HashSet<(String, String)>,
}

impl Builder {
    fn declare(&mut self, name: &str) -> Result<(), ScenarioErrorKind> {
        if !self.names.insert(name.to_string()) {
            return Err(ScenarioErrorKind::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    fn node(&self, name: &str) -> Result<String, ScenarioErrorKind> {
        if self.nodes.iter().any(|n| n == name) {
            Ok(name.to_string())
        } else {
            Err(ScenarioErrorKind::Undeclared(name.to_string()))
        }
    }

    fn directive(&mut self, line: usize, tokens: &[&str]) -> Result<(), ScenarioErrorKind> {
        let (head, rest) = tokens.split_first().expect("non-empty line");
        match *head {
            "sim" => {
                if self.sim.is_some() {
                    return Err(ScenarioErrorKind::DuplicateDirective("sim"));
                }
                let o = Options::parse(rest, &["duration", "seed"])?;
                self.sim = Some((o.time("duration")?, o.int("seed")?));
            }
            "node" => {
                let [name] = rest else {
                    return Err(ScenarioErrorKind::Syntax("`node <name>`"));
                };
                self.declare(name)?;
                self.nodes.push(name.to_string());
            }
            "duplex-link" => {
                let [a, b, opts @ ..] = rest else {
                    return Err(ScenarioErrorKind::Syntax("`duplex-link <a> <b> options`"));
                };
                let (a, b) = (self.node(a)?, self.node(b)?);
                if a == b {
                    return Err(ScenarioErrorKind::BadValue {
                        key: "duplex-link".into(),
                        value: a,
                        why: "a node cannot link to itself",
                    });
                }
                let key = if a < b {
                    (a.clone(), b.clone())
                } else {
                    (b.clone(), a.clone())
                };
                if !self.linked.insert(key) {
                    return Err(ScenarioErrorKind::BadValue {
                        key: "duplex-link".into(),
                        value: format!("{a} {b}"),
                        why: "link already declared",
                    });
                }
                let o = Options::parse(opts, &["bw", "delay", "queue", "limit", "buckets"])?;
                let bandwidth = o.bits("bw")?;
                positive("bw", bandwidth)?;
                let mut qdisc = match o.req("queue")? {
                    "droptail" => QdiscConfig::droptail(),
                    "sfq" => QdiscConfig::sfq(),
                    other => {
                        return Err(ScenarioErrorKind::BadValue {
                            key: "queue".into(),
                            value: other.to_string(),
                            why: "expected droptail or sfq",
                        })
                    }
                };
                if let Some(limit) = o.opt_int::<usize>("limit")? {
                    positive("limit", limit as u64)?;
                    qdisc = qdisc.with_limit(limit);
                }
                if let Some(buckets) = o.opt_int::<usize>("buckets")? {
                    if qdisc.kind != QdiscKind::Sfq {
                        return Err(ScenarioErrorKind::BadValue {
                            key: "buckets".into(),
                            value: buckets.to_string(),
                            why: "only applies to sfq",
                        });
                    }
                    positive("buckets", buckets as u64)?;
                    qdisc = qdisc.with_buckets(buckets);
                }
                self.links.push(LinkSpec {
                    a,
                    b,
                    bandwidth,
                    delay: o.time("delay")?,
                    qdisc,
                });
            }
            "udp" => {
                let [name, opts @ ..] = rest else {
                    return Err(ScenarioErrorKind::Syntax("`udp <name> options`"));
                };
                let o = Options::parse(opts, &["src", "sink", "fid", "color"])?;
                let agent = AgentSpec {
                    name: name.to_string(),
                    src: self.node(o.req("src")?)?,
                    sink: self.node(o.req("sink")?)?,
                    fid: o.int("fid")?,
                    color: o.opt("color").map(str::to_string),
                };
                self.declare(name)?;
                self.agents.push(agent);
            }
            "cbr" | "exp" => {
                let kind = if *head == "cbr" {
                    let o = Options::parse(rest, &["agent", "size", "interval", "start", "stop"])?;
                    let cfg = CbrConfig {
                        size: o.int("size")?,
                        interval: o.time("interval")?,
                        start: o.time("start")?,
                        stop: o.time("stop")?,
                    };
                    (o.req("agent")?.to_string(), GeneratorKind::Cbr(cfg))
                } else {
                    let o = Options::parse(
                        rest,
                        &["agent", "size", "burst", "idle", "rate", "start", "stop"],
                    )?;
                    let cfg = ExpOnOffConfig {
                        size: o.int("size")?,
                        burst_mean: o.time("burst")?,
                        idle_mean: o.time("idle")?,
                        rate: o.bits("rate")?,
                        start: o.time("start")?,
                        stop: o.time("stop")?,
                    };
                    (o.req("agent")?.to_string(), GeneratorKind::Exp(cfg))
                };
                let (agent, kind) = kind;
                if !self.agents.iter().any(|a| a.name == agent) {
                    return Err(ScenarioErrorKind::Undeclared(agent));
                }
                let check = match &kind {
                    GeneratorKind::Cbr(c) => c.validate(),
                    GeneratorKind::Exp(c) => c.validate(),
                };
                if let Err(e) = check {
                    return Err(ScenarioErrorKind::BadValue {
                        key: head.to_string(),
                        value: e.to_string(),
                        why: "invalid generator parameters",
                    });
                }
                self.generators.push((line, GeneratorSpec { agent, kind }));
            }
            "trace" => {
                if self.trace.is_some() {
                    return Err(ScenarioErrorKind::DuplicateDirective("trace"));
                }
                let o = Options::parse(rest, &["file"])?;
                self.trace = Some(PathBuf::from(o.req("file")?));
            }
            other => return Err(ScenarioErrorKind::UnknownDirective(other.to_string())),
        }
        Ok(())
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let mut b = Builder::default();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        b.directive(line, &tokens)
            .map_err(|kind| ScenarioError { line, kind })?;
    }
    let (duration, seed) = b.sim.ok_or(ScenarioError {
        line: last_line.max(1),
        kind: ScenarioErrorKind::MissingSim,
    })?;
    for (line, g) in &b.generators {
        if g.kind.stop() > duration {
            return Err(ScenarioError {
                line: *line,
                kind: ScenarioErrorKind::BadValue {
                    key: "stop".into(),
                    value: format_time(g.kind.stop()),
                    why: "exceeds the simulation duration",
                },
            });
        }
    }
    Ok(ScenarioSpec {
        duration,
        seed,
        nodes: b.nodes,
        links: b.links,
        agents: b.agents,
        generators: b.generators.into_iter().map(|(_, g)| g).collect(),
        trace: b.trace,
    })
}

/// Canonical text form; `parse_scenario(&render_scenario(s)) == s`.
pub fn render_scenario(spec: &ScenarioSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "sim duration={} seed={}",
        format_time(spec.duration),
        spec.seed
    );
    for n in &spec.nodes {
        let _ = writeln!(out, "node {n}");
    }
    for l in &spec.links {
        let _ = write!(
            out,
            "duplex-link {} {} bw={} delay={} queue={} limit={}",
            l.a,
            l.b,
            format_bits(l.bandwidth),
            format_time(l.delay),
            l.qdisc.kind,
            l.qdisc.limit
        );
        if l.qdisc.kind == QdiscKind::Sfq {
            let _ = write!(out, " buckets={}", l.qdisc.buckets);
        }
        out.push('\n');
    }
    for a in &spec.agents {
        let _ = write!(
            out,
            "udp {} src={} sink={} fid={}",
            a.name, a.src, a.sink, a.fid
        );
        if let Some(c) = &a.color {
            let _ = write!(out, " color={c}");
        }
        out.push('\n');
    }
    for g in &spec.generators {
        let _ = match g.kind {
            GeneratorKind::Cbr(c) => writeln!(
                out,
                "cbr agent={} size={} interval={} start={} stop={}",
                g.agent,
                c.size,
                format_time(c.interval),
                format_time(c.start),
                format_time(c.stop)
            ),
            GeneratorKind::Exp(c) => writeln!(
                out,
                "exp agent={} size={} burst={} idle={} rate={} start={} stop={}",
                g.agent,
                c.size,
                format_time(c.burst_mean),
                format_time(c.idle_mean),
                format_bits(c.rate),
                format_time(c.start),
                format_time(c.stop)
            ),
        };
    }
    if let Some(p) = &spec.trace {
        let _ = writeln!(out, "trace file={}", p.display());
    }
    out
}
