//! Golden-scenario regression: run bundled scenarios and compare their
//! statistics (and trace digests) against stored expectations.
//!
//! Expectation files hold one check per line:
//!
//! ```text
//! exact <metric> <value>     # string equality
//! band  <metric> <lo> <hi>   # lo <= value <= hi, compared as numbers
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::rc::Rc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::runner::{run_scenario, RunError, RunSummary};
use crate::scenario::{parse_scenario, ScenarioError, ScenarioSpec};
use crate::trace::{TraceRecord, TraceSink};

pub struct Golden {
    pub name: &'static str,
    pub scenario: &'static str,
    pub expected: &'static str,
}

pub const GOLDEN: &[Golden] = &[
    Golden {
        name: "cbr",
        scenario: include_str!("../scenarios/cbr.scn"),
        expected: include_str!("../scenarios/cbr.expected"),
    },
    Golden {
        name: "overload",
        scenario: include_str!("../scenarios/overload.scn"),
        expected: include_str!("../scenarios/overload.expected"),
    },
    Golden {
        name: "sfq",
        scenario: include_str!("../scenarios/sfq.scn"),
        expected: include_str!("../scenarios/sfq.expected"),
    },
    Golden {
        name: "twoflow",
        scenario: include_str!("../scenarios/twoflow.scn"),
        expected: include_str!("../scenarios/twoflow.expected"),
    },
];

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("run: {0}")]
    Run(#[from] RunError),
    #[error("expectation line {line}: {reason}")]
    Expectation { line: usize, reason: String },
}

#[derive(Default)]
struct DigestState {
    hasher: Sha256,
    lines: u64,
    buf: String,
}

/// Hashes the exact bytes a trace file would contain.
#[derive(Clone, Default)]
pub struct DigestTrace(Rc<RefCell<DigestState>>);

impl DigestTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> u64 {
        self.0.borrow().lines
    }

    pub fn hex(&self) -> String {
        let digest = self.0.borrow().hasher.clone().finalize();
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

impl TraceSink for DigestTrace {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()> {
        let mut st = self.0.borrow_mut();
        let st = &mut *st;
        st.buf.clear();
        let _ = writeln!(st.buf, "{rec}");
        st.hasher.update(st.buf.as_bytes());
        st.lines += 1;
        Ok(())
    }
}

pub type Metrics = BTreeMap<String, String>;

pub fn summary_metrics(s: &RunSummary) -> Metrics {
    let mut m = Metrics::new();
    let mut put = |k: String, v: String| {
        m.insert(k, v);
    };
    put("tempo_simulacao_s".into(), s.now.as_secs_f64().to_string());
    put("pacotes_recebidos".into(), s.npkts.to_string());
    put("bytes_recebidos".into(), s.bytes.to_string());
    put("pacotes_perdidos".into(), s.nlost.to_string());
    put("utilizacao_link_pct".into(), s.utilization_pct.to_string());
    put("drops".into(), s.drops().to_string());
    for f in &s.flows {
        put(format!("fid{}_enviados", f.fid), f.sent.to_string());
        put(
            format!("fid{}_recebidos", f.fid),
            f.report.npkts.to_string(),
        );
        put(format!("fid{}_bytes", f.fid), f.report.bytes.to_string());
    }
    m
}

/// Runs a scenario and collects its metrics, hashing the trace if asked.
pub fn scenario_metrics(spec: &ScenarioSpec, digest: bool) -> Result<Metrics, RunError> {
    let sink = DigestTrace::new();
    let trace: Option<Box<dyn TraceSink>> = digest.then(|| Box::new(sink.clone()) as _);
    let summary = run_scenario(spec, trace)?;
    let mut m = summary_metrics(&summary);
    if digest {
        m.insert("trace_lines".into(), sink.lines().to_string());
        m.insert("trace_sha256".into(), sink.hex());
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Check {
    Exact { metric: String, value: String },
    Band { metric: String, lo: f64, hi: f64 },
}

impl Check {
    pub fn metric(&self) -> &str {
        match self {
            Check::Exact { metric, .. } | Check::Band { metric, .. } => metric,
        }
    }
}

pub fn parse_expectations(text: &str) -> Result<Vec<Check>, ValidateError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let err = |reason: &str| ValidateError::Expectation {
            line,
            reason: reason.to_string(),
        };
        match tokens.as_slice() {
            [] => {}
            ["exact", metric, value] => out.push(Check::Exact {
                metric: metric.to_string(),
                value: value.to_string(),
            }),
            ["band", metric, lo, hi] => out.push(Check::Band {
                metric: metric.to_string(),
                lo: lo.parse().map_err(|_| err("bad lower bound"))?,
                hi: hi.parse().map_err(|_| err("bad upper bound"))?,
            }),
            _ => {
                return Err(err(
                    "expected `exact <metric> <value>` or `band <metric> <lo> <hi>`",
                ))
            }
        }
    }
    Ok(out)
}

/// Human-readable descriptions of every failed check.
pub fn compare(metrics: &Metrics, checks: &[Check]) -> Vec<String> {
    let mut failures = Vec::new();
    for c in checks {
        let Some(got) = metrics.get(c.metric()) else {
            failures.push(format!("{}: metric not produced", c.metric()));
            continue;
        };
        match c {
            Check::Exact { metric, value } => {
                if got != value {
                    failures.push(format!("{metric}: expected {value}, got {got}"));
                }
            }
            Check::Band { metric, lo, hi } => match got.parse::<f64>() {
                Ok(v) if (*lo..=*hi).contains(&v) => {}
                _ => failures.push(format!("{metric}: {got} outside [{lo}, {hi}]")),
            },
        }
    }
    failures
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Validates one (possibly modified) scenario against an expectation file.
pub fn validate_spec(name: &str, spec: &ScenarioSpec, expected: &str) -> Outcome {
    let result = parse_expectations(expected).and_then(|checks| {
        let digest = checks.iter().any(|c| c.metric().starts_with("trace_"));
        let metrics = scenario_metrics(spec, digest)?;
        Ok(compare(&metrics, &checks))
    });
    Outcome {
        name: name.to_string(),
        failures: result.unwrap_or_else(|e| vec![e.to_string()]),
    }
}

pub fn validate_golden(g: &Golden) -> Outcome {
    match parse_scenario(g.scenario) {
        Ok(spec) => validate_spec(g.name, &spec, g.expected),
        Err(e) => Outcome {
            name: g.name.to_string(),
            failures: vec![e.to_string()],
        },
    }
}

/// Runs every bundled scenario, concurrently, and returns outcomes sorted by name.
pub fn validate_all() -> Vec<Outcome> {
    let mut outcomes: Vec<Outcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = GOLDEN
            .iter()
            .map(|g| scope.spawn(move || validate_golden(g)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("validation thread panicked"))
            .collect()
    });
    outcomes.sort_by(|a, b| a.name.cmp(&b.name));
    outcomes
}

/// Fresh expectations for a bundled scenario. Files with tolerance bands keep
/// their hand-written lines and only get the trace digest refreshed; all
/// others become a list of `exact` checks on every metric.
pub fn emit_expectations(g: &Golden) -> Result<String, ValidateError> {
    let spec = parse_scenario(g.scenario)?;
    let metrics = scenario_metrics(&spec, true)?;
    let banded = parse_expectations(g.expected)?
        .iter()
        .any(|c| matches!(c, Check::Band { .. }));
    let mut out = String::new();
    if banded {
        for line in g.expected.lines() {
            if !line.starts_with("exact trace_") {
                let _ = writeln!(out, "{line}");
            }
        }
        for k in ["trace_lines", "trace_sha256"] {
            let _ = writeln!(out, "exact {k} {}", metrics[k]);
        }
    } else {
        for (k, v) in metrics {
            let _ = writeln!(out, "exact {k} {v}");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectation_syntax() {
        let checks = parse_expectations("# c\nexact a 1\nband b 0.5 2\n\n").unwrap();
        assert_eq!(checks.len(), 2);
        assert!(parse_expectations("exact a").is_err());
        assert!(parse_expectations("band a x 1").is_err());
    }

    #[test]
    fn compare_reports_each_failure() {
        let mut m = Metrics::new();
        m.insert("a".into(), "1".into());
        m.insert("b".into(), "3.5".into());
        let checks = parse_expectations("exact a 1\nexact a 2\nband b 0 3\nexact c 0\n").unwrap();
        assert_eq!(compare(&m, &checks).len(), 3);
    }

    #[test]
    fn digest_matches_writer_bytes() {
        use crate::engine::SimTime;
        use crate::packet::{Addr, NodeId, Packet};
        use crate::trace::{TraceOp, TraceWriter};
        let pkt = Packet {
            uid: 1,
            fid: 1,
            ptype: "cbr",
            size: 10,
            src: Addr::new(NodeId(0), 0),
            dst: Addr::new(NodeId(1), 0),
            seq: 0,
            birth: SimTime::ZERO,
        };
        let rec = TraceRecord::new(TraceOp::Enqueue, SimTime::ZERO, NodeId(0), NodeId(1), &pkt);
        let mut d = DigestTrace::new();
        let mut w = TraceWriter::new(Vec::new());
        for _ in 0..3 {
            d.record(&rec).unwrap();
            w.record(&rec).unwrap();
        }
        let bytes = w.into_inner().unwrap().unwrap();
        let expect: String = Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(d.hex(), expect);
        assert_eq!(d.lines(), 3);
    }
}
