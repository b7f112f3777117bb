//! Offline trace analytics: parsing, per-flow statistics, lifecycle checks,
//! throughput series and link utilization.
//!
//! Every analysis is a single streaming pass over a `BufRead`; per-packet state
//! is dropped as soon as the packet is delivered or dropped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead};

use thiserror::Error;

use crate::engine::{SimTime, NANOS_PER_SEC};
use crate::packet::{Addr, FlowId, NodeId};
use crate::trace::{TraceOp, TraceRecord, FIELD_COUNT};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

fn field<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("invalid {name} field {s:?}"))
}

fn parse_time(s: &str) -> Result<SimTime, String> {
    let bad = || format!("invalid time field {s:?}");
    let (secs, frac) = s.split_once('.').ok_or_else(bad)?;
    if secs.is_empty()
        || frac.len() != 9
        || !secs.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(bad());
    }
    let secs: u64 = secs.parse().map_err(|_| bad())?;
    let frac: u64 = frac.parse().map_err(|_| bad())?;
    secs.checked_mul(NANOS_PER_SEC)
        .and_then(|n| n.checked_add(frac))
        .map(SimTime::from_nanos)
        .ok_or_else(bad)
}

fn parse_addr(s: &str, name: &str) -> Result<Addr, String> {
    let (node, port) = s
        .split_once('.')
        .ok_or_else(|| format!("invalid {name} address {s:?}"))?;
    Ok(Addr::new(NodeId(field(node, name)?), field(port, name)?))
}

/// Strict parse of one trace line (without line-number context).
pub fn parse_record(text: &str) -> Result<TraceRecord, String> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != FIELD_COUNT {
        return Err(format!(
            "expected {FIELD_COUNT} fields, found {}",
            fields.len()
        ));
    }
    let op = TraceOp::from_symbol(fields[0])
        .ok_or_else(|| format!("unknown event type {:?}", fields[0]))?;
    if fields[6].len() != 7 {
        return Err(format!("invalid flags field {:?}", fields[6]));
    }
    Ok(TraceRecord {
        op,
        time: parse_time(fields[1])?,
        from: NodeId(field(fields[2], "from")?),
        to: NodeId(field(fields[3], "to")?),
        ptype: fields[4].to_string(),
        size: field(fields[5], "size")?,
        flags: fields[6].to_string(),
        fid: field(fields[7], "fid")?,
        src: parse_addr(fields[8], "src")?,
        dst: parse_addr(fields[9], "dst")?,
        seq: field(fields[10], "seq")?,
        uid: field(fields[11], "uid")?,
    })
}

/// Parses `text` as line number `line`.
pub fn parse_line(text: &str, line: u64) -> Result<TraceRecord, AnalyzeError> {
    parse_record(text).map_err(|reason| AnalyzeError::Parse { line, reason })
}

/// Iterates `(line number, record)` pairs; blank lines are skipped.
pub struct TraceReader<R> {
    input: R,
    line: u64,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<(u64, TraceRecord), AnalyzeError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            if self.buf.trim().is_empty() {
                continue;
            }
            return Some(parse_line(&self.buf, self.line).map(|r| (self.line, r)));
        }
    }
}

/// Percentage of link capacity used: `bytes * 8 / (bandwidth * duration) * 100`.
pub fn utilization(
    bytes: u64,
    duration_secs: f64,
    bandwidth_bps: f64,
) -> Result<f64, AnalyzeError> {
    if duration_secs.is_nan() || duration_secs <= 0.0 {
        return Err(AnalyzeError::InvalidArgument("duration must be positive"));
    }
    if bandwidth_bps.is_nan() || bandwidth_bps <= 0.0 {
        return Err(AnalyzeError::InvalidArgument("bandwidth must be positive"));
    }
    Ok(bytes as f64 * 8. / (bandwidth_bps * duration_secs) * 100.)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowStats {
    pub fid: FlowId,
    pub sent: u64,
    pub received: u64,
    pub dropped: u64,
    pub bytes_received: u64,
    total_delay: u128,
    max_delay: Option<SimTime>,
    min_delay: Option<SimTime>,
}

impl FlowStats {
    /// Mean end-to-end delay in seconds; `None` when nothing was received.
    pub fn mean_delay(&self) -> Option<f64> {
        if self.received == 0 || self.max_delay.is_none() {
            return None;
        }
        Some(self.total_delay as f64 / self.received as f64 / NANOS_PER_SEC as f64)
    }

    pub fn max_delay(&self) -> Option<SimTime> {
        self.max_delay
    }

    pub fn min_delay(&self) -> Option<SimTime> {
        self.min_delay
    }
}

/// Per-flow counts and delays between a source node and a sink node.
///
/// A packet is sent at its first `+` at `src`, received at an `r` whose
/// receiving node is `sink`, and its delay runs between the two.
pub fn flow_stats<R: BufRead>(
    input: R,
    fid: FlowId,
    src: NodeId,
    sink: NodeId,
) -> Result<FlowStats, AnalyzeError> {
    let mut stats = FlowStats {
        fid,
        ..FlowStats::default()
    };
    let mut born: HashMap<u64, SimTime> = HashMap::new();
    for item in TraceReader::new(input) {
        let (_, rec) = item?;
        if rec.fid != fid {
            continue;
        }
        match rec.op {
            TraceOp::Enqueue if rec.from == src => {
                if let std::collections::hash_map::Entry::Vacant(e) = born.entry(rec.uid) {
                    e.insert(rec.time);
                    stats.sent += 1;
                }
            }
            TraceOp::Receive if rec.to == sink => {
                stats.received += 1;
                stats.bytes_received += u64::from(rec.size);
                if let Some(t0) = born.remove(&rec.uid) {
                    let d = rec.time.saturating_sub(t0);
                    stats.total_delay += u128::from(d.as_nanos());
                    stats.max_delay = Some(stats.max_delay.map_or(d, |m| m.max(d)));
                    stats.min_delay = Some(stats.min_delay.map_or(d, |m| m.min(d)));
                }
            }
            TraceOp::Drop => {
                stats.dropped += 1;
                born.remove(&rec.uid);
            }
            _ => {}
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: u64,
    pub uid: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Where {
    At(NodeId),
    Queued(NodeId, NodeId),
    OnWire(NodeId, NodeId),
}

/// Checks every packet's lifecycle: per link `+` then `-` or `d`, `r` only
/// after the matching `-`, nothing after delivery or drop, and timestamps
/// non-decreasing down the file. An empty result means the trace is consistent.
pub fn conservation_check<R: BufRead>(input: R) -> Result<Vec<Violation>, AnalyzeError> {
    let mut out = Vec::new();
    let mut live: HashMap<u64, Where> = HashMap::new();
    let mut retired: HashSet<u64> = HashSet::new();
    let mut last_time = SimTime::ZERO;
    for item in TraceReader::new(input) {
        let (line, rec) = item?;
        let mut flag = |reason: String| {
            out.push(Violation {
                line,
                uid: rec.uid,
                reason,
            })
        };
        if rec.time < last_time {
            flag(format!(
                "time {} precedes earlier line at {}",
                rec.time, last_time
            ));
        }
        last_time = last_time.max(rec.time);
        if retired.contains(&rec.uid) {
            flag(format!(
                "'{}' after packet was delivered or dropped",
                rec.op
            ));
            continue;
        }
        let state = live.get(&rec.uid).copied();
        let link = (rec.from, rec.to);
        let next = match rec.op {
            TraceOp::Enqueue => match state {
                None => Some(Where::Queued(rec.from, rec.to)),
                Some(Where::At(n)) if n == rec.from => Some(Where::Queued(rec.from, rec.to)),
                _ => None,
            },
            TraceOp::Dequeue => match state {
                Some(Where::Queued(f, t)) if (f, t) == link => Some(Where::OnWire(f, t)),
                _ => None,
            },
            TraceOp::Receive => match state {
                Some(Where::OnWire(f, t)) if (f, t) == link => Some(Where::At(t)),
                _ => None,
            },
            TraceOp::Drop => match state {
                Some(Where::Queued(f, t)) if (f, t) == link => {
                    live.remove(&rec.uid);
                    retired.insert(rec.uid);
                    continue;
                }
                _ => None,
            },
        };
        match next {
            Some(Where::At(n)) if n == rec.dst.node => {
                live.remove(&rec.uid);
                retired.insert(rec.uid);
            }
            Some(w) => {
                live.insert(rec.uid, w);
            }
            None => flag(format!(
                "'{}' on link {}->{} out of order (state {:?})",
                rec.op, rec.from, rec.to, state
            )),
        }
    }
    Ok(out)
}

/// Received bits per second at `sink` for `fid`, one entry per bin of `bin_secs`.
///
/// Bins run from time zero up to the bin holding the last trace line.
pub fn throughput_series<R: BufRead>(
    input: R,
    fid: FlowId,
    sink: NodeId,
    bin_secs: f64,
) -> Result<Vec<(f64, f64)>, AnalyzeError> {
    if bin_secs.is_nan() || bin_secs <= 0.0 {
        return Err(AnalyzeError::InvalidArgument("bin width must be positive"));
    }
    let bin_ns = (bin_secs * NANOS_PER_SEC as f64).round().max(1.0) as u64;
    let mut bytes: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_bin: Option<u64> = None;
    for item in TraceReader::new(input) {
        let (_, rec) = item?;
        let bin = rec.time.as_nanos() / bin_ns;
        last_bin = Some(last_bin.map_or(bin, |b| b.max(bin)));
        if rec.op == TraceOp::Receive && rec.fid == fid && rec.to == sink {
            *bytes.entry(bin).or_default() += u64::from(rec.size);
        }
    }
    let Some(last) = last_bin else {
        return Ok(Vec::new());
    };
    Ok((0..=last)
        .map(|b| {
            let start = b as f64 * bin_secs;
            let rate = bytes.get(&b).copied().unwrap_or(0) as f64 * 8.0 / bin_secs;
            (start, rate)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{format_line, FLAGS};
    use proptest::prelude::*;

    fn line(op: &str, t: &str, from: u32, to: u32, uid: u64) -> String {
        format!("{op} {t} {from} {to} cbr 1000 ------- 2 1.0 3.1 {uid} {uid}\n")
    }

    #[test]
    fn utilization_reproduces_reported_figure() {
        let u = utilization(334_576_500, 500.0, 1e7).unwrap();
        assert_eq!(u, 53.532239999999994);
        assert_eq!(utilization(99_600_000, 500.0, 1e7).unwrap(), 15.936);
        assert_eq!(utilization(0, 3.0, 1e6).unwrap(), 0.0);
        assert!(utilization(1, 0.0, 1e6).is_err());
        assert!(utilization(1, 1.0, -1.0).is_err());
    }

    #[test]
    fn arity_and_enum_errors_carry_line_numbers() {
        let eleven = "+ 1.000000000 1 2 cbr 1000 ------- 2 1.0 3.1 0";
        match parse_line(eleven, 7) {
            Err(AnalyzeError::Parse { line: 7, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let bad_op = "x 1.000000000 1 2 cbr 1000 ------- 2 1.0 3.1 0 0";
        assert!(parse_line(bad_op, 1).is_err());
        let bad_time = "+ 1.0 1 2 cbr 1000 ------- 2 1.0 3.1 0 0";
        assert!(parse_line(bad_time, 1).is_err());
    }

    #[test]
    fn reader_reports_offending_line() {
        let text = format!(
            "{}\n\nnot a trace line\n",
            line("+", "0.000000000", 0, 1, 0).trim()
        );
        let errs: Vec<_> = TraceReader::new(text.as_bytes())
            .filter_map(Result::err)
            .collect();
        assert!(matches!(errs[0], AnalyzeError::Parse { line: 3, .. }));
    }

    #[test]
    fn empty_trace() {
        let s = flow_stats(&b""[..], 2, NodeId(1), NodeId(3)).unwrap();
        assert_eq!((s.sent, s.received, s.dropped), (0, 0, 0));
        assert_eq!(s.mean_delay(), None);
        assert!(throughput_series(&b""[..], 2, NodeId(3), 1.0)
            .unwrap()
            .is_empty());
        assert!(conservation_check(&b""[..]).unwrap().is_empty());
    }

    fn two_hop(uid: u64, t0: u64) -> Vec<String> {
        let t = |ns: u64| SimTime::from_nanos(ns).to_string();
        vec![
            line("+", &t(t0), 1, 2, uid),
            line("-", &t(t0), 1, 2, uid),
            line("r", &t(t0 + 10_800_000), 1, 2, uid),
            line("+", &t(t0 + 10_800_000), 2, 3, uid),
            line("-", &t(t0 + 10_800_000), 2, 3, uid),
            line("r", &t(t0 + 21_600_000), 2, 3, uid),
        ]
    }

    #[test]
    fn drop_mid_path_bookkeeping() {
        let mut lines = two_hop(0, 0);
        let mut dropped = two_hop(1, 1_000_000);
        dropped.truncate(4);
        dropped.push(line("d", "0.011800000", 2, 3, 1));
        lines.extend(dropped);
        lines.sort_by(|a, b| a.split(' ').nth(1).cmp(&b.split(' ').nth(1)));
        let text = lines.concat();
        let s = flow_stats(text.as_bytes(), 2, NodeId(1), NodeId(3)).unwrap();
        assert_eq!((s.sent, s.received, s.dropped), (2, 1, 1));
        assert_eq!(s.max_delay(), Some(SimTime::from_nanos(21_600_000)));
        assert!(conservation_check(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn receive_before_enqueue_is_one_violation() {
        let text = [
            line("r", "0.010800000", 1, 2, 0),
            line("+", "0.010800000", 1, 2, 0),
            line("-", "0.010800000", 1, 2, 0),
        ]
        .concat();
        let v = conservation_check(text.as_bytes()).unwrap();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].line, 1);
    }

    #[test]
    fn duplicate_receive_at_sink_is_one_violation() {
        let mut lines = two_hop(5, 0);
        lines.push(line("r", "0.021600000", 2, 3, 5));
        let v = conservation_check(lines.concat().as_bytes()).unwrap();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].line, 7);
    }

    #[test]
    fn double_drop_and_time_regression_flagged() {
        let text = [
            line("+", "0.000000000", 1, 2, 0),
            line("d", "0.000000000", 1, 2, 0),
            line("d", "0.000000000", 1, 2, 0),
        ]
        .concat();
        assert_eq!(conservation_check(text.as_bytes()).unwrap().len(), 1);
        let text = [
            line("+", "0.500000000", 1, 2, 0),
            line("+", "0.100000000", 1, 2, 1),
        ]
        .concat();
        assert_eq!(conservation_check(text.as_bytes()).unwrap().len(), 1);
    }

    #[test]
    fn throughput_single_wide_bin_is_mean() {
        let text: String = (0..10).flat_map(|i| two_hop(i, i * 5_000_000)).collect();
        let series = throughput_series(text.as_bytes(), 2, NodeId(3), 100.0).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0], (0.0, 10.0 * 1000.0 * 8.0 / 100.0));
    }

    fn arb_record() -> impl Strategy<Value = TraceRecord> {
        (
            prop_oneof![
                Just(TraceOp::Enqueue),
                Just(TraceOp::Dequeue),
                Just(TraceOp::Receive),
                Just(TraceOp::Drop)
            ],
            any::<u64>().prop_map(|n| n / 4),
            (0u32..1000, 0u32..1000),
            "[a-z]{1,6}",
            1u32..100_000,
            any::<u32>(),
            (0u32..1000, 0u32..64, 0u32..1000, 0u32..64),
            (any::<u64>(), any::<u64>()),
        )
            .prop_map(
                |(op, t, (from, to), ptype, size, fid, (sn, sp, dn, dp), (seq, uid))| TraceRecord {
                    op,
                    time: SimTime::from_nanos(t),
                    from: NodeId(from),
                    to: NodeId(to),
                    ptype,
                    size,
                    flags: FLAGS.to_string(),
                    fid,
                    src: Addr::new(NodeId(sn), sp),
                    dst: Addr::new(NodeId(dn), dp),
                    seq,
                    uid,
                },
            )
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(rec in arb_record()) {
            let text = format_line(&rec);
            prop_assert_eq!(text.split_whitespace().count(), FIELD_COUNT);
            prop_assert_eq!(parse_line(&text, 1).unwrap(), rec);
        }

        #[test]
        fn utilization_scales_linearly(
            bytes in 1u64..1_000_000_000_000,
            dur in 0.001f64..10_000.0,
            bw in 1_000.0f64..1e11,
            k in 2u64..50,
        ) {
            let base = utilization(bytes, dur, bw).unwrap();
            let rel = |a: f64, b: f64| ((a - b) / b).abs();
            prop_assert!(rel(utilization(bytes * k, dur, bw).unwrap(), base * k as f64) < 1e-12);
            prop_assert!(rel(utilization(bytes, dur * k as f64, bw).unwrap(), base / k as f64) < 1e-12);
            prop_assert!(rel(utilization(bytes, dur, bw * k as f64).unwrap(), base / k as f64) < 1e-12);
        }
    }
}
