//! Per-event packet trace in the classic 12-field text layout:
//!
//! ```text
//! <op> <time> <from> <to> <ptype> <size> ------- <fid> <src> <dst> <seq> <uid>
//! ```
//!
//! `op` is one of `+` (enqueue), `-` (dequeue onto the wire), `r` (arrival at
//! `to`) and `d` (drop). Time is decimal seconds with exactly nine fractional
//! digits so that identical runs produce byte-identical files.

use std::cell::RefCell;
use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use crate::engine::SimTime;
use crate::packet::{Addr, FlowId, NodeId, Packet};

pub const FLAGS: &str = "-------";
pub const FIELD_COUNT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceOp {
    Enqueue,
    Dequeue,
    Receive,
    Drop,
}

impl TraceOp {
    pub fn symbol(self) -> char {
        match self {
            TraceOp::Enqueue => '+',
            TraceOp::Dequeue => '-',
            TraceOp::Receive => 'r',
            TraceOp::Drop => 'd',
        }
    }

    pub fn from_symbol(s: &str) -> Option<TraceOp> {
        match s {
            "+" => Some(TraceOp::Enqueue),
            "-" => Some(TraceOp::Dequeue),
            "r" => Some(TraceOp::Receive),
            "d" => Some(TraceOp::Drop),
            _ => None,
        }
    }
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_char(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub op: TraceOp,
    pub time: SimTime,
    /// Queueing node for `+`/`-`/`d`; upstream node for `r`.
    pub from: NodeId,
    /// Next hop for `+`/`-`/`d`; receiving node for `r`.
    pub to: NodeId,
    pub ptype: String,
    pub size: u32,
    pub flags: String,
    pub fid: FlowId,
    pub src: Addr,
    pub dst: Addr,
    pub seq: u64,
    pub uid: u64,
}

impl TraceRecord {
    pub fn new(op: TraceOp, time: SimTime, from: NodeId, to: NodeId, pkt: &Packet) -> Self {
        Self {
            op,
            time,
            from,
            to,
            ptype: pkt.ptype.to_string(),
            size: pkt.size,
            flags: FLAGS.to_string(),
            fid: pkt.fid,
            src: pkt.src,
            dst: pkt.dst,
            seq: pkt.seq,
            uid: pkt.uid,
        }
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {} {} {} {} {}",
            self.op,
            self.time,
            self.from,
            self.to,
            self.ptype,
            self.size,
            self.flags,
            self.fid,
            self.src,
            self.dst,
            self.seq,
            self.uid
        )
    }
}

/// Formats one record as a newline-terminated line.
pub fn format_line(rec: &TraceRecord) -> String {
    let mut s = String::with_capacity(80);
    writeln!(s, "{rec}").expect("writing to a String cannot fail");
    s
}

/// Observer for packet events emitted by the simulation.
pub trait TraceSink {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()>;

    /// Flushes and closes; calling it twice is a no-op.
    fn close_flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Writes formatted lines to any `Write`.
pub struct TraceWriter<W: Write> {
    out: Option<BufWriter<W>>,
    lines: u64,
}

impl TraceWriter<File> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(Self::new(File::create(path)?))
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out: Some(BufWriter::with_capacity(1 << 16, out)),
            lines: 0,
        }
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    /// Closes and hands back the inner writer.
    pub fn into_inner(mut self) -> io::Result<Option<W>> {
        match self.out.take() {
            Some(buf) => buf.into_inner().map(Some).map_err(|e| e.into_error()),
            None => Ok(None),
        }
    }
}

impl<W: Write> TraceSink for TraceWriter<W> {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()> {
        let out = self
            .out
            .as_mut()
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "trace writer closed"))?;
        writeln!(out, "{rec}")?;
        self.lines += 1;
        Ok(())
    }

    fn close_flush(&mut self) -> io::Result<()> {
        if let Some(mut out) = self.out.take() {
            out.flush()?;
        }
        Ok(())
    }
}

/// Keeps records in memory; clones share the same buffer.
#[derive(Clone, Default)]
pub struct MemoryTrace {
    records: Rc<RefCell<Vec<TraceRecord>>>,
}

impl MemoryTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.records.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TraceSink for MemoryTrace {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()> {
        self.records.borrow_mut().push(rec.clone());
        Ok(())
    }
}

/// Fans every record out to several sinks.
pub struct TeeTrace(pub Vec<Box<dyn TraceSink>>);

impl TraceSink for TeeTrace {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()> {
        self.0.iter_mut().try_for_each(|s| s.record(rec))
    }

    fn close_flush(&mut self) -> io::Result<()> {
        self.0.iter_mut().try_for_each(|s| s.close_flush())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cbr_packet() -> Packet {
        Packet {
            uid: 7,
            fid: 2,
            ptype: "cbr",
            size: 1000,
            src: Addr::new(NodeId(1), 0),
            dst: Addr::new(NodeId(3), 1),
            seq: 0,
            birth: SimTime::from_secs(1),
        }
    }

    #[test]
    fn enqueue_line_layout() {
        let rec = TraceRecord::new(
            TraceOp::Enqueue,
            SimTime::from_secs(1),
            NodeId(1),
            NodeId(2),
            &cbr_packet(),
        );
        assert_eq!(
            format_line(&rec),
            "+ 1.000000000 1 2 cbr 1000 ------- 2 1.0 3.1 0 7\n"
        );
        assert_eq!(format_line(&rec).split_whitespace().count(), FIELD_COUNT);
    }

    #[test]
    fn receive_keeps_packet_fields() {
        let pkt = cbr_packet();
        let rec = TraceRecord::new(
            TraceOp::Receive,
            SimTime::from_nanos(1_021_600_000),
            NodeId(2),
            NodeId(3),
            &pkt,
        );
        assert_eq!(
            format_line(&rec),
            "r 1.021600000 2 3 cbr 1000 ------- 2 1.0 3.1 0 7\n"
        );
    }

    #[test]
    fn writer_close_is_idempotent_and_empty_ok() {
        let mut w = TraceWriter::new(Vec::new());
        w.close_flush().unwrap();
        w.close_flush().unwrap();
        assert!(w
            .record(&TraceRecord::new(
                TraceOp::Drop,
                SimTime::ZERO,
                NodeId(0),
                NodeId(1),
                &cbr_packet()
            ))
            .is_err());

        let w = TraceWriter::new(Vec::new());
        assert_eq!(w.into_inner().unwrap().unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn writer_emits_one_line_per_record() {
        let mut w = TraceWriter::new(Vec::new());
        for op in [TraceOp::Enqueue, TraceOp::Dequeue, TraceOp::Receive] {
            w.record(&TraceRecord::new(
                op,
                SimTime::ZERO,
                NodeId(0),
                NodeId(1),
                &cbr_packet(),
            ))
            .unwrap();
        }
        assert_eq!(w.lines(), 3);
        let bytes = w.into_inner().unwrap().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.ends_with('\n'));
    }
}
