//! Transport agents, traffic generators and the seeded random source.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::{EventId, SimTime};
use crate::net::tx_time;
use crate::packet::{Addr, FlowId, NodeId, Packet};
use crate::qdisc::splitmix64_mix;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent sub-stream for the generator with the given ordinal.
    pub fn for_generator(seed: u64, ordinal: u64) -> Self {
        Rng::new(Rng::new(seed ^ ordinal).next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        splitmix64_mix(self.state)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// `-mean * ln(1 - u)` floored to whole nanoseconds.
pub fn exp_from_uniform(mean: SimTime, u: f64) -> SimTime {
    let x = -(mean.as_nanos() as f64) * (1.0 - u).ln();
    SimTime::from_nanos(x.floor().max(0.0) as u64)
}

pub fn exp_variate(mean: SimTime, rng: &mut Rng) -> SimTime {
    exp_from_uniform(mean, rng.next_f64())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrafficError {
    #[error("agent {0} is not connected to a sink")]
    Unconnected(usize),
    #[error("unknown agent {0}")]
    UnknownAgent(usize),
    #[error("unknown sink {0}")]
    UnknownSink(usize),
    #[error("invalid generator parameters: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbrConfig {
    pub size: u32,
    pub interval: SimTime,
    pub start: SimTime,
    pub stop: SimTime,
}

impl CbrConfig {
    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.size == 0 {
            return Err(TrafficError::InvalidConfig(
                "packet size must be at least 1 byte",
            ));
        }
        if self.interval == SimTime::ZERO {
            return Err(TrafficError::InvalidConfig("cbr interval must be positive"));
        }
        if self.start > self.stop {
            return Err(TrafficError::InvalidConfig("start must not exceed stop"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpOnOffConfig {
    pub size: u32,
    /// Mean ON duration.
    pub burst_mean: SimTime,
    /// Mean OFF duration.
    pub idle_mean: SimTime,
    /// Sending rate while ON, bits/s.
    pub rate: u64,
    pub start: SimTime,
    pub stop: SimTime,
}

impl ExpOnOffConfig {
    /// Packet spacing while ON: `size * 8 / rate`.
    pub fn spacing(&self) -> SimTime {
        tx_time(self.size, self.rate)
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.size == 0 {
            return Err(TrafficError::InvalidConfig(
                "packet size must be at least 1 byte",
            ));
        }
        if self.rate == 0 {
            return Err(TrafficError::InvalidConfig("rate must be positive"));
        }
        if self.burst_mean == SimTime::ZERO || self.idle_mean == SimTime::ZERO {
            return Err(TrafficError::InvalidConfig(
                "burst and idle means must be positive",
            ));
        }
        if self.spacing() == SimTime::ZERO {
            return Err(TrafficError::InvalidConfig(
                "rate too high for 1 ns packet spacing",
            ));
        }
        if self.start > self.stop {
            return Err(TrafficError::InvalidConfig("start must not exceed stop"));
        }
        Ok(())
    }
}

/// UDP-style source bound to a node port.
#[derive(Debug, Clone)]
pub struct UdpAgent {
    pub addr: Addr,
    pub fid: FlowId,
    pub peer: Option<Addr>,
    pub ptype: &'static str,
    next_seq: u64,
    pub sent: u64,
}

impl UdpAgent {
    pub fn new(addr: Addr, fid: FlowId) -> Self {
        Self {
            addr,
            fid,
            peer: None,
            ptype: "udp",
            next_seq: 0,
            sent: 0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.addr.node
    }

    /// Builds the next packet of this flow; the caller supplies the uid.
    /// `None` if the agent has no peer.
    pub fn make_packet(&mut self, uid: u64, size: u32, now: SimTime) -> Option<Packet> {
        let dst = self.peer?;
        let pkt = Packet {
            uid,
            fid: self.fid,
            ptype: self.ptype,
            size,
            src: self.addr,
            dst,
            seq: self.next_seq,
            birth: now,
        };
        self.next_seq += 1;
        self.sent += 1;
        Some(pkt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MonitorReport {
    pub npkts: u64,
    pub bytes: u64,
    pub nlost: u64,
    pub last_arrival: SimTime,
}

#[derive(Debug, Clone, Copy, Default)]
struct FlowProgress {
    highest_seq: u64,
    received: u64,
}

/// Loss-monitoring sink: counts arrivals and infers losses from sequence gaps.
#[derive(Debug, Clone)]
pub struct SinkMonitor {
    pub addr: Addr,
    npkts: u64,
    bytes: u64,
    flows: BTreeMap<FlowId, FlowProgress>,
    last_arrival: SimTime,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("packet {uid} for {dst} delivered to sink {sink}")]
pub struct Misdelivery {
    pub uid: u64,
    pub dst: Addr,
    pub sink: Addr,
}

impl SinkMonitor {
    pub fn new(addr: Addr) -> Self {
        Self {
            addr,
            npkts: 0,
            bytes: 0,
            flows: BTreeMap::new(),
            last_arrival: SimTime::ZERO,
        }
    }

    pub fn on_receive(&mut self, pkt: &Packet, now: SimTime) -> Result<(), Misdelivery> {
        if pkt.dst != self.addr {
            return Err(Misdelivery {
                uid: pkt.uid,
                dst: pkt.dst,
                sink: self.addr,
            });
        }
        self.npkts += 1;
        self.bytes += u64::from(pkt.size);
        let flow = self.flows.entry(pkt.fid).or_default();
        flow.highest_seq = flow.highest_seq.max(pkt.seq);
        flow.received += 1;
        self.last_arrival = now;
        Ok(())
    }

    pub fn nlost(&self) -> u64 {
        self.flows
            .values()
            .map(|f| (f.highest_seq + 1).saturating_sub(f.received))
            .sum()
    }

    pub fn report(&self) -> MonitorReport {
        MonitorReport {
            npkts: self.npkts,
            bytes: self.bytes,
            nlost: self.nlost(),
            last_arrival: self.last_arrival,
        }
    }
}

#[derive(Debug)]
pub struct CbrState {
    pub agent: usize,
    pub cfg: CbrConfig,
    pub pending: Option<EventId>,
    pub stopped: bool,
}

#[derive(Debug)]
pub struct ExpOnOffState {
    pub agent: usize,
    pub cfg: ExpOnOffConfig,
    pub rng: Rng,
    pub pending: Option<EventId>,
    pub stopped: bool,
    /// End of the current ON period.
    pub on_end: SimTime,
    /// Accumulated ON time, clipped at stop.
    pub on_time: SimTime,
    pub periods: u64,
}

impl ExpOnOffState {
    pub fn new(agent: usize, cfg: ExpOnOffConfig, rng: Rng) -> Self {
        Self {
            agent,
            cfg,
            rng,
            pending: None,
            stopped: false,
            on_end: SimTime::ZERO,
            on_time: SimTime::ZERO,
            periods: 0,
        }
    }

    /// Draws the next ON duration and opens a period at `now`.
    pub fn open_period(&mut self, now: SimTime) -> SimTime {
        let d = exp_variate(self.cfg.burst_mean, &mut self.rng);
        self.on_end = now + d;
        self.on_time = self.on_time + d;
        self.periods += 1;
        self.on_end
    }

    pub fn draw_idle(&mut self) -> SimTime {
        exp_variate(self.cfg.idle_mean, &mut self.rng)
    }

    /// True if a packet starting at `t` completes within the ON period.
    pub fn fits(&self, t: SimTime) -> bool {
        t + self.cfg.spacing() <= self.on_end
    }

    /// Fraction of [start, stop) spent ON.
    pub fn duty_cycle(&self) -> f64 {
        let span = self.cfg.stop.saturating_sub(self.cfg.start);
        if span == SimTime::ZERO {
            return 0.0;
        }
        self.on_time.as_nanos() as f64 / span.as_nanos() as f64
    }

    /// Removes the part of an open ON period lying beyond `now`.
    pub fn clip_at(&mut self, now: SimTime) {
        if self.on_end > now {
            self.on_time = self.on_time - (self.on_end - now);
            self.on_end = now;
        }
    }
}

#[derive(Debug)]
pub enum Generator {
    Cbr(CbrState),
    ExpOnOff(ExpOnOffState),
}

impl Generator {
    pub fn agent(&self) -> usize {
        match self {
            Generator::Cbr(g) => g.agent,
            Generator::ExpOnOff(g) => g.agent,
        }
    }
}
