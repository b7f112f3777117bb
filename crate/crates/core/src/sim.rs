//! Simulation state and the store-and-forward packet pipeline.
//!
//! A packet handed to [`Network::forward`] at a node that is not its
//! destination is enqueued on the outgoing link (`+`, plus `d` on overflow).
//! An idle link dequeues immediately (`-`), stays busy for the transmission
//! time, then hands the packet to the propagation delay and dequeues the next
//! one. Arrival at the far end is traced as `r` and the packet is forwarded
//! again or delivered to its sink.

use std::collections::HashMap;
use std::io;

use thiserror::Error;

use crate::engine::{Engine, EngineError, EventId, SimTime};
use crate::net::{ForwardingTable, LinkCounters, LinkId, NetError, Topology};
use crate::packet::{Addr, FlowId, NodeId, Packet};
use crate::qdisc::{EnqueueResult, QdiscConfig};
use crate::trace::{TraceOp, TraceRecord, TraceSink};
use crate::traffic::{
    CbrConfig, CbrState, ExpOnOffConfig, ExpOnOffState, Generator, Misdelivery, MonitorReport, Rng,
    SinkMonitor, TrafficError, UdpAgent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SinkId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GenId(pub usize);

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("trace write failed: {0}")]
    Trace(#[from] io::Error),
    #[error("internal invariant violated: {0}")]
    Misdelivery(#[from] Misdelivery),
}

impl SimError {
    /// True for violations of the simulator's own invariants.
    pub fn is_internal(&self) -> bool {
        matches!(self, SimError::Misdelivery(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkStats {
    pub from: NodeId,
    pub to: NodeId,
    pub counters: LinkCounters,
    pub held: usize,
}

pub struct Network {
    topo: Topology,
    routes: Option<ForwardingTable>,
    agents: Vec<UdpAgent>,
    sinks: Vec<SinkMonitor>,
    sink_by_addr: HashMap<Addr, usize>,
    next_port: Vec<u32>,
    generators: Vec<Generator>,
    next_uid: u64,
    tracer: Option<Box<dyn TraceSink>>,
    fault: Option<SimError>,
    finished_at: Option<SimTime>,
}

impl Network {
    fn new() -> Self {
        Self {
            topo: Topology::new(),
            routes: None,
            agents: Vec::new(),
            sinks: Vec::new(),
            sink_by_addr: HashMap::new(),
            next_port: Vec::new(),
            generators: Vec::new(),
            next_uid: 0,
            tracer: None,
            fault: None,
            finished_at: None,
        }
    }

    fn fail(&mut self, eng: &mut Engine<Network>, err: SimError) {
        if self.fault.is_none() {
            self.fault = Some(err);
        }
        eng.halt();
    }

    fn trace(&mut self, eng: &mut Engine<Network>, op: TraceOp, link: LinkId, pkt: &Packet) {
        let Some(tracer) = self.tracer.as_mut() else {
            return;
        };
        let l = self.topo.link(link);
        let rec = TraceRecord::new(op, eng.now(), l.from, l.to, pkt);
        if let Err(e) = tracer.record(&rec) {
            self.fail(eng, e.into());
        }
    }

    fn emit(&mut self, eng: &mut Engine<Network>, agent: usize, size: u32) {
        let uid = self.next_uid;
        let Some(pkt) = self.agents[agent].make_packet(uid, size, eng.now()) else {
            self.fail(eng, TrafficError::Unconnected(agent).into());
            return;
        };
        self.next_uid += 1;
        let at = pkt.src.node;
        self.forward(eng, at, pkt);
    }

    /// Delivers `pkt` if `node` is its destination, otherwise queues it on the
    /// outgoing link toward the destination.
    pub fn forward(&mut self, eng: &mut Engine<Network>, node: NodeId, pkt: Packet) {
        if node == pkt.dst.node {
            self.deliver(eng, pkt);
            return;
        }
        let routes = self.routes.as_ref().expect("routes computed before run");
        let link = match routes.route(node, pkt.dst.node) {
            Ok(l) => l,
            Err(e) => return self.fail(eng, e.into()),
        };
        self.trace(eng, TraceOp::Enqueue, link, &pkt);
        let l = self.topo.link_mut(link);
        l.counters.enqueued += 1;
        if let EnqueueResult::Dropped(victim) = l.qdisc.enqueue(pkt) {
            l.counters.dropped += 1;
            self.trace(eng, TraceOp::Drop, link, &victim);
        }
        if !self.topo.link(link).transmitting {
            self.start_tx(eng, link);
        }
    }

    fn start_tx(&mut self, eng: &mut Engine<Network>, link: LinkId) {
        let l = self.topo.link_mut(link);
        let Some(pkt) = l.qdisc.dequeue() else {
            l.transmitting = false;
            return;
        };
        l.counters.dequeued += 1;
        l.transmitting = true;
        let tx = l.tx_time(pkt.size);
        l.busy_until = eng.now() + tx;
        self.trace(eng, TraceOp::Dequeue, link, &pkt);
        eng.schedule_in(tx, move |net: &mut Network, eng: &mut Engine<Network>| {
            net.tx_done(eng, link, pkt)
        });
    }

    fn tx_done(&mut self, eng: &mut Engine<Network>, link: LinkId, pkt: Packet) {
        let delay = self.topo.link(link).delay;
        eng.schedule_in(
            delay,
            move |net: &mut Network, eng: &mut Engine<Network>| net.arrive(eng, link, pkt),
        );
        self.start_tx(eng, link);
    }

    fn arrive(&mut self, eng: &mut Engine<Network>, link: LinkId, pkt: Packet) {
        self.trace(eng, TraceOp::Receive, link, &pkt);
        let to = self.topo.link(link).to;
        self.forward(eng, to, pkt);
    }

    fn deliver(&mut self, eng: &mut Engine<Network>, pkt: Packet) {
        let now = eng.now();
        let result = match self.sink_by_addr.get(&pkt.dst) {
            Some(&idx) => self.sinks[idx].on_receive(&pkt, now),
            None => Err(Misdelivery {
                uid: pkt.uid,
                dst: pkt.dst,
                sink: pkt.dst,
            }),
        };
        if let Err(e) = result {
            self.fail(eng, e.into());
        }
    }

    fn cbr_fire(&mut self, eng: &mut Engine<Network>, gid: usize) {
        let Generator::Cbr(g) = &self.generators[gid] else {
            unreachable!("generator {gid} is not cbr")
        };
        if g.stopped {
            return;
        }
        let (agent, size, interval) = (g.agent, g.cfg.size, g.cfg.interval);
        self.emit(eng, agent, size);
        let next = eng.schedule_in(
            interval,
            move |net: &mut Network, eng: &mut Engine<Network>| net.cbr_fire(eng, gid),
        );
        if let Generator::Cbr(g) = &mut self.generators[gid] {
            g.pending = Some(next);
        }
    }

    fn exp_state(&mut self, gid: usize) -> &mut ExpOnOffState {
        match &mut self.generators[gid] {
            Generator::ExpOnOff(g) => g,
            Generator::Cbr(_) => unreachable!("generator {gid} is not exponential on-off"),
        }
    }

    fn exp_on(&mut self, eng: &mut Engine<Network>, gid: usize) {
        let now = eng.now();
        let g = self.exp_state(gid);
        if g.stopped {
            return;
        }
        let on_end = g.open_period(now);
        if g.fits(now) {
            self.exp_send(eng, gid);
        } else {
            let ev = eng
                .schedule(
                    on_end,
                    move |net: &mut Network, eng: &mut Engine<Network>| net.exp_off(eng, gid),
                )
                .expect("period end is not in the past");
            self.exp_state(gid).pending = Some(ev);
        }
    }

    fn exp_send(&mut self, eng: &mut Engine<Network>, gid: usize) {
        let g = self.exp_state(gid);
        let (agent, size, spacing) = (g.agent, g.cfg.size, g.cfg.spacing());
        self.emit(eng, agent, size);
        let next = eng.now() + spacing;
        let g = self.exp_state(gid);
        let ev = if g.fits(next) {
            eng.schedule(next, move |net: &mut Network, eng: &mut Engine<Network>| {
                net.exp_send(eng, gid)
            })
        } else {
            eng.schedule(
                g.on_end,
                move |net: &mut Network, eng: &mut Engine<Network>| net.exp_off(eng, gid),
            )
        }
        .expect("next send is not in the past");
        self.exp_state(gid).pending = Some(ev);
    }

    fn exp_off(&mut self, eng: &mut Engine<Network>, gid: usize) {
        let idle = self.exp_state(gid).draw_idle();
        let ev = eng.schedule_in(idle, move |net: &mut Network, eng: &mut Engine<Network>| {
            net.exp_on(eng, gid)
        });
        self.exp_state(gid).pending = Some(ev);
    }

    fn stop_generator(&mut self, eng: &mut Engine<Network>, gid: usize) {
        let now = eng.now();
        let pending = match &mut self.generators[gid] {
            Generator::Cbr(g) => {
                g.stopped = true;
                g.pending.take()
            }
            Generator::ExpOnOff(g) => {
                g.stopped = true;
                g.clip_at(now);
                g.pending.take()
            }
        };
        if let Some(ev) = pending {
            eng.cancel(ev);
        }
    }
}

/// A simulation: the network state plus its event engine.
pub struct Simulation {
    net: Network,
    engine: Engine<Network>,
}

impl Default for Simulation {
    fn default() -> Self {
        Self::new()
    }
}

impl Simulation {
    pub fn new() -> Self {
        Self {
            net: Network::new(),
            engine: Engine::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn topology(&self) -> &Topology {
        &self.net.topo
    }

    pub fn add_node(&mut self) -> Result<NodeId, SimError> {
        let id = self.net.topo.add_node()?;
        self.net.next_port.push(0);
        Ok(id)
    }

    pub fn add_duplex_link(
        &mut self,
        a: NodeId,
        b: NodeId,
        bandwidth: u64,
        delay: SimTime,
        qdisc: QdiscConfig,
    ) -> Result<(LinkId, LinkId), SimError> {
        Ok(self
            .net
            .topo
            .add_duplex_link(a, b, bandwidth, delay, qdisc)?)
    }

    /// Freezes the topology; later calls return the same table.
    pub fn compute_routes(&mut self) -> &ForwardingTable {
        if self.net.routes.is_none() {
            self.net.routes = Some(self.net.topo.compute_routes());
        }
        self.net.routes.as_ref().unwrap()
    }

    pub fn routes(&self) -> Option<&ForwardingTable> {
        self.net.routes.as_ref()
    }

    fn alloc_port(&mut self, node: NodeId) -> Result<Addr, SimError> {
        let slot = self
            .net
            .next_port
            .get_mut(node.index())
            .ok_or(NetError::UnknownNode(node))?;
        let port = *slot;
        *slot += 1;
        Ok(Addr::new(node, port))
    }

    pub fn add_udp(&mut self, node: NodeId, fid: FlowId) -> Result<AgentId, SimError> {
        let addr = self.alloc_port(node)?;
        self.net.agents.push(UdpAgent::new(addr, fid));
        Ok(AgentId(self.net.agents.len() - 1))
    }

    pub fn add_sink(&mut self, node: NodeId) -> Result<SinkId, SimError> {
        let addr = self.alloc_port(node)?;
        self.net.sinks.push(SinkMonitor::new(addr));
        self.net.sink_by_addr.insert(addr, self.net.sinks.len() - 1);
        Ok(SinkId(self.net.sinks.len() - 1))
    }

    pub fn connect(&mut self, agent: AgentId, sink: SinkId) -> Result<(), SimError> {
        let addr = self
            .net
            .sinks
            .get(sink.0)
            .ok_or(TrafficError::UnknownSink(sink.0))?
            .addr;
        let a = self
            .net
            .agents
            .get_mut(agent.0)
            .ok_or(TrafficError::UnknownAgent(agent.0))?;
        a.peer = Some(addr);
        Ok(())
    }

    pub fn agent(&self, id: AgentId) -> &UdpAgent {
        &self.net.agents[id.0]
    }

    pub fn sink_addr(&self, id: SinkId) -> Addr {
        self.net.sinks[id.0].addr
    }

    pub fn monitor_report(&self, id: SinkId) -> MonitorReport {
        self.net.sinks[id.0].report()
    }

    pub fn sinks(&self) -> &[SinkMonitor] {
        &self.net.sinks
    }

    /// Checks that `agent` is connected and routable; freezes the topology.
    fn ready_agent(&mut self, agent: AgentId) -> Result<(), SimError> {
        let a = self
            .net
            .agents
            .get(agent.0)
            .ok_or(TrafficError::UnknownAgent(agent.0))?;
        let peer = a.peer.ok_or(TrafficError::Unconnected(agent.0))?;
        let src = a.node();
        if src != peer.node {
            self.compute_routes().route(src, peer.node)?;
        } else {
            self.compute_routes();
        }
        Ok(())
    }

    fn schedule_stop_then_start(
        &mut self,
        gid: usize,
        start: SimTime,
        stop: SimTime,
        on_start: fn(&mut Network, &mut Engine<Network>, usize),
    ) -> Result<EventId, SimError> {
        // stop goes in first so it outranks anything later landing on the same instant
        self.engine
            .schedule(stop, move |net: &mut Network, eng: &mut Engine<Network>| {
                net.stop_generator(eng, gid)
            })?;
        Ok(self.engine.schedule(
            start,
            move |net: &mut Network, eng: &mut Engine<Network>| on_start(net, eng, gid),
        )?)
    }

    /// Sends `cfg.size`-byte packets at `start + k * interval` until stopped.
    pub fn attach_cbr(&mut self, agent: AgentId, cfg: CbrConfig) -> Result<GenId, SimError> {
        cfg.validate()?;
        self.ready_agent(agent)?;
        self.net.agents[agent.0].ptype = "cbr";
        let gid = self.net.generators.len();
        self.net.generators.push(Generator::Cbr(CbrState {
            agent: agent.0,
            cfg,
            pending: None,
            stopped: false,
        }));
        let first = self.schedule_stop_then_start(gid, cfg.start, cfg.stop, Network::cbr_fire)?;
        if let Generator::Cbr(g) = &mut self.net.generators[gid] {
            g.pending = Some(first);
        }
        Ok(GenId(gid))
    }

    /// Creates a UDP source on `node` bound to `sink` and drives it with an
    /// exponential on-off process.
    pub fn attach_expoo_traffic(
        &mut self,
        node: NodeId,
        sink: SinkId,
        cfg: ExpOnOffConfig,
        fid: FlowId,
        rng: Rng,
    ) -> Result<GenId, SimError> {
        cfg.validate()?;
        if sink.0 >= self.net.sinks.len() {
            return Err(TrafficError::UnknownSink(sink.0).into());
        }
        let agent = self.add_udp(node, fid)?;
        self.connect(agent, sink)?;
        self.attach_expoo_to_agent(agent, cfg, rng)
    }

    pub fn attach_expoo_to_agent(
        &mut self,
        agent: AgentId,
        cfg: ExpOnOffConfig,
        rng: Rng,
    ) -> Result<GenId, SimError> {
        cfg.validate()?;
        self.ready_agent(agent)?;
        self.net.agents[agent.0].ptype = "exp";
        let gid = self.net.generators.len();
        self.net
            .generators
            .push(Generator::ExpOnOff(ExpOnOffState::new(agent.0, cfg, rng)));
        let first = self.schedule_stop_then_start(gid, cfg.start, cfg.stop, Network::exp_on)?;
        self.net.exp_state(gid).pending = Some(first);
        Ok(GenId(gid))
    }

    /// One-shot send of a `size`-byte packet from `agent` at `at`.
    pub fn send_at(&mut self, at: SimTime, agent: AgentId, size: u32) -> Result<EventId, SimError> {
        if size == 0 {
            return Err(TrafficError::InvalidConfig("packet size must be at least 1 byte").into());
        }
        self.ready_agent(agent)?;
        Ok(self
            .engine
            .schedule(at, move |net: &mut Network, eng: &mut Engine<Network>| {
                net.emit(eng, agent.0, size)
            })?)
    }

    /// Schedules the end of the run; nothing dispatches after it.
    pub fn finish_at(&mut self, at: SimTime) -> Result<EventId, SimError> {
        Ok(self
            .engine
            .schedule(at, |net: &mut Network, eng: &mut Engine<Network>| {
                net.finished_at = Some(eng.now());
                eng.halt();
            })?)
    }

    pub fn finished_at(&self) -> Option<SimTime> {
        self.net.finished_at
    }

    pub fn set_trace(&mut self, sink: Box<dyn TraceSink>) {
        self.net.tracer = Some(sink);
    }

    pub fn generator(&self, id: GenId) -> &Generator {
        &self.net.generators[id.0]
    }

    pub fn generators(&self) -> &[Generator] {
        &self.net.generators
    }

    /// Dispatches all events up to `limit` (or until finish).
    pub fn run_until(&mut self, limit: SimTime) -> Result<SimTime, SimError> {
        self.compute_routes();
        let end = self.engine.run_until(limit, &mut self.net);
        match self.net.fault.take() {
            Some(e) => Err(e),
            None => Ok(end),
        }
    }

    /// Flushes and closes the trace sink.
    pub fn close_trace(&mut self) -> Result<(), SimError> {
        if let Some(t) = self.net.tracer.as_mut() {
            t.close_flush()?;
        }
        Ok(())
    }

    pub fn link_stats(&self) -> Vec<LinkStats> {
        self.net
            .topo
            .links()
            .iter()
            .map(|l| LinkStats {
                from: l.from,
                to: l.to,
                counters: l.counters,
                held: l.qdisc.held(),
            })
            .collect()
    }

    pub fn events_dispatched(&self) -> u64 {
        self.engine.dispatched()
    }

    pub fn packets_created(&self) -> u64 {
        self.net.next_uid
    }
}
