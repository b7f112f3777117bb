//! Builds a simulation from a [`ScenarioSpec`], runs it and summarizes the
//! loss monitors into the statistics block.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::analyze::utilization;
use crate::engine::SimTime;
use crate::packet::{FlowId, NodeId};
use crate::scenario::{GeneratorKind, ScenarioSpec};
use crate::sim::{AgentId, LinkStats, SimError, Simulation, SinkId};
use crate::trace::TraceSink;
use crate::traffic::{Generator, MonitorReport, Rng};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario references unknown name `{0}`")]
    UnknownName(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl RunError {
    pub fn is_internal(&self) -> bool {
        matches!(self, RunError::Sim(e) if e.is_internal())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSummary {
    pub agent: String,
    pub fid: FlowId,
    pub src: NodeId,
    pub sink: NodeId,
    pub sent: u64,
    pub report: MonitorReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Clock when the run finished.
    pub now: SimTime,
    /// Node whose sinks the headline counters describe.
    pub sink_node: Option<NodeId>,
    /// Aggregate over every sink in the scenario.
    pub npkts: u64,
    pub bytes: u64,
    pub nlost: u64,
    /// Bandwidth of the last hop into the first flow's sink.
    pub monitored_bandwidth: Option<u64>,
    pub utilization_pct: f64,
    pub flows: Vec<FlowSummary>,
    pub links: Vec<LinkStats>,
    /// ON fraction of each exponential on-off generator, by agent name.
    pub duty_cycles: BTreeMap<String, f64>,
    pub events: u64,
}

impl RunSummary {
    pub fn drops(&self) -> u64 {
        self.links.iter().map(|l| l.counters.dropped).sum()
    }

    pub fn flow(&self, fid: FlowId) -> Option<&FlowSummary> {
        self.flows.iter().find(|f| f.fid == fid)
    }

    /// The statistics block: a human-readable part followed by `key=value` lines.
    pub fn stats_block(&self) -> String {
        let secs = self.now.as_secs_f64();
        let node = self
            .sink_node
            .map_or_else(|| "-".to_string(), |n| n.to_string());
        let mut out = String::new();
        let _ = writeln!(out, "Estatisticas:");
        let _ = writeln!(out, "Tempo Simulacao: {secs} s");
        let _ = writeln!(out, "Pacotes recebidos no nodo {node}: {}", self.npkts);
        let _ = writeln!(out, "Bytes recebidos no nodo {node}: {}", self.bytes);
        let _ = writeln!(out, "Utilizacao do link: {}%", self.utilization_pct);
        let _ = writeln!(out, "tempo_simulacao_s={secs}");
        let _ = writeln!(out, "pacotes_recebidos={}", self.npkts);
        let _ = writeln!(out, "bytes_recebidos={}", self.bytes);
        let _ = writeln!(out, "utilizacao_link_pct={}", self.utilization_pct);
        out
    }
}

fn node_id(spec: &ScenarioSpec, name: &str) -> Result<NodeId, RunError> {
    spec.node_index(name)
        .map(|i| NodeId(i as u32))
        .ok_or_else(|| RunError::UnknownName(name.to_string()))
}

/// Runs `spec` to its duration. Stochastic generators draw from sub-streams
/// of `spec.seed`, so equal specs give identical traces and statistics.
pub fn run_scenario(
    spec: &ScenarioSpec,
    trace: Option<Box<dyn TraceSink>>,
) -> Result<RunSummary, RunError> {
    let mut sim = Simulation::new();
    if let Some(t) = trace {
        sim.set_trace(t);
    }
    for _ in &spec.nodes {
        sim.add_node()?;
    }
    for l in &spec.links {
        let (a, b) = (node_id(spec, &l.a)?, node_id(spec, &l.b)?);
        sim.add_duplex_link(a, b, l.bandwidth, l.delay, l.qdisc)?;
    }
    let mut wiring: Vec<(AgentId, SinkId)> = Vec::new();
    for a in &spec.agents {
        let agent = sim.add_udp(node_id(spec, &a.src)?, a.fid)?;
        let sink = sim.add_sink(node_id(spec, &a.sink)?)?;
        sim.connect(agent, sink)?;
        wiring.push((agent, sink));
    }
    let mut exp_agents = Vec::new();
    for (ordinal, g) in spec.generators.iter().enumerate() {
        let idx = spec
            .agent_index(&g.agent)
            .ok_or_else(|| RunError::UnknownName(g.agent.clone()))?;
        let agent = wiring[idx].0;
        match g.kind {
            GeneratorKind::Cbr(cfg) => {
                sim.attach_cbr(agent, cfg)?;
            }
            GeneratorKind::Exp(cfg) => {
                let rng = Rng::for_generator(spec.seed, ordinal as u64);
                let gid = sim.attach_expoo_to_agent(agent, cfg, rng)?;
                exp_agents.push((gid, g.agent.clone()));
            }
        }
    }
    sim.compute_routes();
    sim.finish_at(spec.duration)?;
    let run = sim.run_until(spec.duration);
    let closed = sim.close_trace();
    run?;
    closed?;

    let now = sim.finished_at().unwrap_or_else(|| sim.now());
    let flows: Vec<FlowSummary> = spec
        .agents
        .iter()
        .zip(&wiring)
        .map(|(a, &(agent, sink))| FlowSummary {
            agent: a.name.clone(),
            fid: a.fid,
            src: sim.agent(agent).node(),
            sink: sim.sink_addr(sink).node,
            sent: sim.agent(agent).sent,
            report: sim.monitor_report(sink),
        })
        .collect();
    let (npkts, bytes, nlost) = flows.iter().fold((0, 0, 0), |acc, f| {
        (
            acc.0 + f.report.npkts,
            acc.1 + f.report.bytes,
            acc.2 + f.report.nlost,
        )
    });

    let sink_node = flows.first().map(|f| f.sink);
    let monitored_bandwidth = flows.first().and_then(|f| {
        let topo = sim.topology();
        let path = sim.routes()?.path(topo, f.src, f.sink)?;
        path.last().map(|l| topo.link(*l).bandwidth)
    });
    let utilization_pct = match monitored_bandwidth {
        Some(bw) if now > SimTime::ZERO => utilization(bytes, now.as_secs_f64(), bw as f64)
            .expect("positive duration and bandwidth"),
        _ => 0.0,
    };
    let duty_cycles = exp_agents
        .into_iter()
        .map(|(gid, name)| match sim.generator(gid) {
            Generator::ExpOnOff(g) => (name, g.duty_cycle()),
            Generator::Cbr(_) => unreachable!("exp generator id"),
        })
        .collect();

    Ok(RunSummary {
        now,
        sink_node,
        npkts,
        bytes,
        nlost,
        monitored_bandwidth,
        utilization_pct,
        flows,
        links: sim.link_stats(),
        duty_cycles,
        events: sim.events_dispatched(),
    })
}
