//! minins: a deterministic discrete-event packet-level network simulator.
//!
//! Scenarios describe nodes, duplex links with DropTail or SFQ output queues,
//! UDP agents driven by CBR or exponential on-off generators, and a run
//! duration. Running one produces loss-monitor statistics and a per-event
//! trace file that the [`analyze`] module can post-process.

pub mod analyze;
pub mod engine;
pub mod net;
pub mod packet;
pub mod qdisc;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod traffic;
pub mod validate;

pub use engine::{Engine, EventId, SimTime};
pub use packet::{Addr, FlowId, NodeId, Packet};
pub use scenario::{parse_scenario, ScenarioSpec};
pub use sim::Simulation;
