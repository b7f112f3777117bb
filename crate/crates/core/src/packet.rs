use std::fmt;

use crate::engine::SimTime;

/// Dense node index, assigned in creation order starting at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Transport endpoint, rendered as `node.port` in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Addr {
    pub node: NodeId,
    pub port: u32,
}

impl Addr {
    pub fn new(node: NodeId, port: u32) -> Self {
        Self { node, port }
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node.0, self.port)
    }
}

pub type FlowId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub uid: u64,
    pub fid: FlowId,
    pub ptype: &'static str,
    pub size: u32,
    pub src: Addr,
    pub dst: Addr,
    pub seq: u64,
    pub birth: SimTime,
}

#[cfg(test)]
pub(crate) fn test_packet(uid: u64, fid: FlowId) -> Packet {
    Packet {
        uid,
        fid,
        ptype: "cbr",
        size: 1000,
        src: Addr::new(NodeId(0), 0),
        dst: Addr::new(NodeId(1), 0),
        seq: uid,
        birth: SimTime::ZERO,
    }
}
