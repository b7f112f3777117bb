//! Nodes, simplex links and static hop-count routing.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::engine::{SimTime, NANOS_PER_SEC};
use crate::packet::NodeId;
use crate::qdisc::{Qdisc, QdiscConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("topology is frozen once routes are computed")]
    TopologyFrozen,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("a link between {0} and {1} already exists")]
    DuplicateLink(NodeId, NodeId),
    #[error("cannot link node {0} to itself")]
    SelfLink(NodeId),
    #[error("link bandwidth must be positive")]
    ZeroBandwidth,
    #[error("no route from node {from} to node {to}")]
    NoRoute { from: NodeId, to: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub usize);

/// Serialization delay: `floor(size * 8 * 1e9 / bandwidth)` nanoseconds.
pub fn tx_time(size_bytes: u32, bandwidth_bps: u64) -> SimTime {
    assert!(bandwidth_bps > 0, "bandwidth must be positive");
    let bits = u128::from(size_bytes) * 8;
    let nanos = bits * u128::from(NANOS_PER_SEC) / u128::from(bandwidth_bps);
    SimTime::from_nanos(u64::try_from(nanos).unwrap_or(u64::MAX))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub enqueued: u64,
    pub dequeued: u64,
    pub dropped: u64,
}

pub struct SimplexLink {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub bandwidth: u64,
    pub delay: SimTime,
    pub qdisc: Box<dyn Qdisc>,
    pub qdisc_config: QdiscConfig,
    /// End of the transmission in progress, or of the last one.
    pub busy_until: SimTime,
    pub transmitting: bool,
    pub counters: LinkCounters,
}

impl SimplexLink {
    fn new(
        id: LinkId,
        from: NodeId,
        to: NodeId,
        bandwidth: u64,
        delay: SimTime,
        qdisc: QdiscConfig,
    ) -> Self {
        Self {
            id,
            from,
            to,
            bandwidth,
            delay,
            qdisc: qdisc.build(),
            qdisc_config: qdisc,
            busy_until: SimTime::ZERO,
            transmitting: false,
            counters: LinkCounters::default(),
        }
    }

    pub fn tx_time(&self, size: u32) -> SimTime {
        tx_time(size, self.bandwidth)
    }
}

impl std::fmt::Debug for SimplexLink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimplexLink")
            .field("id", &self.id)
            .field("from", &self.from)
            .field("to", &self.to)
            .field("bandwidth", &self.bandwidth)
            .field("delay", &self.delay)
            .field("qdisc", &self.qdisc_config)
            .field("held", &self.qdisc.held())
            .finish()
    }
}

#[derive(Debug, Default)]
pub struct Topology {
    node_count: u32,
    links: Vec<SimplexLink>,
    by_endpoints: HashMap<(NodeId, NodeId), LinkId>,
    frozen: bool,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self) -> Result<NodeId, NetError> {
        if self.frozen {
            return Err(NetError::TopologyFrozen);
        }
        let id = NodeId(self.node_count);
        self.node_count += 1;
        Ok(id)
    }

    pub fn node_count(&self) -> usize {
        self.node_count as usize
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.0 < self.node_count
    }

    /// Installs two simplex links with identical parameters, each with its own queue.
    pub fn add_duplex_link(
        &mut self,
        a: NodeId,
        b: NodeId,
        bandwidth: u64,
        delay: SimTime,
        qdisc: QdiscConfig,
    ) -> Result<(LinkId, LinkId), NetError> {
        if self.frozen {
            return Err(NetError::TopologyFrozen);
        }
        for n in [a, b] {
            if !self.contains(n) {
                return Err(NetError::UnknownNode(n));
            }
        }
        if a == b {
            return Err(NetError::SelfLink(a));
        }
        if bandwidth == 0 {
            return Err(NetError::ZeroBandwidth);
        }
        if self.by_endpoints.contains_key(&(a, b)) {
            return Err(NetError::DuplicateLink(a, b));
        }
        let ab = self.push_link(a, b, bandwidth, delay, qdisc);
        let ba = self.push_link(b, a, bandwidth, delay, qdisc);
        Ok((ab, ba))
    }

    fn push_link(
        &mut self,
        from: NodeId,
        to: NodeId,
        bandwidth: u64,
        delay: SimTime,
        qdisc: QdiscConfig,
    ) -> LinkId {
        let id = LinkId(self.links.len());
        self.links
            .push(SimplexLink::new(id, from, to, bandwidth, delay, qdisc));
        self.by_endpoints.insert((from, to), id);
        id
    }

    pub fn link(&self, id: LinkId) -> &SimplexLink {
        &self.links[id.0]
    }

    pub fn link_mut(&mut self, id: LinkId) -> &mut SimplexLink {
        &mut self.links[id.0]
    }

    pub fn links(&self) -> &[SimplexLink] {
        &self.links
    }

    pub fn link_between(&self, from: NodeId, to: NodeId) -> Option<LinkId> {
        self.by_endpoints.get(&(from, to)).copied()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezes the topology and builds hop-count shortest-path routes.
    ///
    /// Among equal-length paths the next hop with the smallest node id wins.
    pub fn compute_routes(&mut self) -> ForwardingTable {
        self.frozen = true;
        let n = self.node_count();
        let mut neighbours: Vec<Vec<(NodeId, LinkId)>> = vec![Vec::new(); n];
        for l in &self.links {
            neighbours[l.from.index()].push((l.to, l.id));
        }
        for adj in &mut neighbours {
            adj.sort();
        }
        let mut next = vec![vec![None; n]; n];
        for dst in 0..n {
            // hop distance of every node to dst, over reversed links
            let mut dist = vec![usize::MAX; n];
            dist[dst] = 0;
            let mut frontier = VecDeque::from([dst]);
            while let Some(v) = frontier.pop_front() {
                for l in self.links.iter().filter(|l| l.to.index() == v) {
                    let u = l.from.index();
                    if dist[u] == usize::MAX {
                        dist[u] = dist[v] + 1;
                        frontier.push_back(u);
                    }
                }
            }
            for (src, row) in next.iter_mut().enumerate() {
                if src == dst || dist[src] == usize::MAX {
                    continue;
                }
                row[dst] = neighbours[src]
                    .iter()
                    .find(|(w, _)| dist[w.index()] == dist[src] - 1)
                    .map(|&(_, link)| link);
            }
        }
        ForwardingTable { next }
    }
}

/// Per node: destination → outgoing link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardingTable {
    next: Vec<Vec<Option<LinkId>>>,
}

impl ForwardingTable {
    pub fn next_link(&self, at: NodeId, dst: NodeId) -> Option<LinkId> {
        self.next
            .get(at.index())?
            .get(dst.index())
            .copied()
            .flatten()
    }

    pub fn route(&self, at: NodeId, dst: NodeId) -> Result<LinkId, NetError> {
        self.next_link(at, dst)
            .ok_or(NetError::NoRoute { from: at, to: dst })
    }

    /// Links traversed from `src` to `dst`, or `None` if unreachable.
    pub fn path(&self, topo: &Topology, src: NodeId, dst: NodeId) -> Option<Vec<LinkId>> {
        let mut hops = Vec::new();
        let mut at = src;
        while at != dst {
            let l = self.next_link(at, dst)?;
            hops.push(l);
            at = topo.link(l).to;
            if hops.len() > topo.node_count() {
                return None;
            }
        }
        Some(hops)
    }
}
