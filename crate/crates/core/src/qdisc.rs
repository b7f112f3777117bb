//! Output-queue disciplines for simplex links.

use std::collections::VecDeque;
use std::fmt;

use crate::packet::{FlowId, Packet};

pub const DROPTAIL_DEFAULT_LIMIT: usize = 50;
pub const SFQ_DEFAULT_LIMIT: usize = 40;
pub const SFQ_DEFAULT_BUCKETS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QdiscKind {
    DropTail,
    Sfq,
}

impl fmt::Display for QdiscKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QdiscKind::DropTail => f.write_str("droptail"),
            QdiscKind::Sfq => f.write_str("sfq"),
        }
    }
}

/// Recipe for a queue; each simplex link builds its own instance from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QdiscConfig {
    pub kind: QdiscKind,
    pub limit: usize,
    pub buckets: usize,
}

impl QdiscConfig {
    pub fn droptail() -> Self {
        Self {
            kind: QdiscKind::DropTail,
            limit: DROPTAIL_DEFAULT_LIMIT,
            buckets: SFQ_DEFAULT_BUCKETS,
        }
    }

    pub fn sfq() -> Self {
        Self {
            kind: QdiscKind::Sfq,
            limit: SFQ_DEFAULT_LIMIT,
            buckets: SFQ_DEFAULT_BUCKETS,
        }
    }

    pub fn with_limit(mut self, limit: usize) -> Self {
        self.limit = limit;
        self
    }

    pub fn with_buckets(mut self, buckets: usize) -> Self {
        self.buckets = buckets;
        self
    }

    pub fn build(&self) -> Box<dyn Qdisc> {
        match self.kind {
            QdiscKind::DropTail => Box::new(DropTail::new(self.limit)),
            QdiscKind::Sfq => Box::new(Sfq::new(self.limit, self.buckets)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnqueueResult {
    Accepted,
    /// The victim is the arriving packet for DropTail, possibly a resident one for SFQ.
    Dropped(Packet),
}

pub trait Qdisc {
    fn enqueue(&mut self, pkt: Packet) -> EnqueueResult;
    fn dequeue(&mut self) -> Option<Packet>;
    fn held(&self) -> usize;
    fn limit(&self) -> usize;
}

/// Bounded FIFO that discards arrivals once `limit` packets are held.
#[derive(Debug)]
pub struct DropTail {
    limit: usize,
    q: VecDeque<Packet>,
}

impl DropTail {
    pub fn new(limit: usize) -> Self {
        assert!(limit >= 1, "queue limit must be at least 1");
        Self {
            limit,
            q: VecDeque::new(),
        }
    }
}

impl Qdisc for DropTail {
    fn enqueue(&mut self, pkt: Packet) -> EnqueueResult {
        if self.q.len() >= self.limit {
            return EnqueueResult::Dropped(pkt);
        }
        self.q.push_back(pkt);
        EnqueueResult::Accepted
    }

    fn dequeue(&mut self) -> Option<Packet> {
        self.q.pop_front()
    }

    fn held(&self) -> usize {
        self.q.len()
    }

    fn limit(&self) -> usize {
        self.limit
    }
}

/// splitmix64 output mixer.
pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bucket index for a flow. Pure; no perturbation.
pub fn sfq_bucket(fid: FlowId, buckets: usize) -> usize {
    assert!(buckets >= 1, "bucket count must be at least 1");
    (splitmix64_mix(u64::from(fid)) % buckets as u64) as usize
}

/// Stochastic fair queueing: flows hash into FIFO buckets that are served
/// round-robin. On overflow the tail of the longest bucket is dropped.
#[derive(Debug)]
pub struct Sfq {
    limit: usize,
    buckets: Vec<VecDeque<Packet>>,
    held: usize,
    // next bucket to consider when dequeuing
    cursor: usize,
}

impl Sfq {
    pub fn new(limit: usize, buckets: usize) -> Self {
        assert!(limit >= 1, "queue limit must be at least 1");
        assert!(buckets >= 1, "bucket count must be at least 1");
        Self {
            limit,
            buckets: (0..buckets).map(|_| VecDeque::new()).collect(),
            held: 0,
            cursor: 0,
        }
    }

    pub fn bucket_len(&self, idx: usize) -> usize {
        self.buckets[idx].len()
    }

    fn longest_bucket(&self) -> usize {
        let mut best = 0;
        for (i, b) in self.buckets.iter().enumerate() {
            if b.len() > self.buckets[best].len() {
                best = i;
            }
        }
        best
    }
}

impl Qdisc for Sfq {
    fn enqueue(&mut self, pkt: Packet) -> EnqueueResult {
        let idx = sfq_bucket(pkt.fid, self.buckets.len());
        self.buckets[idx].push_back(pkt);
        self.held += 1;
        if self.held <= self.limit {
            return EnqueueResult::Accepted;
        }
        let victim_bucket = self.longest_bucket();
        let victim = self.buckets[victim_bucket]
            .pop_back()
            .expect("longest bucket is non-empty when over limit");
        self.held -= 1;
        EnqueueResult::Dropped(victim)
    }

    fn dequeue(&mut self) -> Option<Packet> {
        if self.held == 0 {
            return None;
        }
        let n = self.buckets.len();
        for step in 0..n {
            let idx = (self.cursor + step) % n;
            if let Some(pkt) = self.buckets[idx].pop_front() {
                self.cursor = (idx + 1) % n;
                self.held -= 1;
                return Some(pkt);
            }
        }
        unreachable!("held > 0 but every bucket is empty")
    }

    fn held(&self) -> usize {
        self.held
    }

    fn limit(&self) -> usize {
        self.limit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::test_packet;
    use proptest::prelude::*;

    // Reference splitmix64 written out over u128 to avoid sharing code with
    // the wrapping implementation above.
    fn reference_mix(x: u64) -> u64 {
        const M: u128 = 1 << 64;
        let mut z = x as u128;
        z = ((z ^ (z >> 30)) * 0xbf58476d1ce4e5b9u128) % M;
        z = ((z ^ (z >> 27)) * 0x94d049bb133111ebu128) % M;
        (z ^ (z >> 31)) as u64
    }

    // Two fids known to land in distinct buckets out of 16 (5 and 10).
    const FID_A: FlowId = 1;
    const FID_B: FlowId = 2;

    #[test]
    fn bucket_matches_reference_hash() {
        for fid in [0u32, 1, 2, 3, 17, 4096, u32::MAX] {
            let expect = (reference_mix(fid as u64) % 16) as usize;
            assert_eq!(sfq_bucket(fid, 16), expect, "fid {fid}");
        }
        assert_eq!(sfq_bucket(1, 16), 5);
        assert_eq!(sfq_bucket(2, 16), 10);
    }

    #[test]
    fn single_bucket_is_always_zero() {
        for fid in 0..100 {
            assert_eq!(sfq_bucket(fid, 1), 0);
        }
    }

    #[test]
    fn bucket_is_pure() {
        assert_eq!(sfq_bucket(77, 16), sfq_bucket(77, 16));
    }

    #[test]
    fn droptail_drops_arrival_when_full() {
        let mut q = DropTail::new(2);
        assert_eq!(q.enqueue(test_packet(1, 0)), EnqueueResult::Accepted);
        assert_eq!(q.enqueue(test_packet(2, 0)), EnqueueResult::Accepted);
        assert_eq!(
            q.enqueue(test_packet(3, 0)),
            EnqueueResult::Dropped(test_packet(3, 0))
        );
        assert_eq!(q.dequeue().unwrap().uid, 1);
        assert_eq!(q.dequeue().unwrap().uid, 2);
        assert!(q.dequeue().is_none());
    }

    #[test]
    fn held_counts() {
        let mut q = QdiscConfig::droptail().build();
        assert_eq!(q.held(), 0);
        for uid in 0..3 {
            q.enqueue(test_packet(uid, 0));
        }
        q.dequeue();
        assert_eq!(q.held(), 2);
    }

    #[test]
    fn sfq_accepts_under_limit() {
        let mut q = QdiscConfig::sfq().build();
        assert_eq!(q.limit(), 40);
        assert_eq!(q.enqueue(test_packet(0, FID_A)), EnqueueResult::Accepted);
    }

    #[test]
    fn sfq_drops_arrival_when_its_bucket_is_longest() {
        let mut q = Sfq::new(4, 16);
        for uid in 0..3 {
            assert_eq!(q.enqueue(test_packet(uid, FID_A)), EnqueueResult::Accepted);
        }
        assert_eq!(q.enqueue(test_packet(3, FID_B)), EnqueueResult::Accepted);
        match q.enqueue(test_packet(4, FID_A)) {
            EnqueueResult::Dropped(p) => assert_eq!(p.uid, 4),
            other => panic!("expected drop, got {other:?}"),
        }
        assert_eq!(q.held(), 4);
    }

    #[test]
    fn sfq_drops_resident_from_longest_bucket() {
        let mut q = Sfq::new(4, 16);
        for uid in 0..4 {
            q.enqueue(test_packet(uid, FID_A));
        }
        // B is short; the victim is A's most recent arrival
        match q.enqueue(test_packet(10, FID_B)) {
            EnqueueResult::Dropped(p) => assert_eq!(p.uid, 3),
            other => panic!("expected drop, got {other:?}"),
        }
        assert_eq!(q.bucket_len(sfq_bucket(FID_B, 16)), 1);
    }

    #[test]
    fn sfq_longest_tie_prefers_lowest_index() {
        // buckets 5 (fid 1) and 10 (fid 2) tie at 2 packets each
        let mut q = Sfq::new(4, 16);
        q.enqueue(test_packet(0, FID_A));
        q.enqueue(test_packet(1, FID_B));
        q.enqueue(test_packet(2, FID_A));
        q.enqueue(test_packet(3, FID_B));
        match q.enqueue(test_packet(4, 3)) {
            EnqueueResult::Dropped(p) => assert_eq!(p.uid, 2),
            other => panic!("expected drop, got {other:?}"),
        }
    }

    #[test]
    fn sfq_round_robin_service() {
        let mut q = Sfq::new(40, 16);
        // A1 goes straight to the idle link
        q.enqueue(test_packet(1, FID_A));
        let mut order = vec![q.dequeue().unwrap().uid];
        for (uid, fid) in [
            (2, FID_A),
            (3, FID_A),
            (11, FID_B),
            (12, FID_B),
            (13, FID_B),
        ] {
            q.enqueue(test_packet(uid, fid));
        }
        while let Some(p) = q.dequeue() {
            order.push(p.uid);
        }
        assert_eq!(order, [1, 11, 2, 12, 3, 13]);
    }

    #[test]
    fn empty_dequeue() {
        assert!(Sfq::new(4, 4).dequeue().is_none());
        assert!(DropTail::new(4).dequeue().is_none());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Enq(FlowId),
        Deq,
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![(0u32..6).prop_map(Op::Enq), Just(Op::Deq)],
            0..300,
        )
    }

    proptest! {
        #[test]
        fn droptail_matches_list_model(limit in 1usize..12, script in ops()) {
            let mut q = DropTail::new(limit);
            let mut model: Vec<u64> = vec![];
            for (uid, op) in script.into_iter().enumerate() {
                match op {
                    Op::Enq(fid) => {
                        let accepted = q.enqueue(test_packet(uid as u64, fid)) == EnqueueResult::Accepted;
                        prop_assert_eq!(accepted, model.len() < limit);
                        if accepted {
                            model.push(uid as u64);
                        }
                    }
                    Op::Deq => {
                        let got = q.dequeue().map(|p| p.uid);
                        let want = if model.is_empty() { None } else { Some(model.remove(0)) };
                        prop_assert_eq!(got, want);
                    }
                }
                prop_assert!(q.held() <= limit);
            }
        }

        #[test]
        fn sfq_bounded_conserving_and_per_flow_fifo(limit in 1usize..20, buckets in 1usize..8, script in ops()) {
            let mut q = Sfq::new(limit, buckets);
            let (mut enq, mut deq, mut drop) = (0usize, 0usize, 0usize);
            let mut last_out = std::collections::HashMap::<FlowId, u64>::new();
            for (uid, op) in script.into_iter().enumerate() {
                match op {
                    Op::Enq(fid) => {
                        enq += 1;
                        if let EnqueueResult::Dropped(_) = q.enqueue(test_packet(uid as u64, fid)) {
                            drop += 1;
                        }
                    }
                    Op::Deq => {
                        if let Some(p) = q.dequeue() {
                            deq += 1;
                            if let Some(prev) = last_out.insert(p.fid, p.uid) {
                                prop_assert!(prev < p.uid);
                            }
                        }
                    }
                }
                prop_assert!(q.held() <= limit);
                prop_assert_eq!(enq, deq + drop + q.held());
            }
        }

        #[test]
        fn sfq_two_backlogged_flows_alternate(k in 1usize..40) {
            let mut q = Sfq::new(1000, 16);
            let mut uid = 0;
            for _ in 0..(4 * k) {
                q.enqueue(test_packet(uid, FID_A));
                q.enqueue(test_packet(uid + 1, FID_B));
                uid += 2;
            }
            let served: Vec<FlowId> = (0..4 * k).map(|_| q.dequeue().unwrap().fid).collect();
            for start in 0..=(served.len() - 2 * k) {
                let a = served[start..start + 2 * k].iter().filter(|&&f| f == FID_A).count();
                prop_assert!(a.abs_diff(k) <= 1);
            }
        }
    }
}
