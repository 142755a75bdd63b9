//! Bounded queue of deferred tree updates with per-address override.

use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use crate::crypto::{BlockAuthTag, IV_LEN, MAC_LEN};
use crate::merkle::TREE_NODE_BYTES;

/// Accounted size of one queued request: the node object it refers to plus
/// the new MAC and IV.
pub const REQUEST_FOOTPRINT_BYTES: usize = TREE_NODE_BYTES + MAC_LEN + IV_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateRequest {
    pub addr: u64,
    pub new_tag: BlockAuthTag,
    pub enqueue_time: Instant,
    pub supersede_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueState {
    Normal,
    Draining,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Push {
    Inserted,
    Overridden,
    /// No free slot; nothing was changed.
    Full,
}

pub struct UpdateQueue {
    capacity: usize,
    low_mark: usize,
    entries: VecDeque<UpdateRequest>,
    /// Sequence number of `entries[0]`.
    base: u64,
    index: HashMap<u64, u64>,
    state: QueueState,
    overrides: u64,
    drains: u64,
}

impl UpdateQueue {
    pub fn new(capacity: usize, low_watermark: f64) -> Self {
        assert!(capacity >= 1, "queue capacity must be positive");
        assert!(low_watermark > 0.0 && low_watermark < 1.0, "low watermark must be in (0, 1)");
        Self {
            capacity,
            low_mark: (low_watermark * capacity as f64).floor() as usize,
            entries: VecDeque::with_capacity(capacity),
            base: 0,
            index: HashMap::with_capacity(capacity),
            state: QueueState::Normal,
            overrides: 0,
            drains: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Length at or below which draining stops.
    pub fn low_mark(&self) -> usize {
        self.low_mark
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn state(&self) -> QueueState {
        self.state
    }

    pub fn overrides(&self) -> u64 {
        self.overrides
    }

    /// Times the queue entered the draining state.
    pub fn drains(&self) -> u64 {
        self.drains
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.index.contains_key(&addr)
    }

    pub fn get(&self, addr: u64) -> Option<&UpdateRequest> {
        let seq = *self.index.get(&addr)?;
        self.entries.get((seq - self.base) as usize)
    }

    /// Queues an update, replacing a pending one for the same address in
    /// place. Overrides succeed even when the queue is full.
    pub fn push(&mut self, addr: u64, new_tag: BlockAuthTag, now: Instant) -> Push {
        if let Some(&seq) = self.index.get(&addr) {
            let e = &mut self.entries[(seq - self.base) as usize];
            e.new_tag = new_tag;
            e.supersede_count += 1;
            self.overrides += 1;
            return Push::Overridden;
        }
        if self.is_full() {
            return Push::Full;
        }
        let seq = self.base + self.entries.len() as u64;
        self.entries.push_back(UpdateRequest { addr, new_tag, enqueue_time: now, supersede_count: 0 });
        self.index.insert(addr, seq);
        if self.is_full() && self.state == QueueState::Normal {
            self.state = QueueState::Draining;
            self.drains += 1;
        }
        debug_assert_eq!(self.index.len(), self.entries.len());
        Push::Inserted
    }

    pub fn pop_front(&mut self) -> Option<UpdateRequest> {
        let e = self.entries.pop_front()?;
        self.index.remove(&e.addr);
        self.base += 1;
        if self.state == QueueState::Draining && self.entries.len() <= self.low_mark {
            self.state = QueueState::Normal;
        }
        debug_assert_eq!(self.index.len(), self.entries.len());
        Some(e)
    }

    pub fn iter(&self) -> impl Iterator<Item = &UpdateRequest> {
        self.entries.iter()
    }

    /// Full structural check: unique addresses, consistent index, bounds and
    /// watermark state.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.entries.len() > self.capacity {
            return Err(format!("length {} exceeds capacity {}", self.entries.len(), self.capacity));
        }
        if self.index.len() != self.entries.len() {
            return Err("index size differs from entry count".into());
        }
        for (i, e) in self.entries.iter().enumerate() {
            if self.index.get(&e.addr) != Some(&(self.base + i as u64)) {
                return Err(format!("duplicate or unindexed address {}", e.addr));
            }
        }
        if self.state == QueueState::Draining && self.entries.len() <= self.low_mark {
            return Err("draining below the low watermark".into());
        }
        Ok(())
    }
}

/// Token bucket admitting `rate` requests per second with a burst of at
/// most `burst` tokens.
#[derive(Clone, Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64, burst_window: Duration, now: Instant) -> Self {
        let burst = (rate * burst_window.as_secs_f64()).max(1.0);
        Self { rate, burst, tokens: 0.0, last: now }
    }

    pub fn refill(&mut self, now: Instant) {
        if now > self.last {
            let dt = (now - self.last).as_secs_f64();
            self.tokens = (self.tokens + dt * self.rate).min(self.burst);
            self.last = now;
        }
    }

    pub fn available(&self) -> usize {
        self.tokens.floor() as usize
    }

    pub fn take(&mut self, n: usize) {
        self.tokens = (self.tokens - n as f64).max(0.0);
    }

    /// Time until one whole token is available.
    pub fn until_next(&self) -> Duration {
        if self.tokens >= 1.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64((1.0 - self.tokens) / self.rate)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::collections::HashMap as Model;

    fn tag(b: u8) -> BlockAuthTag {
        let mut t = BlockAuthTag::default();
        t.mac[0] = b;
        t
    }

    #[test]
    fn footprint_is_100_bytes() {
        assert_eq!(REQUEST_FOOTPRINT_BYTES, 100);
    }

    #[test]
    fn override_keeps_position_and_latest_tag() {
        let now = Instant::now();
        let mut q = UpdateQueue::new(8, 0.75);
        q.push(3, tag(1), now);
        q.push(7, tag(2), now);
        assert_eq!(q.push(7, tag(3), now), Push::Overridden);
        q.push(1, tag(4), now);
        assert_eq!(q.len(), 3);
        assert_eq!(q.get(7).unwrap().new_tag, tag(3));
        assert_eq!(q.get(7).unwrap().supersede_count, 1);
        let order: Vec<u64> = std::iter::from_fn(|| q.pop_front().map(|e| e.addr)).collect();
        assert_eq!(order, vec![3, 7, 1]);
    }

    #[test]
    fn watermark_transitions() {
        let now = Instant::now();
        let mut q = UpdateQueue::new(1024, 0.75);
        assert_eq!(q.low_mark(), 768);
        for a in 0..1023 {
            q.push(a, tag(0), now);
        }
        assert_eq!(q.state(), QueueState::Normal);
        q.push(2000, tag(0), now);
        assert_eq!(q.state(), QueueState::Draining);
        assert_eq!(q.push(3000, tag(0), now), Push::Full);
        assert_eq!(q.push(5, tag(9), now), Push::Overridden);
        while q.len() > 769 {
            q.pop_front();
            assert_eq!(q.state(), QueueState::Draining);
        }
        q.pop_front();
        assert_eq!(q.len(), 768);
        assert_eq!(q.state(), QueueState::Normal);
        assert_eq!(q.drains(), 1);
    }

    #[test]
    fn bucket_arithmetic() {
        let t0 = Instant::now();
        let mut b = TokenBucket::new(1000.0, Duration::from_millis(10), t0);
        b.refill(t0 + Duration::from_millis(10));
        assert!(b.available() <= 10);
        b.take(b.available());
        b.refill(t0 + Duration::from_secs(5));
        assert_eq!(b.available(), 10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_queue_matches_model(ops in proptest::collection::vec((0u8..3, 0u64..40), 0..400), cap in 1usize..32) {
            let now = Instant::now();
            let mut q = UpdateQueue::new(cap, 0.5);
            let mut order: Vec<u64> = Vec::new();
            let mut latest: Model<u64, u8> = Model::new();
            for (i, (op, addr)) in ops.into_iter().enumerate() {
                let t = i as u8;
                if op < 2 {
                    let r = q.push(addr, tag(t), now);
                    match latest.entry(addr) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            prop_assert_eq!(r, Push::Overridden);
                            e.insert(t);
                        }
                        std::collections::hash_map::Entry::Vacant(e) => if order.len() == cap {
                            prop_assert_eq!(r, Push::Full);
                        } else {
                            prop_assert_eq!(r, Push::Inserted);
                            order.push(addr);
                            e.insert(t);
                        }
                    }
                } else if let Some(e) = q.pop_front() {
                    let a = order.remove(0);
                    prop_assert_eq!(e.addr, a);
                    prop_assert_eq!(e.new_tag, tag(latest.remove(&a).unwrap()));
                } else {
                    prop_assert!(order.is_empty());
                }
                prop_assert!(q.check_invariants().is_ok());
                prop_assert_eq!(q.len(), order.len());
            }
        }
    }
}
