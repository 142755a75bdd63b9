//! LRU cache of authenticated node hashes held in trusted memory.

use std::num::NonZeroUsize;

use lru::LruCache;

use crate::crypto::NodeHash;

pub struct HashCache {
    entries: LruCache<usize, NodeHash>,
    hits: u64,
    misses: u64,
}

impl HashCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).unwrap();
        Self { entries: LruCache::new(cap), hits: 0, misses: 0 }
    }

    /// Capacity as a fraction of the tree's node count, floored, at least 1.
    pub fn for_fraction(node_count: usize, fraction: f64) -> Self {
        let cap = ((node_count as f64) * fraction).floor() as usize;
        Self::new(cap.max(1))
    }

    pub fn get(&mut self, node: usize) -> Option<NodeHash> {
        match self.entries.get(&node) {
            Some(h) => {
                self.hits += 1;
                Some(*h)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Inserts a hash the caller has just authenticated or computed.
    pub fn insert(&mut self, node: usize, hash: NodeHash) {
        self.entries.put(node, hash);
    }

    /// Replaces a cached value without touching recency; no-op when absent.
    pub fn refresh(&mut self, node: usize, hash: NodeHash) {
        if let Some(h) = self.entries.peek_mut(&node) {
            *h = hash;
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.entries.cap().get()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }

    pub fn reset_counters(&mut self) {
        self.hits = 0;
        self.misses = 0;
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, NodeHash)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_from_fraction() {
        assert_eq!(HashCache::for_fraction(1000, 0.1).capacity(), 100);
        assert_eq!(HashCache::for_fraction(7, 0.1).capacity(), 1);
        assert_eq!(HashCache::for_fraction(31, 0.5).capacity(), 15);
    }

    #[test]
    fn bounded_lru_with_counters() {
        let mut c = HashCache::new(2);
        c.insert(1, NodeHash([1; 32]));
        c.insert(2, NodeHash([2; 32]));
        assert!(c.get(1).is_some());
        c.insert(3, NodeHash([3; 32]));
        assert_eq!(c.len(), 2);
        assert!(c.get(2).is_none());
        assert_eq!((c.hits(), c.misses()), (1, 1));
        c.refresh(9, NodeHash([9; 32]));
        assert_eq!(c.len(), 2);
    }
}
