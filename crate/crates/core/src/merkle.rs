//! Merkle tree over block authentication tags.
//!
//! Leaves hold the per-block [`BlockAuthTag`]; internal nodes hold the keyed
//! hash of their two children, with [`NodeHash::ZERO`] standing in for an
//! absent child. Two layouts are supported:
//!
//! * a balanced binary tree in implicit heap order, padded to a power of two
//!   leaves (at least two);
//! * a splay-based dynamic tree with explicit links. Rotations keep the
//!   in-order leaf sequence and recompute every hash they disturb.
//!
//! The node table models the untrusted metadata device. The trusted state is
//! the [`MerkleRoot`] plus the [`HashCache`]; every value placed in the cache
//! has been authenticated against one of them or freshly computed.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::Path;

use rand::Rng;

use crate::cache::HashCache;
use crate::crypto::{BlockAuthTag, BlockCipher, HashKey, IvSource, Keys, NodeHash, BLOCK_SIZE, TAG_LEN};
use crate::error::{Error, FaultKind, IntegrityFault, Result};
use crate::par;

const NONE: usize = usize::MAX;

/// Accounted in-memory size of one tree node: 32-byte hash plus node id,
/// parent, left, right and a flags word at 8 bytes each.
pub const TREE_NODE_BYTES: usize = 72;

pub const META_MAGIC: &[u8; 4] = b"PACM";
pub const META_VERSION: u16 = 1;
pub const META_HEADER_LEN: usize = 48;
/// node_id, parent, left, right, flags (8 B each), hash (32 B), tag (28 B).
pub const META_RECORD_LEN: usize = 5 * 8 + 32 + TAG_LEN;

const FLAG_LEAF: u64 = 1;
const FLAG_TAG: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplayParams {
    pub probability: f64,
    pub window: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TreeKind {
    Balanced,
    Splay(SplayParams),
}

impl TreeKind {
    /// Dynamic tree with the splay settings used for the DMT comparisons.
    pub fn dmt() -> Self {
        TreeKind::Splay(SplayParams { probability: 0.01, window: true })
    }

    pub fn splay(probability: f64, window: bool) -> Self {
        TreeKind::Splay(SplayParams { probability, window })
    }

    fn code(&self) -> (u8, u8, f64) {
        match self {
            TreeKind::Balanced => (0, 0, 0.0),
            TreeKind::Splay(p) => (1, p.window as u8, p.probability),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MerkleRoot {
    pub hash: NodeHash,
    pub version: u64,
}

/// How a successful verification terminated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verified {
    /// Node hashes computed during the walk.
    pub hashes: u32,
    /// Levels climbed above the leaf before reaching a trusted hash.
    pub depth: u32,
    /// True when the walk stopped at a cached hash instead of the root.
    pub cache_exit: bool,
}

/// Exported view of one node, in the shape stored in metadata records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub node_id: u64,
    pub hash: NodeHash,
    pub parent: Option<u64>,
    pub left: Option<u64>,
    pub right: Option<u64>,
    pub is_leaf: bool,
    pub leaf_tag: Option<BlockAuthTag>,
    pub dirty: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Links {
    parent: usize,
    left: usize,
    right: usize,
}

enum Layout {
    /// Node `i` has children `2i+1`, `2i+2`; leaves start at `width - 1`.
    Heap { width: usize },
    /// Leaves are ids `0..capacity`, internal nodes follow.
    Linked { links: Vec<Links>, root: usize },
}

pub struct MerkleStore {
    key: HashKey,
    capacity: usize,
    kind: TreeKind,
    layout: Layout,
    hashes: Vec<NodeHash>,
    tags: Vec<BlockAuthTag>,
    root: MerkleRoot,
    cache: HashCache,
    cache_fraction: f64,
    dirty: Vec<bool>,
    dirty_list: Vec<usize>,
    hash_ops: u64,
    rotations: u64,
}

/// Record for the all-zero block at `addr`, as written when formatting.
pub fn zero_block_record(cipher: &BlockCipher, addr: u64) -> (Box<[u8; BLOCK_SIZE]>, BlockAuthTag) {
    cipher.encrypt_block(addr, &[0u8; BLOCK_SIZE], IvSource::format_iv(addr))
}

fn heap_width(capacity: usize) -> usize {
    capacity.next_power_of_two().max(2)
}

fn opt(id: usize) -> Option<u64> {
    (id != NONE).then_some(id as u64)
}

fn build_linked(capacity: usize) -> (Vec<Links>, usize) {
    let none = Links { parent: NONE, left: NONE, right: NONE };
    if capacity == 1 {
        let mut links = vec![none; 2];
        links[0].parent = 1;
        links[1].left = 0;
        return (links, 1);
    }
    let mut links = vec![none; 2 * capacity - 1];
    let mut next = capacity;
    fn split(lo: usize, hi: usize, links: &mut [Links], next: &mut usize) -> usize {
        if hi - lo == 1 {
            return lo;
        }
        let mid = lo + (hi - lo).div_ceil(2);
        let id = *next;
        *next += 1;
        let l = split(lo, mid, links, next);
        let r = split(mid, hi, links, next);
        links[id].left = l;
        links[id].right = r;
        links[l].parent = id;
        links[r].parent = id;
        id
    }
    let root = split(0, capacity, &mut links, &mut next);
    (links, root)
}

/// Bottom-up hashes for a heap layout, one level at a time.
fn heap_hashes(key: &HashKey, width: usize, capacity: usize, tags: &[BlockAuthTag]) -> (Vec<NodeHash>, u64) {
    let total = 2 * width - 1;
    let mut hashes = vec![NodeHash::ZERO; total];
    par::for_each_mut(&mut hashes[width - 1..], |addr, h| {
        if addr < capacity {
            *h = NodeHash::from_tag(&tags[addr]);
        }
    });
    let mut ops = 0u64;
    let mut level_width = width / 2;
    while level_width >= 1 {
        let start = level_width - 1;
        let (upper, lower) = hashes.split_at_mut(2 * level_width - 1);
        let level = &mut upper[start..];
        let children = &lower[..2 * level_width];
        let span = width / level_width;
        par::for_each_mut(level, |j, h| {
            *h = if j * span >= capacity {
                NodeHash::ZERO
            } else {
                key.node_hash(&children[2 * j], &children[2 * j + 1])
            };
        });
        ops += (capacity.div_ceil(span)) as u64;
        if level_width == 1 {
            break;
        }
        level_width /= 2;
    }
    (hashes, ops)
}

/// Bottom-up hashes for a linked layout: nodes are grouped by height and
/// each group is hashed in parallel.
fn linked_hashes(key: &HashKey, links: &[Links], root: usize, tags: &[BlockAuthTag]) -> (Vec<NodeHash>, u64) {
    let n = links.len();
    let mut height = vec![0u32; n];
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![(root, false)];
    while let Some((id, expanded)) = stack.pop() {
        let l = links[id];
        if expanded || (l.left == NONE && l.right == NONE) {
            let hl = if l.left == NONE { 0 } else { height[l.left] + 1 };
            let hr = if l.right == NONE { 0 } else { height[l.right] + 1 };
            height[id] = hl.max(hr);
            order.push(id);
        } else {
            stack.push((id, true));
            if l.right != NONE {
                stack.push((l.right, false));
            }
            if l.left != NONE {
                stack.push((l.left, false));
            }
        }
    }
    let max_h = height.iter().copied().max().unwrap_or(0) as usize;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); max_h + 1];
    for id in order {
        buckets[height[id] as usize].push(id);
    }
    let mut hashes = vec![NodeHash::ZERO; n];
    for &leaf in &buckets[0] {
        hashes[leaf] = NodeHash::from_tag(&tags[leaf]);
    }
    let mut ops = 0u64;
    for bucket in &buckets[1..] {
        let computed = {
            let hs = &hashes;
            par::map_range(bucket.len(), |i| {
                let l = links[bucket[i]];
                let left = if l.left == NONE { NodeHash::ZERO } else { hs[l.left] };
                let right = if l.right == NONE { NodeHash::ZERO } else { hs[l.right] };
                key.node_hash(&left, &right)
            })
        };
        for (id, h) in bucket.iter().zip(computed) {
            hashes[*id] = h;
        }
        ops += bucket.len() as u64;
    }
    (hashes, ops)
}

impl MerkleStore {
    /// Builds a tree whose leaves are the tags of the encrypted all-zero
    /// block at each address.
    pub fn build(capacity: u64, kind: TreeKind, keys: &Keys, cache_fraction: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("capacity must be at least one block".into()));
        }
        let cipher = BlockCipher::new(&keys.block);
        let tags = par::map_range(capacity as usize, |a| zero_block_record(&cipher, a as u64).1);
        Self::from_tags(kind, keys.hash.clone(), tags, cache_fraction)
    }

    pub fn from_tags(kind: TreeKind, key: HashKey, tags: Vec<BlockAuthTag>, cache_fraction: f64) -> Result<Self> {
        let capacity = tags.len();
        if capacity == 0 {
            return Err(Error::Config("capacity must be at least one block".into()));
        }
        if let TreeKind::Splay(p) = kind {
            if !(0.0..=1.0).contains(&p.probability) {
                return Err(Error::Config(format!("splay probability {} outside [0, 1]", p.probability)));
            }
        }
        let layout = match kind {
            TreeKind::Balanced => Layout::Heap { width: heap_width(capacity) },
            TreeKind::Splay(_) => {
                let (links, root) = build_linked(capacity);
                Layout::Linked { links, root }
            }
        };
        let (hashes, _) = match &layout {
            Layout::Heap { width } => heap_hashes(&key, *width, capacity, &tags),
            Layout::Linked { links, root } => linked_hashes(&key, links, *root, &tags),
        };
        let n = hashes.len();
        let mut store = Self {
            key,
            capacity,
            kind,
            layout,
            hashes,
            tags,
            root: MerkleRoot { hash: NodeHash::ZERO, version: 0 },
            cache: HashCache::for_fraction(n, cache_fraction),
            cache_fraction,
            dirty: vec![false; n],
            dirty_list: Vec::new(),
            hash_ops: 0,
            rotations: 0,
        };
        store.root.hash = store.hashes[store.root_id()];
        Ok(store)
    }

    pub fn capacity(&self) -> u64 {
        self.capacity as u64
    }

    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.hashes.len()
    }

    pub fn root(&self) -> MerkleRoot {
        self.root
    }

    pub fn cache(&self) -> &HashCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut HashCache {
        &mut self.cache
    }

    /// Total node hashes computed by verify, update and splay.
    pub fn hash_ops(&self) -> u64 {
        self.hash_ops
    }

    pub fn rotations(&self) -> u64 {
        self.rotations
    }

    pub fn leaf_tag(&self, addr: u64) -> BlockAuthTag {
        self.tags[addr as usize]
    }

    pub fn tags(&self) -> &[BlockAuthTag] {
        &self.tags
    }

    fn root_id(&self) -> usize {
        match &self.layout {
            Layout::Heap { .. } => 0,
            Layout::Linked { root, .. } => *root,
        }
    }

    fn leaf_id(&self, addr: usize) -> usize {
        match &self.layout {
            Layout::Heap { width } => width - 1 + addr,
            Layout::Linked { .. } => addr,
        }
    }

    fn parent(&self, id: usize) -> usize {
        match &self.layout {
            Layout::Heap { .. } => {
                if id == 0 {
                    NONE
                } else {
                    (id - 1) / 2
                }
            }
            Layout::Linked { links, .. } => links[id].parent,
        }
    }

    fn children(&self, id: usize) -> (usize, usize) {
        match &self.layout {
            Layout::Heap { width } => {
                if id >= width - 1 {
                    (NONE, NONE)
                } else {
                    (2 * id + 1, 2 * id + 2)
                }
            }
            Layout::Linked { links, .. } => (links[id].left, links[id].right),
        }
    }

    fn hash_at(&self, id: usize) -> NodeHash {
        if id == NONE {
            NodeHash::ZERO
        } else {
            self.hashes[id]
        }
    }

    fn mark_dirty(&mut self, id: usize) {
        if id != NONE && !self.dirty[id] {
            self.dirty[id] = true;
            self.dirty_list.push(id);
        }
    }

    fn check_addr(&self, addr: u64) -> Result<()> {
        if addr as usize >= self.capacity || addr >= self.capacity as u64 {
            return Err(Error::OutOfRange { addr, capacity: self.capacity as u64 });
        }
        Ok(())
    }

    /// Edges between the root and the leaf for `addr`.
    pub fn leaf_depth(&self, addr: u64) -> u32 {
        let mut id = self.leaf_id(addr as usize);
        let mut d = 0;
        while self.parent(id) != NONE {
            id = self.parent(id);
            d += 1;
        }
        d
    }

    /// Checks `observed` against the trusted state. The walk stops at the
    /// first ancestor whose hash is cached; on success every hash on the
    /// walked path is cached.
    pub fn verify_leaf(&mut self, addr: u64, observed: &BlockAuthTag) -> Result<Verified> {
        self.check_addr(addr)?;
        let leaf = self.leaf_id(addr as usize);
        let mut cur = NodeHash::from_tag(observed);
        if let Some(cached) = self.cache.get(leaf) {
            return if cached == cur {
                Ok(Verified { hashes: 0, depth: 0, cache_exit: true })
            } else {
                Err(IntegrityFault::block(addr, FaultKind::Path { depth: 0 }).into())
            };
        }
        let mut path: Vec<(usize, NodeHash)> = Vec::with_capacity(32);
        path.push((leaf, cur));
        let mut id = leaf;
        let mut depth = 0u32;
        let mut hashes = 0u32;
        let cache_exit = loop {
            let p = self.parent(id);
            if p == NONE {
                if cur != self.root.hash {
                    return Err(IntegrityFault::block(addr, FaultKind::Path { depth }).into());
                }
                break false;
            }
            let (l, r) = self.children(p);
            cur = if l == id {
                self.key.node_hash(&cur, &self.hash_at(r))
            } else {
                self.key.node_hash(&self.hash_at(l), &cur)
            };
            hashes += 1;
            depth += 1;
            id = p;
            if let Some(cached) = self.cache.get(p) {
                if cached != cur {
                    self.hash_ops += hashes as u64;
                    return Err(IntegrityFault::block(addr, FaultKind::Path { depth }).into());
                }
                break true;
            }
            path.push((p, cur));
        };
        self.hash_ops += hashes as u64;
        for (node, h) in path {
            self.cache.insert(node, h);
        }
        Ok(Verified { hashes, depth, cache_exit })
    }

    /// Installs `tag` at `addr` and recomputes every ancestor up to the root.
    pub fn update_leaf(&mut self, addr: u64, tag: BlockAuthTag) -> Result<MerkleRoot> {
        self.check_addr(addr)?;
        let leaf = self.leaf_id(addr as usize);
        self.tags[addr as usize] = tag;
        let h = NodeHash::from_tag(&tag);
        self.hashes[leaf] = h;
        self.cache.insert(leaf, h);
        self.mark_dirty(leaf);
        let mut id = leaf;
        loop {
            let p = self.parent(id);
            if p == NONE {
                break;
            }
            self.recompute(p);
            self.cache.insert(p, self.hashes[p]);
            id = p;
        }
        self.root = MerkleRoot { hash: self.hashes[id], version: self.root.version + 1 };
        Ok(self.root)
    }

    fn recompute(&mut self, id: usize) {
        let (l, r) = self.children(id);
        self.hashes[id] = self.key.node_hash(&self.hash_at(l), &self.hash_at(r));
        self.hash_ops += 1;
        self.mark_dirty(id);
    }

    /// With the configured probability, moves the accessed leaf toward the
    /// root by splay rotations along its path. With the window flag set, one
    /// splay lifts the leaf by at most half its depth. Returns true when the
    /// tree changed.
    pub fn maybe_splay<R: Rng + ?Sized>(&mut self, addr: u64, rng: &mut R) -> bool {
        let TreeKind::Splay(params) = self.kind else { return false };
        if params.probability <= 0.0 || addr as usize >= self.capacity {
            return false;
        }
        if params.probability < 1.0 && rng.gen::<f64>() >= params.probability {
            return false;
        }
        self.splay(addr as usize, params.window)
    }

    fn splay(&mut self, addr: usize, window: bool) -> bool {
        let leaf = self.leaf_id(addr);
        let depth = self.leaf_depth(addr as u64) as usize;
        let budget = if window { depth.div_ceil(2) } else { depth };
        let mut lifted = 0;
        while lifted < budget && self.lift(leaf) {
            lifted += 1;
        }
        if lifted == 0 {
            return false;
        }
        // Every node whose subtree changed still lies on the leaf's path.
        let mut up = self.parent(leaf);
        while up != NONE {
            self.recompute(up);
            self.cache.refresh(up, self.hashes[up]);
            up = self.parent(up);
        }
        let root = self.root_id();
        self.root.hash = self.hashes[root];
        true
    }

    /// Raises `leaf` by one level. A rotation lifts the rotated node's
    /// subtree on the side it hangs from its parent, so the lowest aligned
    /// ancestor is rotated (zig or zig-zig); a fully alternating path takes
    /// a double rotation of the parent (zig-zag).
    fn lift(&mut self, leaf: usize) -> bool {
        let x = self.parent(leaf);
        let p = if x == NONE { NONE } else { self.parent(x) };
        if p == NONE {
            return false;
        }
        let c = self.is_left(leaf);
        let b = self.is_left(x);
        if b == c {
            self.rotate(x);
            return true;
        }
        if self.parent(p) == NONE {
            return false;
        }
        if self.is_left(p) == b {
            self.rotate(p);
        } else {
            self.rotate(x);
            self.rotate(x);
        }
        true
    }

    fn is_left(&self, id: usize) -> bool {
        let p = self.parent(id);
        p != NONE && self.children(p).0 == id
    }

    /// Single rotation of internal node `x` above its parent.
    fn rotate(&mut self, x: usize) {
        let Layout::Linked { links, root } = &mut self.layout else { unreachable!("rotation on heap layout") };
        let p = links[x].parent;
        let g = links[p].parent;
        let moved;
        if links[p].left == x {
            moved = links[x].right;
            links[p].left = moved;
            links[x].right = p;
        } else {
            moved = links[x].left;
            links[p].right = moved;
            links[x].left = p;
        }
        if moved != NONE {
            links[moved].parent = p;
        }
        links[p].parent = x;
        links[x].parent = g;
        if g == NONE {
            *root = x;
        } else if links[g].left == p {
            links[g].left = x;
        } else {
            links[g].right = x;
        }
        self.rotations += 1;
        self.mark_dirty(moved);
        self.mark_dirty(g);
        self.recompute(p);
        self.cache.refresh(p, self.hashes[p]);
        self.recompute(x);
        self.cache.refresh(x, self.hashes[x]);
    }

    /// Full bottom-up recomputation from `tags` over the current topology.
    /// Returns every node hash; does not touch the store.
    pub fn recompute_all(&self, tags: &[BlockAuthTag]) -> Vec<NodeHash> {
        match &self.layout {
            Layout::Heap { width } => heap_hashes(&self.key, *width, self.capacity, tags).0,
            Layout::Linked { links, root } => linked_hashes(&self.key, links, *root, tags).0,
        }
    }

    pub fn recompute_root(&self) -> NodeHash {
        self.recompute_all(&self.tags)[self.root_id()]
    }

    /// Recovery check: recomputes the tree from `disk_tags`, requires the
    /// result to match `sealed` and every stored hash and leaf tag to agree
    /// with it. On success the trusted root becomes `sealed`.
    pub fn check_recovered(&mut self, disk_tags: &[BlockAuthTag], sealed: &NodeHash) -> Result<()> {
        if disk_tags.len() != self.capacity {
            return Err(Error::MetadataCorrupt("tag count differs from capacity".into()));
        }
        let fresh = self.recompute_all(disk_tags);
        if fresh[self.root_id()] != *sealed {
            return Err(IntegrityFault::global(FaultKind::RecoveredRoot).into());
        }
        for (addr, (stored, disk)) in self.tags.iter().zip(disk_tags).enumerate() {
            if stored != disk {
                return Err(IntegrityFault::block(addr as u64, FaultKind::StoredTag { addr: addr as u64 }).into());
            }
        }
        if let Some(node) = self.hashes.iter().zip(&fresh).position(|(a, b)| a != b) {
            return Err(IntegrityFault::global(FaultKind::StoredNode { node: node as u64 }).into());
        }
        self.root.hash = *sealed;
        self.cache.clear();
        Ok(())
    }

    /// Test aid: every cached hash equals the hash stored at that node.
    pub fn audit_cache(&self) -> bool {
        self.cache.iter().all(|(id, h)| self.hashes.get(id) == Some(&h))
    }

    pub fn nodes(&self) -> Vec<TreeNode> {
        (0..self.hashes.len()).map(|id| self.node(id)).collect()
    }

    fn node(&self, id: usize) -> TreeNode {
        let (l, r) = self.children(id);
        let leaf_addr = match &self.layout {
            Layout::Heap { width } => (id >= width - 1).then(|| id - (width - 1)),
            Layout::Linked { .. } => (id < self.capacity).then_some(id),
        };
        TreeNode {
            node_id: id as u64,
            hash: self.hashes[id],
            parent: opt(self.parent(id)),
            left: opt(l),
            right: opt(r),
            is_leaf: leaf_addr.is_some(),
            leaf_tag: leaf_addr.filter(|a| *a < self.capacity).map(|a| self.tags[a]),
            dirty: self.dirty[id],
        }
    }

    pub fn root_node(&self) -> u64 {
        self.root_id() as u64
    }

    fn header_bytes(&self) -> [u8; META_HEADER_LEN] {
        let (kind, window, p) = self.kind.code();
        let mut h = [0u8; META_HEADER_LEN];
        h[..4].copy_from_slice(META_MAGIC);
        h[4..6].copy_from_slice(&META_VERSION.to_le_bytes());
        h[6] = kind;
        h[7] = window;
        h[8..16].copy_from_slice(&(self.capacity as u64).to_le_bytes());
        h[16..24].copy_from_slice(&p.to_le_bytes());
        h[24..32].copy_from_slice(&(self.hashes.len() as u64).to_le_bytes());
        h[32..40].copy_from_slice(&(self.root_id() as u64).to_le_bytes());
        h[40..48].copy_from_slice(&self.root.version.to_le_bytes());
        h
    }

    fn record_bytes(&self, id: usize) -> [u8; META_RECORD_LEN] {
        let n = self.node(id);
        let mut r = [0u8; META_RECORD_LEN];
        let enc = |x: Option<u64>| x.unwrap_or(u64::MAX).to_le_bytes();
        r[0..8].copy_from_slice(&n.node_id.to_le_bytes());
        r[8..16].copy_from_slice(&enc(n.parent));
        r[16..24].copy_from_slice(&enc(n.left));
        r[24..32].copy_from_slice(&enc(n.right));
        let flags = if n.is_leaf { FLAG_LEAF } else { 0 } | if n.leaf_tag.is_some() { FLAG_TAG } else { 0 };
        r[32..40].copy_from_slice(&flags.to_le_bytes());
        r[40..72].copy_from_slice(&n.hash.0);
        if let Some(t) = n.leaf_tag {
            r[72..].copy_from_slice(&t.to_bytes());
        }
        r
    }

    /// Writes the full metadata file and clears the dirty set.
    pub fn persist_metadata(&mut self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(META_HEADER_LEN + self.hashes.len() * META_RECORD_LEN);
        buf.extend_from_slice(&self.header_bytes());
        for id in 0..self.hashes.len() {
            buf.extend_from_slice(&self.record_bytes(id));
        }
        let mut f = File::create(path)?;
        f.write_all(&buf)?;
        f.sync_data()?;
        self.clear_dirty();
        Ok(())
    }

    /// Rewrites only the records changed since the last persist, plus the
    /// header, in an existing metadata file.
    pub fn flush_dirty(&mut self, path: &Path) -> Result<usize> {
        let f = OpenOptions::new().write(true).open(path)?;
        let mut list = std::mem::take(&mut self.dirty_list);
        list.sort_unstable();
        for &id in &list {
            f.write_all_at(&self.record_bytes(id), (META_HEADER_LEN + id * META_RECORD_LEN) as u64)?;
            self.dirty[id] = false;
        }
        f.write_all_at(&self.header_bytes(), 0)?;
        f.sync_data()?;
        Ok(list.len())
    }

    fn clear_dirty(&mut self) {
        for id in self.dirty_list.drain(..) {
            self.dirty[id] = false;
        }
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty_list.len()
    }

    /// Parses a metadata file. Performs structural validation only; the
    /// hashes are untrusted until [`MerkleStore::check_recovered`] runs.
    pub fn load_metadata(path: &Path, key: HashKey, cache_fraction: f64) -> Result<Self> {
        let raw = fs::read(path)?;
        Self::parse_metadata(&raw, key, cache_fraction)
    }

    pub fn parse_metadata(raw: &[u8], key: HashKey, cache_fraction: f64) -> Result<Self> {
        let corrupt = |m: &str| Error::MetadataCorrupt(m.to_string());
        if raw.len() < META_HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        if &raw[..4] != META_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u64_at = |b: &[u8], off: usize| u64::from_le_bytes(b[off..off + 8].try_into().unwrap());
        if u16::from_le_bytes([raw[4], raw[5]]) != META_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let capacity = u64_at(raw, 8) as usize;
        let p = f64::from_le_bytes(raw[16..24].try_into().unwrap());
        let node_count = u64_at(raw, 24) as usize;
        let root_node = u64_at(raw, 32) as usize;
        let root_version = u64_at(raw, 40);
        let kind = match (raw[6], raw[7]) {
            (0, _) => TreeKind::Balanced,
            (1, w) if w <= 1 && (0.0..=1.0).contains(&p) => TreeKind::splay(p, w == 1),
            _ => return Err(corrupt("bad tree kind")),
        };
        if capacity == 0 || capacity > (1 << 40) {
            return Err(corrupt("bad capacity"));
        }
        let expected_nodes = match kind {
            TreeKind::Balanced => 2 * heap_width(capacity) - 1,
            TreeKind::Splay(_) if capacity == 1 => 2,
            TreeKind::Splay(_) => 2 * capacity - 1,
        };
        if node_count != expected_nodes || raw.len() != META_HEADER_LEN + node_count * META_RECORD_LEN {
            return Err(corrupt("length does not match node count"));
        }
        let mut links = Vec::with_capacity(node_count);
        let mut hashes = Vec::with_capacity(node_count);
        let mut leaf_flags = Vec::with_capacity(node_count);
        let mut tags = vec![BlockAuthTag::default(); capacity];
        let dec = |x: u64| if x == u64::MAX { NONE } else { x as usize };
        for id in 0..node_count {
            let r = &raw[META_HEADER_LEN + id * META_RECORD_LEN..META_HEADER_LEN + (id + 1) * META_RECORD_LEN];
            if u64_at(r, 0) as usize != id {
                return Err(corrupt("record out of order"));
            }
            let l = Links { parent: dec(u64_at(r, 8)), left: dec(u64_at(r, 16)), right: dec(u64_at(r, 24)) };
            for x in [l.parent, l.left, l.right] {
                if x != NONE && x >= node_count {
                    return Err(corrupt("link out of range"));
                }
            }
            let flags = u64_at(r, 32);
            if flags & !(FLAG_LEAF | FLAG_TAG) != 0 {
                return Err(corrupt("unknown flags"));
            }
            links.push(l);
            leaf_flags.push(flags);
            hashes.push(NodeHash(r[40..72].try_into().unwrap()));
            if flags & FLAG_TAG != 0 {
                let leaf_addr = match kind {
                    TreeKind::Balanced => id.checked_sub(heap_width(capacity) - 1),
                    TreeKind::Splay(_) => Some(id),
                };
                match leaf_addr {
                    Some(a) if a < capacity => tags[a] = BlockAuthTag::from_bytes(r[72..].try_into().unwrap()),
                    _ => return Err(corrupt("tag on non-leaf")),
                }
            }
        }
        let layout = match kind {
            TreeKind::Balanced => {
                let width = heap_width(capacity);
                for (id, l) in links.iter().enumerate() {
                    let parent = if id == 0 { NONE } else { (id - 1) / 2 };
                    let (cl, cr) = if id >= width - 1 { (NONE, NONE) } else { (2 * id + 1, 2 * id + 2) };
                    let is_leaf = id >= width - 1;
                    let has_tag = is_leaf && id - (width - 1) < capacity;
                    let want = if is_leaf { FLAG_LEAF } else { 0 } | if has_tag { FLAG_TAG } else { 0 };
                    if *l != (Links { parent, left: cl, right: cr }) || leaf_flags[id] != want {
                        return Err(corrupt("heap topology mismatch"));
                    }
                }
                if root_node != 0 {
                    return Err(corrupt("heap root must be node 0"));
                }
                Layout::Heap { width }
            }
            TreeKind::Splay(_) => {
                validate_linked(&links, &leaf_flags, capacity, root_node).map_err(corrupt)?;
                Layout::Linked { links, root: root_node }
            }
        };
        let n = hashes.len();
        let root_hash = hashes[root_node];
        Ok(Self {
            key,
            capacity,
            kind,
            layout,
            hashes,
            tags,
            root: MerkleRoot { hash: root_hash, version: root_version },
            cache: HashCache::for_fraction(n, cache_fraction),
            cache_fraction,
            dirty: vec![false; n],
            dirty_list: Vec::new(),
            hash_ops: 0,
            rotations: 0,
        })
    }

    pub fn cache_fraction(&self) -> f64 {
        self.cache_fraction
    }
}

fn validate_linked(links: &[Links], flags: &[u64], capacity: usize, root: usize) -> std::result::Result<(), &'static str> {
    if root >= links.len() || links[root].parent != NONE {
        return Err("root has a parent");
    }
    for (id, l) in links.iter().enumerate() {
        let leaf = id < capacity;
        let want = if leaf { FLAG_LEAF | FLAG_TAG } else { 0 };
        if flags[id] != want {
            return Err("leaf flags mismatch");
        }
        if leaf && (l.left != NONE || l.right != NONE) {
            return Err("leaf with children");
        }
        if !leaf && l.left == NONE {
            return Err("internal node without left child");
        }
        if !leaf && l.right == NONE && capacity != 1 {
            return Err("internal node without right child");
        }
        if id != root && l.parent == NONE {
            return Err("second root");
        }
        for c in [l.left, l.right] {
            if c != NONE && links[c].parent != id {
                return Err("child does not point back to parent");
            }
        }
        if l.left != NONE && l.left == l.right {
            return Err("duplicate child");
        }
    }
    let mut seen = vec![false; links.len()];
    let mut stack = vec![root];
    let mut visited = 0usize;
    while let Some(id) = stack.pop() {
        if seen[id] {
            return Err("cycle");
        }
        seen[id] = true;
        visited += 1;
        for c in [links[id].left, links[id].right] {
            if c != NONE {
                stack.push(c);
            }
        }
    }
    if visited != links.len() {
        return Err("unreachable nodes");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn keys() -> Keys {
        Keys::from_seed(42)
    }

    fn random_tag(rng: &mut ChaCha8Rng) -> BlockAuthTag {
        let mut raw = [0u8; TAG_LEN];
        rng.fill(&mut raw[..]);
        BlockAuthTag::from_bytes(&raw)
    }

    use hmac::{Hmac, Mac};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};
    use sha2::Sha256;

    fn oracle_hash(key: &[u8; 32], l: &[u8; 32], r: &[u8; 32]) -> [u8; 32] {
        let mut m = <Hmac<Sha256> as Mac>::new_from_slice(key).unwrap();
        m.update(l);
        m.update(r);
        m.finalize().into_bytes().into()
    }

    fn oracle_leaf(tag: &BlockAuthTag) -> [u8; 32] {
        let mut out = [0u8; 32];
        out[..16].copy_from_slice(&tag.mac);
        out[16..28].copy_from_slice(&tag.iv.0);
        out
    }

    /// Balanced root from the leaf tags alone: pad to a power of two (at
    /// least two) with zero, and hash pairs where any real leaf is below.
    fn oracle_balanced(key: &[u8; 32], tags: &[BlockAuthTag]) -> [u8; 32] {
        let width = tags.len().next_power_of_two().max(2);
        let mut level: Vec<Option<[u8; 32]>> = (0..width).map(|i| tags.get(i).map(oracle_leaf)).collect();
        while level.len() > 1 {
            level = level
                .chunks(2)
                .map(|p| match (p[0], p[1]) {
                    (None, None) => None,
                    (l, r) => Some(oracle_hash(key, &l.unwrap_or([0; 32]), &r.unwrap_or([0; 32]))),
                })
                .collect();
        }
        level[0].unwrap()
    }

    /// Root over an exported topology, recursing from the root record.
    fn oracle_linked(key: &[u8; 32], nodes: &[TreeNode], id: Option<u64>) -> [u8; 32] {
        let Some(id) = id else { return [0; 32] };
        let n = &nodes[id as usize];
        if n.is_leaf {
            return oracle_leaf(n.leaf_tag.as_ref().unwrap());
        }
        oracle_hash(key, &oracle_linked(key, nodes, n.left), &oracle_linked(key, nodes, n.right))
    }

    fn oracle_root(t: &MerkleStore) -> [u8; 32] {
        let key = keys().hash.as_bytes().to_owned();
        match t.kind() {
            TreeKind::Balanced => oracle_balanced(&key, t.tags()),
            TreeKind::Splay(_) => oracle_linked(&key, &t.nodes(), Some(t.root_node())),
        }
    }

    fn churn(capacity: u64, kind: TreeKind, ops: usize, seed: u64) -> MerkleStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = MerkleStore::build(capacity, kind, &keys(), 0.1).unwrap();
        for _ in 0..ops {
            let a = rng.gen_range(0..capacity);
            if rng.gen_bool(0.5) {
                t.update_leaf(a, random_tag(&mut rng)).unwrap();
            } else {
                let tag = t.leaf_tag(a);
                t.verify_leaf(a, &tag).unwrap();
            }
            t.maybe_splay(a, &mut rng);
        }
        t
    }

    #[test]
    fn fresh_root_matches_oracle() {
        for cap in [1u64, 2, 3, 4, 5, 15, 16, 17] {
            for kind in [TreeKind::Balanced, TreeKind::dmt()] {
                let t = MerkleStore::build(cap, kind, &keys(), 0.1).unwrap();
                assert_eq!(t.root().hash.0, oracle_root(&t), "cap={cap} kind={kind:?}");
            }
        }
    }

    #[test]
    fn random_updates_match_oracle_all_capacities() {
        for cap in [1u64, 2, 3, 4, 15, 16, 17, 256, 1024] {
            for kind in [TreeKind::Balanced, TreeKind::splay(0.2, true), TreeKind::splay(0.2, false)] {
                let t = churn(cap, kind, 1000, cap);
                assert_eq!(t.root().hash.0, oracle_root(&t), "cap={cap} kind={kind:?}");
                assert!(t.audit_cache());
            }
        }
    }

    #[test]
    fn splay_matches_oracle_after_every_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = MerkleStore::build(16, TreeKind::splay(1.0, false), &keys(), 0.1).unwrap();
        for _ in 0..100 {
            let a = rng.gen_range(0..16);
            t.maybe_splay(a, &mut rng);
            assert_eq!(t.root().hash.0, oracle_root(&t));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_root_equivalence(cap in 1u64..80, kind_sel in 0u8..3, seed in any::<u64>(), ops in 0usize..200) {
            let kind = match kind_sel {
                0 => TreeKind::Balanced,
                1 => TreeKind::splay(0.5, true),
                _ => TreeKind::splay(0.5, false),
            };
            let t = churn(cap, kind, ops, seed);
            prop_assert_eq!(t.root().hash.0, oracle_root(&t));
            prop_assert!(t.cache().len() <= t.cache().capacity());
            prop_assert!(t.audit_cache());
        }

        #[test]
        fn prop_stale_tag_rejected(cap in 2u64..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = MerkleStore::build(cap, TreeKind::dmt(), &keys(), 0.2).unwrap();
            let a = rng.gen_range(0..cap);
            let old = t.leaf_tag(a);
            let new = random_tag(&mut rng);
            prop_assume!(new != old);
            t.update_leaf(a, new).unwrap();
            prop_assert!(t.verify_leaf(a, &old).is_err());
            prop_assert!(t.verify_leaf(a, &new).is_ok());
        }
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(matches!(MerkleStore::build(0, TreeKind::Balanced, &keys(), 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn single_leaf_root_pairs_with_zero_sentinel() {
        for kind in [TreeKind::Balanced, TreeKind::dmt()] {
            let t = MerkleStore::build(1, kind, &keys(), 0.5).unwrap();
            let leaf = NodeHash::from_tag(&t.leaf_tag(0));
            assert_eq!(t.root().hash, keys().hash.node_hash(&leaf, &NodeHash::ZERO));
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let a = MerkleStore::build(37, TreeKind::Balanced, &keys(), 0.1).unwrap();
        let b = MerkleStore::build(37, TreeKind::Balanced, &keys(), 0.1).unwrap();
        assert_eq!(a.root(), b.root());
    }

    #[test]
    fn verify_fresh_and_reject_random_mac() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [TreeKind::Balanced, TreeKind::dmt()] {
            let mut t = MerkleStore::build(16, kind, &keys(), 0.1).unwrap();
            let tag = t.leaf_tag(5);
            t.verify_leaf(5, &tag).unwrap();
            let mut bad = tag;
            rng.fill(&mut bad.mac);
            let err = t.verify_leaf(5, &bad).unwrap_err();
            assert!(matches!(err, Error::Integrity(IntegrityFault { addr: Some(5), kind: FaultKind::Path { .. } })));
        }
    }

    #[test]
    fn out_of_range_addresses() {
        let mut t = MerkleStore::build(4, TreeKind::Balanced, &keys(), 0.1).unwrap();
        let tag = t.leaf_tag(0);
        assert!(matches!(t.verify_leaf(4, &tag), Err(Error::OutOfRange { .. })));
        assert!(matches!(t.update_leaf(9, tag), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn stale_tag_after_update_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = MerkleStore::build(16, TreeKind::Balanced, &keys(), 0.0).unwrap();
        let old = t.leaf_tag(3);
        let new = random_tag(&mut rng);
        t.update_leaf(3, new).unwrap();
        t.cache_mut().clear();
        assert!(t.verify_leaf(3, &old).is_err());
        t.verify_leaf(3, &new).unwrap();
    }

    #[test]
    fn same_tag_update_keeps_hash_bumps_version() {
        let mut t = MerkleStore::build(8, TreeKind::Balanced, &keys(), 0.1).unwrap();
        let before = t.root();
        let tag = t.leaf_tag(2);
        let after = t.update_leaf(2, tag).unwrap();
        assert_eq!(after.hash, before.hash);
        assert_eq!(after.version, before.version + 1);
    }

    #[test]
    fn error_depth_points_to_first_trusted_level() {
        let mut t = MerkleStore::build(16, TreeKind::Balanced, &keys(), 0.0).unwrap();
        t.cache_mut().clear();
        let mut bad = t.leaf_tag(0);
        bad.iv.0[0] ^= 1;
        // Cache capacity is one entry; the walk reaches the root at depth 4.
        match t.verify_leaf(0, &bad) {
            Err(Error::Integrity(f)) => assert_eq!(f.kind, FaultKind::Path { depth: 4 }),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn warm_cache_exits_early() {
        let mut t = MerkleStore::build(1024, TreeKind::Balanced, &keys(), 0.5).unwrap();
        let depth = t.leaf_depth(100);
        let tag = t.leaf_tag(100);
        let cold = t.verify_leaf(100, &tag).unwrap();
        assert_eq!(cold.hashes, depth);
        let warm = t.verify_leaf(100, &tag).unwrap();
        assert!(warm.hashes < depth);
        let sib = t.leaf_tag(101);
        let near = t.verify_leaf(101, &sib).unwrap();
        assert_eq!(near.hashes, 1);
        assert!(near.cache_exit);
    }

    #[test]
    fn splay_zero_probability_leaves_structure() {
        let mut t = MerkleStore::build(16, TreeKind::splay(0.0, false), &keys(), 0.1).unwrap();
        let before = t.nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for a in 0..200u64 {
            assert!(!t.maybe_splay(a % 16, &mut rng));
        }
        assert_eq!(t.nodes(), before);
    }

    #[test]
    fn repeated_splay_brings_leaf_near_root() {
        for window in [false, true] {
            let mut t = MerkleStore::build(16, TreeKind::splay(1.0, window), &keys(), 0.1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut depths = vec![t.leaf_depth(11)];
            for _ in 0..3 {
                t.maybe_splay(11, &mut rng);
                depths.push(t.leaf_depth(11));
            }
            assert_eq!(depths[0], 4);
            assert!(depths.iter().skip(1).any(|d| *d <= 2), "window={window} depths={depths:?}");
            assert_eq!(t.root().hash, t.recompute_root());
        }
    }

    #[test]
    fn splay_keeps_in_order_leaves_and_cache_sound() {
        let mut t = MerkleStore::build(33, TreeKind::splay(1.0, true), &keys(), 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..300u64 {
            let a = rng.gen_range(0..33);
            if i % 3 == 0 {
                let tag = random_tag(&mut rng);
                t.update_leaf(a, tag).unwrap();
            } else {
                let tag = t.leaf_tag(a);
                t.verify_leaf(a, &tag).unwrap();
            }
            t.maybe_splay(a, &mut rng);
            assert!(t.audit_cache());
        }
        // in-order traversal of leaves stays 0..capacity
        let nodes = t.nodes();
        let mut stack = vec![(t.root_node(), false)];
        let mut order = vec![];
        while let Some((id, seen)) = stack.pop() {
            let n = &nodes[id as usize];
            if n.is_leaf {
                order.push(id);
            } else if !seen {
                if let Some(r) = n.right {
                    stack.push((r, false));
                }
                stack.push((id, true));
                if let Some(l) = n.left {
                    stack.push((l, false));
                }
            }
        }
        assert_eq!(order, (0..33).collect::<Vec<_>>());
        assert_eq!(t.root().hash, t.recompute_root());
        assert!(t.rotations() > 0);
    }

    #[test]
    fn metadata_roundtrip_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [TreeKind::Balanced, TreeKind::splay(0.5, true)] {
            let mut t = MerkleStore::build(16, kind, &keys(), 0.1).unwrap();
            for _ in 0..40 {
                let a = rng.gen_range(0..16);
                t.update_leaf(a, random_tag(&mut rng)).unwrap();
                t.maybe_splay(a, &mut rng);
            }
            let p = dir.path().join("m");
            t.persist_metadata(&p).unwrap();
            let back = MerkleStore::load_metadata(&p, keys().hash, 0.1).unwrap();
            assert_eq!(back.root().hash, t.root().hash);
            assert_eq!(back.nodes(), t.nodes());
        }
    }

    #[test]
    fn dirty_flush_matches_full_persist() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = MerkleStore::build(64, TreeKind::splay(0.3, false), &keys(), 0.1).unwrap();
        let inc = dir.path().join("inc");
        let full = dir.path().join("full");
        t.persist_metadata(&inc).unwrap();
        for _ in 0..3 {
            for _ in 0..25 {
                let a = rng.gen_range(0..64);
                t.update_leaf(a, random_tag(&mut rng)).unwrap();
                t.maybe_splay(a, &mut rng);
            }
            assert!(t.dirty_count() > 0);
            t.flush_dirty(&inc).unwrap();
            assert_eq!(t.dirty_count(), 0);
        }
        t.persist_metadata(&full).unwrap();
        assert_eq!(fs::read(&inc).unwrap(), fs::read(&full).unwrap());
    }

    #[test]
    fn truncated_or_mangled_metadata_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        let mut t = MerkleStore::build(16, TreeKind::dmt(), &keys(), 0.1).unwrap();
        t.persist_metadata(&p).unwrap();
        let raw = fs::read(&p).unwrap();
        let load = |b: &[u8]| MerkleStore::parse_metadata(b, keys().hash, 0.1);
        assert!(matches!(load(&raw[..raw.len() - 1]), Err(Error::MetadataCorrupt(_))));
        assert!(matches!(load(&raw[..10]), Err(Error::MetadataCorrupt(_))));
        let mut bad = raw.clone();
        bad[0] = b'X';
        assert!(matches!(load(&bad), Err(Error::MetadataCorrupt(_))));
        // point a leaf's parent link somewhere else
        let mut bad = raw.clone();
        let off = META_HEADER_LEN + 3 * META_RECORD_LEN + 8;
        bad[off..off + 8].copy_from_slice(&5u64.to_le_bytes());
        assert!(matches!(load(&bad), Err(Error::MetadataCorrupt(_))));
    }

    #[test]
    fn flipped_hash_byte_fails_recovery_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        let mut t = MerkleStore::build(16, TreeKind::Balanced, &keys(), 0.1).unwrap();
        let root = t.root().hash;
        t.persist_metadata(&p).unwrap();
        let tags = t.tags().to_vec();
        let mut raw = fs::read(&p).unwrap();
        let clean = MerkleStore::parse_metadata(&raw, keys().hash, 0.1);
        clean.unwrap().check_recovered(&tags, &root).unwrap();
        raw[META_HEADER_LEN + 5 * META_RECORD_LEN + 40] ^= 0x01;
        let mut loaded = MerkleStore::parse_metadata(&raw, keys().hash, 0.1).unwrap();
        let err = loaded.check_recovered(&tags, &root).unwrap_err();
        assert!(matches!(err, Error::Integrity(IntegrityFault { kind: FaultKind::StoredNode { node: 5 }, .. })));
    }

    #[test]
    fn node_accounting_is_72_bytes() {
        #[repr(C)]
        struct Accounted {
            _hash: [u8; 32],
            _id: u64,
            _parent: u64,
            _left: u64,
            _right: u64,
            _flags: u64,
        }
        assert_eq!(std::mem::size_of::<Accounted>(), TREE_NODE_BYTES);
        assert_eq!(META_RECORD_LEN, TREE_NODE_BYTES + TAG_LEN);
    }
}
