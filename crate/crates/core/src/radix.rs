//! Dual radix trees over block-granular token sequences.
//!
//! The base forest indexes shared base blocks by token content (one namespace
//! when base rows are shared across adapters, one per adapter otherwise). The
//! residual forest has one root per agent and indexes that agent's residual
//! blocks. The two forests keep independent LRU clocks and are never evicted
//! together.
//!
//! Edges are sequences of cached blocks and only split at block boundaries.
//! Children are keyed by the token content of their first block, so with a
//! block capacity of 1 this is an ordinary token radix tree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::lora::{AdapterId, TokenId};
use crate::numerics::Matrix;
use crate::pool::{BlockHandle, KvPools, PoolError, PoolKind};

pub type AgentId = u64;
pub type NodeId = usize;
/// Root key inside a forest: 0 for the shared base tree, an adapter id for
/// per-adapter base trees, an agent id for residual trees.
pub type Namespace = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RadixError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("block tokens cover {covered} tokens but the sequence has {expected}")]
    LengthMismatch { expected: usize, covered: usize },
    #[error("block tokens diverge from the sequence at position {0}")]
    TokenMismatch(usize),
    #[error("empty block in insert")]
    EmptyBlock,
    #[error("{kind} pool exhausted: {shortfall} more block(s) needed")]
    NeedsEviction { kind: PoolKind, shortfall: usize },
    #[error("node {0} is not locked")]
    NotLocked(NodeId),
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub type Result<T, E = RadixError> = std::result::Result<T, E>;

/// Token contents of one block plus one handle per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachedBlock {
    pub tokens: Vec<TokenId>,
    pub handles: Vec<BlockHandle>,
}

#[derive(Debug, Clone)]
struct RadixNode {
    namespace: Namespace,
    parent: Option<NodeId>,
    blocks: Vec<CachedBlock>,
    children: BTreeMap<Vec<TokenId>, NodeId>,
    last_access: u64,
    inserted: u64,
    lock_count: u32,
}

/// Result of a prefix lookup.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrefixMatch {
    /// Tokens covered by fully matched blocks.
    pub matched_len: usize,
    /// Token-level common prefix along the walked path (before block truncation).
    pub raw_len: usize,
    /// The matched blocks in order.
    pub blocks: Vec<CachedBlock>,
    /// Deepest node with at least one matched block; lock it to protect `blocks`.
    pub node: Option<NodeId>,
}

/// A node removed by eviction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvictedNode {
    pub namespace: Namespace,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvictOutcome {
    /// Handles whose last reference was dropped.
    pub freed: Vec<BlockHandle>,
    pub nodes: Vec<EvictedNode>,
    /// Blocks still missing when no candidate remained.
    pub shortfall: usize,
}

/// One radix forest with its own LRU clock.
#[derive(Debug, Clone)]
pub struct RadixForest {
    kind: PoolKind,
    nodes: Vec<Option<RadixNode>>,
    roots: BTreeMap<Namespace, NodeId>,
    clock: u64,
    seq: u64,
}

impl RadixForest {
    pub fn new(kind: PoolKind) -> Self {
        Self { kind, nodes: Vec::new(), roots: BTreeMap::new(), clock: 0, seq: 0 }
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    fn node(&self, id: NodeId) -> &RadixNode {
        self.nodes[id].as_ref().expect("live node id")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut RadixNode {
        self.nodes[id].as_mut().expect("live node id")
    }

    fn new_node(&mut self, namespace: Namespace, parent: Option<NodeId>, blocks: Vec<CachedBlock>) -> NodeId {
        self.seq += 1;
        let node =
            RadixNode { namespace, parent, blocks, children: BTreeMap::new(), last_access: self.clock, inserted: self.seq, lock_count: 0 };
        self.nodes.push(Some(node));
        self.nodes.len() - 1
    }

    fn root(&mut self, ns: Namespace) -> NodeId {
        if let Some(&r) = self.roots.get(&ns) {
            return r;
        }
        let r = self.new_node(ns, None, Vec::new());
        self.roots.insert(ns, r);
        r
    }

    pub fn namespaces(&self) -> impl Iterator<Item = Namespace> + '_ {
        self.roots.keys().copied()
    }

    /// Longest block-granular prefix of `tokens` stored under `ns`. Touches
    /// every node on the matched path with a fresh tick of this forest's clock.
    pub fn match_prefix(&mut self, ns: Namespace, tokens: &[TokenId]) -> PrefixMatch {
        self.clock += 1;
        let now = self.clock;
        let mut out = PrefixMatch::default();
        let Some(&root) = self.roots.get(&ns) else {
            return out;
        };
        let mut cur = root;
        let mut pos = 0;
        loop {
            if pos >= tokens.len() {
                break;
            }
            let first = tokens[pos];
            let candidates: Vec<NodeId> =
                self.node(cur).children.range(vec![first]..).take_while(|(k, _)| k[0] == first).map(|(_, &id)| id).collect();
            // (block tokens, raw tokens, blocks matched, whole edge matched, child)
            let mut best: Option<(usize, usize, usize, bool, NodeId)> = None;
            for child in candidates {
                let node = self.node(child);
                let (mut blk_tokens, mut raw, mut nblocks, mut whole) = (0, 0, 0, true);
                for b in &node.blocks {
                    let rest = &tokens[pos + blk_tokens..];
                    let common = b.tokens.iter().zip(rest).take_while(|(a, q)| a == q).count();
                    raw = blk_tokens + common;
                    if common == b.tokens.len() {
                        blk_tokens += common;
                        nblocks += 1;
                    } else {
                        whole = false;
                        break;
                    }
                }
                let better = match best {
                    None => true,
                    Some((bt, br, ..)) => (blk_tokens, raw) > (bt, br),
                };
                if better {
                    best = Some((blk_tokens, raw, nblocks, whole, child));
                }
            }
            let Some((blk_tokens, raw, nblocks, whole, child)) = best else {
                break;
            };
            out.raw_len = out.raw_len.max(pos + raw);
            if nblocks == 0 {
                break;
            }
            let node = self.node_mut(child);
            node.last_access = now;
            out.blocks.extend(node.blocks[..nblocks].iter().cloned());
            out.node = Some(child);
            pos += blk_tokens;
            out.matched_len = pos;
            if !whole {
                break;
            }
            cur = child;
        }
        if let Some(n) = out.node {
            self.touch_ancestors(n, now);
        }
        out
    }

    fn touch_ancestors(&mut self, mut id: NodeId, now: u64) {
        while let Some(p) = self.node(id).parent {
            self.node_mut(p).last_access = now;
            id = p;
        }
    }

    /// Inserts the sequence spelled by `blocks` under `ns`. Blocks whose token
    /// content is already present are left to the caller; the remaining
    /// suffix is adopted, retaining each of its handles once. Returns the
    /// deepest node on the inserted path.
    pub fn insert(&mut self, pools: &mut KvPools, ns: Namespace, tokens: &[TokenId], blocks: &[CachedBlock]) -> Result<Option<NodeId>> {
        let covered: usize = blocks.iter().map(|b| b.tokens.len()).sum();
        if covered != tokens.len() {
            return Err(RadixError::LengthMismatch { expected: tokens.len(), covered });
        }
        let mut pos = 0;
        for b in blocks {
            if b.tokens.is_empty() || b.handles.is_empty() {
                return Err(RadixError::EmptyBlock);
            }
            if b.tokens[..] != tokens[pos..pos + b.tokens.len()] {
                return Err(RadixError::TokenMismatch(pos));
            }
            pos += b.tokens.len();
        }
        if blocks.is_empty() {
            return Ok(None);
        }

        self.clock += 1;
        let now = self.clock;
        let mut cur = self.root(ns);
        let mut idx = 0;
        let deepest = loop {
            if idx == blocks.len() {
                break cur;
            }
            let key = &blocks[idx].tokens;
            let Some(&child) = self.node(cur).children.get(key) else {
                let adopted = blocks[idx..].to_vec();
                self.retain_all(pools, &adopted)?;
                let id = self.new_node(ns, Some(cur), adopted);
                self.node_mut(cur).children.insert(key.clone(), id);
                break id;
            };
            let edge_len = self.node(child).blocks.len();
            let same = self.node(child).blocks.iter().zip(&blocks[idx..]).take_while(|(a, b)| a.tokens == b.tokens).count();
            self.node_mut(child).last_access = now;
            if same == edge_len {
                idx += same;
                cur = child;
                continue;
            }
            if idx + same == blocks.len() {
                break child;
            }
            let upper = self.split(child, same);
            self.node_mut(upper).last_access = now;
            idx += same;
            let adopted = blocks[idx..].to_vec();
            self.retain_all(pools, &adopted)?;
            let key = adopted[0].tokens.clone();
            let id = self.new_node(ns, Some(upper), adopted);
            self.node_mut(upper).children.insert(key, id);
            break id;
        };
        self.touch_ancestors(deepest, now);
        self.node_mut(deepest).last_access = now;
        Ok(Some(deepest))
    }

    fn retain_all(&self, pools: &mut KvPools, blocks: &[CachedBlock]) -> Result<()> {
        for b in blocks {
            for &h in &b.handles {
                pools.retain(h)?;
            }
        }
        Ok(())
    }

    /// Splits `id` after its first `at` blocks. The front half becomes a new
    /// parent; `id` keeps the back half so outstanding locks stay valid.
    fn split(&mut self, id: NodeId, at: usize) -> NodeId {
        let (ns, parent, front, lock, access, inserted) = {
            let node = self.node_mut(id);
            let back = node.blocks.split_off(at);
            let front = std::mem::replace(&mut node.blocks, back);
            (node.namespace, node.parent, front, node.lock_count, node.last_access, node.inserted)
        };
        let key = front[0].tokens.clone();
        let upper = self.new_node(ns, parent, front);
        {
            let u = self.node_mut(upper);
            u.lock_count = lock;
            u.last_access = access;
            u.inserted = inserted;
        }
        let back_key = self.node(id).blocks[0].tokens.clone();
        self.node_mut(upper).children.insert(back_key, id);
        self.node_mut(id).parent = Some(upper);
        if let Some(p) = parent {
            self.node_mut(p).children.insert(key, upper);
        }
        upper
    }

    /// Protects `id` and its ancestors from eviction.
    pub fn lock(&mut self, id: NodeId) {
        let mut cur = Some(id);
        while let Some(n) = cur {
            let node = self.node_mut(n);
            node.lock_count += 1;
            cur = node.parent;
        }
    }

    pub fn unlock(&mut self, id: NodeId) -> Result<()> {
        if self.node(id).lock_count == 0 {
            return Err(RadixError::NotLocked(id));
        }
        let mut cur = Some(id);
        while let Some(n) = cur {
            let node = self.node_mut(n);
            node.lock_count = node.lock_count.saturating_sub(1);
            cur = node.parent;
        }
        Ok(())
    }

    pub fn lock_count(&self, id: NodeId) -> u32 {
        self.node(id).lock_count
    }

    fn lru_candidate(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|n| (i, n)))
            .filter(|(_, n)| n.parent.is_some() && n.children.is_empty() && n.lock_count == 0)
            .min_by_key(|(_, n)| (n.last_access, n.inserted))
            .map(|(i, _)| i)
    }

    fn path_tokens(&self, id: NodeId) -> Vec<TokenId> {
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            chain.push(n);
            cur = self.node(n).parent;
        }
        chain.iter().rev().flat_map(|&n| self.node(n).blocks.iter().flat_map(|b| b.tokens.iter().copied())).collect()
    }

    /// Removes least-recently-used unlocked leaves until `blocks_needed`
    /// handles have been freed or nothing evictable remains.
    pub fn evict(&mut self, pools: &mut KvPools, blocks_needed: usize) -> Result<EvictOutcome> {
        let mut out = EvictOutcome::default();
        while out.freed.len() < blocks_needed {
            let Some(id) = self.lru_candidate() else {
                break;
            };
            let node = self.nodes[id].take().expect("candidate is live");
            for b in &node.blocks {
                for &h in &b.handles {
                    if pools.release(h)? == 0 {
                        out.freed.push(h);
                    }
                }
            }
            let edge: Vec<TokenId> = node.blocks.iter().flat_map(|b| b.tokens.iter().copied()).collect();
            let parent = node.parent.expect("roots are never candidates");
            self.node_mut(parent).children.remove(&node.blocks[0].tokens);
            out.nodes.push(EvictedNode { namespace: node.namespace, tokens: edge });
            let p = self.node(parent);
            if p.parent.is_none() && p.children.is_empty() && p.lock_count == 0 {
                let ns = p.namespace;
                self.nodes[parent] = None;
                self.roots.remove(&ns);
            }
        }
        out.shortfall = blocks_needed.saturating_sub(out.freed.len());
        Ok(out)
    }

    /// Every handle referenced by the forest (each reference counts once).
    pub fn held_handles(&self) -> BTreeMap<BlockHandle, u32> {
        let mut out = BTreeMap::new();
        for n in self.nodes.iter().flatten() {
            for b in &n.blocks {
                for &h in &b.handles {
                    *out.entry(h).or_insert(0) += 1;
                }
            }
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().flatten().filter(|n| n.parent.is_some()).count()
    }

    /// Full token sequences spelled by every root-to-leaf path under `ns`.
    pub fn leaf_sequences(&self, ns: Namespace) -> BTreeSet<Vec<TokenId>> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|n| (i, n)))
            .filter(|(_, n)| n.namespace == ns && n.parent.is_some() && n.children.is_empty())
            .map(|(i, _)| self.path_tokens(i))
            .collect()
    }

    /// Deterministic text rendering: preorder, edges as token lists with block
    /// boundaries, per-block refcounts of the first layer, locks and clocks.
    pub fn dump(&self, pools: &KvPools) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} clock={} seq={}", self.kind, self.clock, self.seq);
        for (&ns, &root) in &self.roots {
            let _ = writeln!(s, "ns {ns} lock={}", self.node(root).lock_count);
            self.dump_children(pools, root, 1, &mut s);
        }
        s
    }

    fn dump_children(&self, pools: &KvPools, id: NodeId, depth: usize, s: &mut String) {
        for &child in self.node(id).children.values() {
            let n = self.node(child);
            let edge: Vec<String> = n.blocks.iter().map(|b| b.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")).collect();
            let rc: Vec<String> = n
                .blocks
                .iter()
                .map(|b| {
                    b.handles
                        .iter()
                        .map(|&h| format!("{}:{}", h, pools.refcount(h).map(|r| r as i64).unwrap_or(-1)))
                        .collect::<Vec<_>>()
                        .join("/")
                })
                .collect();
            let _ = writeln!(
                s,
                "{}[{}] rc=[{}] lock={} t={} ins={}",
                "  ".repeat(depth),
                edge.join("|"),
                rc.join(" "),
                n.lock_count,
                n.last_access,
                n.inserted
            );
            self.dump_children(pools, child, depth + 1, s);
        }
    }
}

/// How the base forest is keyed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseKeying {
    /// One tree for all adapters (shared base rows).
    Shared,
    /// One tree per adapter (unified per-adapter prefix caching).
    PerAdapter,
}

/// Token interval `[start, end)`.
pub type TokenRange = Range<usize>;

/// What a fork left for the engine to compute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialHitPlan {
    pub total: usize,
    pub reuse_base: TokenRange,
    pub recompute_base: TokenRange,
    pub reuse_residual: TokenRange,
    pub recompute_residual: TokenRange,
    /// Tokens lost to block truncation in the base lookup.
    pub truncated_tokens: usize,
}

impl PartialHitPlan {
    /// First token whose hidden state must be recomputed (at least the last one).
    pub fn forward_start(&self) -> usize {
        self.recompute_base.start.min(self.recompute_residual.start).min(self.total.saturating_sub(1))
    }
}

/// A span of tokens backed by one block per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewBlock {
    pub start: usize,
    /// Tokens written so far.
    pub filled: usize,
    pub handles: Vec<BlockHandle>,
    /// Shared from a tree: read-only.
    pub sealed: bool,
}

/// An agent's logical memory: its tokens and, per cache kind, the ordered
/// blocks that cover them.
#[derive(Clone, Debug)]
pub struct AgentCacheView {
    pub agent_id: AgentId,
    pub adapter_id: AdapterId,
    pub token_ids: Vec<TokenId>,
    pub base: Vec<ViewBlock>,
    pub residual: Vec<ViewBlock>,
    pub matched_base_len: usize,
    pub matched_residual_len: usize,
    base_ns: Namespace,
    base_lock: Option<NodeId>,
    residual_lock: Option<NodeId>,
    reserved_base: usize,
    reserved_residual: usize,
}

impl AgentCacheView {
    pub fn blocks(&self, kind: PoolKind) -> &[ViewBlock] {
        match kind {
            PoolKind::Base => &self.base,
            PoolKind::Residual => &self.residual,
        }
    }

    fn blocks_mut(&mut self, kind: PoolKind) -> &mut Vec<ViewBlock> {
        match kind {
            PoolKind::Base => &mut self.base,
            PoolKind::Residual => &mut self.residual,
        }
    }

    /// Tokens with rows written for `kind`.
    pub fn filled_len(&self, kind: PoolKind) -> usize {
        self.blocks(kind).iter().map(|b| b.filled).sum()
    }

    /// Every distinct handle this view holds a reference on.
    pub fn handles(&self) -> impl Iterator<Item = BlockHandle> + '_ {
        self.base.iter().chain(&self.residual).flat_map(|b| b.handles.iter().copied())
    }

    pub fn reserved(&self, kind: PoolKind) -> usize {
        match kind {
            PoolKind::Base => self.reserved_base,
            PoolKind::Residual => self.reserved_residual,
        }
    }

    fn cached_blocks(&self, kind: PoolKind, include_partial: bool, capacity: usize) -> (Vec<TokenId>, Vec<CachedBlock>) {
        let mut out = Vec::new();
        let mut end = 0;
        for b in self.blocks(kind) {
            if b.filled == 0 {
                break;
            }
            let full = b.sealed || b.filled == capacity;
            if !full && !include_partial {
                break;
            }
            out.push(CachedBlock { tokens: self.token_ids[b.start..b.start + b.filled].to_vec(), handles: b.handles.clone() });
            end = b.start + b.filled;
            if !full {
                break;
            }
        }
        (self.token_ids[..end].to_vec(), out)
    }
}

/// Sizes a fork needs from the pools.
#[derive(Clone, Copy, Debug)]
pub struct ForkSpec {
    pub num_layers: usize,
    pub capacity: usize,
    /// Whether a residual cache is kept at all.
    pub residual: bool,
    /// Decode tokens whose rows will be appended later; blocks are reserved now.
    pub decode_tokens: usize,
}

/// The coordinated base and residual forests.
#[derive(Debug, Clone)]
pub struct DualRadixTree {
    pub base: RadixForest,
    pub residual: RadixForest,
    pub keying: BaseKeying,
}

fn blocks_for(tokens: usize, capacity: usize) -> usize {
    tokens.div_ceil(capacity)
}

impl DualRadixTree {
    pub fn new(keying: BaseKeying) -> Self {
        Self { base: RadixForest::new(PoolKind::Base), residual: RadixForest::new(PoolKind::Residual), keying }
    }

    pub fn forest(&self, kind: PoolKind) -> &RadixForest {
        match kind {
            PoolKind::Base => &self.base,
            PoolKind::Residual => &self.residual,
        }
    }

    pub fn forest_mut(&mut self, kind: PoolKind) -> &mut RadixForest {
        match kind {
            PoolKind::Base => &mut self.base,
            PoolKind::Residual => &mut self.residual,
        }
    }

    pub fn base_namespace(&self, adapter: AdapterId) -> Namespace {
        match self.keying {
            BaseKeying::Shared => 0,
            BaseKeying::PerAdapter => adapter as Namespace,
        }
    }

    pub fn match_prefix(&mut self, kind: PoolKind, key: Namespace, tokens: &[TokenId]) -> PrefixMatch {
        self.forest_mut(kind).match_prefix(key, tokens)
    }

    pub fn insert(
        &mut self,
        pools: &mut KvPools,
        kind: PoolKind,
        key: Namespace,
        tokens: &[TokenId],
        blocks: &[CachedBlock],
    ) -> Result<Option<NodeId>> {
        self.forest_mut(kind).insert(pools, key, tokens, blocks)
    }

    pub fn evict(&mut self, pools: &mut KvPools, kind: PoolKind, blocks_needed: usize) -> Result<EvictOutcome> {
        if blocks_needed == 0 {
            return Err(RadixError::Invalid("blocks_needed must be >= 1".into()));
        }
        self.forest_mut(kind).evict(pools, blocks_needed)
    }

    /// Step 1 maps the longest shared base prefix into the new view; step 2
    /// maps the agent's surviving residual prefix and allocates fresh blocks
    /// for everything else. Nothing is mutated when the pools are short.
    pub fn fork_agent(
        &mut self,
        pools: &mut KvPools,
        agent_id: AgentId,
        adapter_id: AdapterId,
        tokens: &[TokenId],
        spec: ForkSpec,
    ) -> Result<(AgentCacheView, PartialHitPlan)> {
        if tokens.is_empty() {
            return Err(RadixError::Invalid("fork needs at least one token".into()));
        }
        let s = tokens.len();
        let cap = spec.capacity;
        let base_ns = self.base_namespace(adapter_id);
        let base_match = self.base.match_prefix(base_ns, tokens);
        let res_match = if spec.residual { self.residual.match_prefix(agent_id, tokens) } else { PrefixMatch::default() };
        let lb = base_match.matched_len;
        let lr = if spec.residual { res_match.matched_len } else { lb };

        let tail_room = |matched: usize| {
            if matched == s {
                0
            } else {
                (cap - (s - matched) % cap) % cap
            }
        };
        let need = |matched: usize| {
            let fresh = blocks_for(s - matched, cap) * spec.num_layers;
            let reserve = blocks_for(spec.decode_tokens.saturating_sub(tail_room(matched)), cap) * spec.num_layers;
            (fresh, reserve)
        };
        let (base_fresh, base_reserve) = need(lb);
        let (res_fresh, res_reserve) = if spec.residual { need(lr) } else { (0, 0) };
        for (kind, total) in [(PoolKind::Base, base_fresh + base_reserve), (PoolKind::Residual, res_fresh + res_reserve)] {
            let avail = pools.get(kind).available();
            if total > avail {
                return Err(RadixError::NeedsEviction { kind, shortfall: total - avail });
            }
        }

        let mut view = AgentCacheView {
            agent_id,
            adapter_id,
            token_ids: tokens.to_vec(),
            base: Vec::new(),
            residual: Vec::new(),
            matched_base_len: lb,
            matched_residual_len: if spec.residual { lr } else { 0 },
            base_ns,
            base_lock: base_match.node,
            residual_lock: res_match.node,
            reserved_base: base_reserve,
            reserved_residual: res_reserve,
        };
        let map = |kind: PoolKind, m: &PrefixMatch, pools: &mut KvPools, view: &mut AgentCacheView| -> Result<()> {
            let mut start = 0;
            for b in &m.blocks {
                for &h in &b.handles {
                    pools.retain(h)?;
                }
                view.blocks_mut(kind).push(ViewBlock { start, filled: b.tokens.len(), handles: b.handles.clone(), sealed: true });
                start += b.tokens.len();
            }
            while start < s {
                let mut handles = Vec::with_capacity(spec.num_layers);
                for _ in 0..spec.num_layers {
                    handles.push(pools.get_mut(kind).alloc()?);
                }
                view.blocks_mut(kind).push(ViewBlock { start, filled: 0, handles, sealed: false });
                start += cap;
            }
            Ok(())
        };
        map(PoolKind::Base, &base_match, pools, &mut view)?;
        pools.base.reserve(base_reserve)?;
        if spec.residual {
            map(PoolKind::Residual, &res_match, pools, &mut view)?;
            pools.residual.reserve(res_reserve)?;
        }
        if let Some(n) = base_match.node {
            self.base.lock(n);
        }
        if let Some(n) = res_match.node {
            self.residual.lock(n);
        }
        let plan = PartialHitPlan {
            total: s,
            reuse_base: 0..lb,
            recompute_base: lb..s,
            reuse_residual: 0..lr,
            recompute_residual: lr..s,
            truncated_tokens: base_match.raw_len - lb,
        };
        Ok((view, plan))
    }

    /// Writes rows for `range` of the view's tokens into its unsealed blocks.
    /// Rows must arrive in token order (blocks are append-only).
    pub fn write_rows(
        pools: &mut KvPools,
        view: &mut AgentCacheView,
        kind: PoolKind,
        layer: usize,
        range: TokenRange,
        rows: &Matrix,
        capacity: usize,
    ) -> Result<()> {
        if rows.rows() != range.len() {
            return Err(RadixError::LengthMismatch { expected: range.len(), covered: rows.rows() });
        }
        let last_layer = view.blocks(kind).first().map_or(0, |b| b.handles.len().saturating_sub(1));
        for b in view.blocks_mut(kind).iter_mut() {
            let span = b.start..b.start + if b.sealed { b.filled } else { capacity };
            let lo = range.start.max(span.start);
            let hi = range.end.min(span.end);
            if lo >= hi {
                continue;
            }
            if b.sealed {
                return Err(RadixError::Invalid(format!("token {lo} falls in a sealed block")));
            }
            let written = pools.get(kind).filled(b.handles[layer])?;
            if b.start + written != lo {
                return Err(RadixError::Invalid(format!("rows for token {lo} are not the next append position {}", b.start + written)));
            }
            let chunk = rows.slice_rows(lo - range.start..hi - range.start);
            pools.get_mut(kind).write_rows(b.handles[layer], &chunk)?;
            if layer == last_layer {
                b.filled = written + chunk.rows();
            }
        }
        Ok(())
    }

    /// Appends one generated token's rows (one matrix per layer, per kind) to
    /// the view, allocating a new block at block boundaries and publishing
    /// blocks to the trees as they fill.
    pub fn append_generated(
        &mut self,
        pools: &mut KvPools,
        view: &mut AgentCacheView,
        token: TokenId,
        base_rows: &[Matrix],
        residual_rows: Option<&[Matrix]>,
        capacity: usize,
    ) -> Result<()> {
        let pos = view.token_ids.len();
        let mut kinds = vec![(PoolKind::Base, base_rows)];
        if let Some(r) = residual_rows {
            kinds.push((PoolKind::Residual, r));
        }
        // Make room first so a failure leaves the view untouched.
        for &(kind, rows) in &kinds {
            let needs_block = match view.blocks(kind).last() {
                Some(b) => b.sealed || b.filled == capacity,
                None => true,
            };
            if needs_block {
                let mut handles = Vec::with_capacity(rows.len());
                for _ in 0..rows.len() {
                    let h = if view.reserved(kind) > 0 {
                        match kind {
                            PoolKind::Base => view.reserved_base -= 1,
                            PoolKind::Residual => view.reserved_residual -= 1,
                        }
                        pools.get_mut(kind).alloc_reserved()
                    } else {
                        pools.get_mut(kind).alloc()
                    };
                    match h {
                        Ok(h) => handles.push(h),
                        Err(e) => {
                            for h in handles {
                                pools.release(h)?;
                            }
                            return Err(match e {
                                PoolError::NeedsEviction { kind, needed, available } => {
                                    RadixError::NeedsEviction { kind, shortfall: needed - available }
                                }
                                other => other.into(),
                            });
                        }
                    }
                }
                view.blocks_mut(kind).push(ViewBlock { start: pos, filled: 0, handles, sealed: false });
            }
        }
        view.token_ids.push(token);
        for (kind, rows) in kinds {
            for (layer, r) in rows.iter().enumerate() {
                Self::write_rows(pools, view, kind, layer, pos..pos + 1, r, capacity)?;
            }
            if view.blocks(kind).last().is_some_and(|b| b.filled == capacity) {
                self.commit(pools, view, kind, false, capacity)?;
            }
        }
        Ok(())
    }

    /// Publishes the view's filled blocks (full blocks only unless
    /// `include_partial`) and moves its lock to the new deepest node.
    pub fn commit(
        &mut self,
        pools: &mut KvPools,
        view: &mut AgentCacheView,
        kind: PoolKind,
        include_partial: bool,
        capacity: usize,
    ) -> Result<()> {
        let (tokens, blocks) = view.cached_blocks(kind, include_partial, capacity);
        let ns = match kind {
            PoolKind::Base => view.base_ns,
            PoolKind::Residual => view.agent_id,
        };
        let forest = self.forest_mut(kind);
        let Some(node) = forest.insert(pools, ns, &tokens, &blocks)? else {
            return Ok(());
        };
        forest.lock(node);
        let slot = match kind {
            PoolKind::Base => &mut view.base_lock,
            PoolKind::Residual => &mut view.residual_lock,
        };
        if let Some(old) = slot.replace(node) {
            forest.unlock(old)?;
        }
        Ok(())
    }

    /// Ends a view: publishes everything it wrote (including a partial last
    /// block), drops its locks, references and leftover reservations.
    pub fn release_view(&mut self, pools: &mut KvPools, mut view: AgentCacheView, capacity: usize, publish: bool) -> Result<()> {
        let kinds: &[PoolKind] = if view.residual.is_empty() && view.residual_lock.is_none() {
            &[PoolKind::Base]
        } else {
            &[PoolKind::Base, PoolKind::Residual]
        };
        if publish {
            for &kind in kinds {
                self.commit(pools, &mut view, kind, true, capacity)?;
            }
        }
        if let Some(n) = view.base_lock.take() {
            self.base.unlock(n)?;
        }
        if let Some(n) = view.residual_lock.take() {
            self.residual.unlock(n)?;
        }
        for h in view.handles().collect::<Vec<_>>() {
            pools.release(h)?;
        }
        pools.base.unreserve(view.reserved_base)?;
        pools.residual.unreserve(view.reserved_residual)?;
        Ok(())
    }

    pub fn dump_base(&self, pools: &KvPools) -> String {
        self.base.dump(pools)
    }

    pub fn dump_residual(&self, pools: &KvPools) -> String {
        self.residual.dump(pools)
    }
}
