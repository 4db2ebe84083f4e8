//! Trace-driven scheduler and agent runner.
//!
//! One scheduler owns every tree and pool mutation. Within a step, decode
//! computations only read retained blocks and run in parallel; their rows are
//! appended afterwards in agent-id order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attention_flops, residual_attention, AttentionConfig, AttentionError, KvTile};
use crate::lora::{argmax, AdapterId, BaseModel, LoraAdapter, ModelError, ModelGeometry, TokenId};
use crate::numerics::{rms_norm, Matrix, NumericsError};
use crate::pool::{BlockPool, KvPools, PoolError, PoolKind, PoolStats};
use crate::radix::{AgentCacheView, AgentId, BaseKeying, DualRadixTree, EvictOutcome, ForkSpec, PartialHitPlan, RadixError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Radix(#[from] RadixError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("handle hygiene violated: {0}")]
    Hygiene(String),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// How KV rows are stored and shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Merged rows, prefix-cached per adapter.
    Unified,
    /// Shared base rows plus per-agent residual rows.
    Disaggregated,
    /// Merged rows shared by token content regardless of adapter.
    FullReuse,
}

impl EngineMode {
    pub const ALL: [EngineMode; 3] = [EngineMode::Unified, EngineMode::Disaggregated, EngineMode::FullReuse];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineMode::Unified => "unified",
            EngineMode::Disaggregated => "disaggregated",
            EngineMode::FullReuse => "full_reuse",
        }
    }

    fn disaggregated(self) -> bool {
        self == EngineMode::Disaggregated
    }
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "unified" => Ok(EngineMode::Unified),
            "disaggregated" => Ok(EngineMode::Disaggregated),
            "full_reuse" => Ok(EngineMode::FullReuse),
            other => Err(format!("unknown mode {other:?} (expected unified, disaggregated or full_reuse)")),
        }
    }
}

/// Simulated seconds per FLOP and per byte moved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub alpha_flop: f64,
    pub beta_byte: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { alpha_flop: 1e-12, beta_byte: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: EngineMode,
    pub geometry: ModelGeometry,
    pub seed: u64,
    pub rank: usize,
    pub lora_alpha: f32,
    /// Use all-zero adapters (every mode then computes the same thing).
    pub zero_adapters: bool,
    pub block_capacity: usize,
    /// Total bytes shared by the base and residual pools.
    pub pool_budget_bytes: u64,
    /// Share of the budget given to the residual pool in disaggregated mode.
    pub residual_budget_fraction: f64,
    pub cost: CostModel,
    /// Delay between a parent's completion and a dependent request's release.
    pub tool_latency: f64,
    /// Keys folded per online-softmax step.
    pub attention_block: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: EngineMode::Disaggregated,
            geometry: ModelGeometry::default(),
            seed: 0,
            rank: 8,
            lora_alpha: 16.0,
            zero_adapters: false,
            block_capacity: 16,
            pool_budget_bytes: 64 << 20,
            residual_budget_fraction: 1.0 / 3.0,
            cost: CostModel::default(),
            tool_latency: 0.1,
            attention_block: 64,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let fail = |m: String| Err(EngineError::Config(m));
        if self.rank == 0 || self.rank >= self.geometry.n_q().min(self.geometry.n_kv()) {
            return fail(format!("rank {} must satisfy 1 <= r < min(n_q, n_kv)", self.rank));
        }
        if self.block_capacity == 0 || self.attention_block == 0 {
            return fail("block_capacity and attention_block must be >= 1".into());
        }
        if !(self.cost.alpha_flop >= 0.0 && self.cost.beta_byte >= 0.0) {
            return fail("cost constants must be non-negative".into());
        }
        if !(self.residual_budget_fraction > 0.0 && self.residual_budget_fraction < 1.0) {
            return fail("residual_budget_fraction must lie in (0, 1)".into());
        }
        if !(self.tool_latency >= 0.0 && self.tool_latency.is_finite()) {
            return fail("tool_latency must be a finite non-negative number".into());
        }
        Ok(())
    }

    fn base_width(&self) -> usize {
        2 * self.geometry.n_kv()
    }

    fn residual_width(&self) -> usize {
        2 * self.rank
    }

    /// Bytes of one base-pool block.
    pub fn base_block_bytes(&self) -> u64 {
        (self.block_capacity * self.base_width() * 4) as u64
    }

    pub fn residual_block_bytes(&self) -> u64 {
        (self.block_capacity * self.residual_width() * 4) as u64
    }

    /// Block counts `(base, residual)` the budget buys in this mode.
    pub fn pool_blocks(&self) -> (usize, usize) {
        let budget = self.pool_budget_bytes as f64;
        if self.mode.disaggregated() {
            let res = (budget * self.residual_budget_fraction / self.residual_block_bytes() as f64).floor() as usize;
            let base = (budget * (1.0 - self.residual_budget_fraction) / self.base_block_bytes() as f64).floor() as usize;
            (base, res)
        } else {
            ((budget / self.base_block_bytes() as f64).floor() as usize, 0)
        }
    }
}

/// One agent invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub workflow_id: u64,
    pub agent_id: AgentId,
    pub adapter_id: AdapterId,
    pub arrival_time: f64,
    /// Tokens appended after the parent's final context (the whole prompt
    /// when there is no parent).
    pub prompt_tokens: Vec<TokenId>,
    pub max_new_tokens: usize,
    /// Agent whose final context is inherited; equal to `agent_id` to resume.
    pub parent_agent: Option<AgentId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: Option<EngineMode>,
    pub sim_time: f64,
    pub steps: u64,
    pub tasks_per_second: f64,
    pub completed_workflows: u64,
    pub completed_agents: u64,
    pub submitted_agents: u64,
    pub admission_failures: u64,
    pub per_agent_bytes: f64,
    pub peak_active_agents: u64,
    pub cache_hit_rate: f64,
    pub prefill_tokens: u64,
    pub matched_prefill_tokens: u64,
    pub truncation_loss_tokens: u64,
    pub avg_decode_batch_size: f64,
    pub decode_tokens: u64,
    pub total_flops: u64,
    pub total_bytes: u64,
    pub base_recompute_flops: u64,
    pub residual_recompute_flops: u64,
    pub evicted_blocks_base: u64,
    pub evicted_blocks_residual: u64,
    pub evicted_nodes_base: u64,
    pub evicted_nodes_residual: u64,
    pub pool: Option<PoolStats>,
}

/// One timeline row per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub sim_time: f64,
    pub active_agents: usize,
    pub decode_batch: usize,
    pub bytes_base: u64,
    pub bytes_residual: u64,
    pub hits: u64,
    pub evictions: u64,
}

/// What happened in one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepEvents {
    pub admitted: Vec<AgentId>,
    pub completed: Vec<AgentId>,
    pub failed: Vec<AgentId>,
    pub decode_batch: usize,
    pub stalled: Vec<AgentId>,
    pub idle: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Pending,
    Queued,
    Active,
    Done,
    Failed,
}

#[derive(Clone, Debug)]
struct Submitted {
    req: AgentRequest,
    /// Earlier requests of the parent agent and of this agent.
    deps: Vec<usize>,
    status: Status,
    done_at: f64,
}

struct ActiveAgent {
    seq: usize,
    view: AgentCacheView,
    /// Last generated token; its rows are not cached yet.
    next_input: TokenId,
    generated: Vec<TokenId>,
    max_new_tokens: usize,
}

#[derive(Default)]
struct StepCost {
    flops: u64,
    bytes: u64,
}

struct DecodeOut {
    token: TokenId,
    base_rows: Vec<Matrix>,
    residual_rows: Option<Vec<Matrix>>,
    flops: u64,
    bytes: u64,
}

/// Read-only pieces shared by prefill and parallel decode.
struct Kernel<'a> {
    model: &'a BaseModel,
    config: &'a EngineConfig,
    attn: AttentionConfig,
}

pub struct Engine {
    config: EngineConfig,
    model: BaseModel,
    adapters: BTreeMap<AdapterId, LoraAdapter>,
    pools: KvPools,
    trees: DualRadixTree,
    clock: f64,
    requests: Vec<Submitted>,
    queue: VecDeque<usize>,
    active: BTreeMap<AgentId, ActiveAgent>,
    contexts: BTreeMap<AgentId, Vec<TokenId>>,
    outputs: BTreeMap<usize, Vec<TokenId>>,
    metrics: Metrics,
    timeline: Vec<TimelineRow>,
    per_agent_samples: Vec<f64>,
    decode_batches: Vec<usize>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let model = BaseModel::new(config.geometry.clone(), config.seed)?;
        let (base_blocks, res_blocks) = config.pool_blocks();
        let pools = KvPools::new(
            BlockPool::new(PoolKind::Base, base_blocks, config.block_capacity, config.base_width()),
            BlockPool::new(PoolKind::Residual, res_blocks, config.block_capacity, config.residual_width()),
        );
        let keying = match config.mode {
            EngineMode::Unified => BaseKeying::PerAdapter,
            EngineMode::Disaggregated | EngineMode::FullReuse => BaseKeying::Shared,
        };
        let metrics = Metrics { mode: Some(config.mode), ..Metrics::default() };
        Ok(Self {
            config,
            model,
            adapters: BTreeMap::new(),
            pools,
            trees: DualRadixTree::new(keying),
            clock: 0.0,
            requests: Vec::new(),
            queue: VecDeque::new(),
            active: BTreeMap::new(),
            contexts: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics,
            timeline: Vec::new(),
            per_agent_samples: Vec::new(),
            decode_batches: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn model(&self) -> &BaseModel {
        &self.model
    }

    pub fn pools(&self) -> &KvPools {
        &self.pools
    }

    pub fn trees(&self) -> &DualRadixTree {
        &self.trees
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn timeline(&self) -> &[TimelineRow] {
        &self.timeline
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn active_agents(&self) -> usize {
        self.active.len()
    }

    /// The adapter used for `id`, created on first use.
    pub fn adapter(&mut self, id: AdapterId) -> Result<&LoraAdapter> {
        if !self.adapters.contains_key(&id) {
            let g = &self.config.geometry;
            let a = if self.config.zero_adapters {
                LoraAdapter::zeros(id, g, self.config.rank)?
            } else {
                let seed = self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1 + id as u64);
                LoraAdapter::random(id, g, self.config.rank, self.config.lora_alpha, seed)?
            };
            self.adapters.insert(id, a);
        }
        Ok(&self.adapters[&id])
    }

    /// Tokens generated by every completed request of `agent`, in order.
    pub fn generated(&self, agent: AgentId) -> Vec<Vec<TokenId>> {
        self.outputs.iter().filter(|(&seq, _)| self.requests[seq].req.agent_id == agent).map(|(_, t)| t.clone()).collect()
    }

    /// Final context (prompt plus generated tokens) of an agent's last completed request.
    pub fn context(&self, agent: AgentId) -> Option<&[TokenId]> {
        self.contexts.get(&agent).map(|v| v.as_slice())
    }

    pub fn submit(&mut self, req: AgentRequest) -> Result<()> {
        let bad = |m: String| Err(EngineError::InvalidRequest(m));
        if req.max_new_tokens == 0 {
            return bad(format!("agent {}: max_new_tokens must be >= 1", req.agent_id));
        }
        if !(req.arrival_time >= 0.0 && req.arrival_time.is_finite()) {
            return bad(format!("agent {}: arrival time {} is not a finite non-negative number", req.agent_id, req.arrival_time));
        }
        let vocab = self.config.geometry.vocab;
        if let Some(&t) = req.prompt_tokens.iter().find(|&&t| t as usize >= vocab) {
            return bad(format!("agent {}: token {t} outside vocab {vocab}", req.agent_id));
        }
        if req.prompt_tokens.is_empty() && req.parent_agent.is_none() {
            return bad(format!("agent {}: empty prompt without a parent context", req.agent_id));
        }
        let mut deps = Vec::new();
        let mut parent_seen = req.parent_agent.is_none();
        for (i, s) in self.requests.iter().enumerate() {
            if Some(s.req.agent_id) == req.parent_agent {
                parent_seen = true;
                deps.push(i);
            } else if s.req.agent_id == req.agent_id {
                deps.push(i);
            }
        }
        if !parent_seen {
            return bad(format!("agent {}: parent agent {:?} was never submitted", req.agent_id, req.parent_agent));
        }
        self.adapter(req.adapter_id)?;
        self.metrics.submitted_agents += 1;
        self.requests.push(Submitted { req, deps, status: Status::Pending, done_at: 0.0 });
        Ok(())
    }

    /// `Some(time)` once every dependency is done, `None` while waiting;
    /// `Err(())` if a parent request failed.
    fn release_time(&self, seq: usize) -> std::result::Result<Option<f64>, ()> {
        let s = &self.requests[seq];
        let mut t = s.req.arrival_time;
        for &d in &s.deps {
            let dep = &self.requests[d];
            match dep.status {
                Status::Done => {
                    if s.req.parent_agent == Some(dep.req.agent_id) {
                        t = t.max(dep.done_at + self.config.tool_latency);
                    } else {
                        t = t.max(dep.done_at);
                    }
                }
                Status::Failed if s.req.parent_agent == Some(dep.req.agent_id) => return Err(()),
                Status::Failed => {}
                _ => return Ok(None),
            }
        }
        Ok(Some(t))
    }

    /// Moves released requests to the queue; returns the earliest future release.
    fn release_ready(&mut self, events: &mut StepEvents) -> Option<f64> {
        let mut next: Option<f64> = None;
        for seq in 0..self.requests.len() {
            if self.requests[seq].status != Status::Pending {
                continue;
            }
            match self.release_time(seq) {
                Err(()) => {
                    self.fail(seq, events);
                }
                Ok(Some(t)) if t <= self.clock => {
                    self.requests[seq].status = Status::Queued;
                    self.queue.push_back(seq);
                }
                Ok(Some(t)) => next = Some(next.map_or(t, |n: f64| n.min(t))),
                Ok(None) => {}
            }
        }
        next
    }

    fn fail(&mut self, seq: usize, events: &mut StepEvents) {
        self.requests[seq].status = Status::Failed;
        self.requests[seq].done_at = self.clock;
        self.metrics.admission_failures += 1;
        events.failed.push(self.requests[seq].req.agent_id);
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.requests.iter().all(|s| matches!(s.status, Status::Done | Status::Failed))
    }

    fn fork_spec(&self, max_new_tokens: usize) -> ForkSpec {
        ForkSpec {
            num_layers: self.config.geometry.num_layers,
            capacity: self.config.block_capacity,
            residual: self.config.mode.disaggregated(),
            decode_tokens: max_new_tokens - 1,
        }
    }

    fn record_eviction(&mut self, kind: PoolKind, out: &EvictOutcome) {
        let (blocks, nodes) = match kind {
            PoolKind::Base => (&mut self.metrics.evicted_blocks_base, &mut self.metrics.evicted_nodes_base),
            PoolKind::Residual => (&mut self.metrics.evicted_blocks_residual, &mut self.metrics.evicted_nodes_residual),
        };
        *blocks += out.freed.len() as u64;
        *nodes += out.nodes.len() as u64;
    }

    /// Evicts from one tree only.
    pub fn evict(&mut self, kind: PoolKind, blocks_needed: usize) -> Result<EvictOutcome> {
        let out = self.trees.evict(&mut self.pools, kind, blocks_needed)?;
        self.record_eviction(kind, &out);
        Ok(out)
    }

    /// Forks with eviction retries. `Ok(None)` means the pools cannot make room.
    fn fork_with_eviction(
        &mut self,
        agent: AgentId,
        adapter: AdapterId,
        tokens: &[TokenId],
        max_new: usize,
    ) -> Result<Option<(AgentCacheView, PartialHitPlan)>> {
        let spec = self.fork_spec(max_new);
        loop {
            match self.trees.fork_agent(&mut self.pools, agent, adapter, tokens, spec) {
                Ok(v) => return Ok(Some(v)),
                Err(RadixError::NeedsEviction { kind, shortfall }) => {
                    let out = self.evict(kind, shortfall)?;
                    if out.freed.is_empty() {
                        return Ok(None);
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn resolve_prompt(&self, seq: usize) -> Vec<TokenId> {
        let req = &self.requests[seq].req;
        let mut tokens = req.parent_agent.and_then(|p| self.contexts.get(&p)).cloned().unwrap_or_default();
        tokens.extend_from_slice(&req.prompt_tokens);
        tokens
    }

    fn admit(&mut self, events: &mut StepEvents, cost: &mut StepCost) -> Result<()> {
        let mut adapters_used = BTreeSet::new();
        while let Some(&seq) = self.queue.front() {
            let req = self.requests[seq].req.clone();
            let tokens = self.resolve_prompt(seq);
            if tokens.len() + req.max_new_tokens > self.config.geometry.max_positions {
                self.queue.pop_front();
                self.fail(seq, events);
                continue;
            }
            let Some((mut view, plan)) = self.fork_with_eviction(req.agent_id, req.adapter_id, &tokens, req.max_new_tokens)? else {
                if self.active.is_empty() {
                    self.queue.pop_front();
                    self.fail(seq, events);
                    continue;
                }
                break;
            };
            self.queue.pop_front();
            self.metrics.prefill_tokens += plan.total as u64;
            self.metrics.matched_prefill_tokens += plan.reuse_base.len() as u64;
            self.metrics.truncation_loss_tokens += plan.truncated_tokens as u64;
            let first = self.prefill(&mut view, &plan, req.adapter_id, cost)?;
            if self.config.mode.disaggregated() {
                self.trees.commit(&mut self.pools, &mut view, PoolKind::Residual, false, self.config.block_capacity)?;
            }
            self.trees.commit(&mut self.pools, &mut view, PoolKind::Base, false, self.config.block_capacity)?;
            adapters_used.insert(req.adapter_id);
            self.requests[seq].status = Status::Active;
            events.admitted.push(req.agent_id);
            self.active.insert(
                req.agent_id,
                ActiveAgent { seq, view, next_input: first, generated: vec![first], max_new_tokens: req.max_new_tokens },
            );
        }
        if !events.admitted.is_empty() {
            cost.bytes += self.model.weight_bytes();
            cost.bytes += adapters_used.iter().map(|a| self.adapters[a].weight_bytes()).sum::<u64>();
        }
        Ok(())
    }

    fn kernel(&self) -> Kernel<'_> {
        let mut attn = AttentionConfig::new(
            self.config.geometry.num_heads,
            self.config.geometry.num_kv_heads,
            self.config.geometry.head_dim,
            if self.config.mode.disaggregated() { self.config.rank } else { 0 },
        );
        attn.block_size_keys = self.config.attention_block;
        Kernel { model: &self.model, config: &self.config, attn }
    }

    /// Runs the forward over the plan's ranges, writing the missing rows.
    /// Returns the first generated token.
    fn prefill(&mut self, view: &mut AgentCacheView, plan: &PartialHitPlan, adapter_id: AdapterId, cost: &mut StepCost) -> Result<TokenId> {
        let cfg = self.config.clone();
        let g = &cfg.geometry;
        let (m, n, r) = (g.hidden as u64, g.n_kv() as u64, cfg.rank as u64);
        let cap = cfg.block_capacity;
        let disagg = cfg.mode.disaggregated();
        let s = plan.total;
        let start = plan.forward_start();
        let adapter = self.adapters[&adapter_id].clone();
        let mut x = self.model.embed(&view.token_ids[start..s])?;
        let mut row0 = start;
        for layer in 0..g.num_layers {
            let last = layer + 1 == g.num_layers;
            let h = rms_norm(&x);
            let local = |range: &std::ops::Range<usize>| h.slice_rows(range.start - row0..range.end - row0);
            let rb = plan.recompute_base.clone();
            if !rb.is_empty() {
                let hb = local(&rb);
                let positions: Vec<usize> = rb.clone().collect();
                let len = rb.len() as u64;
                let rows = if disagg {
                    let (k, v) = self.model.base_kv(&hb, layer, &positions)?;
                    k.hcat(&v)?
                } else {
                    let (k, v) = self.model.merged_kv(&hb, layer, &adapter, &positions)?;
                    let res = 2 * len * m * 2 * r + 2 * len * r * 2 * n;
                    self.metrics.residual_recompute_flops += 2 * len * m * 2 * r;
                    cost.flops += res;
                    k.hcat(&v)?
                };
                let proj = 2 * len * m * 2 * n;
                self.metrics.base_recompute_flops += proj;
                cost.flops += proj;
                cost.bytes += len * (cfg.base_width() as u64) * 4;
                DualRadixTree::write_rows(&mut self.pools, view, PoolKind::Base, layer, rb, &rows, cap)?;
            }
            let rr = plan.recompute_residual.clone();
            if disagg && !rr.is_empty() {
                let (k, v) = self.model.residual_kv(&local(&rr), layer, &adapter)?;
                let len = rr.len() as u64;
                let proj = 2 * len * m * 2 * r;
                self.metrics.residual_recompute_flops += proj;
                cost.flops += proj;
                cost.bytes += len * (cfg.residual_width() as u64) * 4;
                DualRadixTree::write_rows(&mut self.pools, view, PoolKind::Residual, layer, rr, &k.hcat(&v)?, cap)?;
            }

            let q_range = if last { s - 1..s } else { row0..s };
            let hq = local(&q_range);
            let q_pos: Vec<usize> = q_range.clone().collect();
            let kernel = self.kernel();
            let tiles = build_tiles(&self.pools, view, layer, s, disagg)?;
            let (attn, flops, bytes) = kernel.attend(&hq, &q_pos, &tiles, &adapter, layer, s)?;
            cost.flops += flops;
            cost.bytes += bytes;
            let xq = x.slice_rows(q_range.start - row0..q_range.end - row0);
            let x1 = xq.add(&attn.matmul(&self.model.layers[layer].w_o)?)?;
            x = self.model.feed_forward(&x1, layer)?;
            cost.flops += kernel.dense_flops(q_range.len() as u64);
            row0 = q_range.start;
        }
        let logits = self.model.logits(&x)?;
        cost.flops += 2 * m * g.vocab as u64;
        Ok(argmax(logits.row(0)) as TokenId)
    }

    fn decode(&mut self, batch: &[AgentId], events: &mut StepEvents, cost: &mut StepCost) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let disagg = self.config.mode.disaggregated();
        let outs: Vec<Result<DecodeOut>> = {
            let kernel = self.kernel();
            let pools = &self.pools;
            let agents: Vec<&ActiveAgent> = batch.iter().map(|id| &self.active[id]).collect();
            let adapters = &self.adapters;
            agents.par_iter().map(|a| kernel.decode_one(pools, &a.view, a.next_input, &adapters[&a.view.adapter_id], disagg)).collect()
        };
        let mut adapters_used = BTreeSet::new();
        let mut decoded = 0;
        for (&id, out) in batch.iter().zip(outs) {
            let out = out?;
            let mut agent = self.active.remove(&id).expect("batch members are active");
            let res = out.residual_rows.as_deref();
            let mut appended = self.trees.append_generated(
                &mut self.pools,
                &mut agent.view,
                agent.next_input,
                &out.base_rows,
                res,
                self.config.block_capacity,
            );
            while let Err(RadixError::NeedsEviction { kind, shortfall }) = appended {
                let freed = self.evict(kind, shortfall)?;
                if freed.freed.is_empty() {
                    break;
                }
                appended = self.trees.append_generated(
                    &mut self.pools,
                    &mut agent.view,
                    agent.next_input,
                    &out.base_rows,
                    res,
                    self.config.block_capacity,
                );
            }
            match appended {
                Ok(()) => {
                    agent.generated.push(out.token);
                    agent.next_input = out.token;
                    cost.flops += out.flops;
                    cost.bytes += out.bytes;
                    adapters_used.insert(agent.view.adapter_id);
                    decoded += 1;
                }
                Err(RadixError::NeedsEviction { .. }) => events.stalled.push(id),
                Err(e) => return Err(e.into()),
            }
            self.active.insert(id, agent);
        }
        events.decode_batch = decoded;
        if decoded > 0 {
            self.decode_batches.push(decoded);
            self.metrics.decode_tokens += decoded as u64;
            cost.bytes += self.model.weight_bytes();
            cost.bytes += adapters_used.iter().map(|a| self.adapters[a].weight_bytes()).sum::<u64>();
        }
        Ok(())
    }

    fn retire(&mut self, events: &mut StepEvents) -> Result<()> {
        let done: Vec<AgentId> = self.active.iter().filter(|(_, a)| a.generated.len() >= a.max_new_tokens).map(|(&id, _)| id).collect();
        for id in done {
            let agent = self.active.remove(&id).expect("listed as active");
            let mut context = agent.view.token_ids.clone();
            context.push(agent.next_input);
            self.trees.release_view(&mut self.pools, agent.view, self.config.block_capacity, true)?;
            self.contexts.insert(id, context);
            self.outputs.insert(agent.seq, agent.generated);
            let s = &mut self.requests[agent.seq];
            s.status = Status::Done;
            s.done_at = self.clock;
            self.metrics.completed_agents += 1;
            events.completed.push(id);
        }
        Ok(())
    }

    fn sample(&mut self, events: &StepEvents, hits_before: u64, evictions_before: u64) {
        let mut base = BTreeSet::new();
        let mut res = BTreeSet::new();
        for a in self.active.values() {
            base.extend(a.view.base.iter().flat_map(|b| b.handles.iter().copied()));
            res.extend(a.view.residual.iter().flat_map(|b| b.handles.iter().copied()));
        }
        let bytes_base = base.len() as u64 * self.config.base_block_bytes();
        let bytes_residual = res.len() as u64 * self.config.residual_block_bytes();
        if !self.active.is_empty() {
            self.per_agent_samples.push((bytes_base + bytes_residual) as f64 / self.active.len() as f64);
        }
        self.metrics.peak_active_agents = self.metrics.peak_active_agents.max(self.active.len() as u64);
        self.timeline.push(TimelineRow {
            sim_time: self.clock,
            active_agents: self.active.len(),
            decode_batch: events.decode_batch,
            bytes_base,
            bytes_residual,
            hits: self.metrics.matched_prefill_tokens - hits_before,
            evictions: self.metrics.evicted_blocks_base + self.metrics.evicted_blocks_residual - evictions_before,
        });
    }

    /// One scheduling round: release, admit and prefill, decode the agents
    /// that were already running, advance the clock, retire finished agents.
    pub fn step(&mut self) -> Result<StepEvents> {
        let mut events = StepEvents::default();
        let next = self.release_ready(&mut events);
        if self.active.is_empty() && self.queue.is_empty() {
            match next {
                Some(t) => {
                    self.clock = self.clock.max(t);
                    self.release_ready(&mut events);
                }
                None => {
                    events.idle = true;
                    return Ok(events);
                }
            }
        }
        let hits_before = self.metrics.matched_prefill_tokens;
        let evictions_before = self.metrics.evicted_blocks_base + self.metrics.evicted_blocks_residual;
        let mut cost = StepCost::default();
        let decoding: Vec<AgentId> = self.active.keys().copied().collect();
        self.admit(&mut events, &mut cost)?;
        self.decode(&decoding, &mut events, &mut cost)?;
        self.clock += self.config.cost.alpha_flop * cost.flops as f64 + self.config.cost.beta_byte * cost.bytes as f64;
        self.metrics.total_flops += cost.flops;
        self.metrics.total_bytes += cost.bytes;
        self.metrics.steps += 1;
        self.sample(&events, hits_before, evictions_before);
        self.retire(&mut events)?;
        Ok(events)
    }

    /// Steps until every request is done or failed.
    pub fn run_to_completion(&mut self) -> Result<Metrics> {
        while !self.is_idle() {
            let ev = self.step()?;
            if ev.idle {
                break;
            }
        }
        Ok(self.report())
    }

    /// Finalized counters.
    pub fn report(&mut self) -> Metrics {
        let m = &mut self.metrics;
        m.sim_time = self.clock;
        m.cache_hit_rate = if m.prefill_tokens == 0 { 0.0 } else { m.matched_prefill_tokens as f64 / m.prefill_tokens as f64 };
        m.per_agent_bytes = mean(&self.per_agent_samples);
        m.avg_decode_batch_size = mean(&self.decode_batches.iter().map(|&b| b as f64).collect::<Vec<_>>());
        let mut workflows: BTreeMap<u64, bool> = BTreeMap::new();
        for s in &self.requests {
            let ok = workflows.entry(s.req.workflow_id).or_insert(true);
            *ok &= s.status == Status::Done;
        }
        m.completed_workflows = workflows.values().filter(|&&ok| ok).count() as u64;
        m.tasks_per_second = if self.clock > 0.0 { m.completed_workflows as f64 / self.clock } else { 0.0 };
        let mut per_agent = BTreeMap::new();
        for (&id, a) in &self.active {
            let bytes = a.view.base.iter().map(|b| b.handles.len() as u64).sum::<u64>() * self.config.base_block_bytes()
                + a.view.residual.iter().map(|b| b.handles.len() as u64).sum::<u64>() * self.config.residual_block_bytes();
            per_agent.insert(id, bytes);
        }
        m.pool = Some(self.pools.stats(per_agent));
        m.clone()
    }

    /// Every live block's refcount equals the number of tree references plus
    /// active view references.
    pub fn check_handle_hygiene(&self) -> Result<()> {
        let mut expected = self.trees.base.held_handles();
        for (h, n) in self.trees.residual.held_handles() {
            *expected.entry(h).or_insert(0) += n;
        }
        for a in self.active.values() {
            for h in a.view.handles() {
                *expected.entry(h).or_insert(0) += 1;
            }
        }
        for (&h, &n) in &expected {
            let rc = self.pools.refcount(h)?;
            if rc != n {
                return Err(EngineError::Hygiene(format!("{h} has refcount {rc}, expected {n}")));
            }
        }
        for kind in [PoolKind::Base, PoolKind::Residual] {
            let live = expected.keys().filter(|h| h.kind == kind).count();
            let allocated = self.pools.get(kind).allocated_blocks();
            if live != allocated {
                return Err(EngineError::Hygiene(format!("{kind} pool has {allocated} allocated blocks but {live} are referenced")));
            }
        }
        if self.active.is_empty() && (self.pools.base.reserved_blocks() > 0 || self.pools.residual.reserved_blocks() > 0) {
            return Err(EngineError::Hygiene("reservations outlive their views".into()));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Tiles covering `[0, upto)` for one layer: the intersection of base and
/// residual block boundaries.
fn build_tiles<'p>(pools: &'p KvPools, view: &AgentCacheView, layer: usize, upto: usize, disagg: bool) -> Result<Vec<KvTile<'p>>> {
    let segment = |kind: PoolKind, idx: usize, pos: usize| -> Result<(usize, usize)> {
        let b = view
            .blocks(kind)
            .get(idx)
            .filter(|b| b.start <= pos)
            .ok_or_else(|| EngineError::Hygiene(format!("no {kind} block covers token {pos}")))?;
        Ok((b.start, (b.start + pools.get(kind).filled(b.handles[layer])?).min(upto)))
    };
    let mut tiles = Vec::new();
    let (mut bi, mut ri, mut pos) = (0, 0, 0);
    while pos < upto {
        let (b_start, b_end) = segment(PoolKind::Base, bi, pos)?;
        if b_end <= pos {
            bi += 1;
            continue;
        }
        let mut end = b_end;
        let mut residual = None;
        if disagg {
            let (r_start, r_end) = segment(PoolKind::Residual, ri, pos)?;
            if r_end <= pos {
                ri += 1;
                continue;
            }
            end = end.min(r_end);
            let h = view.residual[ri].handles[layer];
            residual = Some(pools.residual.rows_view(h, pos - r_start..end - r_start)?);
        }
        let base = pools.base.rows_view(view.base[bi].handles[layer], pos - b_start..end - b_start)?;
        tiles.push(KvTile { start_pos: pos, base, residual });
        pos = end;
    }
    Ok(tiles)
}

impl Kernel<'_> {
    /// Attention output plus its FLOPs and KV bytes read.
    fn attend(
        &self,
        h: &Matrix,
        q_pos: &[usize],
        tiles: &[KvTile<'_>],
        adapter: &LoraAdapter,
        layer: usize,
        keys: usize,
    ) -> Result<(Matrix, u64, u64)> {
        let disagg = self.config.mode.disaggregated();
        let q = self.model.query(h, layer, adapter, q_pos)?;
        let la = &adapter.layers[layer];
        let (bk, bv) = if disagg { (Some(&la.k.b), Some(&la.v.b)) } else { (None, None) };
        let out = residual_attention(&q, q_pos, tiles, bk, bv, &self.attn, &self.model.rope)?;
        let (mq, g) = (q_pos.len() as u64, &self.config.geometry);
        let (m, nq, r) = (g.hidden as u64, g.n_q() as u64, self.config.rank as u64);
        let q_flops = 2 * mq * m * nq + 2 * mq * m * r + 2 * mq * r * nq;
        let flops = q_flops + attention_flops(q_pos.len(), keys, &self.attn, disagg);
        let row_bytes = 4 * (self.config.base_width() + if disagg { self.config.residual_width() } else { 0 }) as u64;
        Ok((out, flops, keys as u64 * row_bytes))
    }

    /// Output projection and feed-forward FLOPs for `rows` rows.
    fn dense_flops(&self, rows: u64) -> u64 {
        let g = &self.config.geometry;
        let (m, nq, f) = (g.hidden as u64, g.n_q() as u64, g.ffn_hidden as u64);
        2 * rows * nq * m + 4 * rows * m * f
    }

    fn decode_one(&self, pools: &KvPools, view: &AgentCacheView, token: TokenId, adapter: &LoraAdapter, disagg: bool) -> Result<DecodeOut> {
        let g = &self.config.geometry;
        let pos = view.token_ids.len();
        let (m, n, r) = (g.hidden as u64, g.n_kv() as u64, self.config.rank as u64);
        let mut x = self.model.embed(&[token])?;
        let mut base_rows = Vec::with_capacity(g.num_layers);
        let mut residual_rows = Vec::with_capacity(g.num_layers);
        let (mut flops, mut bytes) = (0u64, 0u64);
        for layer in 0..g.num_layers {
            let h = rms_norm(&x);
            let b = if disagg {
                let (k, v) = self.model.base_kv(&h, layer, &[pos])?;
                flops += 2 * m * 2 * n;
                k.hcat(&v)?
            } else {
                let (k, v) = self.model.merged_kv(&h, layer, adapter, &[pos])?;
                flops += 2 * m * 2 * n + 2 * m * 2 * r + 2 * r * 2 * n;
                k.hcat(&v)?
            };
            let res = if disagg {
                let (k, v) = self.model.residual_kv(&h, layer, adapter)?;
                flops += 2 * m * 2 * r;
                Some(k.hcat(&v)?)
            } else {
                None
            };
            let mut tiles = build_tiles(pools, view, layer, pos, disagg)?;
            tiles.push(KvTile { start_pos: pos, base: b.view(), residual: res.as_ref().map(|r| r.view()) });
            let (attn, f, by) = self.attend(&h, &[pos], &tiles, adapter, layer, pos + 1)?;
            flops += f + self.dense_flops(1);
            bytes += by;
            let x1 = x.add(&attn.matmul(&self.model.layers[layer].w_o)?)?;
            x = self.model.feed_forward(&x1, layer)?;
            bytes += b.data().len() as u64 * 4 + res.as_ref().map_or(0, |r| r.data().len() as u64 * 4);
            base_rows.push(b);
            if let Some(r) = res {
                residual_rows.push(r);
            }
        }
        let logits = self.model.logits(&x)?;
        flops += 2 * m * g.vocab as u64;
        Ok(DecodeOut { token: argmax(logits.row(0)) as TokenId, base_rows, residual_rows: disagg.then_some(residual_rows), flops, bytes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{random_tokens, ForwardMode, SharedKvContext};

    fn small(mode: EngineMode) -> EngineConfig {
        EngineConfig {
            mode,
            geometry: ModelGeometry {
                num_layers: 2,
                hidden: 32,
                num_heads: 2,
                num_kv_heads: 2,
                head_dim: 8,
                ffn_hidden: 64,
                vocab: 64,
                ..ModelGeometry::default()
            },
            rank: 4,
            block_capacity: 4,
            pool_budget_bytes: 4 << 20,
            ..EngineConfig::default()
        }
    }

    fn req(agent: AgentId, adapter: AdapterId, tokens: Vec<TokenId>, max_new: usize) -> AgentRequest {
        AgentRequest {
            workflow_id: agent,
            agent_id: agent,
            adapter_id: adapter,
            arrival_time: 0.0,
            prompt_tokens: tokens,
            max_new_tokens: max_new,
            parent_agent: None,
        }
    }

    #[test]
    fn empty_run_has_zero_metrics() {
        let mut e = Engine::new(small(EngineMode::Disaggregated)).unwrap();
        let m = e.run_to_completion().unwrap();
        assert_eq!((m.completed_agents, m.total_flops, m.cache_hit_rate, m.sim_time), (0, 0, 0.0, 0.0));
    }

    #[test]
    fn rejects_invalid_requests() {
        let mut e = Engine::new(small(EngineMode::Unified)).unwrap();
        assert!(e.submit(req(1, 1, vec![1], 0)).is_err());
        assert!(e.submit(req(1, 1, vec![999], 1)).is_err());
        assert!(e.submit(req(1, 1, vec![], 1)).is_err());
        let mut r = req(1, 1, vec![1], 1);
        r.parent_agent = Some(42);
        assert!(e.submit(r).is_err());
    }

    #[test]
    fn single_request_is_scheduled_next_step() {
        let mut e = Engine::new(small(EngineMode::Disaggregated)).unwrap();
        e.submit(req(1, 1, random_tokens(10, 64, 1), 3)).unwrap();
        let ev = e.step().unwrap();
        assert_eq!(ev.admitted, vec![1]);
        e.run_to_completion().unwrap();
        assert_eq!(e.generated(1)[0].len(), 3);
        e.check_handle_hygiene().unwrap();
    }

    #[test]
    fn cold_start_counts_full_projections() {
        let cfg = small(EngineMode::Disaggregated);
        let (s, m, n, r, l) = (10u64, 32u64, 16u64, 4u64, 2u64);
        let mut e = Engine::new(cfg).unwrap();
        e.submit(req(1, 1, random_tokens(s as usize, 64, 1), 1)).unwrap();
        let m1 = e.run_to_completion().unwrap();
        assert_eq!(m1.base_recompute_flops, l * 2 * s * m * 2 * n);
        assert_eq!(m1.residual_recompute_flops, l * 2 * s * m * 2 * r);
    }

    #[test]
    fn second_adapter_shares_base_only_in_disaggregated_mode() {
        let (s, m, n, r, l) = (12u64, 32u64, 16u64, 4u64, 2u64);
        let ctx = random_tokens(s as usize, 64, 2);
        for mode in [EngineMode::Disaggregated, EngineMode::Unified] {
            let mut e = Engine::new(small(mode)).unwrap();
            e.submit(req(1, 1, ctx.clone(), 1)).unwrap();
            let before = e.run_to_completion().unwrap();
            e.submit(req(2, 2, ctx.clone(), 1)).unwrap();
            let after = e.run_to_completion().unwrap();
            let base = after.base_recompute_flops - before.base_recompute_flops;
            let res = after.residual_recompute_flops - before.residual_recompute_flops;
            assert_eq!(res, l * 2 * s * m * 2 * r, "{mode}");
            match mode {
                EngineMode::Disaggregated => assert_eq!(base, 0),
                _ => assert_eq!(base, l * 2 * s * m * 2 * n),
            }
            e.check_handle_hygiene().unwrap();
        }
    }

    #[test]
    fn one_layer_disaggregated_matches_exact_generation() {
        let mut cfg = small(EngineMode::Disaggregated);
        cfg.geometry.num_layers = 1;
        let ctx = random_tokens(20, 64, 3);
        let mut e = Engine::new(cfg).unwrap();
        for a in 0..3 {
            e.submit(req(a, a as u32, ctx.clone(), 6)).unwrap();
        }
        e.run_to_completion().unwrap();
        for a in 0..3u32 {
            let adapter = e.adapter(a).unwrap().clone();
            let want = e.model().generate(&ctx, &adapter, ForwardMode::Exact, &mut SharedKvContext::new(1), 6).unwrap();
            assert_eq!(e.generated(a as u64)[0], want, "agent {a}");
        }
    }

    #[test]
    fn zero_adapters_agree_across_modes() {
        let ctx = random_tokens(15, 64, 4);
        let mut runs = Vec::new();
        for mode in EngineMode::ALL {
            let mut cfg = small(mode);
            cfg.zero_adapters = true;
            let mut e = Engine::new(cfg).unwrap();
            for a in 0..3 {
                e.submit(req(a, 7, ctx.clone(), 5)).unwrap();
            }
            let m = e.run_to_completion().unwrap();
            let toks: Vec<_> = (0..3).map(|a| e.generated(a)).collect();
            runs.push((toks, m.cache_hit_rate));
        }
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[1], runs[2]);
    }

    #[test]
    fn resume_is_a_full_hit() {
        let mut e = Engine::new(small(EngineMode::Disaggregated)).unwrap();
        e.submit(req(1, 1, random_tokens(9, 64, 5), 4)).unwrap();
        let before = e.run_to_completion().unwrap();
        let ctx = e.context(1).unwrap().to_vec();
        // Resume with the cached part of the context only.
        e.submit(req(1, 1, ctx[..ctx.len() - 1].to_vec(), 1)).unwrap();
        let after = e.run_to_completion().unwrap();
        assert_eq!(after.base_recompute_flops, before.base_recompute_flops);
        assert_eq!(after.residual_recompute_flops, before.residual_recompute_flops);
    }

    #[test]
    fn children_wait_for_parent_and_tool_latency() {
        let mut e = Engine::new(small(EngineMode::Disaggregated)).unwrap();
        e.submit(req(1, 1, random_tokens(8, 64, 6), 2)).unwrap();
        let mut child = req(2, 2, random_tokens(4, 64, 7), 2);
        child.parent_agent = Some(1);
        child.workflow_id = 1;
        e.submit(child).unwrap();
        e.run_to_completion().unwrap();
        let parent_ctx = e.context(1).unwrap().to_vec();
        let child_ctx = e.context(2).unwrap();
        assert_eq!(&child_ctx[..parent_ctx.len()], &parent_ctx[..]);
        assert!(e.clock() >= 0.1);
        assert_eq!(e.metrics().completed_workflows, 1);
    }

    #[test]
    fn oversized_request_fails_admission() {
        let mut cfg = small(EngineMode::Unified);
        cfg.pool_budget_bytes = 4 * cfg.base_block_bytes();
        let mut e = Engine::new(cfg).unwrap();
        e.submit(req(1, 1, random_tokens(40, 64, 8), 1)).unwrap();
        let mut child = req(2, 1, vec![1], 1);
        child.parent_agent = Some(1);
        e.submit(child).unwrap();
        let m = e.run_to_completion().unwrap();
        assert_eq!(m.admission_failures, 2);
        assert_eq!(m.completed_agents, 0);
    }

    #[test]
    fn tight_budget_queues_then_completes_all() {
        let mut cfg = small(EngineMode::Unified);
        // Room for roughly one agent at a time (2 layers x (3 ctx + 1 decode) blocks).
        cfg.pool_budget_bytes = 9 * cfg.base_block_bytes();
        let mut e = Engine::new(cfg).unwrap();
        for a in 0..5 {
            e.submit(req(a, a as u32, random_tokens(12, 64, 9), 3)).unwrap();
        }
        let m = e.run_to_completion().unwrap();
        assert_eq!(m.completed_agents, 5);
        assert_eq!(m.peak_active_agents, 1);
        assert!(m.evicted_blocks_base > 0);
        e.check_handle_hygiene().unwrap();
    }

    #[test]
    fn deterministic_metrics() {
        let run = || {
            let mut e = Engine::new(small(EngineMode::Disaggregated)).unwrap();
            for a in 0..4 {
                e.submit(req(a, a as u32, random_tokens(10 + a as usize, 64, a), 4)).unwrap();
            }
            serde_json::to_string(&e.run_to_completion().unwrap()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
