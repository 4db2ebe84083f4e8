//! Seeded property suites shared by the `verify` command and the acceptance
//! tests. Each check compares an implementation against an independent
//! reference and reports the worst error it saw.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    naive_attention_oracle, reconstruct_key_block, residual_attention, residual_attention_eager, AttentionConfig, KvTile,
};
use crate::engine::{AgentRequest, Engine, EngineConfig, EngineMode, Result as EngineResult};
use crate::lora::{memory_ratio, random_tokens, MemoryRatioInputs, ModelGeometry, TokenId};
use crate::numerics::{apply_rope, build_rope_table, Matrix, RopeTable};
use crate::pool::{BlockPool, KvPools, PoolKind};
use crate::radix::{CachedBlock, RadixForest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Attention,
    Radix,
    Memory,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(Suite::Attention),
            "radix" => Ok(Suite::Radix),
            "memory" => Ok(Suite::Memory),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite {other:?} (expected attention, radix, memory or all)")),
        }
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub failing_seeds: Vec<u64>,
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failing_seeds.is_empty()
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {} cases, max error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance
        )?;
        if !self.failing_seeds.is_empty() {
            write!(f, ", failing seeds {:?}", self.failing_seeds)?;
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// One random attention problem built from hidden states and weights, with
/// the merged keys/values computed independently as `h·(W + A·B)`.
pub struct AttentionInstance {
    pub seed: u64,
    pub cfg: AttentionConfig,
    pub rope: RopeTable,
    pub q: Matrix,
    pub q_positions: Vec<usize>,
    /// `[RoPE(h·W_k) | h·W_v]`
    pub base: Matrix,
    /// `[h·A_k | h·A_v]`
    pub residual: Matrix,
    pub b_k: Matrix,
    pub b_v: Matrix,
    pub k_merged: Matrix,
    pub v_merged: Matrix,
    /// Tile boundaries in key positions (exclusive ends).
    pub cuts: Vec<usize>,
}

impl AttentionInstance {
    /// M <= 8 queries, up to 512 keys, head_dim in {16, 32, 64}, rank in
    /// {4, 8, 16}, key block in {1, 7, 16, 64}, causal on or off.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_dim = [16, 32, 64][rng.random_range(0..3)];
        let rank = [4, 8, 16][rng.random_range(0..3)];
        let block = [1, 7, 16, 64][rng.random_range(0..4)];
        let causal = rng.random_bool(0.5);
        let kv_heads = rng.random_range(1..=2);
        let heads = kv_heads * rng.random_range(1..=2);
        let keys = rng.random_range(1..=512usize);
        let m_q = rng.random_range(1..=8usize);
        let hidden = 32;
        let mut cfg = AttentionConfig::new(heads, kv_heads, head_dim, rank);
        cfg.block_size_keys = block;
        cfg.causal = causal;
        let n = cfg.n_kv();
        let rope = build_rope_table(1024, head_dim, 10_000.0).expect("even head_dim");

        let h = Matrix::random(&mut rng, keys, hidden, -1.0, 1.0);
        let w = |rng: &mut ChaCha8Rng, r, c| Matrix::random(rng, r, c, -0.25, 0.25);
        let (w_k, w_v) = (w(&mut rng, hidden, n), w(&mut rng, hidden, n));
        let (a_k, a_v) = (w(&mut rng, hidden, rank), w(&mut rng, hidden, rank));
        let (b_k, b_v) = (w(&mut rng, rank, n), w(&mut rng, rank, n));
        let positions: Vec<usize> = (0..keys).collect();
        let rope_rows = |x: &Matrix| apply_rope(x, &positions, &rope, head_dim).expect("positions in range");
        let base = rope_rows(&h.matmul(&w_k).unwrap()).hcat(&h.matmul(&w_v).unwrap()).unwrap();
        let residual = h.matmul(&a_k).unwrap().hcat(&h.matmul(&a_v).unwrap()).unwrap();
        let k_merged = rope_rows(&h.matmul(&w_k.add(&a_k.matmul(&b_k).unwrap()).unwrap()).unwrap());
        let v_merged = h.matmul(&w_v.add(&a_v.matmul(&b_v).unwrap()).unwrap()).unwrap();

        let q_positions: Vec<usize> = if causal {
            // Every query sees at least key 0.
            let first = keys.saturating_sub(m_q);
            (0..m_q).map(|i| (first + i).min(keys - 1)).collect()
        } else {
            (0..m_q).map(|_| rng.random_range(0..1024)).collect()
        };
        let q_raw = Matrix::random(&mut rng, m_q, cfg.n_q(), -1.0, 1.0);
        let q = apply_rope(&q_raw, &q_positions, &rope, head_dim).unwrap();

        // Blocks of a paged layout: capacity 16 with an occasional partial block.
        let mut cuts = Vec::new();
        let mut pos = 0;
        while pos < keys {
            pos = (pos + if rng.random_bool(0.2) { rng.random_range(1..16) } else { 16 }).min(keys);
            cuts.push(pos);
        }
        Self { seed, cfg, rope, q, q_positions, base, residual, b_k, b_v, k_merged, v_merged, cuts }
    }

    pub fn tiles(&self) -> Vec<KvTile<'_>> {
        let mut out = Vec::new();
        let mut start = 0;
        for &end in &self.cuts {
            out.push(KvTile {
                start_pos: start,
                base: self.base.view().narrow_rows(start, end - start),
                residual: Some(self.residual.view().narrow_rows(start, end - start)),
            });
            start = end;
        }
        out
    }

    pub fn keys(&self) -> usize {
        self.base.rows()
    }

    pub fn run(&self) -> Matrix {
        residual_attention(&self.q, &self.q_positions, &self.tiles(), Some(&self.b_k), Some(&self.b_v), &self.cfg, &self.rope)
            .expect("valid instance")
    }

    pub fn run_eager(&self) -> Matrix {
        residual_attention_eager(&self.q, &self.q_positions, &self.tiles(), Some(&self.b_k), Some(&self.b_v), &self.cfg, &self.rope)
            .expect("valid instance")
    }

    pub fn oracle(&self) -> Matrix {
        let key_positions: Vec<usize> = (0..self.keys()).collect();
        naive_attention_oracle(&self.q, &self.q_positions, &self.k_merged, &self.v_merged, &key_positions, &self.cfg)
            .expect("valid instance")
    }

    /// Keys rebuilt tile by tile from base and residual rows, all kv heads.
    pub fn reconstructed_keys(&self) -> Matrix {
        let d = self.cfg.head_dim;
        let mut out = Matrix::zeros(self.keys(), self.cfg.n_kv());
        for t in self.tiles() {
            for g in 0..self.cfg.num_kv_heads {
                let b_k = self.b_k.slice_cols(g * d..(g + 1) * d);
                let k = reconstruct_key_block(&t, g, Some(&b_k), &self.cfg, &self.rope).unwrap();
                for j in 0..k.rows() {
                    out.row_mut(t.start_pos + j)[g * d..(g + 1) * d].copy_from_slice(k.row(j));
                }
            }
        }
        out
    }
}

fn check(name: &str, tolerance: f64, cases: impl Iterator<Item = (u64, f64)>) -> CheckResult {
    let mut res = CheckResult { name: name.into(), cases: 0, max_error: 0.0, tolerance, failing_seeds: Vec::new(), detail: String::new() };
    for (seed, err) in cases {
        res.cases += 1;
        res.max_error = res.max_error.max(err);
        if err.is_nan() || err > tolerance {
            res.failing_seeds.push(seed);
        }
    }
    res
}

/// Blocked attention vs the dense f64 oracle.
pub fn attention_oracle_check(instances: &[AttentionInstance]) -> CheckResult {
    check("attention_vs_oracle", 1e-5, instances.iter().map(|i| (i.seed, i.run().rel_error(&i.oracle()))))
}

/// `K_base + RoPE(K_res·B_k)` vs `RoPE(h·(W_k + A_k·B_k))`.
pub fn deferred_rope_check(instances: &[AttentionInstance]) -> CheckResult {
    check("deferred_rope", 1e-6, instances.iter().map(|i| (i.seed, i.reconstructed_keys().rel_error(&i.k_merged))))
}

/// Terminal `acc + acc_r·B_v` vs per-block value reconstruction.
pub fn late_fusion_check(instances: &[AttentionInstance]) -> CheckResult {
    check("late_fusion", 1e-6, instances.iter().map(|i| (i.seed, i.run().rel_error(&i.run_eager()))))
}

pub fn attention_instances(count: usize) -> Vec<AttentionInstance> {
    (0..count as u64).map(AttentionInstance::random).collect()
}

fn lcp(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Randomized insert/match cases against a linear-scan longest-common-prefix
/// oracle, with a refcount check per case: with one token per block every
/// distinct non-empty prefix of the inserted set owns exactly one block, held
/// once by the tree.
pub fn radix_lcp_check(cases: usize) -> (CheckResult, CheckResult) {
    let mut lcp_errors = Vec::new();
    let mut rc_errors = Vec::new();
    for seed in 0..cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pools = KvPools::new(BlockPool::new(PoolKind::Base, 8192, 1, 1), BlockPool::new(PoolKind::Residual, 0, 1, 1));
        let mut tree = RadixForest::new(PoolKind::Base);
        let stem: Vec<TokenId> = (0..rng.random_range(0..128)).map(|_| rng.random_range(0..16)).collect();
        let mut inserted: Vec<Vec<TokenId>> = Vec::new();
        let mut ok_rc = true;
        for _ in 0..rng.random_range(1..8) {
            let mut s = stem[..rng.random_range(0..=stem.len())].to_vec();
            let extra = rng.random_range(1..=256 - s.len().min(255));
            s.extend((0..extra).map(|_| rng.random_range(0..16u32)));
            s.truncate(256);
            let m = tree.match_prefix(0, &s);
            let mut blocks = m.blocks.clone();
            let mut fresh = Vec::new();
            for &t in &s[m.matched_len..] {
                let h = pools.base.alloc().expect("pool sized for the case");
                fresh.push(h);
                blocks.push(CachedBlock { tokens: vec![t], handles: vec![h] });
            }
            ok_rc &= tree.insert(&mut pools, 0, &s, &blocks).is_ok();
            for h in fresh {
                ok_rc &= pools.release(h).is_ok();
            }
            inserted.push(s);
        }
        let mut q = stem[..rng.random_range(0..=stem.len())].to_vec();
        q.extend((0..rng.random_range(0..64)).map(|_| rng.random_range(0..16u32)));
        let want = inserted.iter().map(|s| lcp(s, &q)).max().unwrap_or(0);
        let got = tree.match_prefix(0, &q).matched_len;
        lcp_errors.push((seed, got.abs_diff(want) as f64));

        let prefixes: BTreeSet<&[TokenId]> = inserted.iter().flat_map(|s| (1..=s.len()).map(move |l| &s[..l])).collect();
        ok_rc &= pools.base.allocated_blocks() == prefixes.len();
        for (h, held) in tree.held_handles() {
            ok_rc &= held == 1 && pools.refcount(h) == Ok(1);
        }
        // Evicting everything must return every block.
        ok_rc &= tree.evict(&mut pools, usize::MAX).is_ok() && pools.base.allocated_blocks() == 0;
        rc_errors.push((seed, if ok_rc { 0.0 } else { 1.0 }));
    }
    (check("radix_lcp", 0.0, lcp_errors.into_iter()), check("radix_refcount", 0.0, rc_errors.into_iter()))
}

/// Engine configuration used by the memory-accounting and admission checks:
/// one layer with `n = 1024` (16 heads of 64) and rank 16.
pub fn wide_config(mode: EngineMode, pool_budget_bytes: u64) -> EngineConfig {
    EngineConfig {
        mode,
        geometry: ModelGeometry {
            num_layers: 1,
            hidden: 32,
            num_heads: 16,
            num_kv_heads: 16,
            head_dim: 64,
            ffn_hidden: 32,
            vocab: 256,
            max_positions: 4096,
            ..ModelGeometry::default()
        },
        rank: 16,
        block_capacity: 16,
        pool_budget_bytes,
        attention_block: 256,
        ..EngineConfig::default()
    }
}

/// `agents` requests on one shared context, each with its own adapter.
pub fn shared_context_requests(agents: usize, ctx_tokens: usize, max_new_tokens: usize, seed: u64) -> Vec<AgentRequest> {
    let ctx = random_tokens(ctx_tokens, 256, seed);
    (0..agents)
        .map(|a| AgentRequest {
            workflow_id: a as u64,
            agent_id: a as u64,
            adapter_id: a as u32,
            arrival_time: 0.0,
            prompt_tokens: ctx.clone(),
            max_new_tokens,
            parent_agent: None,
        })
        .collect()
}

/// Measured per-agent bytes in both layouts for `agents` agents sharing a
/// context, and the analytic ratio `1/N + r/n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryAccounting {
    pub agents: usize,
    pub ctx_tokens: usize,
    pub unified_per_agent_bytes: f64,
    pub disaggregated_per_agent_bytes: f64,
    pub measured_ratio: f64,
    pub predicted_ratio: f64,
    /// One base block per agent, relative to the unified per-agent bytes.
    pub slack: f64,
    pub reduction_factor: f64,
}

pub fn memory_accounting(agents: usize, ctx_tokens: usize) -> EngineResult<MemoryAccounting> {
    let mut per_agent = Vec::new();
    let mut block_bytes = 0;
    let probe = wide_config(EngineMode::Unified, 0);
    // Room for every agent's private copy plus a decode block, with headroom
    // so the residual share of the disaggregated split also fits.
    let blocks = agents * (ctx_tokens.div_ceil(probe.block_capacity) + 2);
    let budget = 2 * blocks as u64 * probe.base_block_bytes();
    for mode in [EngineMode::Unified, EngineMode::Disaggregated] {
        let cfg = wide_config(mode, budget);
        block_bytes = cfg.base_block_bytes();
        let mut e = Engine::new(cfg)?;
        for r in shared_context_requests(agents, ctx_tokens, 1, 7) {
            e.submit(r)?;
        }
        let m = e.run_to_completion()?;
        e.check_handle_hygiene()?;
        per_agent.push(m.per_agent_bytes);
    }
    let cfg = wide_config(EngineMode::Disaggregated, 0);
    let inputs = MemoryRatioInputs::new(agents, cfg.rank, cfg.geometry.n_kv(), ctx_tokens)?;
    let measured = per_agent[1] / per_agent[0];
    Ok(MemoryAccounting {
        agents,
        ctx_tokens,
        unified_per_agent_bytes: per_agent[0],
        disaggregated_per_agent_bytes: per_agent[1],
        measured_ratio: measured,
        predicted_ratio: memory_ratio(&inputs),
        slack: block_bytes as f64 / per_agent[0],
        reduction_factor: 1.0 / measured,
    })
}

pub fn memory_check(agents: usize, ctx_tokens: usize) -> CheckResult {
    match memory_accounting(agents, ctx_tokens) {
        Ok(acc) => {
            let err = (acc.measured_ratio - acc.predicted_ratio).abs();
            let mut r = check("memory_ratio", acc.slack, std::iter::once((0, err)));
            r.detail = format!(
                "measured {:.6} vs predicted {:.6}, reduction {:.2}x",
                acc.measured_ratio, acc.predicted_ratio, acc.reduction_factor
            );
            r
        }
        Err(e) => CheckResult {
            name: "memory_ratio".into(),
            cases: 1,
            max_error: f64::INFINITY,
            tolerance: 0.0,
            failing_seeds: vec![0],
            detail: e.to_string(),
        },
    }
}

/// Peak concurrent agents per layout when the budget holds exactly two
/// unified agents on the shared context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionScaling {
    pub budget_bytes: u64,
    pub unified_peak: u64,
    pub disaggregated_peak: u64,
}

pub fn admission_scaling(agents: usize, ctx_tokens: usize) -> EngineResult<AdmissionScaling> {
    let probe = wide_config(EngineMode::Unified, 0);
    // Context blocks plus one decode block (two new tokens, one decode step).
    let cap = probe.block_capacity;
    let per_agent_blocks = ctx_tokens.div_ceil(cap) + 1;
    let budget = 2 * per_agent_blocks as u64 * probe.base_block_bytes();
    let mut peaks = Vec::new();
    for mode in [EngineMode::Unified, EngineMode::Disaggregated] {
        let mut e = Engine::new(wide_config(mode, budget))?;
        for r in shared_context_requests(agents, ctx_tokens, 2, 11) {
            e.submit(r)?;
        }
        let m = e.run_to_completion()?;
        e.check_handle_hygiene()?;
        peaks.push(m.peak_active_agents);
    }
    Ok(AdmissionScaling { budget_bytes: budget, unified_peak: peaks[0], disaggregated_peak: peaks[1] })
}

/// Runs the requested suites.
pub fn run_suite(suite: Suite) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Attention | Suite::All) {
        let inst = attention_instances(100);
        out.push(attention_oracle_check(&inst));
        out.push(deferred_rope_check(&inst));
        out.push(late_fusion_check(&inst));
    }
    if matches!(suite, Suite::Radix | Suite::All) {
        let (lcp, rc) = radix_lcp_check(1000);
        out.push(lcp);
        out.push(rc);
    }
    if matches!(suite, Suite::Memory | Suite::All) {
        out.push(memory_check(16, 2048));
    }
    out
}
