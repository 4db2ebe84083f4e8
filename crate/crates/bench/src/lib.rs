//! Fixtures shared by the benchmarks.

use dualkv::attention::{AttentionConfig, KvTile};
use dualkv::engine::{AgentRequest, EngineConfig, EngineMode};
use dualkv::lora::{random_tokens, ModelGeometry, TokenId};
use dualkv::numerics::{build_rope_table, Matrix, RopeTable};
use dualkv::pool::{BlockPool, KvPools, PoolKind};
use dualkv::radix::{CachedBlock, RadixForest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Decode-shaped attention problem over `keys` cached positions stored in
/// blocks of 16.
pub struct AttentionFixture {
    pub cfg: AttentionConfig,
    pub rope: RopeTable,
    pub q: Matrix,
    pub q_positions: Vec<usize>,
    pub base: Matrix,
    pub residual: Matrix,
    pub b_k: Matrix,
    pub b_v: Matrix,
}

impl AttentionFixture {
    pub fn new(queries: usize, keys: usize, rank: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(keys as u64 ^ rank as u64);
        let cfg = AttentionConfig::new(8, 2, 64, rank);
        let n = cfg.n_kv();
        let rope = build_rope_table(keys + queries, 64, 10_000.0).expect("even head dim");
        Self {
            q: Matrix::random(&mut rng, queries, cfg.n_q(), -1.0, 1.0),
            q_positions: (keys - queries..keys).collect(),
            base: Matrix::random(&mut rng, keys, 2 * n, -1.0, 1.0),
            residual: Matrix::random(&mut rng, keys, 2 * rank.max(1), -1.0, 1.0),
            b_k: Matrix::random(&mut rng, rank.max(1), n, -0.1, 0.1),
            b_v: Matrix::random(&mut rng, rank.max(1), n, -0.1, 0.1),
            cfg,
            rope,
        }
    }

    pub fn tiles(&self) -> Vec<KvTile<'_>> {
        let keys = self.base.rows();
        (0..keys)
            .step_by(16)
            .map(|s| {
                let len = 16.min(keys - s);
                KvTile {
                    start_pos: s,
                    base: self.base.view().narrow_rows(s, len),
                    residual: (self.cfg.rank > 0).then(|| self.residual.view().narrow_rows(s, len)),
                }
            })
            .collect()
    }
}

/// A forest holding `sequences` sequences of `len` tokens that share a
/// `shared`-token stem, one token per block; returns a query that matches
/// the longest sequence fully.
pub fn populated_forest(sequences: usize, shared: usize, len: usize) -> (RadixForest, KvPools, Vec<TokenId>) {
    let mut pools = KvPools::new(BlockPool::new(PoolKind::Base, sequences * len, 16, 1), BlockPool::new(PoolKind::Residual, 0, 16, 1));
    let mut forest = RadixForest::new(PoolKind::Base);
    let stem = random_tokens(shared, 256, 1);
    let mut query = Vec::new();
    for s in 0..sequences {
        let mut seq = stem.clone();
        seq.extend(random_tokens(len - shared, 256, 100 + s as u64));
        let m = forest.match_prefix(0, &seq);
        let mut blocks = m.blocks.clone();
        let mut fresh = Vec::new();
        for chunk in seq[m.matched_len..].chunks(16) {
            let h = pools.base.alloc().expect("pool sized for fixture");
            fresh.push(h);
            blocks.push(CachedBlock { tokens: chunk.to_vec(), handles: vec![h] });
        }
        forest.insert(&mut pools, 0, &seq, &blocks).expect("fixture insert");
        for h in fresh {
            pools.release(h).expect("fresh handle");
        }
        query = seq;
    }
    (forest, pools, query)
}

/// Engine configuration and requests for `agents` agents on one shared context.
pub fn engine_workload(mode: EngineMode, agents: usize, ctx: usize, max_new: usize) -> (EngineConfig, Vec<AgentRequest>) {
    let cfg = EngineConfig {
        mode,
        geometry: ModelGeometry {
            num_layers: 2,
            hidden: 64,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            ffn_hidden: 128,
            vocab: 256,
            ..ModelGeometry::default()
        },
        rank: 4,
        block_capacity: 16,
        pool_budget_bytes: 32 << 20,
        ..EngineConfig::default()
    };
    let prompt = random_tokens(ctx, 256, 3);
    let reqs = (0..agents)
        .map(|a| AgentRequest {
            workflow_id: a as u64,
            agent_id: a as u64,
            adapter_id: a as u32,
            arrival_time: 0.0,
            prompt_tokens: prompt.clone(),
            max_new_tokens: max_new,
            parent_agent: None,
        })
        .collect();
    (cfg, reqs)
}
