//! Blocked attention over disaggregated KV blocks.
//!
//! Keys are reconstructed tile by tile (`K = K_base + RoPE(K_res·B_k)`), while
//! values are never materialized: the softmax-weighted residual values are
//! accumulated at rank `r` and projected through `B_v` once at the end.

use thiserror::Error;

use crate::numerics::{matmul_view, AttentionState, Matrix, MatrixView, NumericsError, RopeTable, MASKED_LOGIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("query {query} (position {position}) has no attendable keys")]
    NoKeys { query: usize, position: usize },
}

pub type Result<T, E = AttentionError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    /// Residual rank; 0 when the blocks hold merged keys and values.
    pub rank: usize,
    pub scale: f32,
    pub causal: bool,
    /// Upper bound on keys folded per online-softmax step.
    pub block_size_keys: usize,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, num_kv_heads: usize, head_dim: usize, rank: usize) -> Self {
        Self { num_heads, num_kv_heads, head_dim, rank, scale: 1.0 / (head_dim as f32).sqrt(), causal: true, block_size_keys: 64 }
    }

    pub fn n_q(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn n_kv(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn kv_head(&self, head: usize) -> usize {
        head * self.num_kv_heads / self.num_heads
    }

    fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.num_kv_heads == 0 || self.head_dim == 0 || self.block_size_keys == 0 {
            return Err(AttentionError::Shape("heads, head_dim and block size must be positive".into()));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(AttentionError::Shape(format!(
                "{} query heads do not group evenly over {} kv heads",
                self.num_heads, self.num_kv_heads
            )));
        }
        Ok(())
    }
}

/// A contiguous run of cached keys starting at absolute position `start_pos`.
/// `base` rows are `[RoPE(K_base) | V_base]` (width `2·n_kv`); `residual`
/// rows are `[K_res | V_res]` (width `2·r`) when present.
#[derive(Clone, Copy, Debug)]
pub struct KvTile<'a> {
    pub start_pos: usize,
    pub base: MatrixView<'a>,
    pub residual: Option<MatrixView<'a>>,
}

impl<'a> KvTile<'a> {
    pub fn len(&self) -> usize {
        self.base.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.base.rows() == 0
    }

    fn sub(&self, start: usize, len: usize) -> KvTile<'a> {
        KvTile {
            start_pos: self.start_pos + start,
            base: self.base.narrow_rows(start, len),
            residual: self.residual.map(|r| r.narrow_rows(start, len)),
        }
    }
}

/// Per-tile key reconstruction for one kv head: `K_base + RoPE(K_res·B_k)`.
pub fn reconstruct_key_block(
    tile: &KvTile<'_>,
    kv_head: usize,
    b_k_head: Option<&Matrix>,
    cfg: &AttentionConfig,
    rope: &RopeTable,
) -> Result<Matrix> {
    let d = cfg.head_dim;
    let mut k = tile.base.narrow_cols(kv_head * d, d).to_matrix();
    if let (Some(res), Some(b_k)) = (tile.residual, b_k_head) {
        let mut lora = matmul_view(res.narrow_cols(0, cfg.rank), b_k)?;
        for j in 0..lora.rows() {
            let pos = tile.start_pos + j;
            if pos >= rope.max_positions() {
                return Err(NumericsError::PositionOverflow { position: pos, max_positions: rope.max_positions() }.into());
            }
            rope.rotate_slice(lora.row_mut(j), pos, false);
        }
        k.add_assign(&lora)?;
    }
    Ok(k)
}

fn logits(q: &Matrix, q_positions: &[usize], k: &Matrix, start_pos: usize, cfg: &AttentionConfig) -> Matrix {
    let mut s = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let row = s.row_mut(i);
        for (j, out) in row.iter_mut().enumerate() {
            if cfg.causal && start_pos + j > q_positions[i] {
                *out = MASKED_LOGIT;
                continue;
            }
            let dot: f32 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            *out = dot * cfg.scale;
        }
    }
    s
}

struct Prepared<'t> {
    tiles: Vec<KvTile<'t>>,
    b_k: Vec<Option<Matrix>>,
    b_v: Vec<Option<Matrix>>,
    heads: Vec<Matrix>,
}

fn prepare<'t>(
    q: &Matrix,
    q_positions: &[usize],
    tiles: &[KvTile<'t>],
    b_k: Option<&Matrix>,
    b_v: Option<&Matrix>,
    cfg: &AttentionConfig,
) -> Result<Prepared<'t>> {
    cfg.validate()?;
    let (d, n_kv) = (cfg.head_dim, cfg.n_kv());
    if q.cols() != cfg.n_q() || q.rows() != q_positions.len() {
        return Err(AttentionError::Shape(format!(
            "queries are {:?} with {} positions, expected width {}",
            q.shape(),
            q_positions.len(),
            cfg.n_q()
        )));
    }
    for t in tiles {
        if t.base.cols() != 2 * n_kv {
            return Err(AttentionError::Shape(format!("base rows are {} wide, expected {}", t.base.cols(), 2 * n_kv)));
        }
        match (t.residual, cfg.rank) {
            (None, _) => {}
            (Some(r), rank) if r.cols() == 2 * rank && r.rows() == t.len() => {}
            (Some(r), rank) => {
                return Err(AttentionError::Shape(format!("residual tile is {}x{}, expected {}x{}", r.rows(), r.cols(), t.len(), 2 * rank)))
            }
        }
    }
    // Hoist per-head slices of B_k and B_v out of the key loop.
    let head_slices = |b: Option<&Matrix>| -> Result<Vec<Option<Matrix>>> {
        match b {
            None => Ok(vec![None; cfg.num_kv_heads]),
            Some(b) if b.shape() == (cfg.rank, n_kv) => Ok((0..cfg.num_kv_heads).map(|g| Some(b.slice_cols(g * d..(g + 1) * d))).collect()),
            Some(b) => Err(AttentionError::Shape(format!("up-projection is {:?}, expected ({}, {n_kv})", b.shape(), cfg.rank))),
        }
    };
    let mut split = Vec::new();
    for t in tiles {
        let mut start = 0;
        while start < t.len() {
            let len = cfg.block_size_keys.min(t.len() - start);
            split.push(t.sub(start, len));
            start += len;
        }
    }
    let heads = (0..cfg.num_heads).map(|h| q.slice_cols(h * d..(h + 1) * d)).collect();
    Ok(Prepared { tiles: split, b_k: head_slices(b_k)?, b_v: head_slices(b_v)?, heads })
}

fn finish(states: Vec<AttentionState>, b_v: &[Option<Matrix>], q_positions: &[usize], cfg: &AttentionConfig) -> Result<Matrix> {
    let d = cfg.head_dim;
    let m = q_positions.len();
    let mut out = Matrix::zeros(m, cfg.n_q());
    for (h, st) in states.into_iter().enumerate() {
        let mut acc = st.acc;
        if let Some(b_v) = &b_v[cfg.kv_head(h)] {
            if st.acc_r.cols() > 0 {
                acc.add_assign(&st.acc_r.matmul(b_v)?)?;
            }
        }
        for i in 0..m {
            if st.l[i] <= 0.0 {
                return Err(AttentionError::NoKeys { query: i, position: q_positions[i] });
            }
            let inv = 1.0 / st.l[i];
            for (o, a) in out.row_mut(i)[h * d..(h + 1) * d].iter_mut().zip(acc.row(i)) {
                *o = a * inv;
            }
        }
    }
    Ok(out)
}

fn tile_visible(tile: &KvTile<'_>, q_positions: &[usize], cfg: &AttentionConfig) -> bool {
    !cfg.causal || q_positions.iter().any(|&p| p >= tile.start_pos)
}

/// Multi-head attention over disaggregated tiles. `q` is `M x (H·d)` with
/// RoPE already applied; `b_k`/`b_v` are the `r x n_kv` up-projections (or
/// `None` for merged blocks). Returns the concatenated head outputs.
pub fn residual_attention(
    q: &Matrix,
    q_positions: &[usize],
    tiles: &[KvTile<'_>],
    b_k: Option<&Matrix>,
    b_v: Option<&Matrix>,
    cfg: &AttentionConfig,
    rope: &RopeTable,
) -> Result<Matrix> {
    let prep = prepare(q, q_positions, tiles, b_k, b_v, cfg)?;
    let d = cfg.head_dim;
    let rank_cols = |t: &KvTile<'_>| if t.residual.is_some() { cfg.rank } else { 0 };
    let acc_rank = prep.tiles.first().map_or(0, rank_cols);
    let mut states: Vec<AttentionState> = (0..cfg.num_heads).map(|_| AttentionState::new(q.rows(), d, acc_rank)).collect();
    let group = cfg.num_heads / cfg.num_kv_heads;
    for tile in &prep.tiles {
        if !tile_visible(tile, q_positions, cfg) {
            continue;
        }
        if rank_cols(tile) != acc_rank {
            return Err(AttentionError::Shape("tiles mix merged and disaggregated layouts".into()));
        }
        let v_res = match tile.residual {
            Some(r) => r.narrow_cols(cfg.rank, cfg.rank),
            None => MatrixView::empty(tile.len()),
        };
        for g in 0..cfg.num_kv_heads {
            let k = reconstruct_key_block(tile, g, prep.b_k[g].as_ref(), cfg, rope)?;
            let v_base = tile.base.narrow_cols(cfg.n_kv() + g * d, d);
            for h in g * group..(g + 1) * group {
                let s = logits(&prep.heads[h], q_positions, &k, tile.start_pos, cfg);
                states[h].update(&s, v_base, v_res)?;
            }
        }
    }
    finish(states, &prep.b_v, q_positions, cfg)
}

/// Same computation with the value up-projection applied inside the key loop
/// (`V = V_base + V_res·B_v` per tile). Used to check that deferring the
/// projection to the end does not change the result.
pub fn residual_attention_eager(
    q: &Matrix,
    q_positions: &[usize],
    tiles: &[KvTile<'_>],
    b_k: Option<&Matrix>,
    b_v: Option<&Matrix>,
    cfg: &AttentionConfig,
    rope: &RopeTable,
) -> Result<Matrix> {
    let prep = prepare(q, q_positions, tiles, b_k, b_v, cfg)?;
    let d = cfg.head_dim;
    let mut states: Vec<AttentionState> = (0..cfg.num_heads).map(|_| AttentionState::new(q.rows(), d, 0)).collect();
    let group = cfg.num_heads / cfg.num_kv_heads;
    for tile in &prep.tiles {
        if !tile_visible(tile, q_positions, cfg) {
            continue;
        }
        for g in 0..cfg.num_kv_heads {
            let k = reconstruct_key_block(tile, g, prep.b_k[g].as_ref(), cfg, rope)?;
            let mut v = tile.base.narrow_cols(cfg.n_kv() + g * d, d).to_matrix();
            if let (Some(res), Some(b_v)) = (tile.residual, prep.b_v[g].as_ref()) {
                v.add_assign(&matmul_view(res.narrow_cols(cfg.rank, cfg.rank), b_v)?)?;
            }
            for h in g * group..(g + 1) * group {
                let s = logits(&prep.heads[h], q_positions, &k, tile.start_pos, cfg);
                states[h].update(&s, v.view(), MatrixView::empty(tile.len()))?;
            }
        }
    }
    finish(states, &vec![None; cfg.num_kv_heads], q_positions, cfg)
}

/// Dense f64 reference: full softmax over materialized `k` (`N x n_kv`, RoPE
/// applied) and `v` at absolute `key_positions`.
pub fn naive_attention_oracle(
    q: &Matrix,
    q_positions: &[usize],
    k: &Matrix,
    v: &Matrix,
    key_positions: &[usize],
    cfg: &AttentionConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    let d = cfg.head_dim;
    let mut out = Matrix::zeros(q.rows(), cfg.n_q());
    for h in 0..cfg.num_heads {
        let g = cfg.kv_head(h);
        for i in 0..q.rows() {
            let qi = &q.row(i)[h * d..(h + 1) * d];
            let mut scores: Vec<(usize, f64)> = Vec::new();
            for j in 0..k.rows() {
                if cfg.causal && key_positions[j] > q_positions[i] {
                    continue;
                }
                let kj = &k.row(j)[g * d..(g + 1) * d];
                let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                scores.push((j, dot * cfg.scale as f64));
            }
            if scores.is_empty() {
                return Err(AttentionError::NoKeys { query: i, position: q_positions[i] });
            }
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            let row = &mut out.row_mut(i)[h * d..(h + 1) * d];
            for c in 0..d {
                let num: f64 = scores.iter().map(|&(j, s)| (s - max).exp() * v.get(j, g * d + c) as f64).sum();
                row[c] = (num / denom) as f32;
            }
        }
    }
    Ok(out)
}

/// Floating-point operations of one `residual_attention` call with `m`
/// queries over `n` keys.
pub fn attention_flops(m: usize, n: usize, cfg: &AttentionConfig, disaggregated: bool) -> u64 {
    let (m, n, d, r) = (m as u64, n as u64, cfg.head_dim as u64, cfg.rank as u64);
    let (h, hkv) = (cfg.num_heads as u64, cfg.num_kv_heads as u64);
    let mut flops = h * (4 * m * n * d);
    if disaggregated && r > 0 {
        flops += hkv * 2 * n * r * d + h * (2 * m * n * r + 2 * m * r * d);
    }
    flops
}
