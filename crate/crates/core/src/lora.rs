//! Low-rank adapted projections and a small deterministic decoder used as the
//! workload model.
//!
//! A LoRA projection is `x·W + x·A·B`. The disaggregated layout stores the two
//! terms separately: `x·W` (shared across adapters, RoPE already applied for
//! keys) and `x·A` (adapter-specific, `r` wide, no RoPE). The full projection
//! is recovered with [`reconstruct_full`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, apply_rope, rms_norm, Matrix, NumericsError, RopeTable, DEFAULT_ROPE_THETA};

pub type TokenId = u32;
pub type AdapterId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("layer {layer}: shared base rows missing and publishing is not permitted")]
    PartialMiss { layer: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: TokenId, vocab: usize },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Shape of the toy decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub num_layers: usize,
    /// Hidden width `m`.
    pub hidden: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub rope_theta: f64,
}

impl Default for ModelGeometry {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            num_heads: 4,
            num_kv_heads: 4,
            head_dim: 16,
            ffn_hidden: 256,
            vocab: 256,
            max_positions: 8192,
            rope_theta: DEFAULT_ROPE_THETA,
        }
    }
}

impl ModelGeometry {
    /// Query projection width.
    pub fn n_q(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Key/value projection width (`n`).
    pub fn n_kv(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_layers == 0 || self.hidden == 0 || self.vocab == 0 || self.ffn_hidden == 0 {
            return fail("num_layers, hidden, ffn_hidden and vocab must be >= 1".into());
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.num_kv_heads == 0 || self.num_heads == 0 || !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return fail(format!("num_heads ({}) must be a positive multiple of num_kv_heads ({})", self.num_heads, self.num_kv_heads));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be >= 1".into());
        }
        Ok(())
    }
}

/// One `A` (m x r) / `B` (r x n) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapter {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
}

/// Per-layer Q/K/V low-rank pairs. The `alpha / r` factor is folded into `B`
/// at construction, so `scaling` stays 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub adapter_id: AdapterId,
    pub rank: usize,
    pub scaling: f32,
    pub layers: Vec<LayerAdapter>,
}

impl LoraAdapter {
    /// Seeded random adapter. `A` entries are `U(±1/sqrt(m))`, `B` entries
    /// `U(±0.5/sqrt(r)) * alpha / r`.
    pub fn random(adapter_id: AdapterId, geometry: &ModelGeometry, rank: usize, alpha: f32, seed: u64) -> Result<Self> {
        Self::check_rank(geometry, rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_bound = 1.0 / (geometry.hidden as f32).sqrt();
        let b_bound = 0.5 / (rank as f32).sqrt();
        let fold = alpha / rank as f32;
        let pair = |rng: &mut ChaCha8Rng, n: usize| LoraPair {
            a: Matrix::random(rng, geometry.hidden, rank, -a_bound, a_bound),
            b: Matrix::random(rng, rank, n, -b_bound, b_bound).scale(fold),
        };
        let layers = (0..geometry.num_layers)
            .map(|_| LayerAdapter {
                q: pair(&mut rng, geometry.n_q()),
                k: pair(&mut rng, geometry.n_kv()),
                v: pair(&mut rng, geometry.n_kv()),
            })
            .collect();
        Ok(Self { adapter_id, rank, scaling: 1.0, layers })
    }

    /// Adapter whose `A` and `B` are all zero: it contributes nothing.
    pub fn zeros(adapter_id: AdapterId, geometry: &ModelGeometry, rank: usize) -> Result<Self> {
        Self::check_rank(geometry, rank)?;
        let pair = |n: usize| LoraPair { a: Matrix::zeros(geometry.hidden, rank), b: Matrix::zeros(rank, n) };
        let layers = (0..geometry.num_layers)
            .map(|_| LayerAdapter { q: pair(geometry.n_q()), k: pair(geometry.n_kv()), v: pair(geometry.n_kv()) })
            .collect();
        Ok(Self { adapter_id, rank, scaling: 1.0, layers })
    }

    fn check_rank(geometry: &ModelGeometry, rank: usize) -> Result<()> {
        geometry.validate()?;
        if rank == 0 || rank >= geometry.n_kv() || rank >= geometry.n_q() {
            return Err(ModelError::Config(format!(
                "rank {rank} must satisfy 1 <= r < min(n_q={}, n_kv={})",
                geometry.n_q(),
                geometry.n_kv()
            )));
        }
        Ok(())
    }

    /// Bytes of adapter weights, used by the cost model.
    pub fn weight_bytes(&self) -> u64 {
        self.layers.iter().flat_map(|l| [&l.q, &l.k, &l.v]).map(|p| (p.a.data().len() + p.b.data().len()) as u64 * 4).sum()
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_ff1: Matrix,
    pub w_ff2: Matrix,
}

/// Frozen decoder: embedding, pre-norm attention + ReLU feed-forward blocks
/// with residual connections, and a linear output head.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub geometry: ModelGeometry,
    pub seed: u64,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub head: Matrix,
    pub rope: RopeTable,
}

impl BaseModel {
    pub fn new(geometry: ModelGeometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = &geometry;
        let glorot = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f32).sqrt();
            Matrix::random(rng, rows, cols, -bound, bound)
        };
        let embedding = Matrix::random(&mut rng, g.vocab, g.hidden, -1.0, 1.0);
        let layers = (0..g.num_layers)
            .map(|_| LayerWeights {
                w_q: glorot(&mut rng, g.hidden, g.n_q()),
                w_k: glorot(&mut rng, g.hidden, g.n_kv()),
                w_v: glorot(&mut rng, g.hidden, g.n_kv()),
                w_o: glorot(&mut rng, g.n_q(), g.hidden),
                w_ff1: glorot(&mut rng, g.hidden, g.ffn_hidden),
                w_ff2: glorot(&mut rng, g.ffn_hidden, g.hidden),
            })
            .collect();
        let head = glorot(&mut rng, g.hidden, g.vocab);
        let rope = RopeTable::new(g.max_positions, g.head_dim, g.rope_theta)?;
        Ok(Self { geometry, seed, embedding, layers, head, rope })
    }

    /// Bytes of frozen weights read by one forward pass.
    pub fn weight_bytes(&self) -> u64 {
        let layer: usize = self
            .layers
            .iter()
            .map(|l| {
                l.w_q.data().len()
                    + l.w_k.data().len()
                    + l.w_v.data().len()
                    + l.w_o.data().len()
                    + l.w_ff1.data().len()
                    + l.w_ff2.data().len()
            })
            .sum();
        ((layer + self.embedding.data().len() + self.head.data().len()) * 4) as u64
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Result<Matrix> {
        let m = self.geometry.hidden;
        let mut out = Matrix::zeros(tokens.len(), m);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.geometry.vocab {
                return Err(ModelError::TokenOutOfVocab { token: t, vocab: self.geometry.vocab });
            }
            out.row_mut(i).copy_from_slice(self.embedding.row(t as usize));
        }
        Ok(out)
    }

    /// `RoPE(h·W_q + (h·A_q)·B_q)`; queries are never cached.
    pub fn query(&self, h: &Matrix, layer: usize, adapter: &LoraAdapter, positions: &[usize]) -> Result<Matrix> {
        let lw = &self.layers[layer];
        let la = &adapter.layers[layer];
        let q = h.matmul(&lw.w_q)?.add(&h.matmul(&la.q.a)?.matmul(&la.q.b)?)?;
        Ok(apply_rope(&q, positions, &self.rope, self.geometry.head_dim)?)
    }

    /// Base rows for keys (RoPE applied) and values: `(RoPE(h·W_k), h·W_v)`.
    pub fn base_kv(&self, h: &Matrix, layer: usize, positions: &[usize]) -> Result<(Matrix, Matrix)> {
        let lw = &self.layers[layer];
        let (k, v) = project_kv_base(h, &lw.w_k, &lw.w_v)?;
        Ok((apply_rope(&k, positions, &self.rope, self.geometry.head_dim)?, v))
    }

    /// Residual rows `(h·A_k, h·A_v)`; no RoPE.
    pub fn residual_kv(&self, h: &Matrix, layer: usize, adapter: &LoraAdapter) -> Result<(Matrix, Matrix)> {
        let la = &adapter.layers[layer];
        Ok((h.matmul(&la.k.a)?, h.matmul(&la.v.a)?))
    }

    /// Fully merged rows `(RoPE(h·W_k + h·A_k·B_k), h·W_v + h·A_v·B_v)`.
    pub fn merged_kv(&self, h: &Matrix, layer: usize, adapter: &LoraAdapter, positions: &[usize]) -> Result<(Matrix, Matrix)> {
        let lw = &self.layers[layer];
        let la = &adapter.layers[layer];
        let (kb, kr) = project_disaggregated(h, &lw.w_k, &la.k.a)?;
        let (vb, vr) = project_disaggregated(h, &lw.w_v, &la.v.a)?;
        let k = reconstruct_full(&kb, &kr, &la.k.b)?;
        let v = reconstruct_full(&vb, &vr, &la.v.b)?;
        Ok((apply_rope(&k, positions, &self.rope, self.geometry.head_dim)?, v))
    }

    /// Feed-forward sublayer with its residual connection: `x + relu(rms(x)·W1)·W2`.
    pub fn feed_forward(&self, x: &Matrix, layer: usize) -> Result<Matrix> {
        let lw = &self.layers[layer];
        let mut hidden = rms_norm(x).matmul(&lw.w_ff1)?;
        for v in hidden.data_mut() {
            *v = v.max(0.0);
        }
        Ok(x.add(&hidden.matmul(&lw.w_ff2)?)?)
    }

    /// Logits for each row of a final hidden state.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(rms_norm(x).matmul(&self.head)?)
    }

    /// Reference layer forward over a whole sequence starting at position 0.
    pub fn forward_layer(
        &self,
        x: &Matrix,
        layer: usize,
        adapter: &LoraAdapter,
        mode: ForwardMode,
        ctx: &mut SharedKvContext,
    ) -> Result<LayerOutput> {
        let g = &self.geometry;
        let s = x.rows();
        let positions: Vec<usize> = (0..s).collect();
        let h = rms_norm(x);
        let la = &adapter.layers[layer];
        let (own_kb, own_vb) = self.base_kv(&h, layer, &positions)?;
        let (k_r, v_r) = self.residual_kv(&h, layer, adapter)?;

        let (k_full, v_full, k_b, v_b) = match mode {
            ForwardMode::Exact => {
                let (k, v) = self.merged_kv(&h, layer, adapter, &positions)?;
                (k, v, own_kb, own_vb)
            }
            ForwardMode::SharedBase => {
                let own = PublishedKv { k_base: own_kb, v_base: own_vb, k_full: Matrix::zeros(s, 0), v_full: Matrix::zeros(s, 0) };
                let (k_b, v_b) = ctx.resolve_base(layer, s, own)?;
                let k_lora = apply_rope(&k_r.matmul(&la.k.b)?, &positions, &self.rope, g.head_dim)?;
                let k = k_b.add(&k_lora)?;
                let v = reconstruct_full(&v_b, &v_r, &la.v.b)?;
                (k, v, k_b, v_b)
            }
            ForwardMode::FullReuse => {
                let (mk, mv) = self.merged_kv(&h, layer, adapter, &positions)?;
                let own = PublishedKv { k_base: own_kb, v_base: own_vb, k_full: mk, v_full: mv };
                let (k, v) = ctx.resolve_full(layer, s, own)?;
                (k.clone(), v.clone(), k, v)
            }
        };

        let q = self.query(&h, layer, adapter, &positions)?;
        let attn = dense_causal_attention(&q, &k_full, &v_full, g)?;
        let x1 = x.add(&attn.matmul(&self.layers[layer].w_o)?)?;
        let new_x = self.feed_forward(&x1, layer)?;
        Ok(LayerOutput { x: new_x, k_b, k_r, v_b, v_r })
    }

    /// Runs all layers; records the input hidden state of every layer.
    pub fn forward_sequence(
        &self,
        tokens: &[TokenId],
        adapter: &LoraAdapter,
        mode: ForwardMode,
        ctx: &mut SharedKvContext,
    ) -> Result<ForwardTrace> {
        let mut x = self.embed(tokens)?;
        let mut layer_inputs = Vec::with_capacity(self.geometry.num_layers);
        for layer in 0..self.geometry.num_layers {
            layer_inputs.push(x.clone());
            x = self.forward_layer(&x, layer, adapter, mode, ctx)?.x;
        }
        Ok(ForwardTrace { layer_inputs, output: x })
    }

    /// Greedy generation by full recomputation each step, with no cache.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        adapter: &LoraAdapter,
        mode: ForwardMode,
        ctx: &mut SharedKvContext,
        max_new_tokens: usize,
    ) -> Result<Vec<TokenId>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            let trace = self.forward_sequence(&seq, adapter, mode, ctx)?;
            let last = trace.output.slice_rows(trace.output.rows() - 1..trace.output.rows());
            let tok = argmax(self.logits(&last)?.row(0)) as TokenId;
            out.push(tok);
            seq.push(tok);
        }
        Ok(out)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn project_kv_base(h: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((h.matmul(w_k)?, h.matmul(w_v)?))
}

/// Dense causal multi-head attention with grouped KV heads. Output is
/// `s x n_q` (heads concatenated), before the output projection.
fn dense_causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, g: &ModelGeometry) -> Result<Matrix> {
    let s = q.rows();
    let d = g.head_dim;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Matrix::zeros(s, g.n_q());
    let mut weights = vec![0.0f32; s];
    for head in 0..g.num_heads {
        let kv = head * g.num_kv_heads / g.num_heads;
        for i in 0..s {
            let qi = &q.row(i)[head * d..(head + 1) * d];
            let mut mx = f32::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[kv * d..(kv + 1) * d];
                let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                weights[j] = sc;
                mx = mx.max(sc);
            }
            let mut z = 0.0f32;
            for w in weights[..=i].iter_mut() {
                *w = (*w - mx).exp();
                z += *w;
            }
            let o = &mut out.row_mut(i)[head * d..(head + 1) * d];
            for j in 0..=i {
                let vj = &v.row(j)[kv * d..(kv + 1) * d];
                let w = weights[j] / z;
                for c in 0..d {
                    o[c] += w * vj[c];
                }
            }
        }
    }
    Ok(out)
}

/// How a layer obtains its key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Everything from this agent's own hidden state and adapter.
    Exact,
    /// Base rows from the first publisher; residual rows from own state.
    SharedBase,
    /// Publisher's merged rows reused outright.
    FullReuse,
}

/// Rows published by the first agent to process a token range.
#[derive(Clone, Debug)]
pub struct PublishedKv {
    pub k_base: Matrix,
    pub v_base: Matrix,
    pub k_full: Matrix,
    pub v_full: Matrix,
}

/// First-writer-wins store of base rows per layer, for the reference forward.
#[derive(Clone, Debug)]
pub struct SharedKvContext {
    layers: Vec<Option<PublishedKv>>,
    allow_publish: bool,
}

impl SharedKvContext {
    pub fn new(num_layers: usize) -> Self {
        Self { layers: vec![None; num_layers], allow_publish: true }
    }

    /// A context that only reads; a miss becomes [`ModelError::PartialMiss`].
    pub fn read_only(mut self) -> Self {
        self.allow_publish = false;
        self
    }

    pub fn published(&self, layer: usize) -> Option<&PublishedKv> {
        self.layers.get(layer).and_then(|l| l.as_ref())
    }

    /// Published rows for `[0, s)`, extending the publication with `own` rows
    /// past its current end.
    fn resolve_base(&mut self, layer: usize, s: usize, own: PublishedKv) -> Result<(Matrix, Matrix)> {
        let entry = self.extend(layer, s, own)?;
        Ok((entry.k_base.slice_rows(0..s), entry.v_base.slice_rows(0..s)))
    }

    fn resolve_full(&mut self, layer: usize, s: usize, own: PublishedKv) -> Result<(Matrix, Matrix)> {
        let entry = self.extend(layer, s, own)?;
        Ok((entry.k_full.slice_rows(0..s), entry.v_full.slice_rows(0..s)))
    }

    fn extend(&mut self, layer: usize, s: usize, own: PublishedKv) -> Result<&PublishedKv> {
        let allow = self.allow_publish;
        let slot = &mut self.layers[layer];
        match slot {
            None if !allow => return Err(ModelError::PartialMiss { layer }),
            None => *slot = Some(own),
            Some(p) if p.k_base.rows() < s => {
                if !allow {
                    return Err(ModelError::PartialMiss { layer });
                }
                let have = p.k_base.rows();
                let tail = |old: &Matrix, new: &Matrix| -> Result<Matrix> {
                    if old.cols() == 0 || new.cols() == 0 {
                        return Ok(Matrix::zeros(s, 0));
                    }
                    Ok(old.vcat(&new.slice_rows(have..s))?)
                };
                p.k_base = p.k_base.vcat(&own.k_base.slice_rows(have..s))?;
                p.v_base = p.v_base.vcat(&own.v_base.slice_rows(have..s))?;
                p.k_full = tail(&p.k_full, &own.k_full)?;
                p.v_full = tail(&p.v_full, &own.v_full)?;
            }
            Some(_) => {}
        }
        Ok(slot.as_ref().expect("slot populated above"))
    }
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub x: Matrix,
    pub k_b: Matrix,
    pub k_r: Matrix,
    pub v_b: Matrix,
    pub v_r: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input hidden state of each layer (`layer_inputs[0]` is the embedding).
    pub layer_inputs: Vec<Matrix>,
    pub output: Matrix,
}

/// Splits a LoRA projection at the down-projection: returns `(x·W, x·A)`.
pub fn project_disaggregated(x: &Matrix, w: &Matrix, a: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.cols() != w.rows() || x.cols() != a.rows() {
        return Err(NumericsError::ShapeMismatch { op: "project_disaggregated", left: x.shape(), right: (w.rows(), a.rows()) }.into());
    }
    Ok((x.matmul(w)?, x.matmul(a)?))
}

/// `b + r·B`.
pub fn reconstruct_full(b: &Matrix, r: &Matrix, up: &Matrix) -> Result<Matrix> {
    if r.cols() != up.rows() || b.cols() != up.cols() || b.rows() != r.rows() {
        return Err(NumericsError::ShapeMismatch { op: "reconstruct_full", left: b.shape(), right: up.shape() }.into());
    }
    Ok(b.add(&r.matmul(up)?)?)
}

/// Inputs of the disaggregated/unified memory ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRatioInputs {
    pub agents: usize,
    pub rank: usize,
    pub width: usize,
    pub seq_len: usize,
}

impl MemoryRatioInputs {
    pub fn new(agents: usize, rank: usize, width: usize, seq_len: usize) -> Result<Self> {
        if agents == 0 || rank == 0 || rank >= width || seq_len == 0 {
            return Err(ModelError::Config(format!(
                "memory ratio needs N >= 1, 1 <= r < n, s >= 1 (got N={agents}, r={rank}, n={width}, s={seq_len})"
            )));
        }
        Ok(Self { agents, rank, width, seq_len })
    }
}

/// `(s·n + N·s·r) / (N·s·n) = 1/N + r/n`.
pub fn memory_ratio(inputs: &MemoryRatioInputs) -> f64 {
    1.0 / inputs.agents as f64 + inputs.rank as f64 / inputs.width as f64
}

/// Cosine similarity between shared-base and exact hidden states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    /// 1-based layer whose input is compared; `num_layers + 1` is the final output.
    pub layer: usize,
    pub mean_cosine: f64,
    pub min_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub seed: u64,
    pub rank: usize,
    pub tokens: usize,
    pub layers: Vec<LayerSimilarity>,
}

/// The first adapter publishes base rows; every other adapter runs in
/// shared-base mode and is compared with its own exact forward.
pub fn divergence_report(model: &BaseModel, adapters: &[LoraAdapter], tokens: &[TokenId]) -> Result<DivergenceReport> {
    if adapters.len() < 2 {
        return Err(ModelError::Config("divergence report needs at least two adapters".into()));
    }
    let mut ctx = SharedKvContext::new(model.geometry.num_layers);
    model.forward_sequence(tokens, &adapters[0], ForwardMode::SharedBase, &mut ctx)?;

    let stages = model.geometry.num_layers + 1;
    let mut sims: Vec<Vec<f64>> = vec![Vec::new(); stages];
    for adapter in &adapters[1..] {
        let mut own = SharedKvContext::new(model.geometry.num_layers);
        let exact = model.forward_sequence(tokens, adapter, ForwardMode::Exact, &mut own)?;
        let shared = model.forward_sequence(tokens, adapter, ForwardMode::SharedBase, &mut ctx)?;
        let pairs = exact
            .layer_inputs
            .iter()
            .chain(std::iter::once(&exact.output))
            .zip(shared.layer_inputs.iter().chain(std::iter::once(&shared.output)));
        for (stage, (e, s)) in pairs.enumerate() {
            for r in 0..e.rows() {
                sims[stage].push(numerics::cosine_similarity(e.row(r), s.row(r)));
            }
        }
    }
    let layers = sims
        .into_iter()
        .enumerate()
        .map(|(i, v)| LayerSimilarity {
            layer: i + 1,
            mean_cosine: v.iter().sum::<f64>() / v.len() as f64,
            min_cosine: v.iter().cloned().fold(f64::INFINITY, f64::min),
        })
        .collect();
    Ok(DivergenceReport { seed: model.seed, rank: adapters[0].rank, tokens: tokens.len(), layers })
}

/// Deterministic pseudo-random token ids.
pub fn random_tokens(count: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy(layers: usize) -> (BaseModel, Vec<LoraAdapter>) {
        let g = ModelGeometry { num_layers: layers, ..ModelGeometry::default() };
        let model = BaseModel::new(g.clone(), 11).unwrap();
        let adapters = (0..3).map(|i| LoraAdapter::random(i, &g, 8, 8.0, 100 + i as u64).unwrap()).collect();
        (model, adapters)
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                out.set(i, j, (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum());
            }
        }
        out
    }

    #[test]
    fn zero_a_gives_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::random(&mut rng, 5, 8, -1.0, 1.0);
        let w = Matrix::random(&mut rng, 8, 12, -1.0, 1.0);
        let (b, r) = project_disaggregated(&x, &w, &Matrix::zeros(8, 3)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert_eq!(b, x.matmul(&w).unwrap());
    }

    #[test]
    fn basis_rows_select_weight_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::random(&mut rng, 4, 6, -1.0, 1.0);
        let (b, _) = project_disaggregated(&Matrix::identity(4), &w, &Matrix::zeros(4, 2)).unwrap();
        assert_eq!(b, w);
    }

    #[test]
    fn reconstruct_round_trip_matches_merged_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random(&mut rng, 7, 16, -1.0, 1.0);
        let w = Matrix::random(&mut rng, 16, 32, -1.0, 1.0);
        let a = Matrix::random(&mut rng, 16, 4, -1.0, 1.0);
        let up = Matrix::random(&mut rng, 4, 32, -1.0, 1.0);
        let (b, r) = project_disaggregated(&x, &w, &a).unwrap();
        let got = reconstruct_full(&b, &r, &up).unwrap();
        let want = naive(&x, &w).add(&naive(&naive(&x, &a), &up)).unwrap();
        assert!(got.rel_error(&want) < 1e-5);
    }

    #[test]
    fn reconstruct_zero_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Matrix::random(&mut rng, 3, 5, -1.0, 1.0);
        assert_eq!(reconstruct_full(&b, &Matrix::zeros(3, 2), &Matrix::random(&mut rng, 2, 5, -1.0, 1.0)).unwrap(), b);
    }

    #[test]
    fn reconstruct_unit_entry_adds_one_column() {
        let b = Matrix::zeros(2, 3);
        let r = Matrix::from_rows(&[[2.0, 0.0], [5.0, 1.0]]).unwrap();
        let mut up = Matrix::zeros(2, 3);
        up.set(0, 1, 1.0);
        let out = reconstruct_full(&b, &r, &up).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn reconstruct_rejects_mismatch() {
        let err = reconstruct_full(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2), &Matrix::zeros(3, 3)).unwrap_err();
        assert!(matches!(err, ModelError::Numerics(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn memory_ratio_values() {
        let r = memory_ratio(&MemoryRatioInputs::new(16, 16, 1024, 2048).unwrap());
        assert_eq!(r, 0.078125);
        // Single agent at vanishing rank: no savings, no cost.
        let tiny = memory_ratio(&MemoryRatioInputs::new(1, 1, 1 << 30, 1).unwrap());
        assert!((tiny - 1.0).abs() < 1e-9);
        assert!(MemoryRatioInputs::new(0, 1, 4, 1).is_err());
        assert!(MemoryRatioInputs::new(1, 4, 4, 1).is_err());
    }

    #[test]
    fn memory_ratio_for_sixteen_agent_example() {
        // 16 agents x 4GB unified against one 4GB base plus 16 x 64MB residuals.
        let unified = 16.0 * 4096.0;
        let disagg = 4096.0 + 16.0 * 64.0;
        let factor: f64 = unified / disagg;
        assert!((factor - 12.8).abs() < 1e-9);
        let r = memory_ratio(&MemoryRatioInputs::new(16, 1, 64, 1).unwrap());
        assert!((1.0 / r - factor).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn memory_ratio_monotone(n in 1usize..500, r in 1usize..63) {
            let w = 64;
            let base = memory_ratio(&MemoryRatioInputs::new(n, r, w, 1).unwrap());
            prop_assert!(memory_ratio(&MemoryRatioInputs::new(n + 1, r, w, 1).unwrap()) < base);
            prop_assert!(memory_ratio(&MemoryRatioInputs::new(n, r + 1, w, 1).unwrap()) > base);
            let far = memory_ratio(&MemoryRatioInputs::new(usize::MAX / 2, r, w, 1).unwrap());
            prop_assert!((far - r as f64 / w as f64).abs() < 1e-12);
        }

        #[test]
        fn disaggregated_round_trip(seed in any::<u64>(), s in 1usize..9, m in 2usize..12, n in 3usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.random_range(1..n);
            let x = Matrix::random(&mut rng, s, m, -1.0, 1.0);
            let w = Matrix::random(&mut rng, m, n, -1.0, 1.0);
            let a = Matrix::random(&mut rng, m, r, -1.0, 1.0);
            let up = Matrix::random(&mut rng, r, n, -1.0, 1.0);
            let (b, rr) = project_disaggregated(&x, &w, &a).unwrap();
            let got = reconstruct_full(&b, &rr, &up).unwrap();
            let want = naive(&x, &w).add(&naive(&naive(&x, &a), &up)).unwrap();
            prop_assert!(got.rel_error(&want) < 1e-5);
        }
    }

    #[test]
    fn single_layer_shared_base_is_exact() {
        let (model, adapters) = toy(1);
        let tokens = random_tokens(40, 256, 5);
        let mut ctx = SharedKvContext::new(1);
        model.forward_sequence(&tokens, &adapters[0], ForwardMode::SharedBase, &mut ctx).unwrap();
        for a in &adapters {
            let exact = model.forward_sequence(&tokens, a, ForwardMode::Exact, &mut SharedKvContext::new(1)).unwrap();
            let shared = model.forward_sequence(&tokens, a, ForwardMode::SharedBase, &mut ctx).unwrap();
            assert!(exact.output.max_abs_diff(&shared.output) < 1e-6 * exact.output.max_abs().max(1.0));
        }
    }

    #[test]
    fn single_layer_full_reuse_diverges() {
        let (model, adapters) = toy(1);
        let tokens = random_tokens(40, 256, 6);
        let mut ctx = SharedKvContext::new(1);
        model.forward_sequence(&tokens, &adapters[0], ForwardMode::FullReuse, &mut ctx).unwrap();
        let exact = model.forward_sequence(&tokens, &adapters[1], ForwardMode::Exact, &mut SharedKvContext::new(1)).unwrap();
        let reuse = model.forward_sequence(&tokens, &adapters[1], ForwardMode::FullReuse, &mut ctx).unwrap();
        assert!(exact.output.max_abs_diff(&reuse.output) > 1e-3);
    }

    #[test]
    fn zero_adapters_make_modes_agree() {
        let g = ModelGeometry::default();
        let model = BaseModel::new(g.clone(), 3).unwrap();
        let z0 = LoraAdapter::zeros(0, &g, 4).unwrap();
        let z1 = LoraAdapter::zeros(1, &g, 4).unwrap();
        let tokens = random_tokens(24, 256, 9);
        let exact = model.forward_sequence(&tokens, &z1, ForwardMode::Exact, &mut SharedKvContext::new(2)).unwrap();
        for mode in [ForwardMode::SharedBase, ForwardMode::FullReuse] {
            let mut ctx = SharedKvContext::new(2);
            model.forward_sequence(&tokens, &z0, mode, &mut ctx).unwrap();
            let other = model.forward_sequence(&tokens, &z1, mode, &mut ctx).unwrap();
            assert!(exact.output.max_abs_diff(&other.output) < 1e-6);
        }
    }

    #[test]
    fn read_only_context_signals_partial_miss() {
        let (model, adapters) = toy(1);
        let tokens = random_tokens(8, 256, 1);
        let mut ctx = SharedKvContext::new(1).read_only();
        let err = model.forward_sequence(&tokens, &adapters[0], ForwardMode::SharedBase, &mut ctx).unwrap_err();
        assert_eq!(err, ModelError::PartialMiss { layer: 0 });
    }

    #[test]
    fn divergence_first_layer_is_one_and_zero_adapters_are_one() {
        let g = ModelGeometry { num_layers: 4, ..ModelGeometry::default() };
        let model = BaseModel::new(g.clone(), 21).unwrap();
        let tokens = random_tokens(32, 256, 2);
        let adapters: Vec<_> = (0..3).map(|i| LoraAdapter::random(i, &g, 8, 8.0, 7 + i as u64).unwrap()).collect();
        let rep = divergence_report(&model, &adapters, &tokens).unwrap();
        assert_eq!(rep.layers.len(), 5);
        assert!((rep.layers[0].min_cosine - 1.0).abs() < 1e-12);
        assert!(rep.layers.iter().all(|l| l.max_cosine_ok()));

        let zeros: Vec<_> = (0..3).map(|i| LoraAdapter::zeros(i, &g, 8).unwrap()).collect();
        let rep = divergence_report(&model, &zeros, &tokens).unwrap();
        assert!(rep.layers.iter().all(|l| (l.min_cosine - 1.0).abs() < 1e-6));
    }

    impl LayerSimilarity {
        fn max_cosine_ok(&self) -> bool {
            self.mean_cosine <= 1.0 + 1e-9 && self.min_cosine <= self.mean_cosine + 1e-12
        }
    }

    #[test]
    fn adapter_rank_validated() {
        let g = ModelGeometry::default();
        assert!(LoraAdapter::random(0, &g, 0, 1.0, 0).is_err());
        assert!(LoraAdapter::random(0, &g, 64, 1.0, 0).is_err());
        assert!(LoraAdapter::random(0, &g, 16, 16.0, 0).is_ok());
    }
}
