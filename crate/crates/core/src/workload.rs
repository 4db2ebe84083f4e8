//! Run configuration, JSONL traces, synthetic trace generation and the
//! multi-mode runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AgentRequest, CostModel, Engine, EngineConfig, EngineError, EngineMode, Metrics, TimelineRow};
use crate::lora::{random_tokens, AdapterId, ModelGeometry, TokenId};
use crate::radix::AgentId;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot access {path}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = WorkloadError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkloadError + '_ {
    move |source| WorkloadError::Io { path: path.display().to_string(), source }
}

/// Flat key-value run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub rope_theta: f64,
    pub rank: usize,
    pub lora_alpha: f32,
    /// Adapter ids in traces must be below this; 0 accepts any id.
    pub num_adapters: u32,
    pub zero_adapters: bool,
    pub block_capacity: usize,
    pub pool_budget_bytes: u64,
    pub residual_budget_fraction: f64,
    pub alpha_flop: f64,
    pub beta_byte: f64,
    pub tool_latency: f64,
    pub attention_block: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EngineConfig::default();
        let g = e.geometry;
        Self {
            seed: e.seed,
            num_layers: g.num_layers,
            hidden: g.hidden,
            num_heads: g.num_heads,
            num_kv_heads: g.num_kv_heads,
            head_dim: g.head_dim,
            ffn_hidden: g.ffn_hidden,
            vocab: g.vocab,
            max_positions: g.max_positions,
            rope_theta: g.rope_theta,
            rank: e.rank,
            lora_alpha: e.lora_alpha,
            num_adapters: 0,
            zero_adapters: e.zero_adapters,
            block_capacity: e.block_capacity,
            pool_budget_bytes: e.pool_budget_bytes,
            residual_budget_fraction: e.residual_budget_fraction,
            alpha_flop: e.cost.alpha_flop,
            beta_byte: e.cost.beta_byte,
            tool_latency: e.tool_latency,
            attention_block: e.attention_block,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| WorkloadError::Config(e.to_string()))?;
        cfg.engine(EngineMode::Disaggregated).validate().map_err(|e| WorkloadError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry {
            num_layers: self.num_layers,
            hidden: self.hidden,
            num_heads: self.num_heads,
            num_kv_heads: self.num_kv_heads,
            head_dim: self.head_dim,
            ffn_hidden: self.ffn_hidden,
            vocab: self.vocab,
            max_positions: self.max_positions,
            rope_theta: self.rope_theta,
        }
    }

    pub fn engine(&self, mode: EngineMode) -> EngineConfig {
        EngineConfig {
            mode,
            geometry: self.geometry(),
            seed: self.seed,
            rank: self.rank,
            lora_alpha: self.lora_alpha,
            zero_adapters: self.zero_adapters,
            block_capacity: self.block_capacity,
            pool_budget_bytes: self.pool_budget_bytes,
            residual_budget_fraction: self.residual_budget_fraction,
            cost: CostModel { alpha_flop: self.alpha_flop, beta_byte: self.beta_byte },
            tool_latency: self.tool_latency,
            attention_block: self.attention_block,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    React,
    MapReduce,
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "react" => Ok(Pattern::React),
            "mapreduce" => Ok(Pattern::MapReduce),
            other => Err(format!("unknown pattern {other:?} (expected react or mapreduce)")),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::React => "react",
            Pattern::MapReduce => "mapreduce",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    /// A new agent; inherits its parent's final context if it has one.
    Spawn,
    /// A further turn of an existing agent on its own context.
    Message,
}

/// Explicit token ids or `count` pseudo-random ids drawn from `seed`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenSegment {
    Ids(Vec<TokenId>),
    Synthetic { count: usize, seed: u64 },
}

impl TokenSegment {
    pub fn len(&self) -> usize {
        match self {
            TokenSegment::Ids(v) => v.len(),
            TokenSegment::Synthetic { count, .. } => *count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolve(&self, vocab: usize) -> Vec<TokenId> {
        match self {
            TokenSegment::Ids(v) => v.clone(),
            TokenSegment::Synthetic { count, seed } => random_tokens(*count, vocab, *seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub time: f64,
    pub workflow_id: u64,
    pub agent_id: AgentId,
    pub adapter_id: AdapterId,
    pub kind: RecordKind,
    pub tokens: Vec<TokenSegment>,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub parent_agent: Option<AgentId>,
}

/// How a generated trace was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub pattern: Pattern,
    pub seed: u64,
    pub workflows: usize,
    pub agents_per_workflow: usize,
    pub ctx_tokens: usize,
    pub dyn_tokens: usize,
    pub max_new_tokens: usize,
    /// Inter-arrival distribution of workflow starts.
    pub arrival: String,
    pub rate: f64,
    pub tool_latency: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub meta: Option<TraceMeta>,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: TraceMeta,
}

impl Trace {
    /// One JSON object per line; the optional first line is `{"meta": ...}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(meta) = &self.meta {
            out.push_str(&serde_json::to_string(&MetaLine { meta: meta.clone() }).expect("meta serializes"));
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses and validates; errors name the 1-based line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut trace = Trace::default();
        let mut line_of = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| WorkloadError::Trace { line: line_no, message: e.to_string() })?;
            if value.get("meta").is_some() {
                if !trace.records.is_empty() || trace.meta.is_some() {
                    return Err(WorkloadError::Trace { line: line_no, message: "meta must be the first record".into() });
                }
                let m: MetaLine =
                    serde_json::from_value(value).map_err(|e| WorkloadError::Trace { line: line_no, message: e.to_string() })?;
                trace.meta = Some(m.meta);
                continue;
            }
            let r: TraceRecord =
                serde_json::from_value(value).map_err(|e| WorkloadError::Trace { line: line_no, message: e.to_string() })?;
            trace.records.push(r);
            line_of.push(line_no);
        }
        trace.validate_lines(&line_of)?;
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        let lines: Vec<usize> = (1..=self.records.len()).map(|i| i + usize::from(self.meta.is_some())).collect();
        self.validate_lines(&lines)
    }

    fn validate_lines(&self, lines: &[usize]) -> Result<()> {
        let mut seen: BTreeSet<AgentId> = BTreeSet::new();
        let mut last_time = 0.0f64;
        for (r, &line) in self.records.iter().zip(lines) {
            let fail = |message: String| Err(WorkloadError::Trace { line, message });
            if !(r.time.is_finite() && r.time >= 0.0) {
                return fail(format!("time {} is not a finite non-negative number", r.time));
            }
            if r.time < last_time {
                return fail(format!("time {} precedes the previous record's {last_time}", r.time));
            }
            last_time = r.time;
            if r.max_new_tokens == 0 {
                return fail("max_new_tokens must be >= 1".into());
            }
            match r.kind {
                RecordKind::Spawn if seen.contains(&r.agent_id) => {
                    return fail(format!("agent {} spawned twice", r.agent_id));
                }
                RecordKind::Message if !seen.contains(&r.agent_id) => {
                    return fail(format!("message for agent {} before its spawn", r.agent_id));
                }
                _ => {}
            }
            if let Some(p) = r.parent_agent {
                if !seen.contains(&p) || (r.kind == RecordKind::Spawn && p == r.agent_id) {
                    return fail(format!("parent agent {p} is not an earlier agent"));
                }
            }
            let tokens: usize = r.tokens.iter().map(TokenSegment::len).sum();
            if tokens == 0 && r.parent_agent.is_none() && r.kind == RecordKind::Spawn {
                return fail("spawn without parent needs at least one token".into());
            }
            seen.insert(r.agent_id);
        }
        Ok(())
    }

    /// Engine requests; messages resume their own agent's context.
    pub fn requests(&self, config: &RunConfig) -> Result<Vec<AgentRequest>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let line = i + 1 + usize::from(self.meta.is_some());
                if config.num_adapters > 0 && r.adapter_id >= config.num_adapters {
                    return Err(WorkloadError::Trace {
                        line,
                        message: format!("adapter {} not configured (num_adapters = {})", r.adapter_id, config.num_adapters),
                    });
                }
                let prompt_tokens: Vec<TokenId> = r.tokens.iter().flat_map(|s| s.resolve(config.vocab)).collect();
                if let Some(&t) = prompt_tokens.iter().find(|&&t| t as usize >= config.vocab) {
                    return Err(WorkloadError::Trace { line, message: format!("token {t} outside vocab {}", config.vocab) });
                }
                let parent_agent = match r.kind {
                    RecordKind::Message => Some(r.parent_agent.unwrap_or(r.agent_id)),
                    RecordKind::Spawn => r.parent_agent,
                };
                Ok(AgentRequest {
                    workflow_id: r.workflow_id,
                    agent_id: r.agent_id,
                    adapter_id: r.adapter_id,
                    arrival_time: r.time,
                    prompt_tokens,
                    max_new_tokens: r.max_new_tokens,
                    parent_agent,
                })
            })
            .collect()
    }
}

/// Parameters of [`gen_trace`].
#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub pattern: Pattern,
    pub workflows: usize,
    pub agents_per_workflow: usize,
    pub ctx_tokens: usize,
    pub dyn_tokens: usize,
    pub seed: u64,
    /// Workflow starts per simulated second (exponential inter-arrivals).
    pub rate: f64,
    pub tool_latency: f64,
    pub max_new_tokens: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            pattern: Pattern::React,
            workflows: 8,
            agents_per_workflow: 4,
            ctx_tokens: 512,
            dyn_tokens: 100,
            seed: 0,
            rate: 2.0,
            tool_latency: 0.1,
            max_new_tokens: 16,
        }
    }
}

fn segment_seed(seed: u64, workflow: usize, agent: usize) -> u64 {
    seed ^ (((workflow as u64) << 32 | agent as u64).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Synthetic workflows over one shared context. ReAct workflows are chains
/// (each agent inherits its parent's context plus a tool response);
/// MapReduce workflows fan out from the shared context at one instant.
/// Every agent gets its own adapter.
pub fn gen_trace(p: &GenParams) -> Result<Trace> {
    if p.workflows == 0 || p.agents_per_workflow == 0 {
        return Err(WorkloadError::Params("workflows and agents must be >= 1".into()));
    }
    if p.ctx_tokens + p.dyn_tokens == 0 || p.max_new_tokens == 0 {
        return Err(WorkloadError::Params("need at least one prompt token and max_new_tokens >= 1".into()));
    }
    if !(p.rate > 0.0 && p.rate.is_finite()) || !(p.tool_latency >= 0.0 && p.tool_latency.is_finite()) {
        return Err(WorkloadError::Params("rate must be positive and tool latency non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let gaps = Exp::new(p.rate).map_err(|e| WorkloadError::Params(e.to_string()))?;
    let shared = TokenSegment::Synthetic { count: p.ctx_tokens, seed: p.seed };
    let mut records = Vec::new();
    let mut start = 0.0f64;
    for w in 0..p.workflows {
        if w > 0 {
            start += gaps.sample(&mut rng);
        }
        for j in 0..p.agents_per_workflow {
            let id = (w * p.agents_per_workflow + j) as u64;
            let own = TokenSegment::Synthetic { count: p.dyn_tokens, seed: segment_seed(p.seed, w, j) };
            let (time, parent, tokens) = match p.pattern {
                Pattern::React if j > 0 => (start + j as f64 * p.tool_latency, Some(id - 1), vec![own]),
                _ => (start, None, vec![shared.clone(), own]),
            };
            let tokens = tokens.into_iter().filter(|s| !s.is_empty()).collect();
            records.push(TraceRecord {
                time,
                workflow_id: w as u64,
                agent_id: id,
                adapter_id: id as AdapterId,
                kind: RecordKind::Spawn,
                tokens,
                max_new_tokens: p.max_new_tokens,
                parent_agent: parent,
            });
        }
    }
    // Stable sort keeps parents ahead of children at equal times.
    records.sort_by(|a, b| a.time.total_cmp(&b.time));
    let trace = Trace {
        meta: Some(TraceMeta {
            pattern: p.pattern,
            seed: p.seed,
            workflows: p.workflows,
            agents_per_workflow: p.agents_per_workflow,
            ctx_tokens: p.ctx_tokens,
            dyn_tokens: p.dyn_tokens,
            max_new_tokens: p.max_new_tokens,
            arrival: "exponential".into(),
            rate: p.rate,
            tool_latency: p.tool_latency,
        }),
        records,
    };
    trace.validate()?;
    Ok(trace)
}

/// One mode's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub metrics: Metrics,
    pub timeline: Vec<TimelineRow>,
}

/// Disaggregated over unified ratios; a field is absent when its
/// denominator is zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub throughput: Option<f64>,
    pub per_agent_bytes: Option<f64>,
    pub cache_hit_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub trace: Option<TraceMeta>,
    pub records: usize,
    pub modes: BTreeMap<EngineMode, Metrics>,
    pub ratios: Option<Ratios>,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| a / b)
}

/// Runs one mode to completion.
pub fn run_mode(trace: &Trace, config: &RunConfig, mode: EngineMode) -> Result<ModeRun> {
    let mut cfg = config.engine(mode);
    if let Some(meta) = &trace.meta {
        cfg.tool_latency = meta.tool_latency;
    }
    let requests = trace.requests(config)?;
    let mut engine = Engine::new(cfg)?;
    for r in requests {
        engine.submit(r)?;
    }
    let metrics = engine.run_to_completion()?;
    engine.check_handle_hygiene()?;
    Ok(ModeRun { metrics, timeline: engine.timeline().to_vec() })
}

/// Runs every requested mode on the same trace.
pub fn run_trace(trace: &Trace, config: &RunConfig, modes: &[EngineMode]) -> Result<(RunReport, BTreeMap<EngineMode, ModeRun>)> {
    // Reject bad input before simulating anything.
    trace.validate()?;
    trace.requests(config)?;
    let mut runs = BTreeMap::new();
    for &mode in modes {
        runs.insert(mode, run_mode(trace, config, mode)?);
    }
    let ratios = match (runs.get(&EngineMode::Disaggregated), runs.get(&EngineMode::Unified)) {
        (Some(d), Some(u)) => Some(Ratios {
            throughput: ratio(d.metrics.tasks_per_second, u.metrics.tasks_per_second),
            per_agent_bytes: ratio(d.metrics.per_agent_bytes, u.metrics.per_agent_bytes),
            cache_hit_rate: ratio(d.metrics.cache_hit_rate, u.metrics.cache_hit_rate),
        }),
        _ => None,
    };
    let report = RunReport {
        config: config.clone(),
        trace: trace.meta.clone(),
        records: trace.records.len(),
        modes: runs.iter().map(|(&m, r)| (m, r.metrics.clone())).collect(),
        ratios,
    };
    Ok((report, runs))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn timeline_csv(rows: &[TimelineRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| WorkloadError::Io { path: "timeline.csv".into(), source: e.into_error() })
}

/// Writes `metrics.json` and `timeline.csv` per mode plus `report.json`.
/// With a single mode the files go straight into `out_dir`; otherwise each
/// mode gets a subdirectory.
pub fn write_outputs(out_dir: &Path, report: &RunReport, runs: &BTreeMap<EngineMode, ModeRun>) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (mode, run) in runs {
        let dir = if runs.len() == 1 { out_dir.to_path_buf() } else { out_dir.join(mode.as_str()) };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write(&dir.join("metrics.json"), serde_json::to_string_pretty(&run.metrics)?.as_bytes())?;
        write(&dir.join("timeline.csv"), &timeline_csv(&run.timeline)?)?;
    }
    write(&out_dir.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())
}
