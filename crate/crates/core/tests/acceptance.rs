//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::time::{Duration, Instant};

use dualkv::engine::{AgentRequest, Engine, EngineConfig, EngineMode};
use dualkv::lora::{random_tokens, ForwardMode, ModelGeometry, SharedKvContext, TokenId};
use dualkv::pool::PoolKind;
use dualkv::verify::{self, AttentionInstance};
use dualkv::workload::{gen_trace, run_trace, GenParams, Pattern, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn request(agent: u64, adapter: u32, tokens: Vec<TokenId>, max_new: usize) -> AgentRequest {
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

fn small(mode: EngineMode, layers: usize) -> EngineConfig {
    EngineConfig {
        mode,
        geometry: ModelGeometry {
            num_layers: layers,
            hidden: 32,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            ffn_hidden: 64,
            vocab: 64,
            ..ModelGeometry::default()
        },
        rank: 4,
        block_capacity: 16,
        pool_budget_bytes: 8 << 20,
        ..EngineConfig::default()
    }
}

fn attention_oracle(inst: &[AttentionInstance]) -> Outcome {
    let t = Instant::now();
    let r = verify::attention_oracle_check(inst);
    let elapsed = t.elapsed();
    let ok = r.passed() && r.cases >= 100 && elapsed < Duration::from_secs(60);
    outcome(ok, format!("{r}, {:.2}s", elapsed.as_secs_f64()))
}

fn deferred_rope(inst: &[AttentionInstance]) -> Outcome {
    let r = verify::deferred_rope_check(inst);
    outcome(r.passed() && r.cases >= 100, r.to_string())
}

fn late_fusion(inst: &[AttentionInstance]) -> Outcome {
    let r = verify::late_fusion_check(inst);
    outcome(r.passed() && r.cases >= 100, r.to_string())
}

fn memory_accounting() -> Outcome {
    match verify::memory_accounting(16, 2048) {
        Ok(a) => {
            let within = (a.measured_ratio - 0.078125).abs() <= a.slack;
            outcome(
                within && a.reduction_factor > 10.0,
                format!(
                    "measured ratio {:.6} (target 0.078125, slack {:.6}), per-agent bytes {:.0} vs {:.0}, reduction {:.2}x",
                    a.measured_ratio, a.slack, a.disaggregated_per_agent_bytes, a.unified_per_agent_bytes, a.reduction_factor
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn admission_scaling() -> Outcome {
    let t = Instant::now();
    match verify::admission_scaling(48, 2048) {
        Ok(a) => {
            let elapsed = t.elapsed();
            outcome(
                a.unified_peak == 2 && a.disaggregated_peak >= 32 && elapsed < Duration::from_secs(120),
                format!(
                    "budget {} bytes: unified peak {}, disaggregated peak {}, {:.2}s",
                    a.budget_bytes,
                    a.unified_peak,
                    a.disaggregated_peak,
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

/// Agent 1 caches `ctx[..64]`; agent 2 extends it to `ctx[..100]`, so the
/// base tree holds `[0, 64)` with a `[64, 100)` tail. The tail is evicted and
/// agent 2 is forked again on the same context.
fn partial_hit() -> Outcome {
    let run = || -> Result<Outcome, dualkv::EngineError> {
        let cfg = small(EngineMode::Disaggregated, 2);
        let g = cfg.geometry.clone();
        let (l, m, n) = (g.num_layers as u64, g.hidden as u64, g.n_kv() as u64);
        let ctx = random_tokens(100, g.vocab, 21);
        let mut e = Engine::new(cfg)?;
        e.submit(request(1, 1, ctx[..64].to_vec(), 1))?;
        e.submit(request(2, 2, ctx.clone(), 1))?;
        e.run_to_completion()?;
        // The tail spans three blocks: [64, 80), [80, 96) and the partial [96, 100).
        let evicted = e.evict(PoolKind::Base, 3)?;
        let before = e.metrics().clone();
        e.submit(request(2, 2, ctx.clone(), 1))?;
        let after = e.run_to_completion()?;
        e.check_handle_hygiene()?;
        let evicted_tokens: usize = evicted.nodes.iter().map(|n| n.tokens.len()).sum();
        let base = after.base_recompute_flops - before.base_recompute_flops;
        let res = after.residual_recompute_flops - before.residual_recompute_flops;
        let expected_base = l * 2 * 36 * m * 2 * n;
        Ok(outcome(
            evicted_tokens == 36 && res == 0 && base == expected_base,
            format!(
                "evicted {evicted_tokens} base tokens; residual recompute {res} FLOPs, base recompute {base} FLOPs (expected {expected_base} for 36 tokens)"
            ),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e.to_string()))
}

/// Random workloads interleaved with explicit evictions of one tree; the
/// other tree's dump must not change.
fn decoupled_eviction() -> Outcome {
    let scenarios = 200;
    let mut failures = Vec::new();
    let mut evictions = 0usize;
    for seed in 0..scenarios {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Engine::new(small(EngineMode::Disaggregated, 1)).expect("valid config");
        let stem = random_tokens(rng.random_range(0..80), 64, seed);
        for a in 0..rng.random_range(1..6u64) {
            let mut p = stem[..rng.random_range(0..=stem.len())].to_vec();
            p.extend(random_tokens(rng.random_range(1..40), 64, seed * 100 + a));
            e.submit(request(a, rng.random_range(0..3), p, rng.random_range(1..6))).expect("valid request");
        }
        let mut ok = true;
        while !e.is_idle() {
            if rng.random_bool(0.5) {
                let kind = if rng.random_bool(0.5) { PoolKind::Base } else { PoolKind::Residual };
                let other = |e: &Engine| match kind {
                    PoolKind::Base => e.trees().dump_residual(e.pools()),
                    PoolKind::Residual => e.trees().dump_base(e.pools()),
                };
                let before = other(&e);
                ok &= e.evict(kind, rng.random_range(1..4)).is_ok();
                ok &= before == other(&e);
                evictions += 1;
            }
            ok &= e.step().is_ok();
        }
        for _ in 0..rng.random_range(1..6) {
            let kind = if rng.random_bool(0.5) { PoolKind::Base } else { PoolKind::Residual };
            let (before_b, before_r) = (e.trees().dump_base(e.pools()), e.trees().dump_residual(e.pools()));
            ok &= e.evict(kind, rng.random_range(1..4)).is_ok();
            ok &= match kind {
                PoolKind::Base => before_r == e.trees().dump_residual(e.pools()),
                PoolKind::Residual => before_b == e.trees().dump_base(e.pools()),
            };
            evictions += 1;
        }
        ok &= e.check_handle_hygiene().is_ok();
        if !ok {
            failures.push(seed);
        }
    }
    outcome(failures.is_empty(), format!("{scenarios} scenarios, {evictions} evictions, failing seeds {failures:?}"))
}

fn single_layer_exactness() -> Outcome {
    let run = || -> Result<Outcome, dualkv::EngineError> {
        let ctx = random_tokens(40, 64, 31);
        let mut e = Engine::new(small(EngineMode::Disaggregated, 1))?;
        for a in 0..4 {
            e.submit(request(a, a as u32, ctx.clone(), 8))?;
        }
        e.run_to_completion()?;
        let mut mismatched = Vec::new();
        for a in 0..4u32 {
            let adapter = e.adapter(a)?.clone();
            let want = e.model().generate(&ctx, &adapter, ForwardMode::Exact, &mut SharedKvContext::new(1), 8)?;
            if e.generated(a as u64)[0] != want {
                mismatched.push(a);
            }
        }
        // Agent 0 publishes merged rows; agent 1 reuses them outright.
        let (a0, a1) = (e.adapter(0)?.clone(), e.adapter(1)?.clone());
        let model = e.model();
        let mut shared = SharedKvContext::new(1);
        model.forward_sequence(&ctx, &a0, ForwardMode::FullReuse, &mut shared)?;
        let reused = model.forward_sequence(&ctx, &a1, ForwardMode::FullReuse, &mut shared)?;
        let exact = model.forward_sequence(&ctx, &a1, ForwardMode::Exact, &mut SharedKvContext::new(1))?;
        let gap = reused.output.max_abs_diff(&exact.output);
        Ok(outcome(
            mismatched.is_empty() && gap > 1e-3,
            format!("token mismatches {mismatched:?}, full-reuse hidden max abs diff {gap:.3e}"),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e.to_string()))
}

fn radix_correctness() -> Outcome {
    let (lcp, rc) = verify::radix_lcp_check(1000);
    outcome(lcp.passed() && rc.passed() && lcp.cases >= 1000, format!("{lcp}; {rc}"))
}

/// Weights dominate the per-step bytes, so each decode step costs about the
/// same regardless of batch size and throughput follows concurrency.
fn throughput_config() -> RunConfig {
    RunConfig {
        num_layers: 2,
        hidden: 128,
        num_heads: 4,
        num_kv_heads: 1,
        head_dim: 32,
        ffn_hidden: 2048,
        vocab: 4096,
        rank: 4,
        block_capacity: 16,
        pool_budget_bytes: 1800 << 10,
        ..RunConfig::default()
    }
}

fn throughput_trend() -> Outcome {
    let params = GenParams {
        pattern: Pattern::React,
        workflows: 8,
        agents_per_workflow: 4,
        ctx_tokens: 1024,
        dyn_tokens: 32,
        seed: 5,
        rate: 1000.0,
        tool_latency: 0.001,
        max_new_tokens: 32,
    };
    let run = || -> Result<Outcome, dualkv::workload::WorkloadError> {
        let trace = gen_trace(&params)?;
        let cfg = throughput_config();
        let modes = [EngineMode::Unified, EngineMode::Disaggregated];
        let (first, _) = run_trace(&trace, &cfg, &modes)?;
        let (second, _) = run_trace(&trace, &cfg, &modes)?;
        let a = serde_json::to_string(&first)?;
        let b = serde_json::to_string(&second)?;
        let ratio = first.ratios.as_ref().and_then(|r| r.throughput).unwrap_or(0.0);
        let (u, d) = (&first.modes[&EngineMode::Unified], &first.modes[&EngineMode::Disaggregated]);
        let complete = u.completed_agents == 32 && d.completed_agents == 32;
        Ok(outcome(
            ratio >= 1.5 && a == b && complete,
            format!(
                "tasks/s unified {:.3} vs disaggregated {:.3} ({ratio:.2}x), peak agents {} vs {}, reports identical: {}",
                u.tasks_per_second,
                d.tasks_per_second,
                u.peak_active_agents,
                d.peak_active_agents,
                a == b
            ),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e.to_string()))
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + Sync + 'a>;

fn main() {
    let inst = verify::attention_instances(100);
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("attention oracle equivalence", Box::new(|| attention_oracle(&inst))),
        ("deferred RoPE exactness", Box::new(|| deferred_rope(&inst))),
        ("late value fusion", Box::new(|| late_fusion(&inst))),
        ("memory accounting", Box::new(memory_accounting)),
        ("admission scaling", Box::new(admission_scaling)),
        ("partial hit recompute", Box::new(partial_hit)),
        ("decoupled eviction", Box::new(decoupled_eviction)),
        ("single-layer exactness / full-reuse gap", Box::new(single_layer_exactness)),
        ("radix correctness", Box::new(radix_correctness)),
        ("throughput trend and determinism", Box::new(throughput_trend)),
    ];
    let results: Vec<Outcome> = std::thread::scope(|s| {
        criteria.iter().map(|(_, f)| s.spawn(f)).collect::<Vec<_>>().into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for (i, ((name, _), r)) in criteria.iter().zip(&results).enumerate() {
        println!("criterion {:>2} {} {name}: {}", i + 1, if r.passed { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
