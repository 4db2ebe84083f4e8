//! Randomized invariants across modules.

use dualkv::engine::{AgentRequest, Engine, EngineConfig, EngineMode};
use dualkv::lora::{random_tokens, ModelGeometry};
use dualkv::verify::{memory_accounting, AttentionInstance};
use dualkv::workload::{gen_trace, GenParams, Pattern, Trace};
use proptest::prelude::*;

fn config(mode: EngineMode, budget: u64) -> EngineConfig {
    EngineConfig {
        mode,
        geometry: ModelGeometry {
            num_layers: 2,
            hidden: 16,
            num_heads: 2,
            num_kv_heads: 2,
            head_dim: 8,
            ffn_hidden: 32,
            vocab: 32,
            ..ModelGeometry::default()
        },
        rank: 2,
        block_capacity: 4,
        pool_budget_bytes: budget,
        ..EngineConfig::default()
    }
}

prop_compose! {
    fn workload()(n in 1usize..6, stem_len in 0usize..30, seed in 0u64..1000)
        (specs in prop::collection::vec((0..=stem_len, 1usize..12, 1usize..5, 0u32..3, 0.0f64..1.0), n), seed in Just(seed), stem_len in Just(stem_len))
        -> Vec<AgentRequest> {
        let stem = random_tokens(stem_len, 32, seed);
        specs.into_iter().enumerate().map(|(i, (keep, extra, max_new, adapter, t))| {
            let mut p = stem[..keep].to_vec();
            p.extend(random_tokens(extra, 32, seed + 1 + i as u64));
            AgentRequest { workflow_id: i as u64, agent_id: i as u64, adapter_id: adapter, arrival_time: t, prompt_tokens: p, max_new_tokens: max_new, parent_agent: None }
        }).collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn engine_runs_are_clean_and_deterministic(reqs in workload(), budget_kib in 2u64..64, mode_ix in 0usize..3) {
        let mode = EngineMode::ALL[mode_ix];
        let run = || {
            let mut e = Engine::new(config(mode, budget_kib << 10)).unwrap();
            for r in &reqs {
                e.submit(r.clone()).unwrap();
            }
            let m = e.run_to_completion().unwrap();
            e.check_handle_hygiene().unwrap();
            prop_assert_eq!(m.completed_agents + m.admission_failures, reqs.len() as u64);
            for r in &reqs {
                let gen = e.generated(r.agent_id);
                prop_assert!(gen.len() <= 1);
                if let Some(g) = gen.first() {
                    prop_assert_eq!(g.len(), r.max_new_tokens);
                }
            }
            Ok(serde_json::to_string(&m).unwrap())
        };
        prop_assert_eq!(run()?, run()?);
    }

    #[test]
    fn tiling_does_not_change_attention(seed in 0u64..10_000, block in prop::sample::select(vec![1usize, 3, 16, 64, 512])) {
        let mut inst = AttentionInstance::random(seed);
        let reference = inst.run();
        inst.cfg.block_size_keys = block;
        prop_assert!(inst.run().rel_error(&reference) < 1e-5);
    }

    #[test]
    fn generated_traces_round_trip(pattern in prop::sample::select(vec![Pattern::React, Pattern::MapReduce]), workflows in 1usize..5, agents in 1usize..5, ctx in 0usize..64, dyn_tokens in 1usize..32, seed in 0u64..1000) {
        let p = GenParams { pattern, workflows, agents_per_workflow: agents, ctx_tokens: ctx, dyn_tokens, seed, ..GenParams::default() };
        let t = gen_trace(&p).unwrap();
        prop_assert_eq!(t.records.len(), workflows * agents);
        let back = Trace::parse(&t.to_jsonl()).unwrap();
        prop_assert_eq!(back.to_jsonl(), t.to_jsonl());
    }
}

#[test]
fn measured_ratio_tracks_the_formula_for_block_aligned_contexts() {
    for (agents, ctx) in [(2, 32), (4, 64), (8, 128)] {
        let a = memory_accounting(agents, ctx).unwrap();
        assert!((a.measured_ratio - a.predicted_ratio).abs() < 1e-12, "{a:?}");
    }
}
