//! `dualkv`: generate agent traces, run them through the serving engine in
//! one or more cache layouts, and run the verification suites.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dualkv::verify::{run_suite, Suite};
use dualkv::workload::{gen_trace, run_trace, write_outputs, GenParams, Pattern, RunConfig, Trace};
use dualkv::EngineMode;

#[derive(Debug, Parser)]
#[command(name = "dualkv", version, about = "Multi-adapter agent serving simulator with a disaggregated KV cache")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic JSONL workflow trace.
    GenTrace {
        #[arg(long, default_value = "react")]
        pattern: Pattern,
        #[arg(long, default_value_t = 8)]
        workflows: usize,
        /// Agents per workflow.
        #[arg(long, default_value_t = 4)]
        agents: usize,
        /// Shared context tokens at the root of every workflow.
        #[arg(long, default_value_t = 512)]
        ctx_tokens: usize,
        /// Per-agent tokens (task text or tool response).
        #[arg(long, default_value_t = 100)]
        dyn_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Workflow arrivals per simulated second.
        #[arg(long, default_value_t = 2.0)]
        rate: f64,
        /// Simulated seconds between an agent finishing and its child starting.
        #[arg(long, default_value_t = 0.1)]
        tool_latency: f64,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a trace to completion and write metrics, timelines and a report.
    Run {
        #[arg(long)]
        trace: PathBuf,
        /// Flat TOML config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `unified`, `disaggregated`, `full_reuse`, a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the randomized verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
    },
}

fn parse_modes(s: &str) -> Result<Vec<EngineMode>> {
    if s == "all" {
        return Ok(EngineMode::ALL.to_vec());
    }
    let mut modes = Vec::new();
    for part in s.split(',') {
        let mode: EngineMode = part.trim().parse().map_err(anyhow::Error::msg)?;
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    if modes.is_empty() {
        bail!("no modes given");
    }
    Ok(modes)
}

fn gen(params: GenParams, out: Option<PathBuf>) -> Result<()> {
    let trace = gen_trace(&params)?;
    let text = trace.to_jsonl();
    match out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(trace: PathBuf, config: Option<PathBuf>, mode: &str, out: PathBuf) -> Result<()> {
    let modes = parse_modes(mode)?;
    let config = match config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    let trace = Trace::load(&trace)?;
    let (report, runs) = run_trace(&trace, &config, &modes)?;
    write_outputs(&out, &report, &runs)?;
    for (mode, m) in &report.modes {
        println!(
            "{mode}: {} agents in {:.4}s simulated, {:.3} tasks/s, {:.0} bytes/agent, hit rate {:.3}, peak {} active",
            m.completed_agents, m.sim_time, m.tasks_per_second, m.per_agent_bytes, m.cache_hit_rate, m.peak_active_agents
        );
    }
    if let Some(r) = &report.ratios {
        let show = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        println!(
            "disaggregated/unified: throughput {}, per-agent bytes {}, hit rate {}",
            show(r.throughput),
            show(r.per_agent_bytes),
            show(r.cache_hit_rate)
        );
    }
    Ok(())
}

fn verify(suite: Suite) -> bool {
    let results = run_suite(suite);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    failed == 0
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenTrace { pattern, workflows, agents, ctx_tokens, dyn_tokens, seed, rate, tool_latency, max_new_tokens, out } => {
            let params = GenParams {
                pattern,
                workflows,
                agents_per_workflow: agents,
                ctx_tokens,
                dyn_tokens,
                seed,
                rate,
                tool_latency,
                max_new_tokens,
            };
            gen(params, out)
        }
        Command::Run { trace, config, mode, out } => run(trace, config, &mode, out),
        Command::Verify { suite } => {
            return if verify(suite) { ExitCode::SUCCESS } else { ExitCode::from(2) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
