//! `crag` — command-line driver for the continual-RAG engine.
//!
//! Subcommands:
//! - `run`   — drive a full scheduled scenario from a JSON config; writes
//!             metrics.csv, ticks.ldj, model.crag-model, corpus.crag-corpus.
//! - `solve` — run one of the nested/bilevel/trilevel/moe solver demos;
//!             writes a trace file and prints the final objective.
//! - `agent` — run the Level-1/2/3 agent evaluation suite.
//!
//! Exit codes: 0 success, 1 config/case-file error (the message names the
//! offending key), 2 runtime error or failed suite, 3 empty-corpus agent run.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crag_core::agent::{
    run_level_suite, shipped_suite, GeneratorBackend, TaskCase, ToolRegistry,
};
use crag_core::corpus::{Corpus, CorpusConfig};
use crag_core::fusion::GeneratorParams;
use crag_core::linalg::Matrix;
use crag_core::moe::{
    bilevel_train_moe, gate, ExpertParams, GatingParams, MoeSolverConfig, RoutingConfig,
};
use crag_core::multilevel::{
    solve_nested, solve_trilevel, DomainWeights, DroSense, Level, ModelState, MultilevelError,
    NestedProblem, SolverConfig, SolverPlan, WeightPolicy,
};
use crag_core::retrieval::RetrieverParams;
use crag_core::scheduler::{self, SchedulerConfig, TimescaleConfig};
use crag_core::stream::{StreamConfig, StreamSim};
use crag_core::metrics;

#[derive(Parser)]
#[command(name = "crag", version, about = "continual retrieval-augmented generation engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full scheduled scenario from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a solver demo and write its trace.
    Solve {
        kind: SolveKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the agent level suite.
    Agent {
        /// JSON case file; defaults to the shipped suite.
        #[arg(long)]
        cases: Option<PathBuf>,
        /// Evaluate against an empty corpus (expected Level-1 rate 0.0).
        #[arg(long)]
        empty_corpus: bool,
        /// Remote generation endpoint (overrides CRAG_ENDPOINT).
        #[arg(long)]
        endpoint_override: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveKind {
    Nested,
    Bilevel,
    Trilevel,
    Moe,
}

/// Everything a scenario run needs, in one JSON file. `seed` is mandatory:
/// runs must be reproducible with no wall-clock entropy.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioConfig {
    seed: Option<u64>,
    #[serde(default = "default_dim")]
    dim: usize,
    #[serde(default = "default_output_dim")]
    output_dim: usize,
    #[serde(default = "default_hidden_dim")]
    hidden_dim: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    /// Stream definition; defaults to the standard three-domain stream.
    #[serde(default)]
    stream: Option<StreamConfig>,
    #[serde(default)]
    corpus: Option<CorpusConfig>,
    #[serde(default)]
    timescale: TimescaleConfig,
    #[serde(default)]
    scheduler: SchedulerConfig,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn default_dim() -> usize {
    8
}
fn default_output_dim() -> usize {
    2
}
fn default_hidden_dim() -> usize {
    4
}
fn default_batch_size() -> usize {
    8
}

/// Solver-demo knobs shared by all `solve` kinds.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveDemoConfig {
    seed: Option<u64>,
    #[serde(default)]
    solver: SolverConfig,
    /// KL-ball radius for the trilevel demo's domain weights.
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_sense")]
    sense: DroSense,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_sense() -> DroSense {
    DroSense::WorstCase
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run { config, out } => cmd_run(&config, out.as_deref()),
        Cmd::Solve { kind, config, out } => cmd_solve(kind, &config, out.as_deref()),
        Cmd::Agent { cases, empty_corpus, endpoint_override } => {
            cmd_agent(cases.as_deref(), empty_corpus, endpoint_override)
        }
    };
    match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {msg}");
    ExitCode::from(1)
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let raw = fs::read_to_string(path).map_err(|e| format!("cannot read {path:?}: {e}"))?;
    serde_json::from_str(&raw).map_err(|e| e.to_string())
}

fn default_corpus_config(dim: usize) -> CorpusConfig {
    CorpusConfig {
        dim,
        half_life: 50.0,
        redundancy_threshold: 0.98,
        relevance_floor: 0.01,
        capacity: 500,
    }
}

fn fresh_state(dim: usize, hidden: usize, output_dim: usize, seed: u64) -> ModelState {
    ModelState {
        retriever: RetrieverParams { alpha: 0.7, ..RetrieverParams::identity(dim) },
        generator: GeneratorParams::seeded(2 * dim, hidden, output_dim, seed),
        gating: GatingParams { wg: Matrix::zeros(1, dim), top_k: 1 },
        experts: ExpertParams::seeded(1, dim, output_dim, seed),
        weights: DomainWeights::uniform(1, 0.0, DroSense::WorstCase),
        version: 0,
    }
}

fn cmd_run(config_path: &Path, out_flag: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cfg: ScenarioConfig = match load_json(config_path) {
        Ok(c) => c,
        Err(e) => return Ok(config_error(e)),
    };
    let Some(seed) = cfg.seed else {
        return Ok(config_error("missing key \"seed\""));
    };
    let out_dir = match out_flag.map(Path::to_path_buf).or(cfg.out_dir.clone()) {
        Some(d) => d,
        None => return Ok(config_error("missing key \"out_dir\" (or pass --out)")),
    };
    let corpus_cfg = cfg.corpus.clone().unwrap_or_else(|| default_corpus_config(cfg.dim));
    if corpus_cfg.dim != cfg.dim {
        return Ok(config_error("key \"corpus.dim\" disagrees with key \"dim\""));
    }
    let mut corpus = match Corpus::new(corpus_cfg) {
        Ok(c) => c,
        Err(e) => return Ok(config_error(format!("key \"corpus\": {e}"))),
    };
    let stream = cfg.stream.clone().unwrap_or_else(|| {
        StreamConfig::default_domains(cfg.dim, cfg.output_dim, cfg.batch_size, seed)
    });
    if stream.dim != cfg.dim || stream.output_dim != cfg.output_dim {
        return Ok(config_error("key \"stream\" dims disagree with keys \"dim\"/\"output_dim\""));
    }
    if let Err(e) = cfg.timescale.validate() {
        return Ok(config_error(format!("key \"timescale\": {e}")));
    }
    let mut state = fresh_state(cfg.dim, cfg.hidden_dim, cfg.output_dim, seed);

    let report = scheduler::run(&stream, &mut corpus, &mut state, &cfg.timescale, &cfg.scheduler, seed)?;

    fs::create_dir_all(&out_dir)?;
    let mut csv = fs::File::create(out_dir.join("metrics.csv"))?;
    metrics::write_metrics_csv(&mut csv, &report.windows)?;
    let mut ldj = fs::File::create(out_dir.join("ticks.ldj"))?;
    for tick in &report.ticks {
        writeln!(ldj, "{}", serde_json::to_string(tick)?)?;
    }
    state.save(&out_dir.join("model.crag-model"))?;
    corpus.snapshot(cfg.timescale.total_ticks).save(&out_dir.join("corpus.crag-corpus"))?;
    println!(
        "run complete: {} ticks, {} metric windows, model version {}",
        report.ticks.len(),
        report.windows.len(),
        state.version
    );
    Ok(ExitCode::SUCCESS)
}

/// Deterministic two-domain toy problem shared by the bilevel and trilevel
/// demos, built from the standard stream so the data needs no extra config.
fn demo_rag_setup(
    seed: u64,
) -> (Corpus, Vec<Vec<crag_core::stream::Sample>>, Vec<crag_core::stream::Sample>) {
    let dim = 8;
    let stream_cfg = StreamConfig::default_domains(dim, 2, 8, seed);
    let mut sim_cfg = stream_cfg.clone();
    sim_cfg.domains.truncate(2);
    sim_cfg.mixture = vec![0.5, 0.5];
    let mut sim = StreamSim::new(sim_cfg);
    let mut corpus = Corpus::new(default_corpus_config(dim)).expect("static config");
    sim.plant_knowledge(&mut corpus, 0);
    let split = |t: u64| {
        let batch = sim.next_batch(t);
        let mut by_domain: Vec<Vec<crag_core::stream::Sample>> = vec![Vec::new(), Vec::new()];
        for s in batch.samples {
            let idx = usize::from(s.domain != sim.config().domains[0].name);
            by_domain[idx].push(s);
        }
        by_domain
    };
    let domains = split(0);
    let val: Vec<_> = split(1).into_iter().flatten().collect();
    (corpus, domains, val)
}

fn write_trace<T: serde::Serialize>(path: &Path, trace: &[T]) -> anyhow::Result<()> {
    let mut f = fs::File::create(path)?;
    for step in trace {
        writeln!(f, "{}", serde_json::to_string(step)?)?;
    }
    Ok(())
}

fn cmd_solve(kind: SolveKind, config_path: &Path, out_flag: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cfg: SolveDemoConfig = match load_json(config_path) {
        Ok(c) => c,
        Err(e) => return Ok(config_error(e)),
    };
    let Some(seed) = cfg.seed else {
        return Ok(config_error("missing key \"seed\""));
    };
    let out_dir = match out_flag.map(Path::to_path_buf).or(cfg.out_dir.clone()) {
        Some(d) => d,
        None => return Ok(config_error("missing key \"out_dir\" (or pass --out)")),
    };
    fs::create_dir_all(&out_dir)?;
    let mut solver = cfg.solver.clone();
    solver.seed = seed;

    let divergence_exit = |e: anyhow::Error| -> anyhow::Result<ExitCode> {
        if e.downcast_ref::<MultilevelError>()
            .map_or(false, |m| matches!(m, MultilevelError::Divergence(_)))
        {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
        Err(e)
    };

    match kind {
        SolveKind::Nested => {
            // Single-level quadratic with optimum x = 3.
            let problem = NestedProblem {
                levels: vec![Level {
                    dim: 1,
                    init: vec![0.0],
                    objective: Box::new(|tape, x| {
                        let d = x[0][0] - tape.constant(3.0);
                        d.square()
                    }),
                    projection: None,
                }],
            };
            let mut s = solver.clone();
            s.lr.truncate(1);
            // Enough steps for the default config to reach the optimum to
            // well under the printed precision.
            s.outer_steps = s.outer_steps.max(120);
            let (x, trace) = match solve_nested(&problem, &s) {
                Ok(r) => r,
                Err(e) => return divergence_exit(e.into()),
            };
            write_trace(&out_dir.join("nested-trace.ldj"), &trace)?;
            let final_obj = (x[0][0] - 3.0).powi(2);
            println!("optimum {:.4}", x[0][0]);
            println!("final objective {final_obj:.6}");
        }
        SolveKind::Bilevel | SolveKind::Trilevel => {
            let (corpus, domains, val) = demo_rag_setup(seed);
            let state = fresh_state(8, 4, 2, seed);
            // The bilevel demo is the uniform-weight special case of the
            // trilevel loop on the same two-domain data, so an epsilon = 0
            // trilevel run reproduces its trace exactly.
            let policy = match kind {
                SolveKind::Bilevel => {
                    WeightPolicy::Fixed(vec![1.0 / domains.len() as f64; domains.len()])
                }
                _ => WeightPolicy::Dro { epsilon: cfg.epsilon, sense: cfg.sense },
            };
            let result = solve_trilevel(
                &domains,
                &val,
                &corpus,
                &Default::default(),
                3,
                &state,
                &solver,
                0,
                &policy,
                SolverPlan { train_retriever: true, train_generator: true, train_weights: true },
            );
            let (_, _, w, trace) = match result {
                Ok(r) => r,
                Err(e) => return divergence_exit(e.into()),
            };
            let name = match kind {
                SolveKind::Bilevel => "bilevel-trace.ldj",
                _ => "trilevel-trace.ldj",
            };
            write_trace(&out_dir.join(name), &trace)?;
            let final_val = trace.last().map_or(f64::NAN, |s| s.val_loss);
            println!("final objective {final_val:.6}");
            println!(
                "domain weights [{}]",
                w.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")
            );
        }
        SolveKind::Moe => {
            // Two antipodal clusters with distinct linear targets: the gate
            // should learn to route each cluster to its own expert.
            let dim = 2;
            let n_experts = 2;
            let mut data = Vec::new();
            for i in 0..60 {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let jitter = 0.05 * ((i as f64 * 0.7).sin());
                let x = vec![sign * 1.0 + jitter, jitter];
                let y = if sign > 0.0 {
                    vec![2.0 * x[0] + x[1], x[0]]
                } else {
                    vec![-x[0] + x[1], 3.0 * x[1] - x[0]]
                };
                data.push((x, y));
            }
            let mut wg = Matrix::zeros(n_experts, dim);
            for (idx, v) in wg.data.iter_mut().enumerate() {
                *v = 0.05 * ((seed as f64 + 1.0) * (idx as f64 + 1.0)).sin();
            }
            let gating0 = GatingParams { wg, top_k: 1 };
            let experts0 = ExpertParams::seeded(n_experts, dim, 2, seed);
            let routing = RoutingConfig { entropy_coef: 0.0, balance_coef: 0.1, sparsity_coef: 0.0 };
            let msolver = MoeSolverConfig {
                outer_steps: 120,
                inner_steps: 5,
                lr_inner: 0.1,
                lr_outer: 0.2,
                holdout_frac: 0.25,
            };
            let (gating, _, trace) = match bilevel_train_moe(&data, &gating0, &experts0, &routing, &msolver) {
                Ok(r) => r,
                Err(e) => {
                    if matches!(e, crag_core::moe::MoeError::Divergence(_)) {
                        eprintln!("error: {e}");
                        return Ok(ExitCode::from(2));
                    }
                    return Err(e.into());
                }
            };
            write_trace(&out_dir.join("moe-trace.ldj"), &trace)?;
            // Routing purity: best cluster-to-expert assignment accuracy.
            let mut counts = [[0usize; 2]; 2];
            for (x, _) in &data {
                let cluster = usize::from(x[0] < 0.0);
                let g = gate(x, &gating);
                let expert = g
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                counts[cluster][expert] += 1;
            }
            let n = data.len() as f64;
            let purity = f64::max(
                (counts[0][0] + counts[1][1]) as f64 / n,
                (counts[0][1] + counts[1][0]) as f64 / n,
            );
            let final_obj = trace.last().map_or(f64::NAN, |s| s.upper_loss);
            println!("final objective {final_obj:.6}");
            println!("routing purity {purity:.4}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_agent(
    cases_path: Option<&Path>,
    empty_corpus: bool,
    endpoint_override: Option<String>,
) -> anyhow::Result<ExitCode> {
    let registry = ToolRegistry::standard();
    let dim = 64;
    let (mut corpus, cases) = match cases_path {
        Some(path) => {
            let cases: Vec<TaskCase> = match load_json(path) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("case file error: {e}");
                    return Ok(ExitCode::from(1));
                }
            };
            let (corpus, _) = shipped_suite(dim, &registry);
            (corpus, cases)
        }
        None => shipped_suite(dim, &registry),
    };
    if empty_corpus {
        corpus = Corpus::new(default_corpus_config(dim))?;
    }
    let endpoint = endpoint_override.or_else(|| std::env::var("CRAG_ENDPOINT").ok());
    let backend = match endpoint {
        Some(endpoint) => GeneratorBackend::RemoteText { endpoint, timeout: Duration::from_secs(30) },
        None => GeneratorBackend::MockRules,
    };
    let retriever = RetrieverParams { alpha: 0.8, ..RetrieverParams::identity(dim) };
    let report = run_level_suite(&cases, &mut corpus, &retriever, &registry, &backend, 12)?;
    for level in 1..=3u8 {
        let total = report.total.get(&level).copied().unwrap_or(0);
        let passed = report.passed.get(&level).copied().unwrap_or(0);
        println!("level {level}: {passed}/{total} pass rate {:.1}", report.rate(level));
    }
    if empty_corpus {
        return Ok(ExitCode::from(3));
    }
    Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
