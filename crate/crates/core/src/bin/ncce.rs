use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use ncce::adapters::{evaluate_pairs, CachedEvaluator};
use ncce::catalog::{load_instances, save_catalog, write_jsonl, Split};
use ncce::config::{Backends, RunConfig};
use ncce::model::{self, TrainConfig};
use ncce::orchestrator::{
    assignments_csv, initialize, reward_matrix, run_co_evolution, sample_pairs, score_modes,
    DensityConfig, ModeScore, Pipeline, RoundReport, RoundState, StateStore, TrainSummary,
};
use ncce::routing::{route_mode, RoutingInputs, RoutingMode};
use ncce::seed::derive_seed;
use ncce::simulate::{simulate, write_synthetic_inputs, SimulationConfig};
use ncce::{Error, Result};

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(
    name = "ncce",
    version,
    about = "Instance-wise context routing with a co-evolving strategy catalog"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Run configuration (TOML). Defaults to <state>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// State directory; overrides paths.state.
    #[arg(long, global = true)]
    state: Option<PathBuf>,
    /// Replace existing state instead of refusing.
    #[arg(long, global = true)]
    force: bool,
    /// Cap on concurrent evaluator calls.
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster, build anchors and evaluate the seed interactions (round 0).
    Init(InitArgs),
    /// Evaluate the current catalog on a split without touching the interactions.
    Evaluate(EvaluateArgs),
    /// Train the preference model on the latest round's interactions.
    Train(TrainArgs),
    /// Run co-evolution rounds.
    Evolve(EvolveArgs),
    /// Route a split under one mode with the latest trained model.
    Route(RouteArgs),
    /// Score every mode and export the report, assignments and curves.
    Report(ReportArgs),
    /// End-to-end run on a generated planted-preference environment.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Candidate strategies for anchor selection.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Planted environment for the synthetic evaluator.
    #[arg(long)]
    env: Option<PathBuf>,
    /// Number of clusters.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    density: Option<f64>,
    /// Also write the anchor catalog here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, default_value = "dev", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig document (TOML); replaces the [train] table.
    #[arg(long)]
    train_config: Option<PathBuf>,
}

#[derive(Args)]
struct EvolveArgs {
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// EvolutionConfig document (TOML); replaces the [evolution] table.
    #[arg(long)]
    evolution_config: Option<PathBuf>,
    /// Continue from the last persisted round, optionally of another state dir.
    #[arg(long, value_name = "STATE_DIR", num_args = 0..=1)]
    resume: Option<Option<PathBuf>>,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: RoutingMode,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Seed for random routing.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args)]
struct SimulateArgs {
    /// SimulationConfig document (TOML).
    #[arg(long)]
    sim_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Only write instances.jsonl, pool.jsonl and env.json into this directory.
    #[arg(long)]
    emit_inputs: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<RoutingMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();
    let result = match &cli.command {
        Command::Init(a) => cmd_init(&cli.global, a),
        Command::Evaluate(a) => cmd_evaluate(&cli.global, a),
        Command::Train(a) => cmd_train(&cli.global, a),
        Command::Evolve(a) => cmd_evolve(&cli.global, a),
        Command::Route(a) => cmd_route(&cli.global, a),
        Command::Report(a) => cmd_report(&cli.global, a),
        Command::Simulate(a) => cmd_simulate(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 usage or validation, 3 state conflict, 4 round failure, 5 missing
/// artifact, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    let mut cur = e;
    loop {
        match cur {
            Error::RoundFailed { .. } => return 4,
            Error::Stage { source, .. } => cur = source,
            _ => break,
        }
    }
    match e.root() {
        Error::InvalidConfig(_) | Error::InvalidK { .. } => 2,
        Error::StateConflict(_) => 3,
        Error::MissingArtifact { .. } => 5,
        _ => 1,
    }
}

/// `--config`, else the state directory's persisted config (required by
/// commands that read state), else defaults; then the global flags.
fn run_config(g: &Global, from_state: bool) -> Result<RunConfig> {
    let persisted = g
        .state
        .clone()
        .unwrap_or_else(|| PathBuf::from("state"))
        .join(CONFIG_FILE);
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None if from_state && persisted.is_file() => RunConfig::load(&persisted)?,
        None if from_state => {
            return Err(Error::MissingArtifact {
                path: persisted,
                what: "initialized state directory (run `ncce init` or pass --config)",
            })
        }
        None => RunConfig::default(),
    };
    if let Some(s) = &g.state {
        cfg.paths.state = s.clone();
    }
    if let Some(m) = g.max_in_flight {
        cfg.max_in_flight = m;
    }
    Ok(cfg)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("reports serialize")
    );
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(
        path,
        &serde_json::to_string_pretty(value).expect("reports serialize"),
    )
}

fn persist_config(cfg: &RunConfig, store: &StateStore) -> Result<()> {
    let mut c = cfg.clone();
    c.absolutize()?;
    c.save(&store.path(CONFIG_FILE))
}

struct Opened {
    store: StateStore,
    state: RoundState,
    pipeline: Pipeline,
}

fn open_latest(cfg: &RunConfig, backends: &Backends) -> Result<Opened> {
    let store = StateStore::open(&cfg.paths.state)?;
    let t = store
        .latest_round()?
        .ok_or_else(|| Error::MissingArtifact {
            path: store.round_dir(0),
            what: "round snapshot",
        })?;
    let state = store.load_round(t, cfg.seed)?;
    if let Some(m) = &state.model {
        if m.embedding_dim() != backends.provider.dimension() {
            return Err(Error::DimensionMismatch {
                what: "checkpoint input",
                expected: backends.provider.dimension(),
                actual: m.embedding_dim(),
            });
        }
    }
    let pipeline = store.load_pipeline(backends.provider.as_ref(), &state.catalog)?;
    Ok(Opened {
        store,
        state,
        pipeline,
    })
}

fn trained_model(o: &Opened) -> Result<&model::PreferenceModel> {
    o.state
        .model
        .as_ref()
        .ok_or_else(|| Error::MissingArtifact {
            path: o.store.round_dir(o.state.round).join("model.ckpt"),
            what: "trained model checkpoint (run `ncce train` or `ncce evolve`)",
        })
}

fn split_instances(
    pipeline: &Pipeline,
    split: Split,
) -> Result<Vec<&ncce::catalog::InstanceRecord>> {
    let v = pipeline.split(split);
    if v.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "split `{split}` has no instances"
        )));
    }
    Ok(v)
}

#[derive(Serialize)]
struct InitSummary {
    round: u32,
    catalog: Vec<String>,
    interactions: usize,
    evaluator_calls: u64,
}

fn cmd_init(g: &Global, a: &InitArgs) -> Result<()> {
    let mut cfg = run_config(g, false)?;
    if let Some(p) = &a.dataset {
        cfg.paths.dataset = Some(p.clone());
    }
    if let Some(p) = &a.pool {
        cfg.paths.pool = Some(p.clone());
    }
    if let Some(p) = &a.env {
        cfg.paths.env = Some(p.clone());
    }
    if let Some(k) = a.k {
        cfg.clusters = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.density {
        cfg.density = d;
    }
    cfg.validate_init()?;
    let backends = cfg.backends()?;
    let dataset = load_instances(cfg.paths.dataset.as_deref().expect("validated"))?;

    let store = StateStore::create(&cfg.paths.state, g.force)?;
    let evaluator = CachedEvaluator::new(backends.evaluator.as_ref());
    let (pipeline, state) = initialize(
        dataset,
        cfg.clusters,
        cfg.density,
        &backends.adapters(&evaluator),
        cfg.seed,
    )?;
    store.save_pipeline(&pipeline)?;
    store.save_round(&state)?;
    persist_config(&cfg, &store)?;
    if let Some(out) = &a.out {
        save_catalog(&state.catalog, out)?;
    }
    print_json(&InitSummary {
        round: 0,
        catalog: state.catalog.iter().map(|p| p.id.clone()).collect(),
        interactions: state.interactions.len(),
        evaluator_calls: evaluator.calls(),
    });
    Ok(())
}

#[derive(Serialize)]
struct ContextScore {
    pairs: usize,
    mean_reward: f64,
}

fn cmd_evaluate(g: &Global, a: &EvaluateArgs) -> Result<()> {
    let cfg = run_config(g, true)?;
    cfg.validate()?;
    DensityConfig {
        density: a.density,
        seed: 0,
    }
    .validate()?;
    let backends = cfg.backends()?;
    let o = open_latest(&cfg, &backends)?;
    let instances = split_instances(&o.pipeline, a.split)?;
    let contexts: Vec<_> = o.state.catalog.iter().collect();
    let pairs = sample_pairs(
        &instances,
        &contexts,
        &DensityConfig {
            density: a.density,
            seed: derive_seed(cfg.seed, &format!("evaluate/{}", a.split)),
        },
    );
    let records = evaluate_pairs(
        backends.evaluator.as_ref(),
        &pairs,
        o.state.round,
        cfg.max_in_flight,
    )?;
    write_jsonl(
        &o.store.path(&format!("evaluations/{}.jsonl", a.split)),
        &records,
    )?;

    let mut sums: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in &records {
        let e = sums.entry(r.context_id.as_str()).or_default();
        e.0 += 1;
        e.1 += r.reward;
    }
    let scores: BTreeMap<&str, ContextScore> = sums
        .into_iter()
        .map(|(id, (n, s))| {
            (
                id,
                ContextScore {
                    pairs: n,
                    mean_reward: s / n as f64,
                },
            )
        })
        .collect();
    print_json(&scores);
    Ok(())
}

fn cmd_train(g: &Global, a: &TrainArgs) -> Result<()> {
    let mut cfg = run_config(g, true)?;
    if let Some(p) = &a.train_config {
        cfg.train = read_toml(p)?;
    }
    cfg.validate()?;
    let backends = cfg.backends()?;
    let o = open_latest(&cfg, &backends)?;
    let t = o.state.round;
    let tc = TrainConfig {
        seed: derive_seed(cfg.seed, &format!("train/round-{t}")),
        ..cfg.train.clone()
    };
    let (m, history) = model::train(
        &cfg.shape(),
        &o.state.interactions,
        &o.pipeline.dataset,
        &o.pipeline.table,
        &tc,
    )?;
    o.store.save_model(t, &m, tc.temperature)?;
    let summary = TrainSummary::from(&history);
    o.store
        .write_json(&format!("round_{t}/train.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

#[derive(Serialize)]
struct EvolveReport<'a> {
    rounds: &'a [RoundReport],
    catalog: Vec<String>,
    evaluator_calls: u64,
}

fn cmd_evolve(g: &Global, a: &EvolveArgs) -> Result<()> {
    let resumed;
    let g = match &a.resume {
        Some(Some(dir)) => {
            resumed = Global {
                state: Some(dir.clone()),
                ..g.clone()
            };
            &resumed
        }
        _ => g,
    };
    let resume = a.resume.is_some();
    let mut cfg = run_config(g, true)?;
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    if let Some(d) = a.density {
        cfg.density = d;
    }
    if let Some(p) = &a.train_config {
        cfg.train = read_toml(p)?;
    }
    if let Some(p) = &a.evolution_config {
        cfg.evolution = read_toml(p)?;
    }
    cfg.validate()?;
    let backends = cfg.backends()?;

    let store = StateStore::open(&cfg.paths.state)?;
    let latest = store
        .latest_round()?
        .ok_or_else(|| Error::MissingArtifact {
            path: store.round_dir(0),
            what: "round snapshot",
        })?;
    let (start, prior) = if resume {
        (latest, store.load_reports(latest)?)
    } else {
        if latest > 0 {
            if !g.force {
                return Err(Error::StateConflict(format!(
                    "{} already holds rounds up to {latest}; pass --resume to continue or --force to restart",
                    store.root.display()
                )));
            }
            clear_rounds(&store, latest)?;
        }
        (0, Vec::new())
    };
    let state = store.load_round(start, cfg.seed)?;
    let mut pipeline = store.load_pipeline(backends.provider.as_ref(), &state.catalog)?;
    persist_config(&cfg, &store)?;

    let evaluator = CachedEvaluator::new(backends.evaluator.as_ref());
    tracing::info!(from = start, to = cfg.rounds, resume, "evolving");
    let outcome = run_co_evolution(
        &mut pipeline,
        state,
        &cfg.co_evolution(),
        &backends.adapters(&evaluator),
        Some(&store),
        prior,
    )?;
    let report = EvolveReport {
        rounds: &outcome.rounds,
        catalog: outcome.state.catalog.iter().map(|p| p.id.clone()).collect(),
        evaluator_calls: evaluator.calls(),
    };
    store.write_json("report.json", &report)?;
    print_json(&report);
    Ok(())
}

/// Drops everything past round 0 before a forced restart.
fn clear_rounds(store: &StateStore, latest: u32) -> Result<()> {
    let mut dirs: Vec<PathBuf> = (1..=latest).map(|t| store.round_dir(t)).collect();
    dirs.push(store.path("rounds"));
    for d in dirs.into_iter().filter(|d| d.exists()) {
        fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RouteReport<'a> {
    round: u32,
    split: Split,
    #[serde(flatten)]
    score: &'a ModeScore,
    seed: u64,
    evaluator_calls: u64,
}

fn cmd_route(g: &Global, a: &RouteArgs) -> Result<()> {
    let cfg = run_config(g, true)?;
    cfg.validate()?;
    let backends = cfg.backends()?;
    let o = open_latest(&cfg, &backends)?;
    let m = trained_model(&o)?;
    let instances = split_instances(&o.pipeline, a.split)?;
    let evaluator = CachedEvaluator::new(backends.evaluator.as_ref());
    let rewards = reward_matrix(
        &o.state.interactions,
        &evaluator,
        &instances,
        &o.state.catalog,
        cfg.max_in_flight,
    )?;
    let inputs = RoutingInputs {
        scorer: m,
        catalog: &o.state.catalog,
        table: &o.pipeline.table,
        clusters: &o.pipeline.clusters,
        omega: &o.state.interactions,
        dataset: &o.pipeline.dataset,
    };
    let seed = a
        .seed
        .unwrap_or_else(|| derive_seed(cfg.seed, "route/random"));
    let routed = route_mode(a.mode, &inputs, &instances, &rewards, seed)?;

    let dir = o.store.path(&format!("routes/{}-{}", a.split, a.mode));
    let score = ModeScore::from(&routed);
    let report = RouteReport {
        round: o.state.round,
        split: a.split,
        score: &score,
        seed,
        evaluator_calls: evaluator.calls(),
    };
    write_json(&dir.join("report.json"), &report)?;
    write_file(&dir.join("assignments.csv"), &assignments_csv(&routed))?;
    print_json(&report);
    Ok(())
}

#[derive(Serialize)]
struct FinalReport<'a> {
    round: u32,
    split: Split,
    catalog: Vec<String>,
    scores: Vec<ModeScore>,
    curves: &'a [RoundReport],
    evaluator_calls: u64,
}

fn cmd_report(g: &Global, a: &ReportArgs) -> Result<()> {
    let cfg = run_config(g, true)?;
    cfg.validate()?;
    let backends = cfg.backends()?;
    let o = open_latest(&cfg, &backends)?;
    let m = trained_model(&o)?;
    let instances = split_instances(&o.pipeline, a.split)?;
    let evaluator = CachedEvaluator::new(backends.evaluator.as_ref());
    let rewards = reward_matrix(
        &o.state.interactions,
        &evaluator,
        &instances,
        &o.state.catalog,
        cfg.max_in_flight,
    )?;
    let routed = score_modes(&o.pipeline, &o.state, m, &instances, &rewards)?;
    let curves = o.store.load_reports(o.state.round + 1)?;

    let report = FinalReport {
        round: o.state.round,
        split: a.split,
        catalog: o.state.catalog.iter().map(|p| p.id.clone()).collect(),
        scores: routed.iter().map(ModeScore::from).collect(),
        curves: &curves,
        evaluator_calls: evaluator.calls(),
    };
    o.store.write_json("report.json", &report)?;
    if let Some(full) = routed.iter().find(|r| r.mode == RoutingMode::Full) {
        write_file(&o.store.path("assignments.csv"), &assignments_csv(full))?;
    }
    o.store.write_curves(&curves)?;
    print_json(&report.scores);
    Ok(())
}

fn cmd_simulate(g: &Global, a: &SimulateArgs) -> Result<()> {
    let mut sc: SimulationConfig = match &a.sim_config {
        Some(p) => read_toml(p)?,
        None => SimulationConfig::default(),
    };
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(r) = a.rounds {
        sc.rounds = r;
    }
    if let Some(d) = a.density {
        sc.density = d;
    }
    if let Some(k) = a.clusters {
        sc.clusters = k;
    }
    if let Some(m) = g.max_in_flight {
        sc.max_in_flight = m;
    }
    sc.validate()?;
    if let Some(dir) = &a.emit_inputs {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        return write_synthetic_inputs(&sc, dir);
    }
    let root = g.state.clone().unwrap_or_else(|| PathBuf::from("state"));
    let store = StateStore::create(&root, g.force)?;
    persist_config(&RunConfig::for_simulation(&sc, &root), &store)?;
    let sim = simulate(&sc, Some(&store))?;
    print_json(&sim.report(&sc).test);
    Ok(())
}
