//! End-to-end offline run on a generated planted-preference environment.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::synthetic::{
    generate, MockReflector, PlantedConfig, SyntheticEnv, SyntheticEvaluator,
};
use crate::adapters::CachedEvaluator;
use crate::catalog::{save_catalog, save_instances, Split};
use crate::clustering::AnchorGenerator;
use crate::embedding::HashFeatures;
use crate::error::Result;
use crate::evolution::EvolutionConfig;
use crate::model::{ModelShape, TrainConfig};
use crate::orchestrator::{
    initialize, reward_matrix, run_co_evolution, score_modes, Adapters, CoEvolutionConfig,
    ModeScore, Outcome, Pipeline, RoundReport, StateStore,
};
use crate::routing::RoutingReport;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub seed: u64,
    pub clusters: usize,
    pub rounds: u32,
    pub density: f64,
    pub max_in_flight: usize,
    pub env: PlantedConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub evolution: EvolutionConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clusters: 4,
            rounds: 5,
            density: 1.0,
            max_in_flight: 4,
            env: PlantedConfig::default(),
            model: ModelShape {
                embedding_dim: 256,
                latent_dim: 32,
                hidden: vec![64, 32],
            },
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 4,
                dropout: 0.05,
                weight_decay: 1e-4,
                max_epochs: 150,
                patience: 20,
                ..TrainConfig::default()
            },
            evolution: EvolutionConfig::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.evolution.validate()?;
        self.model.validate()?;
        crate::orchestrator::DensityConfig {
            density: self.density,
            seed: 0,
        }
        .validate()
    }
}

pub struct Simulation {
    pub env: Arc<SyntheticEnv>,
    pub pipeline: Pipeline,
    pub outcome: Outcome,
    pub test: Vec<RoutingReport>,
    pub evaluator_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub rounds: u32,
    pub catalog: Vec<String>,
    pub curves: Vec<RoundReport>,
    pub test: Vec<ModeScore>,
    pub evaluator_calls: u64,
}

impl Simulation {
    pub fn report(&self, cfg: &SimulationConfig) -> SimulationReport {
        SimulationReport {
            seed: cfg.seed,
            rounds: cfg.rounds,
            catalog: self
                .outcome
                .state
                .catalog
                .iter()
                .map(|p| p.id.clone())
                .collect(),
            curves: self.outcome.rounds.clone(),
            test: self.test.iter().map(ModeScore::from).collect(),
            evaluator_calls: self.evaluator_calls,
        }
    }

    pub fn test_accuracy(&self, mode: crate::routing::RoutingMode) -> f64 {
        self.test
            .iter()
            .find(|r| r.mode == mode)
            .map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn test_entropy(&self, mode: crate::routing::RoutingMode) -> f64 {
        self.test
            .iter()
            .find(|r| r.mode == mode)
            .map_or(f64::NAN, |r| r.entropy)
    }
}

/// Generates the environment, initializes, co-evolves for `cfg.rounds`
/// rounds and routes the test split under every mode. With `store`, the
/// state tree is written as it goes, including the environment itself.
pub fn simulate(cfg: &SimulationConfig, store: Option<&StateStore>) -> Result<Simulation> {
    cfg.validate()?;
    let planted = generate(&cfg.env, derive_seed(cfg.seed, "synthetic/env"))?;
    let env = Arc::new(planted.env);
    let provider = HashFeatures::new(
        cfg.model.embedding_dim,
        derive_seed(cfg.seed, "embedding/hash"),
    );
    let base = SyntheticEvaluator { env: env.clone() };
    let evaluator = CachedEvaluator::new(&base);
    let reflector = MockReflector { env: env.clone() };
    let anchors = AnchorGenerator::PoolSelect {
        pool: planted.pool.clone(),
    };
    let adapters = Adapters {
        provider: &provider,
        evaluator: &evaluator,
        reflector: &reflector,
        anchors: &anchors,
        max_in_flight: cfg.max_in_flight,
    };

    let (mut pipeline, state) = initialize(
        planted.instances,
        cfg.clusters,
        cfg.density,
        &adapters,
        cfg.seed,
    )?;
    if let Some(s) = store {
        env.save(&s.path("env.json"))?;
        save_catalog(&planted.pool, &s.path("pool.jsonl"))?;
        s.save_pipeline(&pipeline)?;
        s.save_round(&state)?;
    }
    let co = CoEvolutionConfig {
        rounds: cfg.rounds,
        density: cfg.density,
        shape: cfg.model.clone(),
        train: cfg.train.clone(),
        evolution: cfg.evolution.clone(),
    };
    let outcome = run_co_evolution(&mut pipeline, state, &co, &adapters, store, Vec::new())?;
    let test = test_reports(&pipeline, &outcome, &evaluator, cfg.max_in_flight)?;
    let sim = Simulation {
        env,
        pipeline,
        outcome,
        test,
        evaluator_calls: evaluator.calls(),
    };
    if let Some(s) = store {
        s.write_json("report.json", &sim.report(cfg))?;
        if let Some(full) = sim
            .test
            .iter()
            .find(|r| r.mode == crate::routing::RoutingMode::Full)
        {
            let p = s.path("assignments.csv");
            std::fs::write(&p, crate::orchestrator::assignments_csv(full))
                .map_err(|e| crate::Error::io(&p, e))?;
        }
    }
    Ok(sim)
}

/// Test-split routing reports for every mode under the final model.
pub fn test_reports(
    pipeline: &Pipeline,
    outcome: &Outcome,
    evaluator: &dyn crate::adapters::Evaluator,
    max_in_flight: usize,
) -> Result<Vec<RoutingReport>> {
    let test = pipeline.split(Split::Test);
    if test.is_empty() {
        return Ok(Vec::new());
    }
    let rewards = reward_matrix(
        &outcome.state.interactions,
        evaluator,
        &test,
        &outcome.state.catalog,
        max_in_flight,
    )?;
    score_modes(pipeline, &outcome.state, &outcome.model, &test, &rewards)
}

/// Writes the instances and pool files a synthetic `init` expects.
pub fn write_synthetic_inputs(cfg: &SimulationConfig, dir: &std::path::Path) -> Result<()> {
    let planted = generate(&cfg.env, derive_seed(cfg.seed, "synthetic/env"))?;
    save_instances(&planted.instances, &dir.join("instances.jsonl"))?;
    save_catalog(&planted.pool, &dir.join("pool.jsonl"))?;
    planted.env.save(&dir.join("env.json"))
}
