//! Run configuration: one TOML document, persisted into the state directory,
//! with command-line flags applied on top.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::adapters::llm::{ChatClient, LlmClientConfig, LlmEvaluator, LlmReflector};
use crate::adapters::synthetic::{
    DigestReflector, MockReflector, SyntheticEnv, SyntheticEvaluator,
};
use crate::adapters::{Evaluator, Reflector};
use crate::catalog::load_catalog;
use crate::clustering::AnchorGenerator;
use crate::embedding::{
    EmbeddingProvider, ExternalEncoder, ExternalEncoderConfig, HashFeatures, DEFAULT_DIMENSION,
};
use crate::error::{Error, Result};
use crate::evolution::EvolutionConfig;
use crate::model::{ModelShape, TrainConfig};
use crate::orchestrator::{Adapters, CoEvolutionConfig, DensityConfig};
use crate::seed::derive_seed;
use crate::simulate::SimulationConfig;
use crate::transport::UreqTransport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub clusters: usize,
    pub rounds: u32,
    pub density: f64,
    pub max_in_flight: usize,
    pub paths: Paths,
    pub model: ModelLayers,
    pub train: TrainConfig,
    pub evolution: EvolutionConfig,
    pub embedding: EmbeddingSelection,
    pub evaluator: EvaluatorSelection,
    pub reflector: ReflectorSelection,
    pub anchors: AnchorSelection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clusters: 4,
            rounds: 5,
            density: 1.0,
            max_in_flight: 4,
            paths: Paths::default(),
            model: ModelLayers::default(),
            train: TrainConfig::default(),
            evolution: EvolutionConfig::default(),
            embedding: EmbeddingSelection::default(),
            evaluator: EvaluatorSelection::Synthetic,
            reflector: ReflectorSelection::Mock,
            anchors: AnchorSelection::Pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input instances (JSONL).
    pub dataset: Option<PathBuf>,
    /// Candidate strategies for pool anchor selection (JSONL).
    pub pool: Option<PathBuf>,
    pub state: PathBuf,
    /// Planted environment for the synthetic evaluator and mock reflector.
    pub env: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: None,
            pool: None,
            state: PathBuf::from("state"),
            env: None,
        }
    }
}

/// Model shape minus the input dimension, which comes from the embedder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelLayers {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelLayers {
    fn default() -> Self {
        let s = ModelShape::default();
        Self {
            latent_dim: s.latent_dim,
            hidden: s.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSelection {
    Hash {
        #[serde(default = "default_dimension")]
        dimension: usize,
        /// Hash seed; derived from the global seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    External(ExternalEncoderConfig),
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for EmbeddingSelection {
    fn default() -> Self {
        EmbeddingSelection::Hash {
            dimension: DEFAULT_DIMENSION,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSelection {
    Synthetic,
    Llm(LlmClientConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReflectorSelection {
    Mock,
    Digest,
    /// Reflection model; task answers for the feedback come from the LLM
    /// evaluator's client.
    Llm {
        #[serde(default)]
        client: LlmClientConfig,
        #[serde(default = "default_tag_attempts")]
        tag_attempts: u32,
    },
}

fn default_tag_attempts() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnchorSelection {
    Pool,
    Tool { command: Vec<String> },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))?;
        cfg.paths.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks every value and every path the run will read. Nothing is
    /// written and no backend is contacted.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if i64::try_from(self.seed).is_err() {
            return bad(format!(
                "seed {} does not fit in a signed 64-bit integer",
                self.seed
            ));
        }
        if self.clusters == 0 {
            return bad("clusters must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        DensityConfig {
            density: self.density,
            seed: 0,
        }
        .validate()?;
        self.train.validate()?;
        self.evolution.validate()?;
        self.shape().validate()?;
        match &self.embedding {
            EmbeddingSelection::Hash { dimension: 0, .. } => {
                return bad("embedding dimension must be positive".into())
            }
            EmbeddingSelection::External(c) if c.dimension == 0 || c.endpoint.is_empty() => {
                return bad("external embedding needs an endpoint and a positive dimension".into())
            }
            _ => {}
        }
        if let EvaluatorSelection::Llm(c) = &self.evaluator {
            c.validate()?;
        }
        if let ReflectorSelection::Llm { client, .. } = &self.reflector {
            client.validate()?;
            if !matches!(self.evaluator, EvaluatorSelection::Llm(_)) {
                return bad("the llm reflector needs an llm evaluator for the task answers".into());
            }
        }
        if let AnchorSelection::Tool { command } = &self.anchors {
            if command.is_empty() {
                return bad("anchor tool command is empty".into());
            }
        }
        if self.uses_env() {
            require_file(
                self.paths.env.as_deref(),
                "paths.env",
                "the synthetic evaluator and mock reflector",
            )?;
        }
        Ok(())
    }

    /// Validation for `init`, which also reads the dataset and the pool.
    pub fn validate_init(&self) -> Result<()> {
        self.validate()?;
        require_file(self.paths.dataset.as_deref(), "paths.dataset", "init")?;
        if matches!(self.anchors, AnchorSelection::Pool) {
            require_file(
                self.paths.pool.as_deref(),
                "paths.pool",
                "pool anchor selection",
            )?;
        }
        Ok(())
    }

    /// The run configuration equivalent to a simulation whose inputs were
    /// written into `state`, so later commands can operate on its state tree.
    pub fn for_simulation(sim: &SimulationConfig, state: &Path) -> Self {
        Self {
            seed: sim.seed,
            clusters: sim.clusters,
            rounds: sim.rounds,
            density: sim.density,
            max_in_flight: sim.max_in_flight,
            paths: Paths {
                dataset: Some(state.join("instances.jsonl")),
                pool: Some(state.join("pool.jsonl")),
                state: state.to_path_buf(),
                env: Some(state.join("env.json")),
            },
            model: ModelLayers {
                latent_dim: sim.model.latent_dim,
                hidden: sim.model.hidden.clone(),
            },
            train: sim.train.clone(),
            evolution: sim.evolution.clone(),
            embedding: EmbeddingSelection::Hash {
                dimension: sim.model.embedding_dim,
                seed: None,
            },
            evaluator: EvaluatorSelection::Synthetic,
            reflector: ReflectorSelection::Mock,
            anchors: AnchorSelection::Pool,
        }
    }

    /// Makes every path absolute against the working directory, so the
    /// config stays valid when persisted elsewhere.
    pub fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
            Ok(())
        };
        for p in [
            &mut self.paths.dataset,
            &mut self.paths.pool,
            &mut self.paths.env,
        ]
        .into_iter()
        .flatten()
        {
            abs(p)?;
        }
        abs(&mut self.paths.state)
    }

    fn uses_env(&self) -> bool {
        matches!(self.evaluator, EvaluatorSelection::Synthetic)
            || matches!(self.reflector, ReflectorSelection::Mock)
    }

    pub fn embedding_dim(&self) -> usize {
        match &self.embedding {
            EmbeddingSelection::Hash { dimension, .. } => *dimension,
            EmbeddingSelection::External(c) => c.dimension,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            embedding_dim: self.embedding_dim(),
            latent_dim: self.model.latent_dim,
            hidden: self.model.hidden.clone(),
        }
    }

    pub fn co_evolution(&self) -> CoEvolutionConfig {
        CoEvolutionConfig {
            rounds: self.rounds,
            density: self.density,
            shape: self.shape(),
            train: self.train.clone(),
            evolution: self.evolution.clone(),
        }
    }

    /// Instantiates the selected backends. API keys are read here.
    pub fn backends(&self) -> Result<Backends> {
        let env = if self.uses_env() {
            let p = self
                .paths
                .env
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("paths.env is not set".into()))?;
            Some(Arc::new(SyntheticEnv::load(p)?))
        } else {
            None
        };
        let provider: Box<dyn EmbeddingProvider> = match &self.embedding {
            EmbeddingSelection::Hash { dimension, seed } => Box::new(HashFeatures::new(
                *dimension,
                seed.unwrap_or_else(|| derive_seed(self.seed, "embedding/hash")),
            )),
            EmbeddingSelection::External(c) => Box::new(ExternalEncoder::new(
                c.clone(),
                Box::new(UreqTransport::new(Duration::from_secs(c.timeout_secs))),
            )?),
        };
        let chat = |c: &LlmClientConfig| {
            ChatClient::new(
                c.clone(),
                Box::new(UreqTransport::new(Duration::from_secs(c.timeout_secs))),
            )
        };
        let evaluator: Box<dyn Evaluator> = match &self.evaluator {
            EvaluatorSelection::Synthetic => Box::new(SyntheticEvaluator {
                env: env.clone().expect("env loaded"),
            }),
            EvaluatorSelection::Llm(c) => Box::new(LlmEvaluator { client: chat(c)? }),
        };
        let reflector: Box<dyn Reflector> = match &self.reflector {
            ReflectorSelection::Mock => Box::new(MockReflector {
                env: env.clone().expect("env loaded"),
            }),
            ReflectorSelection::Digest => Box::new(DigestReflector),
            ReflectorSelection::Llm {
                client,
                tag_attempts,
            } => {
                let EvaluatorSelection::Llm(task) = &self.evaluator else {
                    return Err(Error::InvalidConfig(
                        "the llm reflector needs an llm evaluator".into(),
                    ));
                };
                Box::new(LlmReflector {
                    task: LlmEvaluator {
                        client: chat(task)?,
                    },
                    reflector: chat(client)?,
                    tag_attempts: *tag_attempts,
                })
            }
        };
        let anchors = match &self.anchors {
            AnchorSelection::Pool => match &self.paths.pool {
                Some(p) if p.exists() => AnchorGenerator::PoolSelect {
                    pool: load_catalog(p)?,
                },
                _ => AnchorGenerator::PoolSelect { pool: Vec::new() },
            },
            AnchorSelection::Tool { command } => AnchorGenerator::ExternalTool {
                command: command.clone(),
            },
        };
        Ok(Backends {
            provider,
            evaluator,
            reflector,
            anchors,
            max_in_flight: self.max_in_flight,
        })
    }
}

impl Paths {
    /// Resolves relative paths against `base`, the config file's directory.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.dataset, &mut self.pool, &mut self.env]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.state);
    }
}

fn require_file(p: Option<&Path>, key: &str, needed_by: &str) -> Result<()> {
    match p {
        None => Err(Error::InvalidConfig(format!(
            "{key} is required by {needed_by}"
        ))),
        Some(p) if !p.is_file() => Err(Error::InvalidConfig(format!(
            "{key} {} does not exist",
            p.display()
        ))),
        Some(_) => Ok(()),
    }
}

/// Owned backends; [`Backends::adapters`] borrows them for one run.
pub struct Backends {
    pub provider: Box<dyn EmbeddingProvider>,
    pub evaluator: Box<dyn Evaluator>,
    pub reflector: Box<dyn Reflector>,
    pub anchors: AnchorGenerator,
    pub max_in_flight: usize,
}

impl Backends {
    pub fn adapters<'a>(&'a self, evaluator: &'a dyn Evaluator) -> Adapters<'a> {
        Adapters {
            provider: self.provider.as_ref(),
            evaluator,
            reflector: self.reflector.as_ref(),
            anchors: &self.anchors,
            max_in_flight: self.max_in_flight,
        }
    }
}
