//! Initialization and the train → evolve → merge loop, plus the on-disk
//! state directory that makes long runs resumable.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::adapters::{evaluate_pairs, Evaluator, Reflector};
use crate::catalog::{
    load_catalog, load_instances, load_interactions, merge_interactions, save_catalog,
    save_instances, save_interactions, ContextStrategy, InstanceRecord, InteractionSet, KnownIds,
    Origin, Split,
};
use crate::clustering::{
    generate_anchors, kmeans, split_cluster, AnchorGenerator, ClusterAssignment,
};
use crate::embedding::{EmbeddingProvider, EmbeddingTable};
use crate::error::{Error, Result, StageExt};
use crate::evolution::{evolve_round, EvolutionConfig, EvolveEnv, RoundTrace};
use crate::model::{train, Checkpoint, ModelShape, PreferenceModel, TrainConfig, TrainHistory};
use crate::routing::{route_mode, RewardMatrix, RoutingInputs, RoutingMode, RoutingReport};
use crate::seed::{self, derive_seed};

/// Catalog, interactions and latest model at round `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: u32,
    pub catalog: Vec<ContextStrategy>,
    pub interactions: InteractionSet,
    pub model: Option<PreferenceModel>,
    /// Global seed every stage seed is derived from.
    pub seed: u64,
}

impl RoundState {
    /// Referential integrity, unique ids, and no strategy from the future.
    /// Skipped rounds advance `t` without adding a strategy, so evolved
    /// rounds are bounded by `t` rather than equal to it.
    pub fn check(&self, dataset: &[InstanceRecord]) -> Result<()> {
        let mut ids = BTreeSet::new();
        for p in &self.catalog {
            p.validate()?;
            if !ids.insert(p.id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "context",
                    id: p.id.clone(),
                });
            }
            if p.origin == Origin::Evolved && (p.round == 0 || p.round > self.round) {
                return Err(Error::InvalidRecord(format!(
                    "strategy `{}` claims round {} in round-{} state",
                    p.id, p.round, self.round
                )));
            }
        }
        self.interactions
            .check_ids(&KnownIds::new(dataset, &self.catalog))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub density: f64,
    pub seed: u64,
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::InvalidConfig(format!(
                "density {} is outside [0, 1]",
                self.density
            )));
        }
        Ok(())
    }
}

/// `⌈d·total⌉`, except that products within 1e-9 of an integer are taken as
/// that integer so `0.3 · 400` does not round up to 121.
fn pair_count(density: f64, total: usize) -> usize {
    let x = density * total as f64;
    let r = x.round();
    let n = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (n.max(0.0) as usize).min(total)
}

/// Seeded sample of `⌈d·n·m⌉` cells of the `n × m` grid, without replacement,
/// in row-major order. The grid index of cell `(i, j)` is `i·m + j`.
pub fn sample_cells(n: usize, m: usize, density: f64, seed_value: u64) -> Vec<(usize, usize)> {
    let total = n * m;
    let count = pair_count(density, total);
    let mut cells = if count == total {
        (0..total).collect()
    } else {
        index::sample(&mut seed::rng(seed_value), total, count).into_vec()
    };
    cells.sort_unstable();
    cells.into_iter().map(|c| (c / m, c % m)).collect()
}

/// Uniform sample of (instance, context) pairs at the configured density.
pub fn sample_pairs<'a, 'b>(
    instances: &[&'a InstanceRecord],
    contexts: &[&'b ContextStrategy],
    cfg: &DensityConfig,
) -> Vec<(&'a InstanceRecord, &'b ContextStrategy)> {
    sample_cells(instances.len(), contexts.len(), cfg.density, cfg.seed)
        .into_iter()
        .map(|(i, j)| (instances[i], contexts[j]))
        .collect()
}

pub struct Adapters<'a> {
    pub provider: &'a dyn EmbeddingProvider,
    pub evaluator: &'a dyn Evaluator,
    pub reflector: &'a dyn Reflector,
    pub anchors: &'a AnchorGenerator,
    pub max_in_flight: usize,
}

/// Round-invariant data: the split-annotated dataset, clusters and embeddings.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub dataset: Vec<InstanceRecord>,
    pub clusters: ClusterAssignment,
    pub table: EmbeddingTable,
}

impl Pipeline {
    pub fn split(&self, split: Split) -> Vec<&InstanceRecord> {
        self.dataset.iter().filter(|i| i.split == split).collect()
    }

    /// Instances eligible for evaluation during training: train and dev.
    pub fn evaluable(&self) -> Vec<&InstanceRecord> {
        self.dataset
            .iter()
            .filter(|i| i.split != Split::Test)
            .collect()
    }
}

/// Clusters the non-test instances, splits each cluster into train and dev
/// halves, builds one anchor per cluster and evaluates the seed interactions.
pub fn initialize(
    mut dataset: Vec<InstanceRecord>,
    k: usize,
    density: f64,
    adapters: &Adapters<'_>,
    seed_value: u64,
) -> Result<(Pipeline, RoundState)> {
    DensityConfig { density, seed: 0 }.validate()?;
    let mut table = EmbeddingTable::default();
    table
        .extend(adapters.provider, &dataset, &[])
        .stage("embedding instances")?;

    let candidates: Vec<String> = dataset
        .iter()
        .filter(|i| i.split != Split::Test)
        .map(|i| i.id.clone())
        .collect();
    if candidates.len() < k {
        return Err(Error::InvalidK {
            k,
            n: candidates.len(),
        });
    }
    let points: Vec<&[f64]> = candidates
        .iter()
        .map(|id| table.instance(id).map(|v| v.as_slice()))
        .collect::<Result<_>>()?;
    let out = kmeans(&points, k, derive_seed(seed_value, "kmeans"), 100).stage("clustering")?;
    let mut clusters = ClusterAssignment::from_kmeans(&candidates, &out);

    let mut split_of: HashMap<String, Split> = HashMap::new();
    let mut train_halves = Vec::with_capacity(k);
    for (c, members) in clusters.members().iter().enumerate() {
        let (tr, dv) = split_cluster(
            members,
            derive_seed(seed_value, &format!("split/cluster-{c}")),
        );
        split_of.extend(dv.into_iter().map(|id| (id, Split::Dev)));
        split_of.extend(tr.iter().cloned().map(|id| (id, Split::Train)));
        train_halves.push(tr);
    }
    for inst in &mut dataset {
        if let Some(s) = split_of.get(&inst.id) {
            inst.split = *s;
        }
        inst.cluster = Some(clusters.cluster_of(&inst.id, table.instance(&inst.id)?));
    }

    let by_id: HashMap<&str, &InstanceRecord> =
        dataset.iter().map(|i| (i.id.as_str(), i)).collect();
    let members: Vec<Vec<&InstanceRecord>> = train_halves
        .iter()
        .map(|ids| ids.iter().map(|id| by_id[id.as_str()]).collect())
        .collect();
    let anchors = generate_anchors(&members, adapters.anchors, adapters.evaluator)
        .stage("anchor generation")?;
    clusters.anchors = anchors.iter().map(|p| p.id.clone()).collect();
    table
        .extend(adapters.provider, &[], &anchors)
        .stage("embedding anchors")?;

    let pipeline = Pipeline {
        dataset,
        clusters,
        table,
    };
    let pool = pipeline.evaluable();
    let ctx: Vec<&ContextStrategy> = anchors.iter().collect();
    let pairs = sample_pairs(
        &pool,
        &ctx,
        &DensityConfig {
            density,
            seed: derive_seed(seed_value, "density/init"),
        },
    );
    let delta = evaluate_pairs(adapters.evaluator, &pairs, 0, adapters.max_in_flight)
        .stage("seed evaluation")?;
    let interactions = merge_interactions(
        &InteractionSet::default(),
        &delta,
        &KnownIds::new(&pipeline.dataset, &anchors),
    )?;
    tracing::info!(k, pairs = delta.len(), "initialized round 0");
    let state = RoundState {
        round: 0,
        catalog: anchors,
        interactions,
        model: None,
        seed: seed_value,
    };
    state.check(&pipeline.dataset)?;
    Ok((pipeline, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoEvolutionConfig {
    pub rounds: u32,
    pub density: f64,
    pub shape: ModelShape,
    pub train: TrainConfig,
    pub evolution: EvolutionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScore {
    pub mode: RoutingMode,
    pub accuracy: f64,
    pub entropy: f64,
    pub mean_regret: f64,
}

impl From<&RoutingReport> for ModeScore {
    fn from(r: &RoutingReport) -> Self {
        Self {
            mode: r.mode,
            accuracy: r.accuracy,
            entropy: r.entropy,
            mean_regret: r.mean_regret,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub monitor: String,
    pub train_items: usize,
    pub stopped_early: bool,
}

impl From<&TrainHistory> for TrainSummary {
    fn from(h: &TrainHistory) -> Self {
        Self {
            epochs_run: h.epochs.len(),
            best_epoch: h.best_epoch,
            best_loss: h.best_loss,
            monitor: h.monitor.clone(),
            train_items: h.train_items,
            stopped_early: h.stopped_early,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSummary {
    pub skipped: bool,
    pub failures: usize,
    pub p_pot: Option<String>,
    pub p_new: Option<String>,
    pub batch_solved: usize,
}

impl From<&RoundTrace> for EvolutionSummary {
    fn from(t: &RoundTrace) -> Self {
        Self {
            skipped: t.skipped,
            failures: t.failures,
            p_pot: t.p_pot.clone(),
            p_new: t.p_new.clone(),
            batch_solved: t.batch_solved,
        }
    }
}

/// What happened at round `t`: the model trained on Ω_t, dev accuracy of
/// every routing mode under it, and the evolution step (absent for the
/// final round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub catalog_size: usize,
    pub interactions: usize,
    pub train: TrainSummary,
    pub dev: Vec<ModeScore>,
    pub evolution: Option<EvolutionSummary>,
}

impl RoundReport {
    pub fn dev_accuracy(&self, mode: RoutingMode) -> Option<f64> {
        self.dev.iter().find(|s| s.mode == mode).map(|s| s.accuracy)
    }
}

pub struct Outcome {
    pub state: RoundState,
    pub model: PreferenceModel,
    pub rounds: Vec<RoundReport>,
}

/// Rewards for `instances × catalog`, taken from Ω where observed and from
/// the evaluator otherwise. The gaps are evaluated but never merged into Ω.
pub fn reward_matrix(
    omega: &InteractionSet,
    evaluator: &dyn Evaluator,
    instances: &[&InstanceRecord],
    catalog: &[ContextStrategy],
    max_in_flight: usize,
) -> Result<RewardMatrix> {
    let mut gaps = Vec::new();
    for i in instances {
        for p in catalog {
            if omega.reward(&i.id, &p.id).is_none() {
                gaps.push((*i, p));
            }
        }
    }
    let fresh = evaluate_pairs(evaluator, &gaps, 0, max_in_flight)?;
    let fresh: HashMap<(&str, &str), f64> = fresh
        .iter()
        .map(|r| ((r.instance_id.as_str(), r.context_id.as_str()), r.reward))
        .collect();
    let values = instances
        .iter()
        .map(|i| {
            catalog
                .iter()
                .map(|p| {
                    omega
                        .reward(&i.id, &p.id)
                        .unwrap_or_else(|| fresh[&(i.id.as_str(), p.id.as_str())])
                })
                .collect()
        })
        .collect();
    Ok(RewardMatrix {
        instance_ids: instances.iter().map(|i| i.id.clone()).collect(),
        context_ids: catalog.iter().map(|p| p.id.clone()).collect(),
        values,
    })
}

/// Routes `instances` under every mode.
pub fn score_modes(
    pipeline: &Pipeline,
    state: &RoundState,
    model: &PreferenceModel,
    instances: &[&InstanceRecord],
    rewards: &RewardMatrix,
) -> Result<Vec<RoutingReport>> {
    let inputs = RoutingInputs {
        scorer: model,
        catalog: &state.catalog,
        table: &pipeline.table,
        clusters: &pipeline.clusters,
        omega: &state.interactions,
        dataset: &pipeline.dataset,
    };
    let random_seed = derive_seed(state.seed, "route/random");
    RoutingMode::ALL
        .iter()
        .map(|&m| route_mode(m, &inputs, instances, rewards, random_seed))
        .collect()
}

fn train_round(
    pipeline: &Pipeline,
    state: &RoundState,
    cfg: &CoEvolutionConfig,
) -> Result<(PreferenceModel, TrainHistory)> {
    let tc = TrainConfig {
        seed: derive_seed(state.seed, &format!("train/round-{}", state.round)),
        ..cfg.train.clone()
    };
    let shape = ModelShape {
        embedding_dim: pipeline
            .table
            .instances
            .values()
            .next()
            .map_or(cfg.shape.embedding_dim, |v| v.dim()),
        ..cfg.shape.clone()
    };
    train(
        &shape,
        &state.interactions,
        &pipeline.dataset,
        &pipeline.table,
        &tc,
    )
    .stage("training")
}

fn dev_scores(
    pipeline: &Pipeline,
    state: &RoundState,
    model: &PreferenceModel,
    adapters: &Adapters<'_>,
) -> Result<Vec<ModeScore>> {
    let dev = pipeline.split(Split::Dev);
    if dev.is_empty() {
        return Ok(Vec::new());
    }
    let rewards = reward_matrix(
        &state.interactions,
        adapters.evaluator,
        &dev,
        &state.catalog,
        adapters.max_in_flight,
    )
    .stage("dev evaluation")?;
    Ok(score_modes(pipeline, state, model, &dev, &rewards)?
        .iter()
        .map(ModeScore::from)
        .collect())
}

/// Runs rounds `state.round .. cfg.rounds`, then trains the final model on
/// Ω_T. Every completed round is persisted through `store` when given; a
/// failing round is reported as [`Error::RoundFailed`] with everything before
/// it already on disk. `prior` carries the reports of rounds completed before
/// a resume.
pub fn run_co_evolution(
    pipeline: &mut Pipeline,
    mut state: RoundState,
    cfg: &CoEvolutionConfig,
    adapters: &Adapters<'_>,
    store: Option<&StateStore>,
    prior: Vec<RoundReport>,
) -> Result<Outcome> {
    cfg.train.validate()?;
    cfg.evolution.validate()?;
    DensityConfig {
        density: cfg.density,
        seed: 0,
    }
    .validate()?;
    let mut rounds = prior;
    rounds.retain(|r| r.round < state.round);

    while state.round < cfg.rounds {
        let t = state.round;
        let failed = |e: Error| Error::RoundFailed {
            round: t,
            source: Box::new(e),
        };
        let (model, history) = train_round(pipeline, &state, cfg).map_err(failed)?;
        let dev = dev_scores(pipeline, &state, &model, adapters).map_err(failed)?;

        let pool = pipeline.evaluable();
        let eval_on: Vec<&InstanceRecord> = sample_cells(
            pool.len(),
            1,
            cfg.density,
            derive_seed(state.seed, &format!("density/round-{t}")),
        )
        .into_iter()
        .map(|(i, _)| pool[i])
        .collect();
        let env = EvolveEnv {
            dataset: &pipeline.dataset,
            provider: adapters.provider,
            reflector: adapters.reflector,
            evaluator: adapters.evaluator,
            max_in_flight: adapters.max_in_flight,
        };
        let ecfg = EvolutionConfig {
            seed: derive_seed(state.seed, &format!("evolve/round-{t}")),
            ..cfg.evolution.clone()
        };
        let mut table = pipeline.table.clone();
        state.model = Some(model.clone());
        let (mut next, trace) =
            evolve_round(&state, &model, &ecfg, &env, &mut table, &eval_on).map_err(failed)?;
        pipeline.table = table;
        next.round = t + 1;
        next.model = None;
        next.check(&pipeline.dataset).map_err(failed)?;

        let report = RoundReport {
            round: t,
            catalog_size: state.catalog.len(),
            interactions: state.interactions.len(),
            train: TrainSummary::from(&history),
            dev,
            evolution: Some(EvolutionSummary::from(&trace)),
        };
        if let Some(s) = store {
            s.save_model(t, &model, cfg.train.temperature)
                .map_err(failed)?;
            s.save_report(t, &report).map_err(failed)?;
            s.save_trace(&trace).map_err(failed)?;
            s.save_round(&next).map_err(failed)?;
            s.write_curves(rounds.iter().chain(std::iter::once(&report)))
                .map_err(failed)?;
        }
        tracing::info!(
            round = t,
            catalog = next.catalog.len(),
            dev_full = report.dev_accuracy(RoutingMode::Full).unwrap_or(f64::NAN),
            dev_oracle = report.dev_accuracy(RoutingMode::Oracle).unwrap_or(f64::NAN),
            "round complete"
        );
        rounds.push(report);
        state = next;
    }

    let t = state.round;
    let failed = |e: Error| Error::RoundFailed {
        round: t,
        source: Box::new(e),
    };
    let (model, history) = train_round(pipeline, &state, cfg).map_err(failed)?;
    let dev = dev_scores(pipeline, &state, &model, adapters).map_err(failed)?;
    let report = RoundReport {
        round: t,
        catalog_size: state.catalog.len(),
        interactions: state.interactions.len(),
        train: TrainSummary::from(&history),
        dev,
        evolution: None,
    };
    if let Some(s) = store {
        s.save_model(t, &model, cfg.train.temperature)
            .map_err(failed)?;
        s.save_report(t, &report).map_err(failed)?;
        s.write_curves(rounds.iter().chain(std::iter::once(&report)))
            .map_err(failed)?;
    }
    rounds.push(report);
    state.model = Some(model.clone());
    Ok(Outcome {
        state,
        model,
        rounds,
    })
}

// ---------------------------------------------------------------------------
// State directory
// ---------------------------------------------------------------------------

/// Layout:
///
/// ```text
/// <root>/instances.jsonl clusters.json catalog.jsonl interactions.jsonl
/// <root>/model.ckpt report.json evolution_curves.csv assignments.csv
/// <root>/round_<t>/{catalog.jsonl, interactions.jsonl, model.ckpt, report.json}
/// <root>/rounds/<t>/trace.json
/// ```
#[derive(Debug, Clone)]
pub struct StateStore {
    pub root: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("reports always serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what,
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

impl StateStore {
    /// Prepares a fresh state directory. An existing non-empty directory is
    /// a conflict unless `force` is set, in which case it is cleared.
    pub fn create(root: impl Into<PathBuf>, force: bool) -> Result<Self> {
        let root = root.into();
        let occupied = root.exists()
            && fs::read_dir(&root)
                .map_err(|e| Error::io(&root, e))?
                .next()
                .is_some();
        if occupied {
            if !force {
                return Err(Error::StateConflict(format!(
                    "{} already exists; pass --force to overwrite it",
                    root.display()
                )));
            }
            fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    /// Opens an initialized state directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let s = Self { root: root.into() };
        for f in ["instances.jsonl", "clusters.json"] {
            if !s.root.join(f).exists() {
                return Err(Error::MissingArtifact {
                    path: s.root.join(f),
                    what: "initialized state directory",
                });
            }
        }
        Ok(s)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn round_dir(&self, t: u32) -> PathBuf {
        self.root.join(format!("round_{t}"))
    }

    pub fn save_pipeline(&self, p: &Pipeline) -> Result<()> {
        save_instances(&p.dataset, &self.path("instances.jsonl"))?;
        write_json(&self.path("clusters.json"), &p.clusters)
    }

    /// Reloads the dataset and clusters and re-embeds everything the given
    /// catalog needs.
    pub fn load_pipeline(
        &self,
        provider: &dyn EmbeddingProvider,
        catalog: &[ContextStrategy],
    ) -> Result<Pipeline> {
        let dataset = load_instances(&self.path("instances.jsonl"))?;
        let clusters: ClusterAssignment =
            read_json(&self.path("clusters.json"), "cluster assignment")?;
        let mut table = EmbeddingTable::default();
        table
            .extend(provider, &dataset, catalog)
            .stage("embedding")?;
        Ok(Pipeline {
            dataset,
            clusters,
            table,
        })
    }

    /// Writes the round snapshot and mirrors it at the top level.
    pub fn save_round(&self, state: &RoundState) -> Result<()> {
        let dir = self.round_dir(state.round);
        save_catalog(&state.catalog, &dir.join("catalog.jsonl"))?;
        save_interactions(&state.interactions, &dir.join("interactions.jsonl"))?;
        save_catalog(&state.catalog, &self.path("catalog.jsonl"))?;
        save_interactions(&state.interactions, &self.path("interactions.jsonl"))
    }

    pub fn save_model(&self, t: u32, model: &PreferenceModel, temperature: f64) -> Result<()> {
        let ck = Checkpoint {
            model: model.clone(),
            temperature,
        };
        ck.save(&self.round_dir(t).join("model.ckpt"))?;
        ck.save(&self.path("model.ckpt"))
    }

    pub fn save_report(&self, t: u32, report: &RoundReport) -> Result<()> {
        write_json(&self.round_dir(t).join("report.json"), report)
    }

    pub fn save_trace(&self, trace: &RoundTrace) -> Result<()> {
        write_json(
            &self
                .root
                .join("rounds")
                .join(trace.round.to_string())
                .join("trace.json"),
            trace,
        )
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.path(name), value)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(
        &self,
        name: &str,
        what: &'static str,
    ) -> Result<T> {
        read_json(&self.path(name), what)
    }

    /// Highest `t` with a persisted round snapshot.
    pub fn latest_round(&self) -> Result<Option<u32>> {
        let mut best = None;
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name();
            let Some(t) = name
                .to_str()
                .and_then(|n| n.strip_prefix("round_"))
                .and_then(|n| n.parse::<u32>().ok())
            else {
                continue;
            };
            if entry.path().join("catalog.jsonl").exists() {
                best = best.max(Some(t));
            }
        }
        Ok(best)
    }

    /// Loads round `t`, including its model when one was trained.
    pub fn load_round(&self, t: u32, seed_value: u64) -> Result<RoundState> {
        let dir = self.round_dir(t);
        let cat = dir.join("catalog.jsonl");
        if !cat.exists() {
            return Err(Error::MissingArtifact {
                path: cat,
                what: "round catalog",
            });
        }
        let ckpt = dir.join("model.ckpt");
        Ok(RoundState {
            round: t,
            catalog: load_catalog(&cat)?,
            interactions: load_interactions(&dir.join("interactions.jsonl"))?,
            model: if ckpt.exists() {
                Some(Checkpoint::load(&ckpt)?.model)
            } else {
                None
            },
            seed: seed_value,
        })
    }

    /// Per-round reports for rounds `0..upto` that exist on disk.
    pub fn load_reports(&self, upto: u32) -> Result<Vec<RoundReport>> {
        let mut out = Vec::new();
        for t in 0..upto {
            let p = self.round_dir(t).join("report.json");
            if p.exists() {
                out.push(read_json(&p, "round report")?);
            }
        }
        Ok(out)
    }

    /// `round,mode,dev_accuracy`, one row per round and mode.
    pub fn write_curves<'a>(
        &self,
        reports: impl IntoIterator<Item = &'a RoundReport>,
    ) -> Result<()> {
        let mut csv = String::from("round,mode,dev_accuracy\n");
        for r in reports {
            for s in &r.dev {
                csv.push_str(&format!("{},{},{}\n", r.round, s.mode, s.accuracy));
            }
        }
        let p = self.path("evolution_curves.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))
    }
}

/// `instance_id,context_id,reward,regret` rows.
pub fn assignments_csv(report: &RoutingReport) -> String {
    let mut csv = String::from("instance_id,context_id,reward,regret\n");
    for a in &report.assignments {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            a.instance_id, a.context_id, a.reward, a.regret
        ));
    }
    csv
}
