//! Inference-time routing and its metrics.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{evaluate_pairs, Evaluator};
use crate::catalog::{ContextStrategy, InstanceRecord, InteractionSet, Split};
use crate::clustering::ClusterAssignment;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Full,
    NoRouting,
    Random,
    ClusterOnly,
    Oracle,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 5] = [
        RoutingMode::Full,
        RoutingMode::NoRouting,
        RoutingMode::Random,
        RoutingMode::ClusterOnly,
        RoutingMode::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Full => "full",
            RoutingMode::NoRouting => "no_routing",
            RoutingMode::Random => "random",
            RoutingMode::ClusterOnly => "cluster_only",
            RoutingMode::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown routing mode {s:?}")))
    }
}

/// Index of the strategy with the largest logit for `x`; ties go to the
/// lowest index.
pub fn route_index(scorer: &dyn Scorer, x: &[f64], context_embeddings: &[&[f64]]) -> Result<usize> {
    if context_embeddings.is_empty() {
        return Err(Error::Empty("catalog"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (j, h) in context_embeddings.iter().enumerate() {
        let l = scorer.score_logit(x, h)?;
        if l > best.1 {
            best = (j, l);
        }
    }
    Ok(best.0)
}

pub fn route<'a>(
    scorer: &dyn Scorer,
    x: &[f64],
    catalog: &'a [ContextStrategy],
    table: &EmbeddingTable,
) -> Result<&'a ContextStrategy> {
    let hs = catalog
        .iter()
        .map(|p| table.context(&p.id).map(|v| v.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    Ok(&catalog[route_index(scorer, x, &hs)?])
}

/// Natural-log Shannon entropy of the empirical distribution of `assigned`.
pub fn assignment_entropy<'a>(assigned: impl IntoIterator<Item = &'a str>) -> Result<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n = 0usize;
    for id in assigned {
        *counts.entry(id).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("assignments"));
    }
    let n = n as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// `max(row) − row[chosen]`.
pub fn regret(row: &[f64], chosen: usize) -> Result<f64> {
    let r = *row.get(chosen).ok_or(Error::Empty("reward row"))?;
    Ok(row.iter().copied().fold(f64::NEG_INFINITY, f64::max) - r)
}

/// Rewards for every (instance, catalog strategy) pair of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMatrix {
    pub instance_ids: Vec<String>,
    pub context_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl RewardMatrix {
    pub fn compute(
        evaluator: &dyn Evaluator,
        instances: &[&InstanceRecord],
        catalog: &[ContextStrategy],
        max_in_flight: usize,
    ) -> Result<Self> {
        let pairs: Vec<_> = instances
            .iter()
            .flat_map(|i| catalog.iter().map(move |p| (*i, p)))
            .collect();
        let recs = evaluate_pairs(evaluator, &pairs, 0, max_in_flight)?;
        let m = catalog.len();
        Ok(Self {
            instance_ids: instances.iter().map(|i| i.id.clone()).collect(),
            context_ids: catalog.iter().map(|p| p.id.clone()).collect(),
            values: recs
                .chunks(m.max(1))
                .map(|c| c.iter().map(|r| r.reward).collect())
                .collect(),
        })
    }

    /// Reads every pair from Ω; a gap is a missing-reward error.
    pub fn from_interactions(
        omega: &InteractionSet,
        instances: &[&InstanceRecord],
        catalog: &[ContextStrategy],
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(instances.len());
        for i in instances {
            let row = catalog
                .iter()
                .map(|p| {
                    omega
                        .reward(&i.id, &p.id)
                        .ok_or_else(|| Error::MissingReward {
                            instance: i.id.clone(),
                            context: p.id.clone(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Ok(Self {
            instance_ids: instances.iter().map(|i| i.id.clone()).collect(),
            context_ids: catalog.iter().map(|p| p.id.clone()).collect(),
            values,
        })
    }

    /// Mean of per-row maxima.
    pub fn oracle_accuracy(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .values
            .iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .sum();
        total / self.values.len() as f64
    }
}

/// Everything the routing modes may consult.
pub struct RoutingInputs<'a> {
    pub scorer: &'a dyn Scorer,
    pub catalog: &'a [ContextStrategy],
    pub table: &'a EmbeddingTable,
    pub clusters: &'a ClusterAssignment,
    /// Observed interactions; `no_routing` ranks strategies by their mean
    /// observed reward over train-split instances.
    pub omega: &'a InteractionSet,
    pub dataset: &'a [InstanceRecord],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub instance_id: String,
    pub context_id: String,
    pub reward: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub mode: RoutingMode,
    pub assignments: Vec<Assignment>,
    pub accuracy: f64,
    pub entropy: f64,
    pub mean_regret: f64,
}

/// Catalog index with the best mean observed reward on train instances.
/// Strategies never observed are skipped; with no observations at all the
/// first strategy is used.
pub fn global_best(inputs: &RoutingInputs<'_>) -> usize {
    let train: std::collections::HashSet<&str> = inputs
        .dataset
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(|i| i.id.as_str())
        .collect();
    let index: BTreeMap<&str, usize> = inputs
        .catalog
        .iter()
        .enumerate()
        .map(|(j, p)| (p.id.as_str(), j))
        .collect();
    let mut sums = vec![(0.0f64, 0usize); inputs.catalog.len()];
    for r in inputs.omega.records() {
        if let (true, Some(&j)) = (
            train.contains(r.instance_id.as_str()),
            index.get(r.context_id.as_str()),
        ) {
            sums[j].0 += r.reward;
            sums[j].1 += 1;
        }
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, (s, n)) in sums.iter().enumerate() {
        if *n > 0 && s / *n as f64 > best.1 {
            best = (j, s / *n as f64);
        }
    }
    best.0
}

pub fn assign(
    mode: RoutingMode,
    inputs: &RoutingInputs<'_>,
    instances: &[&InstanceRecord],
    rewards: &RewardMatrix,
    seed_value: u64,
) -> Result<Vec<usize>> {
    let catalog = inputs.catalog;
    if catalog.is_empty() {
        return Err(Error::Empty("catalog"));
    }
    match mode {
        RoutingMode::Full => {
            let hs = catalog
                .iter()
                .map(|p| inputs.table.context(&p.id).map(|v| v.as_slice()))
                .collect::<Result<Vec<_>>>()?;
            instances
                .iter()
                .map(|i| route_index(inputs.scorer, inputs.table.instance(&i.id)?, &hs))
                .collect()
        }
        RoutingMode::NoRouting => Ok(vec![global_best(inputs); instances.len()]),
        RoutingMode::Random => {
            let mut rng = seed::rng(seed_value);
            Ok(instances
                .iter()
                .map(|_| rng.random_range(0..catalog.len()))
                .collect())
        }
        RoutingMode::ClusterOnly => instances
            .iter()
            .map(|i| {
                let k = inputs
                    .clusters
                    .cluster_of(&i.id, inputs.table.instance(&i.id)?);
                let anchor = inputs
                    .clusters
                    .anchors
                    .get(k)
                    .ok_or(Error::Empty("cluster anchors"))?;
                catalog
                    .iter()
                    .position(|p| &p.id == anchor)
                    .ok_or_else(|| Error::UnknownId {
                        kind: "anchor context",
                        id: anchor.clone(),
                    })
            })
            .collect(),
        RoutingMode::Oracle => Ok(rewards
            .values
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, r) in row.iter().enumerate() {
                    if *r > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()),
    }
}

/// Routes `instances` under `mode` and scores the result against `rewards`,
/// whose rows must align with `instances` and columns with the catalog.
pub fn route_mode(
    mode: RoutingMode,
    inputs: &RoutingInputs<'_>,
    instances: &[&InstanceRecord],
    rewards: &RewardMatrix,
    seed_value: u64,
) -> Result<RoutingReport> {
    if instances.is_empty() {
        return Err(Error::Empty("instances to route"));
    }
    if rewards.instance_ids.len() != instances.len()
        || rewards.context_ids.len() != inputs.catalog.len()
    {
        return Err(Error::DimensionMismatch {
            what: "reward matrix",
            expected: instances.len() * inputs.catalog.len(),
            actual: rewards.instance_ids.len() * rewards.context_ids.len(),
        });
    }
    let chosen = assign(mode, inputs, instances, rewards, seed_value)?;
    let mut assignments = Vec::with_capacity(instances.len());
    let (mut acc, mut reg) = (0.0, 0.0);
    for ((inst, &j), row) in instances.iter().zip(&chosen).zip(&rewards.values) {
        let reward = row[j];
        let regret = regret(row, j)?;
        acc += reward;
        reg += regret;
        assignments.push(Assignment {
            instance_id: inst.id.clone(),
            context_id: inputs.catalog[j].id.clone(),
            reward,
            regret,
        });
    }
    let n = instances.len() as f64;
    Ok(RoutingReport {
        mode,
        entropy: assignment_entropy(assignments.iter().map(|a| a.context_id.as_str()))?,
        accuracy: acc / n,
        mean_regret: reg / n,
        assignments,
    })
}
