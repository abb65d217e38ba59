//! Mini-batch gradient descent with dev-loss early stopping.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{self, Batch, LossConfig, LossKind};
use super::{ModelShape, PreferenceModel};
use crate::catalog::{InstanceRecord, InteractionSet, Split};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 64,
            dropout: 0.1,
            temperature: 1.0,
            weight_decay: 1e-2,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            loss_kind: LossKind::Pairwise,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience cannot exceed max_epochs");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch objective during the epoch (dropout on, decay included).
    pub train_loss: f64,
    /// Data loss on the monitored set, without weight decay.
    pub monitor_loss: f64,
    pub param_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    /// `"dev"`, or `"train"` when Ω has no dev comparisons to monitor.
    pub monitor: String,
    pub train_items: usize,
    pub monitor_items: usize,
    pub stopped_early: bool,
}

fn split_ids(instances: &[InstanceRecord], split: Split) -> HashSet<&str> {
    instances
        .iter()
        .filter(|i| i.split == split)
        .map(|i| i.id.as_str())
        .collect()
}

fn build_batch<'a>(
    kind: LossKind,
    omega: &InteractionSet,
    ids: &HashSet<&str>,
    table: &'a EmbeddingTable,
) -> Result<Batch<'a>> {
    match kind {
        LossKind::Pairwise => {
            Batch::pairs(&loss::build_pair_triples(omega, |i| ids.contains(i)), table)
        }
        LossKind::Pointwise => {
            Batch::points(&loss::build_observations(omega, |i| ids.contains(i)), table)
        }
    }
}

fn subset<'a>(batch: &Batch<'a>, idx: &[usize]) -> Batch<'a> {
    match batch {
        Batch::Pairs(v) => Batch::Pairs(idx.iter().map(|&i| v[i]).collect()),
        Batch::Points(v) => Batch::Points(idx.iter().map(|&i| v[i]).collect()),
    }
}

/// Trains a freshly initialized router (seeded from `cfg.seed`) on the
/// train-split part of Ω, monitoring the dev split.
pub fn train(
    shape: &ModelShape,
    omega: &InteractionSet,
    instances: &[InstanceRecord],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(PreferenceModel, TrainHistory)> {
    shape.validate()?;
    let init = PreferenceModel::init(shape, seed::derive_seed(cfg.seed, "init"));
    train_from(init, omega, instances, table, cfg)
}

pub fn train_from(
    mut model: PreferenceModel,
    omega: &InteractionSet,
    instances: &[InstanceRecord],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(PreferenceModel, TrainHistory)> {
    cfg.validate()?;
    let train_set = build_batch(
        cfg.loss_kind,
        omega,
        &split_ids(instances, Split::Train),
        table,
    )?;
    if train_set.is_empty() {
        return Err(match cfg.loss_kind {
            LossKind::Pairwise => Error::NoTriples,
            LossKind::Pointwise => Error::Empty("training observations"),
        });
    }
    let dev_set = build_batch(
        cfg.loss_kind,
        omega,
        &split_ids(instances, Split::Dev),
        table,
    )?;
    let (monitor_name, monitor) = if dev_set.is_empty() {
        tracing::warn!(
            "no dev comparisons in the interaction set; early stopping monitors training loss"
        );
        ("train", &train_set)
    } else {
        ("dev", &dev_set)
    };

    let lcfg = cfg.loss_config();
    let mut rng = seed::rng(seed::derive_seed(cfg.seed, "batches"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut epochs = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = subset(&train_set, chunk);
            let (l, g) = loss::gradients(&model, &batch, &lcfg, Some((cfg.dropout, &mut rng)))?;
            model.axpy(-cfg.learning_rate, &g);
            sum += l;
            batches += 1;
        }
        if !model.is_finite() {
            return Err(Error::Numeric {
                layer: format!("parameters after epoch {epoch}"),
            });
        }
        let monitor_loss = loss::data_loss(&model, monitor, &lcfg)?;
        tracing::debug!(epoch, monitor_loss, "epoch finished");
        epochs.push(EpochRecord {
            epoch,
            train_loss: sum / batches as f64,
            monitor_loss,
            param_digest: model.digest(),
        });
        if monitor_loss < best.1 {
            best = (model.clone(), monitor_loss, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }

    let history = TrainHistory {
        epochs,
        best_epoch: best.2,
        best_loss: best.1,
        monitor: monitor_name.to_string(),
        train_items: train_set.len(),
        monitor_items: monitor.len(),
        stopped_early,
    };
    Ok((best.0, history))
}
