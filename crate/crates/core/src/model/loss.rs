//! Pairwise ranking and pointwise objectives with their analytic gradients.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DropoutMask, PreferenceModel};
use crate::catalog::InteractionSet;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Pairwise,
    Pointwise,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Self::Pairwise),
            "pointwise" => Ok(Self::Pointwise),
            other => Err(Error::InvalidConfig(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub weight_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            weight_decay: 0.0,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Context `winner` beat `loser` on `instance`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairTriple {
    pub instance_id: String,
    pub winner_id: String,
    pub loser_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub instance_id: String,
    pub context_id: String,
    pub reward: f64,
}

/// Every `(i, j, k)` with `r_ij > r_ik` among instances accepted by `include`,
/// ordered by instance id, then winner id, then loser id.
pub fn build_pair_triples(
    omega: &InteractionSet,
    include: impl Fn(&str) -> bool,
) -> Vec<PairTriple> {
    let mut out = Vec::new();
    for (inst, recs) in omega.by_instance() {
        if !include(inst) {
            continue;
        }
        for w in &recs {
            for l in &recs {
                if w.reward > l.reward {
                    out.push(PairTriple {
                        instance_id: inst.to_string(),
                        winner_id: w.context_id.clone(),
                        loser_id: l.context_id.clone(),
                    });
                }
            }
        }
    }
    out
}

pub fn build_observations(
    omega: &InteractionSet,
    include: impl Fn(&str) -> bool,
) -> Vec<Observation> {
    omega
        .records()
        .filter(|r| include(&r.instance_id))
        .map(|r| Observation {
            instance_id: r.instance_id.clone(),
            context_id: r.context_id.clone(),
            reward: r.reward,
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct TripleRef<'a> {
    pub instance: &'a [f64],
    pub winner: &'a [f64],
    pub loser: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct PointRef<'a> {
    pub instance: &'a [f64],
    pub context: &'a [f64],
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub enum Batch<'a> {
    Pairs(Vec<TripleRef<'a>>),
    Points(Vec<PointRef<'a>>),
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pairs(v) => v.len(),
            Batch::Points(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pairs(triples: &[PairTriple], table: &'a EmbeddingTable) -> Result<Self> {
        triples
            .iter()
            .map(|t| {
                Ok(TripleRef {
                    instance: table.instance(&t.instance_id)?,
                    winner: table.context(&t.winner_id)?,
                    loser: table.context(&t.loser_id)?,
                })
            })
            .collect::<Result<_>>()
            .map(Batch::Pairs)
    }

    pub fn points(obs: &[Observation], table: &'a EmbeddingTable) -> Result<Self> {
        obs.iter()
            .map(|o| {
                Ok(PointRef {
                    instance: table.instance(&o.instance_id)?,
                    context: table.context(&o.context_id)?,
                    reward: o.reward,
                })
            })
            .collect::<Result<_>>()
            .map(Batch::Points)
    }

    fn empty_error(&self) -> Error {
        match self {
            Batch::Pairs(_) => Error::NoTriples,
            Batch::Points(_) => Error::Empty("observations"),
        }
    }
}

/// Distinct embeddings of one side of a batch, identified by address, with
/// their projections. Parameters are fixed while a batch is processed, so each
/// embedding is projected once and its projection gradient is accumulated
/// before a single outer product.
struct Side<'a> {
    slot: HashMap<*const f64, usize>,
    embs: Vec<&'a [f64]>,
    lat: Vec<Vec<f64>>,
    grad: Vec<Vec<f64>>,
}

impl<'a> Side<'a> {
    fn new() -> Self {
        Self {
            slot: HashMap::new(),
            embs: Vec::new(),
            lat: Vec::new(),
            grad: Vec::new(),
        }
    }

    fn add(&mut self, e: &'a [f64]) -> usize {
        let next = self.embs.len();
        *self.slot.entry(e.as_ptr()).or_insert_with(|| {
            self.embs.push(e);
            next
        })
    }

    fn project(
        &mut self,
        what: &'static str,
        dim: usize,
        f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<()> {
        for e in &self.embs {
            if e.len() != dim {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: dim,
                    actual: e.len(),
                });
            }
            let z = f(e)?;
            self.grad.push(vec![0.0; z.len()]);
            self.lat.push(z);
        }
        Ok(())
    }
}

/// Slot indices into the instance and context sides, one entry per item
/// (`(instance, winner, loser)` for pairs, `(instance, context, _)` for points).
fn sides<'a>(
    model: &PreferenceModel,
    batch: &Batch<'a>,
) -> Result<(Side<'a>, Side<'a>, Vec<[usize; 3]>)> {
    let (mut inst, mut ctx) = (Side::new(), Side::new());
    let slots = match batch {
        Batch::Pairs(ts) => ts
            .iter()
            .map(|t| [inst.add(t.instance), ctx.add(t.winner), ctx.add(t.loser)])
            .collect(),
        Batch::Points(ps) => ps
            .iter()
            .map(|p| [inst.add(p.instance), ctx.add(p.context), 0])
            .collect(),
    };
    let d = model.embedding_dim();
    inst.project("instance embedding", d, |e| model.project_instance(e))?;
    ctx.project("context embedding", d, |h| model.project_context(h))?;
    Ok((inst, ctx, slots))
}

/// Mean loss over the batch without the weight-decay term.
pub fn data_loss(model: &PreferenceModel, batch: &Batch<'_>, cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(batch.empty_error());
    }
    let tau = cfg.temperature;
    let (inst, ctx, slots) = sides(model, batch)?;
    let logit = |i: usize, c: usize| -> Result<f64> {
        Ok(model
            .forward_latent(inst.lat[i].clone(), ctx.lat[c].clone(), None)?
            .logit)
    };
    let mut total = 0.0;
    match batch {
        Batch::Pairs(_) => {
            for &[i, w, l] in &slots {
                let d = (logit(i, w)? - logit(i, l)?) / tau;
                total += softplus(-d);
            }
        }
        Batch::Points(ps) => {
            for (p, &[i, c, _]) in ps.iter().zip(&slots) {
                let y = logit(i, c)? / tau;
                total += softplus(y) - p.reward * y;
            }
        }
    }
    Ok(total / batch.len() as f64)
}

/// Data loss plus `λ‖θ‖²`.
pub fn loss(model: &PreferenceModel, batch: &Batch<'_>, cfg: &LossConfig) -> Result<f64> {
    Ok(data_loss(model, batch, cfg)? + cfg.weight_decay * model.squared_norm())
}

pub fn pairwise_loss(
    model: &PreferenceModel,
    triples: &[PairTriple],
    table: &EmbeddingTable,
    cfg: &LossConfig,
) -> Result<f64> {
    loss(model, &Batch::pairs(triples, table)?, cfg)
}

pub fn pointwise_loss(
    model: &PreferenceModel,
    observations: &[Observation],
    table: &EmbeddingTable,
    cfg: &LossConfig,
) -> Result<f64> {
    loss(model, &Batch::points(observations, table)?, cfg)
}

/// Loss (including weight decay) and its gradient. With `dropout = Some((rate,
/// rng))` a fresh mask is drawn per batch item and shared by both sides of a
/// triple, so the pair is compared under one thinned network.
pub fn gradients<R: Rng>(
    model: &PreferenceModel,
    batch: &Batch<'_>,
    cfg: &LossConfig,
    mut dropout: Option<(f64, &mut R)>,
) -> Result<(f64, PreferenceModel)> {
    if batch.is_empty() {
        return Err(batch.empty_error());
    }
    let n = batch.len() as f64;
    let tau = cfg.temperature;
    let (mut inst, mut ctx, slots) = sides(model, batch)?;
    let mut grads = model.zeros_like();
    let mut total = 0.0;
    let mut mask = || match dropout.as_mut() {
        Some((rate, rng)) if *rate > 0.0 => Some(DropoutMask::sample(model, *rate, *rng)),
        _ => None,
    };
    let mut step = |i: usize,
                    c: usize,
                    cache: &super::ForwardCache,
                    g: f64,
                    m: Option<&DropoutMask>,
                    grads: &mut PreferenceModel| {
        let (du, dv) = model.backward_latent(cache, g, m, Some(grads));
        crate::linalg::axpy(1.0, &du, &mut inst.grad[i]);
        crate::linalg::axpy(1.0, &dv, &mut ctx.grad[c]);
    };
    match batch {
        Batch::Pairs(_) => {
            for &[i, w, l] in &slots {
                // One mask per triple, shared by both sides of the comparison.
                let m = mask();
                let cw =
                    model.forward_latent(inst.lat[i].clone(), ctx.lat[w].clone(), m.as_ref())?;
                let cl =
                    model.forward_latent(inst.lat[i].clone(), ctx.lat[l].clone(), m.as_ref())?;
                let d = (cw.logit - cl.logit) / tau;
                total += softplus(-d);
                let g = -sigmoid(-d) / (tau * n);
                step(i, w, &cw, g, m.as_ref(), &mut grads);
                step(i, l, &cl, -g, m.as_ref(), &mut grads);
            }
        }
        Batch::Points(ps) => {
            for (p, &[i, c, _]) in ps.iter().zip(&slots) {
                let m = mask();
                let cache =
                    model.forward_latent(inst.lat[i].clone(), ctx.lat[c].clone(), m.as_ref())?;
                let y = cache.logit / tau;
                total += softplus(y) - p.reward * y;
                let g = (sigmoid(y) - p.reward) / (tau * n);
                step(i, c, &cache, g, m.as_ref(), &mut grads);
            }
        }
    }
    for (e, du) in inst.embs.iter().zip(&inst.grad) {
        grads.instance_projection.add_outer(1.0, du, e);
    }
    for (h, dv) in ctx.embs.iter().zip(&ctx.grad) {
        grads.context_projection.add_outer(1.0, dv, h);
    }
    let lambda = cfg.weight_decay;
    if lambda > 0.0 {
        grads.axpy(2.0 * lambda, model);
    }
    Ok((total / n + lambda * model.squared_norm(), grads))
}
