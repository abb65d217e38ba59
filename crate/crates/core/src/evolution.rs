//! Gradient-guided catalog evolution.
//!
//! One round mines the training instances no strategy solves, pushes a few
//! existing strategy embeddings uphill under the frozen router, picks the real
//! strategy closest to where they ended up, and asks the reflector to rewrite
//! it for the failure batch.

use std::collections::BTreeSet;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{evaluate_pairs, Evaluator, Reflector};
use crate::catalog::{
    merge_interactions, ContextStrategy, InstanceRecord, InteractionSet, KnownIds, Origin,
};
use crate::embedding::{
    embed_strategy, normalize, EmbeddingProvider, EmbeddingTable, EmbeddingVector,
};
use crate::error::{Error, Result, StageExt};
use crate::linalg::euclidean;
use crate::model::Scorer;
use crate::orchestrator::RoundState;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    /// `m`: failure instances per batch.
    pub failure_batch_size: usize,
    /// `k`: strategies whose embeddings seed the ascent.
    pub seed_count: usize,
    /// `G`
    pub ascent_steps: usize,
    pub ascent_rate: f64,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            failure_batch_size: 16,
            seed_count: 3,
            ascent_steps: 50,
            ascent_rate: 0.05,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.failure_batch_size == 0 || self.seed_count == 0 || self.ascent_steps == 0 {
            return Err(Error::InvalidConfig(
                "evolution: failure_batch_size, seed_count and ascent_steps must be at least 1"
                    .into(),
            ));
        }
        if !(self.ascent_rate > 0.0 && self.ascent_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "evolution: ascent_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Ids of instances that have at least one observation against the catalog
/// and scored 0 on every one of them. Sorted by id.
pub fn find_failures(
    instances: &[&InstanceRecord],
    catalog: &[ContextStrategy],
    omega: &InteractionSet,
) -> Vec<String> {
    let mut out: Vec<String> = instances
        .iter()
        .filter(|i| {
            let mut seen = false;
            for p in catalog {
                if let Some(r) = omega.reward(&i.id, &p.id) {
                    if r != 0.0 {
                        return false;
                    }
                    seen = true;
                }
            }
            seen
        })
        .map(|i| i.id.clone())
        .collect();
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentStep {
    pub step: usize,
    pub objective: f64,
    pub digest: String,
}

/// Mean logit of `h` over the batch and its gradient.
fn objective(scorer: &dyn Scorer, h: &[f64], batch: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
    let mut j = 0.0;
    let mut grad = vec![0.0; h.len()];
    for e in batch {
        let (l, g) = scorer.logit_and_context_grad(e, h)?;
        j += l;
        crate::linalg::axpy(1.0, &g, &mut grad);
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((j / m, grad))
}

/// `G` steps of `h ← normalize(h + η ∇J(h))` where `J` is the batch-mean
/// logit. The trace has `G + 1` entries; entry `τ` is evaluated at the
/// embedding before update `τ + 1`.
pub fn ascend_embedding(
    scorer: &dyn Scorer,
    h0: &[f64],
    batch: &[&[f64]],
    steps: usize,
    rate: f64,
) -> Result<(EmbeddingVector, Vec<AscentStep>)> {
    if batch.is_empty() {
        return Err(Error::Empty("failure batch"));
    }
    let mut h = normalize(h0)?;
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (j, grad) = objective(scorer, &h, batch)?;
        trace.push(AscentStep {
            step,
            objective: j,
            digest: seed::digest_f64(&h),
        });
        if step == steps {
            break;
        }
        let moved: Vec<f64> = h.iter().zip(&grad).map(|(x, g)| x + rate * g).collect();
        h = normalize(&moved)?;
    }
    Ok((h, trace))
}

/// Index of the embedding with the smallest mean Euclidean distance to the
/// targets; ties go to the lowest index.
pub fn select_potential(context_embeddings: &[&[f64]], targets: &[&[f64]]) -> Result<usize> {
    if context_embeddings.is_empty() {
        return Err(Error::Empty("catalog"));
    }
    if targets.is_empty() {
        return Err(Error::Empty("ascent targets"));
    }
    let mut best = (0, f64::INFINITY);
    for (j, h) in context_embeddings.iter().enumerate() {
        let mut d = 0.0;
        for t in targets {
            d += euclidean(h, t);
        }
        d /= targets.len() as f64;
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTrace {
    pub seed_context: String,
    pub steps: Vec<AscentStep>,
}

/// Summary of one evolution round, written to `rounds/<t>/trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub skipped: bool,
    pub failures: usize,
    pub batch: Vec<String>,
    pub ascent: Vec<SeedTrace>,
    pub p_pot: Option<String>,
    pub p_new: Option<String>,
    pub evaluated: usize,
    /// Batch members that `p_new` solves, when they were evaluated.
    pub batch_solved: usize,
}

impl RoundTrace {
    fn skipped(round: u32) -> Self {
        Self {
            round,
            skipped: true,
            failures: 0,
            batch: vec![],
            ascent: vec![],
            p_pot: None,
            p_new: None,
            evaluated: 0,
            batch_solved: 0,
        }
    }
}

/// Adapters an evolution round needs besides the frozen scorer.
pub struct EvolveEnv<'a> {
    pub dataset: &'a [InstanceRecord],
    pub provider: &'a dyn EmbeddingProvider,
    pub reflector: &'a dyn Reflector,
    pub evaluator: &'a dyn Evaluator,
    pub max_in_flight: usize,
}

pub fn evolved_id(round: u32) -> String {
    format!("evolved-r{round:02}")
}

/// Runs one round on `state` at round `t = state.round`. Training-split
/// instances are mined for failures; `eval_on` lists the instances `p_new`
/// is evaluated on. Returns the next catalog and interactions (the round
/// counter is left to the caller) together with the trace. An empty failure
/// set returns the state unchanged with `trace.skipped` set.
pub fn evolve_round(
    state: &RoundState,
    scorer: &dyn Scorer,
    cfg: &EvolutionConfig,
    env: &EvolveEnv<'_>,
    table: &mut EmbeddingTable,
    eval_on: &[&InstanceRecord],
) -> Result<(RoundState, RoundTrace)> {
    cfg.validate()?;
    let t = state.round;
    let train: Vec<&InstanceRecord> = env
        .dataset
        .iter()
        .filter(|i| i.split == crate::catalog::Split::Train)
        .collect();
    let failures = find_failures(&train, &state.catalog, &state.interactions);
    if failures.is_empty() {
        tracing::info!(round = t, "no failure instances; skipping evolution");
        return Ok((state.clone(), RoundTrace::skipped(t)));
    }
    if cfg.seed_count > state.catalog.len() {
        return Err(Error::InvalidConfig(format!(
            "evolution: seed_count {} exceeds catalog size {}",
            cfg.seed_count,
            state.catalog.len()
        )));
    }

    let mut rng = seed::rng(cfg.seed);
    let m = cfg.failure_batch_size.min(failures.len());
    let mut picks = index::sample(&mut rng, failures.len(), m).into_vec();
    picks.sort_unstable();
    let batch_ids: Vec<&str> = picks.iter().map(|&i| failures[i].as_str()).collect();
    let mut seeds = index::sample(&mut rng, state.catalog.len(), cfg.seed_count).into_vec();
    seeds.sort_unstable();

    let by_id: std::collections::HashMap<&str, &InstanceRecord> =
        env.dataset.iter().map(|i| (i.id.as_str(), i)).collect();
    let batch: Vec<&InstanceRecord> = batch_ids
        .iter()
        .map(|id| {
            by_id.get(id).copied().ok_or_else(|| Error::UnknownId {
                kind: "instance",
                id: id.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let batch_emb: Vec<&[f64]> = batch
        .iter()
        .map(|i| table.instance(&i.id).map(|v| v.as_slice()))
        .collect::<Result<_>>()?;
    let catalog_emb: Vec<&[f64]> = state
        .catalog
        .iter()
        .map(|p| table.context(&p.id).map(|v| v.as_slice()))
        .collect::<Result<_>>()?;

    let ascents: Vec<(EmbeddingVector, Vec<AscentStep>)> = seeds
        .par_iter()
        .map(|&s| {
            ascend_embedding(
                scorer,
                catalog_emb[s],
                &batch_emb,
                cfg.ascent_steps,
                cfg.ascent_rate,
            )
        })
        .collect::<Result<_>>()
        .stage("latent ascent")?;
    let targets: Vec<&[f64]> = ascents.iter().map(|(h, _)| h.as_slice()).collect();
    let pot = select_potential(&catalog_emb, &targets)?;
    let p_pot = &state.catalog[pot];

    let body = env.reflector.reflect(p_pot, &batch).stage("reflection")?;
    let mut id = evolved_id(t + 1);
    let existing: BTreeSet<&str> = state.catalog.iter().map(|p| p.id.as_str()).collect();
    let mut n = 1;
    while existing.contains(id.as_str()) {
        n += 1;
        id = format!("{}-{n}", evolved_id(t + 1));
    }
    let p_new = ContextStrategy::from_body(id, body, Origin::Evolved, t + 1)?;
    let psi = embed_strategy(env.provider, &p_new).stage("embedding new strategy")?;

    let pairs: Vec<(&InstanceRecord, &ContextStrategy)> =
        eval_on.iter().map(|i| (*i, &p_new)).collect();
    let delta = evaluate_pairs(env.evaluator, &pairs, t + 1, env.max_in_flight)
        .stage("evaluating new strategy")?;
    let batch_set: BTreeSet<&str> = batch_ids.iter().copied().collect();
    let batch_solved = delta
        .iter()
        .filter(|r| r.reward > 0.0 && batch_set.contains(r.instance_id.as_str()))
        .count();

    let mut catalog = state.catalog.clone();
    catalog.push(p_new.clone());
    let known = KnownIds::new(env.dataset, &catalog);
    let interactions = merge_interactions(&state.interactions, &delta, &known)?;
    table.contexts.insert(p_new.id.clone(), psi);

    let trace = RoundTrace {
        round: t,
        skipped: false,
        failures: failures.len(),
        batch: batch_ids.iter().map(|s| s.to_string()).collect(),
        ascent: seeds
            .iter()
            .zip(ascents)
            .map(|(&s, (_, steps))| SeedTrace {
                seed_context: state.catalog[s].id.clone(),
                steps,
            })
            .collect(),
        p_pot: Some(p_pot.id.clone()),
        p_new: Some(p_new.id.clone()),
        evaluated: delta.len(),
        batch_solved,
    };
    tracing::info!(round = t, failures = failures.len(), p_pot = %p_pot.id, p_new = %p_new.id, batch_solved, "evolved a strategy");
    Ok((
        RoundState {
            round: state.round,
            catalog,
            interactions,
            model: state.model.clone(),
            seed: state.seed,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::synthetic::DigestReflector;
    use crate::adapters::testing::{instance, strategy, TableEvaluator};
    use crate::catalog::{InteractionRecord, Split};
    use crate::embedding::HashFeatures;
    use crate::linalg::dot;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashMap;

    /// logit(h, x) = ⟨c, h⟩, independent of x.
    struct Linear(Vec<f64>);
    impl Scorer for Linear {
        fn score_logit(&self, _: &[f64], h: &[f64]) -> Result<f64> {
            Ok(dot(&self.0, h))
        }
        fn logit_and_context_grad(&self, _: &[f64], h: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((dot(&self.0, h), self.0.clone()))
        }
    }

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&v).unwrap().into_inner()
    }

    #[test]
    fn linear_stub_ascent_converges_to_c() {
        let mut rng = seed::rng(4);
        let c = unit(&mut rng, 8);
        let h0 = unit(&mut rng, 8);
        let x = unit(&mut rng, 8);
        let (h, trace) = ascend_embedding(&Linear(c.clone()), &h0, &[&x], 100, 0.1).unwrap();
        assert!(dot(&h, &c) >= 0.99);
        assert_eq!(trace.len(), 101);
        for w in trace.windows(2) {
            assert!(w[1].objective >= w[0].objective - 1e-12);
        }
    }

    #[test]
    fn zero_rate_is_identity_and_duplicates_do_not_matter() {
        let mut rng = seed::rng(5);
        let c = unit(&mut rng, 6);
        let h0 = unit(&mut rng, 6);
        let x = unit(&mut rng, 6);
        let (h, _) = ascend_embedding(&Linear(c.clone()), &h0, &[&x], 1, 0.0).unwrap();
        assert_eq!(h.as_slice(), h0.as_slice());
        let one = ascend_embedding(&Linear(c.clone()), &h0, &[&x], 10, 0.05).unwrap();
        let many = ascend_embedding(&Linear(c), &h0, &[&x, &x, &x, &x], 10, 0.05).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn select_potential_examples() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(select_potential(&[&a, &b], &[&b]).unwrap(), 1);
        let near = [0.2, 0.0];
        let far = [0.9, 0.0];
        assert_eq!(select_potential(&[&far, &near], &[&[0.0, 0.0]]).unwrap(), 1);
        assert_eq!(select_potential(&[&a, &a], &[&b]).unwrap(), 0);
        assert!(select_potential(&[], &[&a]).is_err());
    }

    proptest! {
        #[test]
        fn failures_match_row_scan(cells in prop::collection::vec((0usize..20, 0usize..4, 0u8..3), 0..60)) {
            let insts: Vec<InstanceRecord> = (0..20).map(|k| instance(&format!("i{k:02}"), Split::Train)).collect();
            let refs: Vec<&InstanceRecord> = insts.iter().collect();
            let catalog: Vec<ContextStrategy> = (0..3).map(|k| strategy(&format!("c{k}"), "x")).collect();
            let mut recs = std::collections::BTreeMap::new();
            for (i, c, r) in cells {
                // Context c3 is not in the catalog and must be ignored.
                recs.insert((format!("i{i:02}"), format!("c{c}")), r as f64 / 2.0);
            }
            let omega = InteractionSet::from_records(recs.iter().map(|((i, c), r)| InteractionRecord::new(i.clone(), c.clone(), *r, 0).unwrap()));
            let mut expect = Vec::new();
            for i in &insts {
                let row: Vec<f64> = recs.iter().filter(|((ii, c), _)| *ii == i.id && c != "c3").map(|(_, r)| *r).collect();
                if !row.is_empty() && row.iter().copied().fold(0.0, f64::max) == 0.0 {
                    expect.push(i.id.clone());
                }
            }
            prop_assert_eq!(find_failures(&refs, &catalog, &omega), expect);
        }
    }

    struct World {
        dataset: Vec<InstanceRecord>,
        state: RoundState,
        table: EmbeddingTable,
        hf: HashFeatures,
    }

    fn world(rewards: &[(&str, &str, f64)]) -> World {
        let dataset: Vec<InstanceRecord> = ["a", "b", "c"]
            .iter()
            .map(|id| instance(id, Split::Train))
            .collect();
        let catalog = vec![strategy("p0", "first"), strategy("p1", "second")];
        let hf = HashFeatures::new(16, 3);
        let mut table = EmbeddingTable::default();
        table.extend(&hf, &dataset, &catalog).unwrap();
        let interactions = InteractionSet::from_records(
            rewards
                .iter()
                .map(|(i, c, r)| InteractionRecord::new(*i, *c, *r, 0).unwrap()),
        );
        World {
            dataset,
            state: RoundState {
                round: 0,
                catalog,
                interactions,
                model: None,
                seed: 1,
            },
            table,
            hf,
        }
    }

    #[test]
    fn empty_failure_set_is_a_no_op() {
        let mut w = world(&[("a", "p0", 1.0), ("b", "p1", 1.0)]);
        let ev = TableEvaluator(HashMap::new());
        let env = EvolveEnv {
            dataset: &w.dataset,
            provider: &w.hf,
            reflector: &DigestReflector,
            evaluator: &ev,
            max_in_flight: 1,
        };
        let before = w.table.contexts.len();
        let (next, trace) = evolve_round(
            &w.state,
            &Linear(vec![1.0; 16]),
            &EvolutionConfig {
                seed_count: 2,
                ..Default::default()
            },
            &env,
            &mut w.table,
            &[],
        )
        .unwrap();
        assert!(trace.skipped);
        assert_eq!(next, w.state);
        assert_eq!(w.table.contexts.len(), before);
    }

    #[test]
    fn one_round_appends_one_strategy() {
        let mut w = world(&[
            ("a", "p0", 0.0),
            ("a", "p1", 0.0),
            ("b", "p0", 1.0),
            ("c", "p1", 0.0),
        ]);
        let mut t = HashMap::new();
        t.insert(("a".to_string(), "evolved-r01".to_string()), 1.0);
        let ev = TableEvaluator(t);
        let env = EvolveEnv {
            dataset: &w.dataset,
            provider: &w.hf,
            reflector: &DigestReflector,
            evaluator: &ev,
            max_in_flight: 1,
        };
        let cfg = EvolutionConfig {
            seed_count: 2,
            ascent_steps: 5,
            ..Default::default()
        };
        let eval_on: Vec<&InstanceRecord> = w.dataset.iter().collect();
        let scorer = Linear(vec![0.25; 16]);
        let (next, trace) =
            evolve_round(&w.state, &scorer, &cfg, &env, &mut w.table, &eval_on).unwrap();
        assert_eq!(trace.batch, vec!["a".to_string(), "c".to_string()]);
        assert_eq!(next.catalog.len(), 3);
        let p_new = next.catalog.last().unwrap();
        assert_eq!(
            (p_new.origin, p_new.round, p_new.id.as_str()),
            (Origin::Evolved, 1, "evolved-r01")
        );
        assert_eq!(next.interactions.reward("a", "evolved-r01"), Some(1.0));
        assert_eq!(trace.batch_solved, 1);
        assert!(w.table.contexts.contains_key("evolved-r01"));
        for s in &trace.ascent {
            assert_eq!(s.steps.len(), 6);
        }
        // Same inputs, same outcome.
        let mut table2 = world(&[]).table;
        let (again, trace2) =
            evolve_round(&w.state, &scorer, &cfg, &env, &mut table2, &eval_on).unwrap();
        assert_eq!(again, next);
        assert_eq!(trace2, trace);
    }
}
