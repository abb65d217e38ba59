//! Pluggable reward, reflection, and warm-up backends.
//!
//! [`synthetic`] provides a planted-preference environment that makes every
//! stage of the pipeline checkable offline; [`llm`] talks to a chat endpoint.

pub mod llm;
pub mod synthetic;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::catalog::{ContextStrategy, InstanceRecord, InteractionRecord, StrategyBody};
use crate::error::{Error, Result};

/// Reward oracle `R(x, p) ∈ [0, 1]`.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, instance: &InstanceRecord, strategy: &ContextStrategy) -> Result<f64>;
}

/// Rewrites a strategy given the batch of instances it failed on. Returns the
/// new components; identity and provenance are assigned by the caller.
pub trait Reflector: Send + Sync {
    fn reflect(&self, p_pot: &ContextStrategy, batch: &[&InstanceRecord]) -> Result<StrategyBody>;
}

/// Memoizing wrapper that also counts underlying evaluator calls.
pub struct CachedEvaluator<'a> {
    inner: &'a dyn Evaluator,
    cache: Mutex<HashMap<(String, String), f64>>,
    calls: AtomicU64,
}

impl<'a> CachedEvaluator<'a> {
    pub fn new(inner: &'a dyn Evaluator) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Evaluator for CachedEvaluator<'_> {
    fn evaluate(&self, instance: &InstanceRecord, strategy: &ContextStrategy) -> Result<f64> {
        let key = (instance.id.clone(), strategy.id.clone());
        if let Some(&r) = self.cache.lock().expect("reward cache").get(&key) {
            return Ok(r);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let r = self.inner.evaluate(instance, strategy)?;
        self.cache.lock().expect("reward cache").insert(key, r);
        Ok(r)
    }
}

fn checked_reward(
    instance: &InstanceRecord,
    strategy: &ContextStrategy,
    r: Result<f64>,
) -> Result<f64> {
    let fail = |message: String| Error::Evaluation {
        instance: instance.id.clone(),
        context: strategy.id.clone(),
        message,
    };
    match r {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Ok(v) => Err(fail(format!("reward {v} outside [0, 1]"))),
        Err(e @ Error::Evaluation { .. }) => Err(e),
        Err(e) => Err(fail(e.to_string())),
    }
}

/// Evaluates `pairs` with at most `max_in_flight` concurrent calls. Records come
/// back in input order regardless of completion order.
pub fn evaluate_pairs(
    evaluator: &dyn Evaluator,
    pairs: &[(&InstanceRecord, &ContextStrategy)],
    round: u32,
    max_in_flight: usize,
) -> Result<Vec<InteractionRecord>> {
    let one = |&(i, p): &(&InstanceRecord, &ContextStrategy)| -> Result<InteractionRecord> {
        let reward = checked_reward(i, p, evaluator.evaluate(i, p))?;
        InteractionRecord::new(i.id.clone(), p.id.clone(), reward, round)
    };
    if max_in_flight <= 1 || pairs.len() < 2 {
        return pairs.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build evaluation pool: {e}")))?;
    pool.install(|| pairs.par_iter().map(one).collect())
}

/// Mean reward of each pool strategy over `members`; returns the index of the
/// best one (lowest index on ties). Sums run in member order.
pub fn pool_anchor_select(
    members: &[&InstanceRecord],
    pool: &[ContextStrategy],
    evaluator: &dyn Evaluator,
) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Empty("anchor candidate pool"));
    }
    if members.is_empty() {
        return Err(Error::Empty("cluster"));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, p) in pool.iter().enumerate() {
        let mut total = 0.0;
        for m in members {
            total += checked_reward(m, p, evaluator.evaluate(m, p))?;
        }
        let mean = total / members.len() as f64;
        if mean > best.1 {
            best = (j, mean);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::catalog::{Origin, Split};

    /// Reward table keyed by `(instance_id, context_id)`; missing pairs score 0.
    pub struct TableEvaluator(pub HashMap<(String, String), f64>);

    impl Evaluator for TableEvaluator {
        fn evaluate(&self, i: &InstanceRecord, p: &ContextStrategy) -> Result<f64> {
            Ok(*self.0.get(&(i.id.clone(), p.id.clone())).unwrap_or(&0.0))
        }
    }

    pub fn instance(id: &str, split: Split) -> InstanceRecord {
        InstanceRecord {
            id: id.into(),
            text: format!("text of {id}"),
            gold: "yes".into(),
            split,
            cluster: None,
        }
    }

    pub fn strategy(id: &str, instruction: &str) -> ContextStrategy {
        ContextStrategy {
            id: id.into(),
            instruction: instruction.into(),
            demos: vec![],
            reasoning_format: "Think step by step.".into(),
            output_constraints: "Answer only.".into(),
            origin: Origin::Anchor,
            round: 0,
        }
    }
}
