//! Planted-preference environment.
//!
//! Every instance carries a hidden unit latent and every strategy text maps to
//! a unit latent; the reward is 1 when their inner product clears a threshold.
//! Strategy latents come from the text itself, so evolved strategies get one
//! without any bookkeeping:
//!
//! 1. the last `Focus weights: aspect=w ...` line, if present and parseable;
//! 2. otherwise the counts of aspect keywords in the canonical text;
//! 3. otherwise a seeded Gaussian derived from the text's hash.
//!
//! Instance texts repeat aspect keywords in proportion to their latent, which
//! is what lets a text encoder see the planted structure.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Evaluator, Reflector};
use crate::catalog::{
    serialize_strategy, ContextStrategy, InstanceRecord, Origin, Split, StrategyBody,
};
use crate::embedding::tokenize;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::seed;

const FOCUS_PREFIX: &str = "Focus weights:";
const EMPHASIS_PREFIX: &str = "Emphasize:";
const DIGEST_PREFIX: &str = "Batch digest:";

pub const DEFAULT_ASPECTS: [&str; 8] = [
    "geometry",
    "chemistry",
    "history",
    "biology",
    "finance",
    "music",
    "astronomy",
    "poetry",
];

const FILLER: [&str; 24] = [
    "the",
    "a",
    "which",
    "of",
    "given",
    "consider",
    "following",
    "case",
    "what",
    "is",
    "statement",
    "claim",
    "about",
    "when",
    "does",
    "this",
    "hold",
    "true",
    "report",
    "source",
    "it",
    "in",
    "that",
    "and",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    pub aspects: Vec<String>,
    pub threshold: f64,
    pub seed: u64,
    pub instance_latents: BTreeMap<String, Vec<f64>>,
    /// Explicit latents that take precedence over the text rule.
    #[serde(default)]
    pub context_latents: BTreeMap<String, Vec<f64>>,
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n.is_finite() && n >= 1e-12).then(|| v.into_iter().map(|x| x / n).collect())
}

impl SyntheticEnv {
    pub fn dimension(&self) -> usize {
        self.aspects.len()
    }

    pub fn instance_latent(&self, id: &str) -> Result<&[f64]> {
        self.instance_latents
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId {
                kind: "synthetic instance",
                id: id.to_string(),
            })
    }

    fn focus_latent(&self, text: &str) -> Option<Vec<f64>> {
        let line = text
            .lines()
            .rev()
            .find_map(|l| l.trim().strip_prefix(FOCUS_PREFIX))?;
        let mut v = vec![0.0; self.dimension()];
        for pair in line.split_whitespace() {
            let (name, w) = pair.split_once('=')?;
            let w: f64 = w.parse().ok().filter(|w: &f64| w.is_finite())?;
            if let Some(k) = self.aspects.iter().position(|a| a == name) {
                v[k] += w;
            }
        }
        unit(v)
    }

    fn keyword_latent(&self, text: &str) -> Option<Vec<f64>> {
        let mut v = vec![0.0; self.dimension()];
        for t in tokenize(text) {
            if let Some(k) = self.aspects.iter().position(|a| *a == t) {
                v[k] += 1.0;
            }
        }
        unit(v)
    }

    fn hashed_latent(&self, text: &str) -> Vec<f64> {
        let mut rng = seed::rng(seed::splitmix64(self.seed ^ seed::fnv1a64(text.as_bytes())));
        loop {
            let v: Vec<f64> = (0..self.dimension())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if let Some(u) = unit(v) {
                return u;
            }
        }
    }

    /// Latent of a strategy as defined by the module-level rule.
    pub fn context_latent(&self, p: &ContextStrategy) -> Vec<f64> {
        if let Some(v) = self.context_latents.get(&p.id) {
            return v.clone();
        }
        self.text_latent(&serialize_strategy(p))
    }

    pub fn text_latent(&self, text: &str) -> Vec<f64> {
        self.focus_latent(text)
            .or_else(|| self.keyword_latent(text))
            .unwrap_or_else(|| self.hashed_latent(text))
    }

    pub fn reward(&self, instance_id: &str, p: &ContextStrategy) -> Result<f64> {
        let x = self.instance_latent(instance_id)?;
        Ok(if dot(x, &self.context_latent(p)) >= self.threshold {
            1.0
        } else {
            0.0
        })
    }

    /// Normalized mean latent of `ids`.
    pub fn mean_latent(&self, ids: &[&str]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dimension()];
        for id in ids {
            for (a, x) in acc.iter_mut().zip(self.instance_latent(id)?) {
                *a += x;
            }
        }
        unit(acc).ok_or(Error::ZeroVector)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Knobs of the planted generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub aspects: Vec<String>,
    /// Relative frequency of each aspect as an instance's primary aspect.
    pub shares: Vec<f64>,
    /// Off-primary latent components are drawn from `U(0, noise)`.
    pub noise: f64,
    pub threshold: f64,
    /// Keyword repetitions per unit of latent weight in instance texts.
    pub words_per_unit: f64,
    pub filler_words: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            aspects: DEFAULT_ASPECTS.iter().map(|s| s.to_string()).collect(),
            shares: vec![0.2, 0.2, 0.2, 0.2, 0.1, 0.1, 0.0, 0.0],
            noise: 0.3,
            threshold: 0.55,
            words_per_unit: 8.0,
            filler_words: 6,
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic env: {m}")));
        if self.aspects.is_empty() || self.aspects.len() != self.shares.len() {
            return bad("aspects and shares must be nonempty and of equal length");
        }
        if self.shares.iter().any(|s| s.is_nan() || *s < 0.0)
            || self.shares.iter().sum::<f64>() <= 0.0
        {
            return bad("shares must be non-negative with a positive sum");
        }
        if self.n_train == 0 {
            return bad("n_train must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad("noise must be in [0, 1] and threshold in (0, 1]");
        }
        Ok(())
    }
}

pub struct Planted {
    pub env: SyntheticEnv,
    pub instances: Vec<InstanceRecord>,
    /// One single-aspect strategy per aspect, in aspect order.
    pub pool: Vec<ContextStrategy>,
}

/// Draws an environment, its instances (train-split candidates first, then
/// test), and a single-aspect candidate pool.
pub fn generate(cfg: &PlantedConfig, seed_value: u64) -> Result<Planted> {
    cfg.validate()?;
    let mut rng = seed::rng(seed_value);
    let d = cfg.aspects.len();
    let total: f64 = cfg.shares.iter().sum();
    let n = cfg.n_train + cfg.n_test;
    let mut latents = BTreeMap::new();
    let mut instances = Vec::with_capacity(n);
    for idx in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut primary = d - 1;
        for (k, s) in cfg.shares.iter().enumerate() {
            if pick < *s {
                primary = k;
                break;
            }
            pick -= s;
        }
        let raw: Vec<f64> = (0..d)
            .map(|k| {
                if k == primary {
                    1.0
                } else {
                    rng.random::<f64>() * cfg.noise
                }
            })
            .collect();
        let latent = unit(raw).expect("primary component is 1");

        let mut words: Vec<&str> = Vec::new();
        for (k, w) in latent.iter().enumerate() {
            let reps = (w * cfg.words_per_unit).round() as usize;
            words.extend(std::iter::repeat_n(cfg.aspects[k].as_str(), reps));
        }
        for _ in 0..cfg.filler_words {
            words.push(FILLER[rng.random_range(0..FILLER.len())]);
        }
        words.shuffle(&mut rng);

        let id = format!("x{idx:04}");
        instances.push(InstanceRecord {
            id: id.clone(),
            text: words.join(" "),
            gold: if rng.random::<bool>() { "yes" } else { "no" }.into(),
            split: if idx < cfg.n_train {
                Split::Train
            } else {
                Split::Test
            },
            cluster: None,
        });
        latents.insert(id, latent);
    }

    let pool = cfg
        .aspects
        .iter()
        .enumerate()
        .map(|(k, a)| ContextStrategy {
            id: format!("pool-{k:02}"),
            instruction: format!("Answer the question with attention to {a}."),
            demos: vec![],
            reasoning_format: "Reason briefly, then decide.".into(),
            output_constraints: "Reply with yes or no.".into(),
            origin: Origin::Anchor,
            round: 0,
        })
        .collect();

    Ok(Planted {
        env: SyntheticEnv {
            aspects: cfg.aspects.clone(),
            threshold: cfg.threshold,
            seed: seed_value,
            instance_latents: latents,
            context_latents: BTreeMap::new(),
        },
        instances,
        pool,
    })
}

pub struct SyntheticEvaluator {
    pub env: Arc<SyntheticEnv>,
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&self, instance: &InstanceRecord, strategy: &ContextStrategy) -> Result<f64> {
        self.env.reward(&instance.id, strategy)
    }
}

fn batch_digest(batch: &[&InstanceRecord]) -> String {
    let mut ids: Vec<&str> = batch.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    format!("{:016x}", seed::fnv1a64(ids.join("\n").as_bytes()))
}

/// Drops lines earlier reflection rounds appended, so repeated reflection does
/// not accumulate stale focus directives.
fn base_instruction(instruction: &str) -> String {
    instruction
        .lines()
        .filter(|l| {
            let t = l.trim_start();
            !(t.starts_with(FOCUS_PREFIX)
                || t.starts_with(EMPHASIS_PREFIX)
                || t.starts_with(DIGEST_PREFIX))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Offline reflector whose output latent is the normalized mean latent of the
/// failure batch.
pub struct MockReflector {
    pub env: Arc<SyntheticEnv>,
}

impl Reflector for MockReflector {
    fn reflect(&self, p_pot: &ContextStrategy, batch: &[&InstanceRecord]) -> Result<StrategyBody> {
        if batch.is_empty() {
            return Err(Error::Empty("failure batch"));
        }
        let ids: Vec<&str> = batch.iter().map(|i| i.id.as_str()).collect();
        let mean = self.env.mean_latent(&ids)?;
        let weights: Vec<String> = self
            .env
            .aspects
            .iter()
            .zip(&mean)
            .filter(|(_, w)| **w != 0.0)
            .map(|(a, w)| format!("{a}={w}"))
            .collect();
        let mut emphasis = Vec::new();
        for (a, w) in self.env.aspects.iter().zip(&mean) {
            emphasis.extend(std::iter::repeat_n(
                a.as_str(),
                (w * 4.0).round().max(0.0) as usize,
            ));
        }
        let mut instruction = base_instruction(&p_pot.instruction);
        instruction.push_str(&format!(
            "\n{FOCUS_PREFIX} {}\n{EMPHASIS_PREFIX} {}\n{DIGEST_PREFIX} {}",
            weights.join(" "),
            emphasis.join(" "),
            batch_digest(batch)
        ));
        let mut body = p_pot.body();
        body.instruction = instruction;
        Ok(body)
    }
}

/// Transport-free reflector that only appends a digest of the batch ids.
pub struct DigestReflector;

impl Reflector for DigestReflector {
    fn reflect(&self, p_pot: &ContextStrategy, batch: &[&InstanceRecord]) -> Result<StrategyBody> {
        if batch.is_empty() {
            return Err(Error::Empty("failure batch"));
        }
        let mut body = p_pot.body();
        body.instruction = format!(
            "{}\n{DIGEST_PREFIX} {}",
            base_instruction(&p_pot.instruction),
            batch_digest(batch)
        );
        Ok(body)
    }
}
