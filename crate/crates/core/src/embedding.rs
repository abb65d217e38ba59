//! Unit-norm text embeddings for instances and strategies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{serialize_strategy, ContextStrategy};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::seed::{fnv1a64_extend, splitmix64};
use crate::transport::{select_json, RetryPolicy, Transport, TransportError};

pub const DEFAULT_DIMENSION: usize = 384;
pub const EMBED_API_KEY_ENV: &str = "NCCE_EMBED_API_KEY";

/// Norms this close to one are treated as already normalized, which makes
/// [`normalize`] bitwise idempotent.
const UNIT_SLACK: f64 = 1e-12;

/// A finite, L2-normalized vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for EmbeddingVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `v / ‖v‖₂`.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector> {
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            layer: format!("normalize (entry {pos})"),
        });
    }
    let n = norm2(v);
    if n < 1e-12 {
        return Err(Error::ZeroVector);
    }
    if (n - 1.0).abs() <= UNIT_SLACK {
        return Ok(EmbeddingVector(v.to_vec()));
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let mut v = self.embed_batch(&[text])?;
        Ok(v.remove(0))
    }
}

fn check_nonempty(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        Err(Error::EmptyText)
    } else {
        Ok(())
    }
}

/// `embed_text(serialize_strategy(p))`.
pub fn embed_strategy(
    provider: &dyn EmbeddingProvider,
    p: &ContextStrategy,
) -> Result<EmbeddingVector> {
    provider.embed_text(&serialize_strategy(p))
}

// ---------------------------------------------------------------------------
// Hashed features
// ---------------------------------------------------------------------------

/// Signed feature hashing over lowercase word tokens and their boundary-marked
/// character trigrams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashFeatures {
    pub dimension: usize,
    pub seed: u64,
}

impl HashFeatures {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    /// Features extracted from `text`, in emission order.
    pub fn features(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for token in tokenize(text) {
            let padded: Vec<char> = std::iter::once('<')
                .chain(token.chars())
                .chain(std::iter::once('>'))
                .collect();
            out.push(format!("w:{token}"));
            for tri in padded.windows(3) {
                out.push(format!("c:{}", tri.iter().collect::<String>()));
            }
        }
        out
    }

    /// Bucket index and sign for one feature.
    pub fn bucket(&self, feature: &str) -> (usize, f64) {
        let h = fnv1a64_extend(0xcbf2_9ce4_8422_2325, &self.seed.to_le_bytes());
        let h = splitmix64(fnv1a64_extend(h, feature.as_bytes()));
        let idx = (h % self.dimension as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        (idx, sign)
    }

    pub fn raw(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for f in Self::features(text) {
            let (i, s) = self.bucket(&f);
            v[i] += s;
        }
        v
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

impl EmbeddingProvider for HashFeatures {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                check_nonempty(t)?;
                normalize(&self.raw(t)).map_err(|e| match e {
                    // Every bucket cancelled out; still a valid text.
                    Error::ZeroVector => Error::Numeric {
                        layer: "hash_features (all buckets cancelled)".into(),
                    },
                    other => other,
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// External encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEncoderConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    /// Path to the vectors in the response, e.g. `data.*.embedding`.
    #[serde(default = "default_vector_path")]
    pub vector_path: String,
    #[serde(default = "default_embed_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "RetryPolicy::none")]
    pub retry: RetryPolicy,
}

fn default_vector_path() -> String {
    "data.*.embedding".into()
}

fn default_embed_key_env() -> String {
    EMBED_API_KEY_ENV.into()
}

fn default_timeout_secs() -> u64 {
    60
}

/// Embeddings endpoint client: POSTs `{"model", "input": [...]}`.
pub struct ExternalEncoder {
    config: ExternalEncoderConfig,
    api_key: String,
    transport: Box<dyn Transport>,
}

impl ExternalEncoder {
    pub fn new(config: ExternalEncoderConfig, transport: Box<dyn Transport>) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| Error::MissingApiKey(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, api_key, transport))
    }

    pub fn with_key(
        config: ExternalEncoderConfig,
        api_key: String,
        transport: Box<dyn Transport>,
    ) -> Self {
        Self {
            config,
            api_key,
            transport,
        }
    }
}

impl EmbeddingProvider for ExternalEncoder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().try_for_each(|t| check_nonempty(t))?;
        let url = &self.config.endpoint;
        let body = json!({ "model": self.config.model, "input": texts });
        let headers = vec![
            (
                "Authorization".to_string(),
                format!("Bearer {}", self.api_key),
            ),
            ("Content-Type".to_string(), "application/json".to_string()),
        ];
        let resp = self.config.retry.run(url, &std::thread::sleep, || {
            let r = self.transport.post_json(url, &headers, &body)?;
            if !(200..300).contains(&r.status) {
                return Err(TransportError::Status {
                    url: url.clone(),
                    status: r.status,
                    body: r.body,
                });
            }
            Ok(r)
        })?;
        let decode = |message: String| TransportError::Decode {
            url: url.clone(),
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&resp.body).map_err(|e| decode(e.to_string()))?;
        let vectors = select_json(&value, &self.config.vector_path);
        if vectors.len() != texts.len() {
            return Err(decode(format!(
                "expected {} vectors at `{}`, found {}",
                texts.len(),
                self.config.vector_path,
                vectors.len()
            ))
            .into());
        }
        vectors
            .into_iter()
            .map(|v| {
                let raw: Vec<f64> =
                    serde_json::from_value(v.clone()).map_err(|e| decode(e.to_string()))?;
                if raw.len() != self.config.dimension {
                    return Err(Error::DimensionMismatch {
                        what: "external embedding",
                        expected: self.config.dimension,
                        actual: raw.len(),
                    });
                }
                normalize(&raw)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Embedding table
// ---------------------------------------------------------------------------

/// Embeddings keyed by id, one map for instances and one for contexts.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    pub instances: BTreeMap<String, EmbeddingVector>,
    pub contexts: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingTable {
    pub fn instance(&self, id: &str) -> Result<&EmbeddingVector> {
        self.instances.get(id).ok_or_else(|| Error::UnknownId {
            kind: "instance embedding",
            id: id.to_string(),
        })
    }

    pub fn context(&self, id: &str) -> Result<&EmbeddingVector> {
        self.contexts.get(id).ok_or_else(|| Error::UnknownId {
            kind: "context embedding",
            id: id.to_string(),
        })
    }

    /// Embeds every instance and strategy not yet present.
    pub fn extend(
        &mut self,
        provider: &dyn EmbeddingProvider,
        instances: &[crate::catalog::InstanceRecord],
        catalog: &[ContextStrategy],
    ) -> Result<()> {
        let missing: Vec<_> = instances
            .iter()
            .filter(|i| !self.instances.contains_key(&i.id))
            .collect();
        if !missing.is_empty() {
            let texts: Vec<&str> = missing.iter().map(|i| i.text.as_str()).collect();
            for (rec, v) in missing.iter().zip(provider.embed_batch(&texts)?) {
                self.instances.insert(rec.id.clone(), v);
            }
        }
        for p in catalog {
            if !self.contexts.contains_key(&p.id) {
                self.contexts
                    .insert(p.id.clone(), embed_strategy(provider, p)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{HttpResponse, StubTransport};
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let unit = normalize(&[0.0, 1.0]).unwrap();
        assert_eq!(unit.as_slice(), &[0.0, 1.0]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(normalize(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn hash_is_deterministic_and_unit() {
        let p = HashFeatures::new(DEFAULT_DIMENSION, 0);
        let a = p.embed_text("abc").unwrap();
        assert_eq!(a, p.embed_text("abc").unwrap());
        assert!((norm2(&a) - 1.0).abs() < 1e-9);
        assert!(matches!(p.embed_text("  \n"), Err(Error::EmptyText)));
    }

    #[test]
    fn differing_trigram_changes_buckets() {
        let p = HashFeatures::new(DEFAULT_DIMENSION, 0);
        // "abc" -> w:abc, c:<ab, c:abc, c:bc>; "abd" -> w:abd, c:<ab, c:abd, c:bd>
        assert_eq!(
            HashFeatures::features("abc"),
            vec!["w:abc", "c:<ab", "c:abc", "c:bc>"]
        );
        assert_eq!(
            HashFeatures::features("abd"),
            vec!["w:abd", "c:<ab", "c:abd", "c:bd>"]
        );

        // Independent recomputation of the bucket for each feature.
        let reference_bucket = |feature: &str| {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in 0u64.to_le_bytes().iter().chain(feature.as_bytes()) {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
            let h = splitmix64(h);
            (
                (h % DEFAULT_DIMENSION as u64) as usize,
                if h >> 63 == 1 { -1.0 } else { 1.0 },
            )
        };
        let mut raw_abc = vec![0.0; DEFAULT_DIMENSION];
        let mut raw_abd = vec![0.0; DEFAULT_DIMENSION];
        for f in ["w:abc", "c:<ab", "c:abc", "c:bc>"] {
            let (i, s) = reference_bucket(f);
            raw_abc[i] += s;
        }
        for f in ["w:abd", "c:<ab", "c:abd", "c:bd>"] {
            let (i, s) = reference_bucket(f);
            raw_abd[i] += s;
        }
        assert_eq!(p.raw("abc"), raw_abc);
        assert_eq!(p.raw("abd"), raw_abd);
        let a = p.embed_text("abc").unwrap();
        let b = p.embed_text("abd").unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn strategy_embedding_is_embedding_of_canonical_text() {
        use crate::catalog::Origin;
        let p = HashFeatures::new(64, 3);
        let mut s = ContextStrategy {
            id: "x".into(),
            instruction: "Answer carefully".into(),
            demos: vec![],
            reasoning_format: "step by step".into(),
            output_constraints: "one word".into(),
            origin: Origin::Anchor,
            round: 0,
        };
        let e1 = embed_strategy(&p, &s).unwrap();
        assert_eq!(e1, p.embed_text(&serialize_strategy(&s)).unwrap());
        let mut twin = s.clone();
        twin.id = "y".into();
        assert_eq!(e1, embed_strategy(&p, &twin).unwrap());
        s.output_constraints = "a number".into();
        assert_ne!(e1, embed_strategy(&p, &s).unwrap());
    }

    #[test]
    fn external_encoder_reads_vectors() {
        let body = r#"{"data":[{"embedding":[3.0,4.0]},{"embedding":[0.0,2.0]}]}"#;
        let stub = StubTransport::fixed(body);
        let cfg = ExternalEncoderConfig {
            endpoint: "http://x/embeddings".into(),
            model: "m".into(),
            dimension: 2,
            vector_path: default_vector_path(),
            api_key_env: "UNUSED".into(),
            timeout_secs: 5,
            retry: RetryPolicy::none(),
        };
        let enc = ExternalEncoder::with_key(cfg, "k".into(), Box::new(stub));
        let v = enc.embed_batch(&["a", "b"]).unwrap();
        assert!((v[0][0] - 0.6).abs() < 1e-15);
        assert_eq!(v[1].as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn external_encoder_surfaces_status_without_retry() {
        let stub = StubTransport::new(|_, _| {
            Ok(HttpResponse {
                status: 500,
                body: "boom".into(),
            })
        });
        let cfg = ExternalEncoderConfig {
            endpoint: "http://x".into(),
            model: "m".into(),
            dimension: 2,
            vector_path: default_vector_path(),
            api_key_env: "UNUSED".into(),
            timeout_secs: 5,
            retry: RetryPolicy::none(),
        };
        let enc = ExternalEncoder::with_key(cfg, "k".into(), Box::new(stub));
        let e = enc.embed_text("a").unwrap_err();
        assert!(matches!(
            e,
            Error::Transport(TransportError::Status { status: 500, .. })
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_bitwise_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            prop_assume!(norm2(&v) > 1e-9);
            let once = normalize(&v).unwrap();
            prop_assert!((norm2(&once) - 1.0).abs() < 1e-9);
            let twice = normalize(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn hash_embeddings_are_unit(text in "[a-z ]{1,40}[a-z]") {
            let p = HashFeatures::new(32, 1);
            let v = p.embed_text(&text).unwrap();
            prop_assert!((norm2(&v) - 1.0).abs() < 1e-9);
        }
    }
}
