//! Versioned JSON container for trained router parameters.
//!
//! Floats are written with shortest round-trip formatting, so save followed by
//! load reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dense, PreferenceModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const FORMAT: &str = "ncce-router";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    embedding_dim: usize,
    latent_dim: usize,
    /// `[out, in]` for each MLP layer, output layer last.
    layer_shapes: Vec<[usize; 2]>,
    temperature: f64,
    instance_projection: Matrix,
    context_projection: Matrix,
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PreferenceModel,
    /// Training temperature; routing ignores it.
    pub temperature: f64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let c = Container {
            format: FORMAT.into(),
            version: VERSION,
            embedding_dim: m.instance_projection.cols,
            latent_dim: m.instance_projection.rows,
            layer_shapes: m
                .layers
                .iter()
                .map(|l| [l.weights.rows, l.weights.cols])
                .collect(),
            temperature: self.temperature,
            instance_projection: m.instance_projection.clone(),
            context_projection: m.context_projection.clone(),
            layers: m.layers.clone(),
        };
        serde_json::to_string(&c).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format != FORMAT || c.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{} (expected {FORMAT} v{VERSION})",
                c.format, c.version
            )));
        }
        let model = PreferenceModel {
            instance_projection: c.instance_projection,
            context_projection: c.context_projection,
            layers: c.layers,
        };
        model.check_shapes()?;
        let declared: Vec<[usize; 2]> = model
            .layers
            .iter()
            .map(|l| [l.weights.rows, l.weights.cols])
            .collect();
        if model.instance_projection.cols != c.embedding_dim
            || model.instance_projection.rows != c.latent_dim
            || declared != c.layer_shapes
        {
            return Err(Error::Checkpoint(
                "matrix shapes disagree with the declared header".into(),
            ));
        }
        if !(c.temperature > 0.0 && c.temperature.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "invalid temperature {}",
                c.temperature
            )));
        }
        Ok(Self {
            model,
            temperature: c.temperature,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads and additionally requires a specific embedding dimension.
    pub fn load_for(path: &Path, embedding_dim: usize) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.embedding_dim() != embedding_dim {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {}-dimensional embeddings, provider yields {embedding_dim}",
                ck.model.embedding_dim()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;

    fn sample() -> Checkpoint {
        Checkpoint {
            model: PreferenceModel::init(
                &ModelShape {
                    embedding_dim: 7,
                    latent_dim: 3,
                    hidden: vec![5, 2],
                },
                42,
            ),
            temperature: 0.8,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model.digest(), ck.model.digest());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut ck = sample();
        ck.model.layers[1].bias.push(0.0);
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        v["embedding_dim"] = 8.into();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        v["version"] = 2.into();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn load_for_checks_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        assert!(Checkpoint::load_for(&p, 7).is_ok());
        assert!(Checkpoint::load_for(&p, 8).is_err());
    }
}
