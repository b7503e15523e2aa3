//! Graph Matching Network: joint embedding of a graph pair with cross-graph
//! attention, trained with a margin loss on cosine similarity.

mod blob;
mod gradcheck;
mod model;
pub mod nn;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cg_model::{FeatureStats, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::stub_extract::StubGraph;

pub use blob::{params_from_blob, params_to_blob, BLOB_VERSION};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use model::{GraphInput, PairGradient};
pub use nn::{Linear, Mlp};
pub use train::{fine_tune, sample_anchored_pairs, sample_pairs, train, PairSample, TrainLog};

/// Graph-level embedding width. Fixed.
pub const EMBEDDING_DIM: usize = 256;

/// How the margin loss treats the similarity of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `max(0, margin - l * s)`: similar pairs are pushed to `s >= margin`,
    /// dissimilar ones to `s <= -margin`.
    #[default]
    Reinterpreted,
    /// `max(0, margin - l * (1 - s))`, the literal margin form.
    AsWritten,
}

impl LossForm {
    /// Hinge loss and its derivative with respect to `s`.
    pub fn loss_and_grad(self, s: f64, label: f64, margin: f64) -> (f64, f64) {
        let (arg, dargs) = match self {
            LossForm::Reinterpreted => (label * s, label),
            LossForm::AsWritten => (label * (1.0 - s), -label),
        };
        let v = margin - arg;
        if v > 0.0 {
            (v, -dargs)
        } else {
            (0.0, 0.0)
        }
    }
}

impl FromStr for LossForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinterpreted" => Ok(LossForm::Reinterpreted),
            "as_written" => Ok(LossForm::AsWritten),
            other => Err(Error::UnknownStrategy {
                kind: "loss form",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for LossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossForm::Reinterpreted => "reinterpreted",
            LossForm::AsWritten => "as_written",
        })
    }
}

/// Margin hinge `max(0, margin - l * s)`.
pub fn pair_loss(s: f64, label: f64, margin: f64) -> f64 {
    LossForm::Reinterpreted.loss_and_grad(s, label, margin).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmnConfig {
    pub node_hidden_dim: usize,
    pub message_dim: usize,
    pub propagation_rounds: usize,
    pub embedding_dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    /// Pairs drawn per training epoch.
    pub pairs_per_epoch: usize,
    /// Fraction of similar pairs among the drawn pairs.
    pub positive_fraction: f64,
    pub fine_tune_epochs: usize,
    pub loss_form: LossForm,
    pub seed: u64,
}

impl Default for GmnConfig {
    fn default() -> Self {
        GmnConfig {
            node_hidden_dim: 32,
            message_dim: 64,
            propagation_rounds: 5,
            embedding_dim: EMBEDDING_DIM,
            margin: 0.5,
            learning_rate: 1e-3,
            epochs: 50,
            batch_pairs: 32,
            pairs_per_epoch: 256,
            positive_fraction: 0.5,
            fine_tune_epochs: 10,
            loss_form: LossForm::Reinterpreted,
            seed: 0,
        }
    }
}

impl GmnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("node_hidden_dim", self.node_hidden_dim),
            ("message_dim", self.message_dim),
            ("propagation_rounds", self.propagation_rounds),
            ("epochs", self.epochs),
            ("batch_pairs", self.batch_pairs),
            ("pairs_per_epoch", self.pairs_per_epoch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(Error::invalid(format!(
                "embedding_dim must be {EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::invalid("margin must lie in (0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "learning_rate must be finite and non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::invalid("positive_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Full weight set of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GmnParams {
    pub config: GmnConfig,
    pub encoder: Mlp,
    pub message: Mlp,
    pub update: Mlp,
    pub gate: Linear,
    pub transform: Linear,
    pub readout: Linear,
}

impl GmnParams {
    /// Seeded initialization from `config.seed`.
    pub fn init(config: &GmnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.node_hidden_dim;
        let m = config.message_dim;
        let e = config.embedding_dim;
        Ok(GmnParams {
            config: config.clone(),
            encoder: Mlp::init(&[NUM_FEATURES, h, h], &mut rng),
            message: Mlp::init(&[2 * h, m, m], &mut rng),
            update: Mlp::init(&[2 * h + m, h, h], &mut rng),
            gate: Linear::init(h, e, &mut rng),
            transform: Linear::init(h, e, &mut rng),
            readout: Linear::init(e, e, &mut rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        GmnParams {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            message: self.message.zeros_like(),
            update: self.update.zeros_like(),
            gate: self.gate.zeros_like(),
            transform: self.transform.zeros_like(),
            readout: self.readout.zeros_like(),
        }
    }

    fn linears(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = Vec::new();
        v.extend(self.encoder.layers.iter());
        v.extend(self.message.layers.iter());
        v.extend(self.update.layers.iter());
        v.extend([&self.gate, &self.transform, &self.readout]);
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = Vec::new();
        v.extend(self.encoder.layers.iter_mut());
        v.extend(self.message.layers.iter_mut());
        v.extend(self.update.layers.iter_mut());
        v.extend([&mut self.gate, &mut self.transform, &mut self.readout]);
        v
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.linears()
            .into_iter()
            .flat_map(Linear::slices)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.linears_mut()
            .into_iter()
            .flat_map(Linear::slices_mut)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &GmnParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Joint embeddings of a pair.
    pub fn embed_pair(
        &self,
        a: &StubGraph,
        b: &StubGraph,
        stats: &FeatureStats,
    ) -> Result<(Embedding, Embedding)> {
        let ga = GraphInput::new(&a.graph, stats)?;
        let gb = GraphInput::new(&b.graph, stats)?;
        self.embed_inputs(&ga, &gb)
    }

    pub fn embed_inputs(&self, a: &GraphInput, b: &GraphInput) -> Result<(Embedding, Embedding)> {
        let cache = model::forward(self, a, b)?;
        Ok(cache.embeddings())
    }

    /// Cosine similarity of the joint embeddings of `a` and `b`.
    pub fn similarity(&self, a: &StubGraph, b: &StubGraph, stats: &FeatureStats) -> Result<f64> {
        let (ea, eb) = self.embed_pair(a, b, stats)?;
        cosine_similarity(&ea, &eb)
    }
}

/// Pairwise graph similarity in `[-1, 1]`. One call is one network
/// inference.
pub trait Similarity: Sync {
    fn similarity(&self, a: &StubGraph, b: &StubGraph) -> Result<f64>;
}

/// Similarity backed by a trained network and its normalization statistics.
#[derive(Debug, Clone, Copy)]
pub struct GmnSimilarity<'a> {
    pub params: &'a GmnParams,
    pub stats: &'a FeatureStats,
}

impl Similarity for GmnSimilarity<'_> {
    fn similarity(&self, a: &StubGraph, b: &StubGraph) -> Result<f64> {
        self.params.similarity(a, b, self.stats)
    }
}

/// Graph embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `x . y / (|x| |y|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(x: &Embedding, y: &Embedding) -> Result<f64> {
    if x.0.len() != y.0.len() {
        return Err(Error::invalid("embedding dimensions differ"));
    }
    let (nx, ny) = (x.norm(), y.norm());
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = x.0.iter().zip(&y.0).map(|(a, b)| a * b).sum();
    let s = dot / (nx * ny);
    if !s.is_finite() {
        return Err(Error::Numeric {
            layer: "cosine".into(),
        });
    }
    Ok(s.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_boundaries() {
        assert_eq!(pair_loss(0.5, 1.0, 0.5), 0.0);
        assert_eq!(pair_loss(-0.5, -1.0, 0.5), 0.0);
        assert_eq!(pair_loss(0.5, -1.0, 0.5), 1.0);
        assert_eq!(pair_loss(-1.0, 1.0, 0.5), 1.5);
    }

    #[test]
    fn as_written_form() {
        // l = +1, s = 1 -> max(0, 0.5 - 0) = 0.5 (identical pair penalized)
        let (v, g) = LossForm::AsWritten.loss_and_grad(1.0, 1.0, 0.5);
        assert_eq!(v, 0.5);
        assert_eq!(g, 1.0);
        let (v, _) = LossForm::AsWritten.loss_and_grad(0.0, -1.0, 0.5);
        assert_eq!(v, 1.5);
    }

    #[test]
    fn cosine_cases() {
        let x = Embedding(vec![1.0, 2.0, 3.0]);
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg = Embedding(x.0.iter().map(|v| -v).collect());
        assert!((cosine_similarity(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        let o = Embedding(vec![2.0, -1.0, 0.0]);
        assert_eq!(cosine_similarity(&x, &o).unwrap(), 0.0);
        let z = Embedding(vec![0.0; 3]);
        assert!(cosine_similarity(&x, &z).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GmnConfig::default().validate().is_ok());
        let bad = GmnConfig {
            embedding_dim: 128,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GmnConfig {
            margin: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_layout() {
        let p = GmnParams::init(&GmnConfig::default()).unwrap();
        assert_eq!(p.encoder.sizes(), vec![12, 32, 32]);
        assert_eq!(p.message.sizes(), vec![64, 64, 64]);
        assert_eq!(p.update.sizes(), vec![128, 32, 32]);
        assert_eq!(p.tensors().len(), 18);
        assert!(p.is_finite());
    }
}
