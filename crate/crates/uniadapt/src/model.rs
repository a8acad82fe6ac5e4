//! Frozen toy base model.
//!
//! A stack of L square linear maps with tanh nonlinearities and a linear
//! output head over a closed answer vocabulary. Weights are generated
//! deterministically from a seed and never change after construction; the
//! calibration adapter attaches after the output of a chosen block.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::embedding::{fnv1a64, Embedder};
use crate::error::{Error, Result};
use crate::router::GateDecision;

/// Everything needed to regenerate a model: weights come from the seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub seed: u64,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "d")]
    pub hidden: usize,
    pub vocab: Vec<String>,
}

impl ModelSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::ParseError {
            line: e.line(),
            message: format!("model spec: {e}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("model spec serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("model.layers must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("model.d must be >= 1".into()));
        }
        if self.vocab.is_empty() {
            return Err(Error::InvalidConfig("model vocab must be non-empty".into()));
        }
        Ok(())
    }
}

/// The frozen base model: blocks, output head, vocabulary, input encoder.
#[derive(Debug, Clone)]
pub struct ToyModel {
    blocks: Vec<Array2<f64>>,
    head: Array2<f64>,
    vocab: Vec<String>,
    encoder: Embedder,
}

impl ToyModel {
    /// Build the model from its spec. Block and head entries are drawn
    /// uniformly and scaled by 1/sqrt(d); the draw order is fixed, so a
    /// given seed always yields the same weights.
    pub fn from_spec(spec: &ModelSpec, encoder: Embedder) -> Result<Self> {
        spec.validate()?;
        if encoder.dim() != spec.hidden {
            return Err(Error::DimensionMismatch {
                expected: spec.hidden,
                actual: encoder.dim(),
            });
        }
        let d = spec.hidden;
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut blocks = Vec::with_capacity(spec.layers);
        for _ in 0..spec.layers {
            blocks.push(random_matrix(&mut rng, d, d, scale));
        }
        let head = random_matrix(&mut rng, spec.vocab.len(), d, scale);
        Ok(Self {
            blocks,
            head,
            vocab: spec.vocab.clone(),
            encoder,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_index(&self, answer: &str) -> Option<usize> {
        self.vocab.iter().position(|v| v == answer)
    }

    pub(crate) fn blocks(&self) -> &[Array2<f64>] {
        &self.blocks
    }

    pub(crate) fn head_matrix(&self) -> &Array2<f64> {
        &self.head
    }

    pub(crate) fn encode(&self, query: &str) -> Result<Array1<f64>> {
        Ok(self.encoder.base_embed(query)?.values().clone())
    }

    /// Run the frozen forward pass, optionally calibrated: at the adapter's
    /// layer the block output is replaced by the adapter's output.
    pub fn forward(
        &self,
        query: &str,
        calibration: Option<(&Adapter, &GateDecision)>,
    ) -> Result<Array1<f64>> {
        if let Some((adapter, gate)) = calibration {
            if adapter.layer_index() >= self.blocks.len() {
                return Err(Error::IndexError {
                    index: adapter.layer_index(),
                    limit: self.blocks.len(),
                });
            }
            if gate.len() != adapter.expert_count() {
                return Err(Error::DimensionMismatch {
                    expected: adapter.expert_count(),
                    actual: gate.len(),
                });
            }
        }
        let mut x = self.encode(query)?;
        for (layer, block) in self.blocks.iter().enumerate() {
            let mut y = block.dot(&x).mapv(f64::tanh);
            if let Some((adapter, gate)) = calibration {
                if layer == adapter.layer_index() {
                    y = adapter.forward(&y, gate)?;
                }
            }
            x = y;
        }
        Ok(self.head.dot(&x))
    }

    /// Answer with the arg-max vocabulary entry; ties break toward the
    /// lower index.
    pub fn predict(
        &self,
        query: &str,
        calibration: Option<(&Adapter, &GateDecision)>,
    ) -> Result<String> {
        let logits = self.forward(query, calibration)?;
        Ok(self.vocab[argmax(&logits)].clone())
    }

    /// FNV over the bit patterns of every weight, in a fixed order. Editing
    /// must never change this value.
    pub fn weights_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for block in &self.blocks {
            for w in block.iter() {
                bytes.extend_from_slice(&w.to_bits().to_le_bytes());
            }
        }
        for w in self.head.iter() {
            bytes.extend_from_slice(&w.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

pub(crate) fn argmax(logits: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}
