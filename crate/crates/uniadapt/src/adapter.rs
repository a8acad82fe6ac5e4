//! MoE-style calibration adapter.
//!
//! The adapter sits after a chosen block of the frozen model. Gated experts
//! are square linear maps applied to the frozen block output; their scaled
//! sum is added back onto that output. Experts start at zero, so an
//! untrained adapter is exactly the identity, and inputs that gate nothing
//! pass through bit-identically.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::embedding::{Embedder, EmbeddingVector, ProjectionHead};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::router::{gate, routing_scores, GateDecision, RouterConfig};
use crate::vector_store::VectorStore;

const ADAPTER_MAGIC: &[u8; 4] = b"UAAD";
const ADAPTER_VERSION: u8 = 1;

/// One expert: a d x d linear map over the frozen block output.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    weight: Array2<f64>,
}

impl Expert {
    pub fn zero(dim: usize) -> Self {
        Self {
            weight: Array2::zeros((dim, dim)),
        }
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().all(|w| *w == 0.0)
    }
}

/// The calibration module: K experts paired with the K shards of the
/// vector store, a blending coefficient, and the attachment layer.
#[derive(Debug, Clone)]
pub struct Adapter {
    experts: Vec<Expert>,
    lambda: f64,
    layer_index: usize,
    router_config: RouterConfig,
    store: VectorStore,
}

impl Adapter {
    /// Create an adapter with zero-initialized experts. The number of
    /// experts must equal the store's shard count, and the configured
    /// top-k cannot exceed it.
    pub fn new(
        expert_dim: usize,
        lambda: f64,
        layer_index: usize,
        router_config: RouterConfig,
        store: VectorStore,
    ) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "adapter.lambda must be non-negative, got {lambda}"
            )));
        }
        router_config.validate()?;
        if router_config.top_k > store.shard_count() {
            return Err(Error::InvalidConfig(format!(
                "router.top_k ({}) exceeds adapter.experts ({})",
                router_config.top_k,
                store.shard_count()
            )));
        }
        let experts = (0..store.shard_count())
            .map(|_| Expert::zero(expert_dim))
            .collect();
        Ok(Self {
            experts,
            lambda,
            layer_index,
            router_config,
            store,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_dim(&self) -> usize {
        self.experts[0].weight.nrows()
    }

    pub fn expert(&self, k: usize) -> &Expert {
        &self.experts[k]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn router_config(&self) -> &RouterConfig {
        &self.router_config
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    /// Insert an edit embedding; returns the shard (= expert) it landed in.
    pub fn insert_edit(&mut self, edit_id: u64, embedding: EmbeddingVector) -> Result<usize> {
        self.store.insert(edit_id, embedding)
    }

    /// Calibrated output: `base_out + lambda * sum_k W_k base_out` over the
    /// gated experts only. Closed experts are skipped entirely, and an
    /// all-closed gate (or lambda = 0) returns the input untouched.
    pub fn forward(&self, base_out: &Array1<f64>, gate: &GateDecision) -> Result<Array1<f64>> {
        if base_out.len() != self.expert_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.expert_dim(),
                actual: base_out.len(),
            });
        }
        if gate.len() != self.experts.len() {
            return Err(Error::DimensionMismatch {
                expected: self.experts.len(),
                actual: gate.len(),
            });
        }
        if self.lambda == 0.0 || gate.active_count() == 0 {
            return Ok(base_out.clone());
        }
        let mut out = base_out.clone();
        for k in gate.active_indices() {
            out.scaled_add(self.lambda, &self.experts[k].weight.dot(base_out));
        }
        Ok(out)
    }

    /// Gate decision for a whole query sentence. Every token position of
    /// the query reuses this one decision during the forward pass.
    pub fn sentence_gate(
        &self,
        query: &str,
        embedder: &Embedder,
        head: &ProjectionHead,
    ) -> Result<GateDecision> {
        let embedding = embedder.embed(query, head)?;
        let scores = routing_scores(&self.store, &embedding, self.router_config.epsilon)?;
        Ok(gate(&scores, self.router_config.top_k))
    }

    /// Write the adapter checkpoint (experts + lambda + layer index). The
    /// vector store is persisted separately in its own format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(ADAPTER_MAGIC)?;
        file.write_u8(ADAPTER_VERSION)?;
        file.write_f64::<LittleEndian>(self.lambda)?;
        file.write_u32::<LittleEndian>(self.layer_index as u32)?;
        file.write_u32::<LittleEndian>(self.experts.len() as u32)?;
        file.write_u32::<LittleEndian>(self.expert_dim() as u32)?;
        for expert in &self.experts {
            for w in expert.weight.iter() {
                file.write_f64::<LittleEndian>(*w)?;
            }
        }
        file.flush()?;
        Ok(())
    }

    /// Load an adapter checkpoint back over a router config and store. The
    /// checkpoint's expert count must match the store's shard count.
    pub fn load(path: &Path, router_config: RouterConfig, store: VectorStore) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| truncated("adapter magic"))?;
        if &magic != ADAPTER_MAGIC {
            return Err(Error::FormatError(format!(
                "bad adapter magic {:?}, expected {:?}",
                magic, ADAPTER_MAGIC
            )));
        }
        let version = file.read_u8().map_err(|_| truncated("adapter version"))?;
        if version != ADAPTER_VERSION {
            return Err(Error::FormatError(format!(
                "unsupported adapter version {version}"
            )));
        }
        let lambda = file
            .read_f64::<LittleEndian>()
            .map_err(|_| truncated("lambda"))?;
        let layer_index = file
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated("layer index"))? as usize;
        let expert_count = file
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated("expert count"))? as usize;
        let dim = file
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated("expert dim"))? as usize;
        if expert_count != store.shard_count() {
            return Err(Error::FormatError(format!(
                "checkpoint has {expert_count} experts but store has {} shards",
                store.shard_count()
            )));
        }
        let mut experts = Vec::with_capacity(expert_count);
        for _ in 0..expert_count {
            let mut weight = Array2::zeros((dim, dim));
            for w in weight.iter_mut() {
                *w = file
                    .read_f64::<LittleEndian>()
                    .map_err(|_| truncated("expert weights"))?;
            }
            experts.push(Expert { weight });
        }
        let adapter = Self {
            experts,
            lambda,
            layer_index,
            router_config,
            store,
        };
        Ok(adapter)
    }
}

fn truncated(what: &str) -> Error {
    Error::ParseError {
        line: 0,
        message: format!("truncated file while reading {what}"),
    }
}

/// Cross-entropy of the calibrated model output against a target answer,
/// plus its analytic gradient with respect to one expert's weight.
///
/// The forward pass runs the full frozen stack with only this expert
/// active; the backward pass chains through the frozen blocks above the
/// attachment layer (tanh derivative `1 - out^2`), ending with
/// `dL/dW = lambda * g y^T` where y is the frozen block output.
pub fn edit_loss_and_grad(
    model: &ToyModel,
    expert_weight: &Array2<f64>,
    lambda: f64,
    layer_index: usize,
    query: &str,
    target: usize,
) -> Result<(f64, Array2<f64>)> {
    let blocks = model.blocks();
    if layer_index >= blocks.len() {
        return Err(Error::IndexError {
            index: layer_index,
            limit: blocks.len(),
        });
    }
    if target >= model.vocab().len() {
        return Err(Error::IndexError {
            index: target,
            limit: model.vocab().len(),
        });
    }

    let mut x = model.encode(query)?;
    let mut outputs: Vec<Array1<f64>> = Vec::with_capacity(blocks.len());
    let mut frozen_at_adapter: Option<Array1<f64>> = None;
    for (layer, block) in blocks.iter().enumerate() {
        let y = block.dot(&x).mapv(f64::tanh);
        let out = if layer == layer_index {
            let calibrated = &y + &(expert_weight.dot(&y) * lambda);
            frozen_at_adapter = Some(y);
            calibrated
        } else {
            y
        };
        outputs.push(out.clone());
        x = out;
    }
    let logits = model.head_matrix().dot(&x);

    // softmax cross-entropy, stabilized
    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max_logit).exp());
    let sum_exp = exps.sum();
    let loss = -(logits[target] - max_logit - sum_exp.ln());

    // backward: dL/dlogits = softmax - onehot(target)
    let mut g = exps / sum_exp;
    g[target] -= 1.0;
    g = model.head_matrix().t().dot(&g);
    for layer in (layer_index + 1..blocks.len()).rev() {
        let dz = &g * &outputs[layer].mapv(|t| 1.0 - t * t);
        g = blocks[layer].t().dot(&dz);
    }
    let y = frozen_at_adapter.expect("adapter layer visited");
    let mut grad = Array2::zeros((y.len(), y.len()));
    for (i, gi) in g.iter().enumerate() {
        let coef = lambda * gi;
        if coef == 0.0 {
            continue;
        }
        let mut row = grad.row_mut(i);
        for (j, yj) in y.iter().enumerate() {
            row[j] += coef * yj;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NumericalError(format!("edit loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Fine-tune experts on routed edits: for each shard with edits, run SGD
/// on the model's output loss with only that shard's expert active. The
/// frozen model and all other experts are untouched.
pub fn train_experts(
    adapter: &mut Adapter,
    routed: &BTreeMap<usize, Vec<(String, String)>>,
    model: &ToyModel,
    epochs: usize,
    lr: f64,
) -> Result<()> {
    for (&shard, edits) in routed {
        if shard >= adapter.expert_count() {
            return Err(Error::IndexError {
                index: shard,
                limit: adapter.expert_count(),
            });
        }
        for (_, answer) in edits {
            if model.vocab_index(answer).is_none() {
                return Err(Error::InvalidInput(format!(
                    "answer '{answer}' is not in the model vocabulary"
                )));
            }
        }
    }
    for (&shard, edits) in routed {
        if edits.is_empty() {
            continue;
        }
        let mut weight = adapter.experts[shard].weight.clone();
        for _epoch in 0..epochs {
            for (prompt, answer) in edits {
                let target = model.vocab_index(answer).expect("validated above");
                let (loss, grad) = edit_loss_and_grad(
                    model,
                    &weight,
                    adapter.lambda,
                    adapter.layer_index,
                    prompt,
                    target,
                )?;
                if !loss.is_finite() {
                    return Err(Error::NumericalError(format!(
                        "non-finite loss while training expert {shard}"
                    )));
                }
                weight -= &(grad * lr);
            }
        }
        if !weight.iter().all(|w| w.is_finite()) {
            return Err(Error::NumericalError(format!(
                "expert {shard} diverged during training"
            )));
        }
        adapter.experts[shard].weight = weight;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingTable;
    use crate::model::ModelSpec;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64, layers: usize, hidden: usize, vocab_size: usize) -> ToyModel {
        let spec = ModelSpec {
            seed,
            layers,
            hidden,
            vocab: (0..vocab_size).map(|i| format!("ans{i:02}")).collect(),
        };
        ToyModel::from_spec(&spec, Embedder::hashed(hidden)).unwrap()
    }

    fn adapter_with(experts: usize, dim: usize, lambda: f64, layer: usize) -> Adapter {
        let store = VectorStore::new(experts, 8).unwrap();
        let config = RouterConfig {
            top_k: 1,
            ..RouterConfig::default()
        };
        Adapter::new(dim, lambda, layer, config, store).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
        Array1::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn lambda_zero_passes_through_exactly() {
        let mut adapter = adapter_with(2, 4, 0.0, 0);
        // Non-zero experts to make the check meaningful.
        adapter.experts[0].weight[[1, 2]] = 5.0;
        let base = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        let gate = GateDecision::from_mask(vec![true, true]);
        let out = adapter.forward(&base, &gate).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn all_closed_gate_passes_through_exactly() {
        let mut adapter = adapter_with(2, 4, 1.0, 0);
        adapter.experts[0].weight[[0, 0]] = 3.0;
        let base = Array1::from_vec(vec![0.5, 0.25, -0.125, 1.0]);
        let gate = GateDecision::all_closed(2);
        let out = adapter.forward(&base, &gate).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn identity_expert_doubles_output() {
        let mut adapter = adapter_with(1, 3, 1.0, 0);
        adapter.experts[0].weight = Array2::eye(3);
        let base = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        let gate = GateDecision::from_mask(vec![true]);
        let out = adapter.forward(&base, &gate).unwrap();
        for (o, b) in out.iter().zip(base.iter()) {
            assert_abs_diff_eq!(o, &(2.0 * b), epsilon = 1e-15);
        }
    }

    #[test]
    fn closed_experts_are_never_evaluated() {
        // A NaN weight in a closed expert would poison the output if the
        // implementation multiplied instead of skipping.
        let mut adapter = adapter_with(2, 3, 1.0, 0);
        adapter.experts[1].weight.fill(f64::NAN);
        adapter.experts[0].weight = Array2::eye(3);
        let base = Array1::from_vec(vec![1.0, -1.0, 0.5]);
        let gate = GateDecision::from_mask(vec![true, false]);
        let out = adapter.forward(&base, &gate).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lambda_continuity_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut adapter = adapter_with(3, 6, rng.random_range(0.0..2.0), 0);
            for expert in adapter.experts.iter_mut() {
                expert.weight = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
            }
            let base = random_vec(&mut rng, 6);
            let gate = GateDecision::from_mask(vec![true, false, true]);
            let out = adapter.forward(&base, &gate).unwrap();
            let diff = (&out - &base).mapv(|v| v * v).sum().sqrt();
            let base_norm = base.dot(&base).sqrt();
            // Frobenius norm bounds the operator norm.
            let bound: f64 = gate
                .active_indices()
                .map(|k| {
                    adapter.experts[k].weight.mapv(|v| v * v).sum().sqrt() * base_norm
                })
                .sum::<f64>()
                * adapter.lambda();
            assert!(diff <= bound + 1e-9, "diff {diff} exceeds bound {bound}");
        }
    }

    #[test]
    fn sentence_gate_routes_to_stored_edit() {
        let mut table = EmbeddingTable::new(8);
        let mut e0 = vec![0.0; 8];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; 8];
        e1[1] = 1.0;
        table.insert("edit zero", Array1::from_vec(e0)).unwrap();
        table.insert("edit one", Array1::from_vec(e1)).unwrap();
        let mut q = vec![0.0; 8];
        q[7] = 1.0;
        table.insert("unrelated", Array1::from_vec(q)).unwrap();
        let embedder = Embedder::Table(table);
        let head = ProjectionHead::identity(8);

        let mut adapter = adapter_with(2, 4, 1.0, 0);
        for (id, text) in ["edit zero", "edit one"].iter().enumerate() {
            let emb = embedder.embed(text, &head).unwrap();
            adapter.insert_edit(id as u64, emb).unwrap();
        }

        // A stored edit gates exactly its own shard.
        let decision = adapter.sentence_gate("edit one", &embedder, &head).unwrap();
        assert_eq!(decision.mask(), &[false, true]);

        // An orthogonal query gates nothing.
        let decision = adapter.sentence_gate("unrelated", &embedder, &head).unwrap();
        assert_eq!(decision.active_count(), 0);
    }

    #[test]
    fn zero_epochs_leaves_experts_zero() {
        let model = small_model(1, 2, 8, 4);
        let mut adapter = adapter_with(2, 8, 1.0, 0);
        let mut routed = BTreeMap::new();
        routed.insert(0usize, vec![("the query".to_string(), "ans01".to_string())]);
        train_experts(&mut adapter, &routed, &model, 0, 0.5).unwrap();
        assert!(adapter.experts.iter().all(Expert::is_zero));
    }

    #[test]
    fn empty_routed_set_is_noop() {
        let model = small_model(1, 2, 8, 4);
        let mut adapter = adapter_with(2, 8, 1.0, 0);
        train_experts(&mut adapter, &BTreeMap::new(), &model, 10, 0.5).unwrap();
        assert!(adapter.experts.iter().all(Expert::is_zero));
    }

    #[test]
    fn unknown_answer_is_rejected() {
        let model = small_model(1, 2, 8, 4);
        let mut adapter = adapter_with(1, 8, 1.0, 0);
        let mut routed = BTreeMap::new();
        routed.insert(0usize, vec![("q".to_string(), "not-a-word".to_string())]);
        assert!(matches!(
            train_experts(&mut adapter, &routed, &model, 1, 0.5),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_edit_converges_to_target() {
        let model = small_model(21, 4, 32, 8);
        let mut adapter = adapter_with(1, 32, 1.0, 0);
        let prompt = "the capital of atlantis";
        let target = "ans05".to_string();
        let mut routed = BTreeMap::new();
        routed.insert(0usize, vec![(prompt.to_string(), target.clone())]);
        train_experts(&mut adapter, &routed, &model, 200, 30.0).unwrap();
        let gate = GateDecision::from_mask(vec![true]);
        let answer = model.predict(prompt, Some((&adapter, &gate))).unwrap();
        assert_eq!(answer, target);
    }

    #[test]
    fn training_touches_only_the_routed_expert() {
        let model = small_model(21, 3, 16, 4);
        let mut adapter = adapter_with(3, 16, 1.0, 1);
        let before_hash = model.weights_hash();
        let mut routed = BTreeMap::new();
        routed.insert(1usize, vec![("query text".to_string(), "ans02".to_string())]);
        train_experts(&mut adapter, &routed, &model, 20, 5.0).unwrap();
        assert!(!adapter.experts[1].is_zero());
        assert!(adapter.experts[0].is_zero());
        assert!(adapter.experts[2].is_zero());
        assert_eq!(model.weights_hash(), before_hash);
    }

    #[test]
    fn edit_loss_matches_calibrated_forward() {
        // The training-path loss must be the cross-entropy of the same
        // logits the public forward produces with one expert gated on.
        let model = small_model(33, 3, 12, 5);
        let mut adapter = adapter_with(2, 12, 0.8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        adapter.experts[1].weight = Array2::from_shape_fn((12, 12), |_| rng.random_range(-0.5..0.5));
        let gate = GateDecision::from_mask(vec![false, true]);
        let logits = model.forward("some question", Some((&adapter, &gate))).unwrap();
        let target = 3usize;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let expected = -(logits[target] - max - z.ln());
        let (loss, _) = edit_loss_and_grad(
            &model,
            &adapter.experts[1].weight,
            adapter.lambda(),
            adapter.layer_index(),
            "some question",
            target,
        )
        .unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn expert_gradient_matches_finite_differences() {
        let model = small_model(13, 3, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..6 {
            let layer = trial % 3;
            let lambda = rng.random_range(0.2..1.5);
            let weight = Array2::from_shape_fn((6, 6), |_| rng.random_range(-0.5..0.5));
            let target = rng.random_range(0..4);
            let query = format!("probe number {trial}");
            let (_, analytic) =
                edit_loss_and_grad(&model, &weight, lambda, layer, &query, target).unwrap();
            let eps = 1e-6;
            let mut max_err = 0.0f64;
            for i in 0..6 {
                for j in 0..6 {
                    let mut plus = weight.clone();
                    plus[[i, j]] += eps;
                    let mut minus = weight.clone();
                    minus[[i, j]] -= eps;
                    let (lp, _) =
                        edit_loss_and_grad(&model, &plus, lambda, layer, &query, target).unwrap();
                    let (lm, _) =
                        edit_loss_and_grad(&model, &minus, lambda, layer, &query, target).unwrap();
                    let numeric = (lp - lm) / (2.0 * eps);
                    let denom = analytic[[i, j]].abs().max(numeric.abs()).max(1e-8);
                    max_err = max_err.max((analytic[[i, j]] - numeric).abs() / denom);
                }
            }
            assert!(max_err <= 1e-5, "trial {trial}: relative error {max_err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.uaad");
        let mut adapter = adapter_with(2, 5, 0.75, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        adapter.experts[0].weight = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        adapter.save(&path).unwrap();
        let loaded = Adapter::load(
            &path,
            adapter.router_config.clone(),
            adapter.store.clone(),
        )
        .unwrap();
        assert_eq!(loaded.experts, adapter.experts);
        assert_eq!(loaded.lambda(), adapter.lambda());
        assert_eq!(loaded.layer_index(), adapter.layer_index());
    }

    #[test]
    fn checkpoint_shard_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.uaad");
        let adapter = adapter_with(2, 5, 1.0, 0);
        adapter.save(&path).unwrap();
        let other_store = VectorStore::new(3, 8).unwrap();
        assert!(matches!(
            Adapter::load(&path, RouterConfig::default(), other_store),
            Err(Error::FormatError(_))
        ));
    }

    #[test]
    fn top_k_cannot_exceed_expert_count() {
        let store = VectorStore::new(2, 8).unwrap();
        let config = RouterConfig {
            top_k: 3,
            ..RouterConfig::default()
        };
        assert!(matches!(
            Adapter::new(4, 1.0, 0, config, store),
            Err(Error::InvalidConfig(_))
        ));
    }
}
