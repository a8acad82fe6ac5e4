//! Vector-assisted routing and router training.
//!
//! The routing score for shard k is the maximum similarity between the
//! query and the shard's stored edits, minus a threshold epsilon. The gate
//! keeps the top-k scores and activates only those that are strictly
//! positive, so queries unrelated to every stored edit activate nothing.
//!
//! The projection head is trained with a multiple-negatives ranking loss:
//! for an anchor edit, pull one of its rephrasings close while pushing the
//! scores of other edits down. Gradients are derived analytically and
//! checked against central finite differences in the tests.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingVector, ProjectionHead};
use crate::error::{Error, Result};
use crate::vector_store::VectorStore;

/// Router hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    /// Activation threshold subtracted from every shard similarity.
    pub epsilon: f64,
    /// Number of top routing scores eligible for activation.
    pub top_k: usize,
    /// SGD learning rate for head training.
    pub lr: f64,
    /// Training passes over the edit set.
    pub epochs: usize,
    /// Negatives sampled per anchor (the batch holds this many plus one
    /// positive pair).
    pub batch_negatives: usize,
    /// Similarity temperature for the loss; copied onto the projection
    /// head at construction. Routing itself is unscaled.
    pub scale: f64,
    /// Seed for shuffling and pair sampling.
    pub seed: u64,
    /// When true, the loss denominator also includes the positive pair
    /// (the standard softmax form); default keeps negatives only.
    pub softmax_includes_positive: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.6,
            top_k: 1,
            lr: 0.05,
            epochs: 25,
            batch_negatives: 4,
            scale: ProjectionHead::DEFAULT_SCALE,
            seed: 42,
            softmax_includes_positive: false,
        }
    }
}

impl RouterConfig {
    /// Field-level checks; cross-field checks against the expert count
    /// live in the engine config.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "router.epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("router.top_k must be >= 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "router.lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_negatives == 0 {
            return Err(Error::InvalidConfig(
                "router.batch_negatives must be >= 1".into(),
            ));
        }
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "router.scale must be a non-negative finite number, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Per-shard routing scores `alpha_k`, each in [-epsilon, 1 - epsilon].
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingVector {
    pub alphas: Vec<f64>,
}

/// Binary expert-activation mask produced by the gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateDecision {
    gates: Vec<bool>,
    active_count: usize,
}

impl GateDecision {
    pub fn from_mask(gates: Vec<bool>) -> Self {
        let active_count = gates.iter().filter(|g| **g).count();
        Self {
            gates,
            active_count,
        }
    }

    pub fn all_closed(len: usize) -> Self {
        Self {
            gates: vec![false; len],
            active_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.gates[k]
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn mask(&self) -> &[bool] {
        &self.gates
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.gates
            .iter()
            .enumerate()
            .filter_map(|(k, g)| g.then_some(k))
    }
}

/// Compute `alpha_k = max_similarity(shard_k, query) - epsilon` for every
/// shard.
pub fn routing_scores(
    store: &VectorStore,
    query: &EmbeddingVector,
    epsilon: f64,
) -> Result<RoutingVector> {
    if query.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: query.dim(),
        });
    }
    let mut alphas = Vec::with_capacity(store.shard_count());
    for shard in 0..store.shard_count() {
        let (score, _) = store.shard_max_similarity(shard, query)?;
        alphas.push(score - epsilon);
    }
    Ok(RoutingVector { alphas })
}

/// Keep the top-k routing scores and activate those that are strictly
/// positive. Ties are broken toward the lower shard index.
pub fn gate(rv: &RoutingVector, top_k: usize) -> GateDecision {
    let k = rv.alphas.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        rv.alphas[b]
            .partial_cmp(&rv.alphas[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gates = vec![false; k];
    for &idx in order.iter().take(top_k) {
        if rv.alphas[idx] > 0.0 {
            gates[idx] = true;
        }
    }
    GateDecision::from_mask(gates)
}

/// Per-text quantities cached for the loss and its gradient.
struct Projected {
    /// Frozen base embedding (unit norm).
    base: Array1<f64>,
    /// Normalized projected embedding.
    unit: Array1<f64>,
    /// Norm of the raw projection `W * base`.
    raw_norm: f64,
}

fn project_for_loss(embedder: &Embedder, head: &ProjectionHead, text: &str) -> Result<Projected> {
    let base = embedder.base_embed(text)?;
    let raw = head.weight().dot(base.values());
    let raw_norm = raw.dot(&raw).sqrt();
    if raw_norm < 1e-300 {
        return Err(Error::NumericalError(
            "projection collapsed embedding to zero".into(),
        ));
    }
    Ok(Projected {
        base: base.values().clone(),
        unit: raw / raw_norm,
        raw_norm,
    })
}

/// Multiple-negatives ranking loss for one anchor:
/// `-(s(anchor, positive) - log sum_a exp(s(anchor, negative_a)))` with
/// `s = scale * similarity` under the given head.
pub fn mnr_loss(
    embedder: &Embedder,
    head: &ProjectionHead,
    anchor: &str,
    positive: &str,
    negatives: &[&str],
    softmax_includes_positive: bool,
) -> Result<f64> {
    mnr_loss_with_grad(
        embedder,
        head,
        anchor,
        positive,
        negatives,
        softmax_includes_positive,
    )
    .map(|(loss, _)| loss)
}

/// Loss plus its analytic gradient with respect to the head weight.
///
/// Writing `u_t = W b_t`, `e_t = u_t / |u_t|` and `dot = e_a . e_x`, the
/// derivative of a pair similarity is
/// `d(dot)/dW = P_a e_x b_a^T + P_x e_a b_x^T` with
/// `P_t = (I - e_t e_t^T) / |u_t|`; pairs sitting on the clamp boundary
/// (dot outside (0, 1)) contribute nothing.
pub fn mnr_loss_with_grad(
    embedder: &Embedder,
    head: &ProjectionHead,
    anchor: &str,
    positive: &str,
    negatives: &[&str],
    softmax_includes_positive: bool,
) -> Result<(f64, Array2<f64>)> {
    if negatives.is_empty() {
        return Err(Error::InvalidInput(
            "mnr loss requires at least one negative".into(),
        ));
    }
    let scale = head.scale();
    let dim = head.dim();
    let anchor_p = project_for_loss(embedder, head, anchor)?;
    let positive_p = project_for_loss(embedder, head, positive)?;
    let negatives_p: Vec<Projected> = negatives
        .iter()
        .map(|n| project_for_loss(embedder, head, n))
        .collect::<Result<_>>()?;

    let dot_pos = anchor_p.unit.dot(&positive_p.unit);
    let s_pos = scale * dot_pos.clamp(0.0, 1.0);
    let dots_neg: Vec<f64> = negatives_p
        .iter()
        .map(|n| anchor_p.unit.dot(&n.unit))
        .collect();
    let s_neg: Vec<f64> = dots_neg.iter().map(|d| scale * d.clamp(0.0, 1.0)).collect();

    // log-sum-exp over the denominator terms
    let mut terms = s_neg.clone();
    if softmax_includes_positive {
        terms.push(s_pos);
    }
    let max_term = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = terms.iter().map(|s| (s - max_term).exp()).sum();
    let log_z = max_term + sum_exp.ln();
    let loss = -(s_pos - log_z);

    // dL/d(similarity) per pair, zeroed on the clamp boundary.
    let in_open_range = |dot: f64| dot > 0.0 && dot < 1.0;
    let softmax = |s: f64| (s - max_term).exp() / sum_exp;
    let coef_pos = {
        let from_denominator = if softmax_includes_positive {
            softmax(s_pos)
        } else {
            0.0
        };
        scale * (from_denominator - 1.0)
    };

    let mut grad = Array2::zeros((dim, dim));
    // v accumulates coef_x * e_x over all active pairs so the anchor-side
    // term needs a single outer product.
    let mut v: Array1<f64> = Array1::zeros(dim);
    let add_pair = |other: &Projected, coef: f64, dot: f64, v: &mut Array1<f64>, grad: &mut Array2<f64>| {
        if coef == 0.0 || !in_open_range(dot) {
            return;
        }
        v.scaled_add(coef, &other.unit);
        // other-side term: P_x (coef * e_a) b_x^T
        let y = &anchor_p.unit * coef;
        let projected = (&y - &(&other.unit * other.unit.dot(&y))) / other.raw_norm;
        add_outer(grad, &projected, &other.base);
    };
    add_pair(&positive_p, coef_pos, dot_pos, &mut v, &mut grad);
    for (neg, dot) in negatives_p.iter().zip(dots_neg.iter()) {
        let coef = scale * softmax(scale * dot.clamp(0.0, 1.0));
        add_pair(neg, coef, *dot, &mut v, &mut grad);
    }
    // anchor-side term: P_a v b_a^T
    let projected = (&v - &(&anchor_p.unit * anchor_p.unit.dot(&v))) / anchor_p.raw_norm;
    add_outer(&mut grad, &projected, &anchor_p.base);

    if !loss.is_finite() {
        return Err(Error::NumericalError(format!("mnr loss is {loss}")));
    }
    Ok((loss, grad))
}

fn add_outer(grad: &mut Array2<f64>, col: &Array1<f64>, row: &Array1<f64>) {
    for (i, c) in col.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        let mut grad_row = grad.row_mut(i);
        for (j, r) in row.iter().enumerate() {
            grad_row[j] += c * r;
        }
    }
}

/// One edit with its rephrasings, as consumed by router training.
#[derive(Debug, Clone)]
pub struct EditExample {
    pub edit: String,
    pub rephrases: Vec<String>,
}

/// Result of router training: the trained head and the mean loss per epoch.
#[derive(Debug, Clone)]
pub struct RouterTraining {
    pub head: ProjectionHead,
    pub loss_curve: Vec<f64>,
}

/// Train the projection head with SGD on the ranking loss.
///
/// Each anchor edit forms one mini-batch: a positive sampled from its
/// rephrases (preferring rephrases distinct from the edit text) and
/// `batch_negatives` other edits sampled without replacement. Anchor order
/// is reshuffled every epoch from the configured seed, so identical inputs
/// give identical training runs. The head is returned frozen; callers must
/// not train it further once routing begins.
pub fn train_router(
    embedder: &Embedder,
    examples: &[EditExample],
    config: &RouterConfig,
    head: ProjectionHead,
) -> Result<RouterTraining> {
    if examples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "router training needs at least 2 edits, got {}",
            examples.len()
        )));
    }
    for (i, example) in examples.iter().enumerate() {
        if example.rephrases.is_empty() {
            return Err(Error::InvalidInput(format!(
                "edit {i} ('{}') has no rephrases",
                example.edit
            )));
        }
    }
    let mut head = head;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let negatives_per_batch = config.batch_negatives.min(examples.len() - 1);

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &anchor_idx in &order {
            let example = &examples[anchor_idx];
            let positive = sample_positive(&mut rng, example);
            let negatives = sample_negatives(&mut rng, examples, anchor_idx, negatives_per_batch);
            let negative_refs: Vec<&str> = negatives.iter().map(|n| n.as_str()).collect();
            let (loss, grad) = mnr_loss_with_grad(
                embedder,
                &head,
                &example.edit,
                positive,
                &negative_refs,
                config.softmax_includes_positive,
            )?;
            if !loss.is_finite() {
                return Err(Error::NumericalError(format!(
                    "non-finite loss at anchor {anchor_idx}"
                )));
            }
            *head.weight_mut() -= &(grad * config.lr);
            epoch_loss += loss;
        }
        if !head.is_finite() {
            return Err(Error::NumericalError(
                "head weights diverged during training".into(),
            ));
        }
        loss_curve.push(epoch_loss / examples.len() as f64);
    }
    Ok(RouterTraining { head, loss_curve })
}

fn sample_positive<'a>(rng: &mut ChaCha8Rng, example: &'a EditExample) -> &'a str {
    let distinct: Vec<&String> = example
        .rephrases
        .iter()
        .filter(|r| **r != example.edit)
        .collect();
    if distinct.is_empty() {
        example.rephrases.choose(rng).unwrap()
    } else {
        distinct.choose(rng).unwrap()
    }
}

fn sample_negatives<'a>(
    rng: &mut ChaCha8Rng,
    examples: &'a [EditExample],
    anchor_idx: usize,
    count: usize,
) -> Vec<&'a String> {
    let picks = rand::seq::index::sample(rng, examples.len() - 1, count);
    picks
        .iter()
        .map(|i| {
            let idx = if i >= anchor_idx { i + 1 } else { i };
            &examples[idx].edit
        })
        .collect()
}
