//! Lifelong editing protocol and evaluation.
//!
//! Edits stream in batches onto a frozen model: each edit's prompt is
//! embedded with the frozen router head, inserted into the vector store,
//! and the expert paired with its shard is fine-tuned on the (prompt,
//! answer) pair. Evaluation reports Reliability (edit prompts answer the
//! edit target), Generality (rephrasings answer the edit target), and
//! Locality (irrelevant prompts keep the pre-edit prediction), plus their
//! mean.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{train_experts, Adapter};
use crate::embedding::{fnv1a64, Embedder, ProjectionHead};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::router::{EditExample, GateDecision, RouterConfig};
use crate::vector_store::VectorStore;

/// A prompt with its expected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnswer {
    pub prompt: String,
    pub answer: String,
}

/// One edit: the target pair, its rephrasings, and an irrelevant probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub edit: PromptAnswer,
    pub rephrases: Vec<String>,
    pub locality: PromptAnswer,
}

impl EditRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.edit.prompt.trim().is_empty() {
            return Err("edit prompt is empty".into());
        }
        if self.edit.answer.trim().is_empty() {
            return Err("edit answer is empty".into());
        }
        if self.rephrases.is_empty() {
            return Err("rephrase list is empty".into());
        }
        if self.rephrases.iter().any(|r| r.trim().is_empty()) {
            return Err("rephrase list contains an empty prompt".into());
        }
        if self.locality.prompt.trim().is_empty() {
            return Err("locality prompt is empty".into());
        }
        Ok(())
    }
}

/// Read a JSON-Lines dataset, one record per line.
pub fn load_dataset(path: &Path) -> Result<Vec<EditRecord>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EditRecord = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            line: line_no,
            message: format!("dataset record: {e}"),
        })?;
        record.validate().map_err(|message| Error::ParseError {
            line: line_no,
            message,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write a dataset in the JSON-Lines schema read by [`load_dataset`].
pub fn save_dataset(records: &[EditRecord], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

/// Check that every answer in the slice exists in the model vocabulary.
pub fn validate_answers(records: &[EditRecord], model: &ToyModel) -> Result<()> {
    for (i, record) in records.iter().enumerate() {
        if model.vocab_index(&record.edit.answer).is_none() {
            return Err(Error::InvalidInput(format!(
                "record {i}: edit answer '{}' is not in the model vocabulary",
                record.edit.answer
            )));
        }
        if model.vocab_index(&record.locality.answer).is_none() {
            return Err(Error::InvalidInput(format!(
                "record {i}: locality answer '{}' is not in the model vocabulary",
                record.locality.answer
            )));
        }
    }
    Ok(())
}

/// Router-training view of a dataset: each edit with its rephrases.
pub fn router_examples(records: &[EditRecord]) -> Vec<EditExample> {
    records
        .iter()
        .map(|r| EditExample {
            edit: r.edit.prompt.clone(),
            rephrases: r.rephrases.clone(),
        })
        .collect()
}

/// Flags marking metrics that were computed over an empty indicator set
/// and therefore reported as the vacuous 1.0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VacuousFlags {
    pub reliability: bool,
    pub generality: bool,
    pub locality: bool,
}

/// Aggregated edit-stream metrics, each in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub reliability: f64,
    pub generality: f64,
    pub locality: f64,
    /// Arithmetic mean of the three metrics.
    pub score: f64,
    /// Number of edits applied before evaluation.
    pub edits: usize,
    pub vacuous: VacuousFlags,
    /// Snapshot of the configuration that produced this report; filled by
    /// the CLI, null for library-level runs.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_metrics(
        reliability: f64,
        generality: f64,
        locality: f64,
        edits: usize,
        vacuous: VacuousFlags,
    ) -> Self {
        Self {
            reliability,
            generality,
            locality,
            score: (reliability + generality + locality) / 3.0,
            edits,
            vacuous,
            config: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::ParseError {
            line: e.line(),
            message: format!("metrics report: {e}"),
        })
    }
}

fn ratio(hits: usize, total: usize) -> (f64, bool) {
    if total == 0 {
        (1.0, true)
    } else {
        (hits as f64 / total as f64, false)
    }
}

/// Editing state: the frozen model, the adapter being written to, the
/// frozen router head, and the expert-training knobs.
pub struct Editor {
    model: ToyModel,
    adapter: Adapter,
    embedder: Embedder,
    head: ProjectionHead,
    per_edit_epochs: usize,
    expert_lr: f64,
    edits_applied: usize,
}

/// Saved adapter state for single-edit rollback.
pub struct EditorSnapshot {
    adapter: Adapter,
    edits_applied: usize,
}

impl Editor {
    pub fn new(
        model: ToyModel,
        adapter: Adapter,
        embedder: Embedder,
        head: ProjectionHead,
        per_edit_epochs: usize,
        expert_lr: f64,
    ) -> Result<Self> {
        if embedder.dim() != head.dim() {
            return Err(Error::DimensionMismatch {
                expected: embedder.dim(),
                actual: head.dim(),
            });
        }
        if adapter.store().dim() != embedder.dim() {
            return Err(Error::DimensionMismatch {
                expected: embedder.dim(),
                actual: adapter.store().dim(),
            });
        }
        if adapter.layer_index() >= model.layer_count() {
            return Err(Error::InvalidConfig(format!(
                "adapter.layer_index ({}) must be below model.layers ({})",
                adapter.layer_index(),
                model.layer_count()
            )));
        }
        if adapter.expert_dim() != model.hidden_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.hidden_dim(),
                actual: adapter.expert_dim(),
            });
        }
        Ok(Self {
            model,
            adapter,
            embedder,
            head,
            per_edit_epochs,
            expert_lr,
            edits_applied: 0,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn edits_applied(&self) -> usize {
        self.edits_applied
    }

    /// Deterministic edit id: hash of the edit prompt, so re-applying the
    /// same record trips the store's duplicate check.
    pub fn edit_id_for(prompt: &str) -> u64 {
        fnv1a64(prompt.as_bytes())
    }

    /// Gate decision for a query under the current store.
    pub fn gate_for(&self, query: &str) -> Result<GateDecision> {
        self.adapter.sentence_gate(query, &self.embedder, &self.head)
    }

    /// Calibrated prediction for a query.
    pub fn predict(&self, query: &str) -> Result<String> {
        let gate = self.gate_for(query)?;
        self.model.predict(query, Some((&self.adapter, &gate)))
    }

    /// Prediction of the frozen base model, ignoring the adapter.
    pub fn predict_base(&self, query: &str) -> Result<String> {
        self.model.predict(query, None)
    }

    /// Apply one edit: embed, insert, fine-tune the expert of the shard
    /// the edit landed in.
    pub fn apply_edit(&mut self, record: &EditRecord) -> Result<()> {
        self.apply_batch(std::slice::from_ref(record))
    }

    /// Apply a batch of edits: all embeddings are inserted first, then each
    /// shard's expert is tuned on the edits that landed in it.
    pub fn apply_batch(&mut self, records: &[EditRecord]) -> Result<()> {
        validate_answers(records, &self.model)?;
        let mut routed: BTreeMap<usize, Vec<(String, String)>> = BTreeMap::new();
        for record in records {
            let embedding = self.embedder.embed(&record.edit.prompt, &self.head)?;
            let shard = self
                .adapter
                .insert_edit(Self::edit_id_for(&record.edit.prompt), embedding)?;
            routed
                .entry(shard)
                .or_default()
                .push((record.edit.prompt.clone(), record.edit.answer.clone()));
        }
        train_experts(
            &mut self.adapter,
            &routed,
            &self.model,
            self.per_edit_epochs,
            self.expert_lr,
        )?;
        self.edits_applied += records.len();
        Ok(())
    }

    pub fn snapshot(&self) -> EditorSnapshot {
        EditorSnapshot {
            adapter: self.adapter.clone(),
            edits_applied: self.edits_applied,
        }
    }

    pub fn restore(&mut self, snapshot: EditorSnapshot) {
        self.adapter = snapshot.adapter;
        self.edits_applied = snapshot.edits_applied;
    }
}

/// Frozen-model predictions for every locality prompt, captured before any
/// edit is applied. The locality metric compares against these.
pub fn capture_baseline(model: &ToyModel, records: &[EditRecord]) -> Result<Vec<String>> {
    records
        .iter()
        .map(|r| model.predict(&r.locality.prompt, None))
        .collect()
}

/// Score the edited model over `records`. `baseline` must hold the frozen
/// model's locality predictions for the same records, captured before the
/// first edit.
pub fn evaluate(
    editor: &Editor,
    records: &[EditRecord],
    baseline: &[String],
) -> Result<MetricsReport> {
    if baseline.len() != records.len() {
        return Err(Error::InvalidState(format!(
            "baseline has {} predictions for {} records; capture it before editing",
            baseline.len(),
            records.len()
        )));
    }
    let per_record: Vec<(usize, usize, usize, usize)> = (0..records.len())
        .into_par_iter()
        .map(|i| -> Result<(usize, usize, usize, usize)> {
            let record = &records[i];
            let rel = usize::from(editor.predict(&record.edit.prompt)? == record.edit.answer);
            let mut gen_hits = 0usize;
            let mut gen_total = 0usize;
            for rephrase in &record.rephrases {
                if rephrase == &record.edit.prompt {
                    continue;
                }
                gen_total += 1;
                gen_hits += usize::from(editor.predict(rephrase)? == record.edit.answer);
            }
            let loc = usize::from(editor.predict(&record.locality.prompt)? == baseline[i]);
            Ok((rel, gen_hits, gen_total, loc))
        })
        .collect::<Result<_>>()?;

    let mut rel_hits = 0;
    let mut gen_hits = 0;
    let mut gen_total = 0;
    let mut loc_hits = 0;
    for (rel, gh, gt, loc) in &per_record {
        rel_hits += rel;
        gen_hits += gh;
        gen_total += gt;
        loc_hits += loc;
    }
    let (reliability, rel_vacuous) = ratio(rel_hits, records.len());
    let (generality, gen_vacuous) = ratio(gen_hits, gen_total);
    let (locality, loc_vacuous) = ratio(loc_hits, records.len());
    Ok(MetricsReport::from_metrics(
        reliability,
        generality,
        locality,
        editor.edits_applied(),
        VacuousFlags {
            reliability: rel_vacuous,
            generality: gen_vacuous,
            locality: loc_vacuous,
        },
    ))
}

/// Knobs for one editing run; the trained head and embedder come in
/// separately because sweeps share them across runs.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub router: RouterConfig,
    pub experts: usize,
    pub lambda: f64,
    pub layer_index: usize,
    pub per_edit_epochs: usize,
    pub expert_lr: f64,
    pub batch_size: usize,
}

impl RunParams {
    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        if self.experts == 0 {
            return Err(Error::InvalidConfig("adapter.experts must be >= 1".into()));
        }
        if self.router.top_k > self.experts {
            return Err(Error::InvalidConfig(format!(
                "router.top_k ({}) exceeds adapter.experts ({})",
                self.router.top_k, self.experts
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("harness.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

fn build_editor(
    model: &ToyModel,
    embedder: &Embedder,
    head: &ProjectionHead,
    params: &RunParams,
) -> Result<Editor> {
    params.validate()?;
    let store = VectorStore::new(params.experts, embedder.dim())?;
    let adapter = Adapter::new(
        model.hidden_dim(),
        params.lambda,
        params.layer_index,
        params.router.clone(),
        store,
    )?;
    Editor::new(
        model.clone(),
        adapter,
        embedder.clone(),
        head.clone(),
        params.per_edit_epochs,
        params.expert_lr,
    )
}

/// Lifelong protocol: apply the first `t` records in batches, then
/// evaluate once over all of them against the pre-edit baseline.
pub fn run_lifelong(
    model: &ToyModel,
    embedder: &Embedder,
    head: &ProjectionHead,
    params: &RunParams,
    dataset: &[EditRecord],
    t: usize,
) -> Result<MetricsReport> {
    run_lifelong_with_state(model, embedder, head, params, dataset, t).map(|(report, _)| report)
}

/// [`run_lifelong`] variant that also returns the final editing state so
/// callers can persist the store or adapter.
pub fn run_lifelong_with_state(
    model: &ToyModel,
    embedder: &Embedder,
    head: &ProjectionHead,
    params: &RunParams,
    dataset: &[EditRecord],
    t: usize,
) -> Result<(MetricsReport, Editor)> {
    let outcome = run_lifelong_periodic(model, embedder, head, params, dataset, t, None)?;
    Ok((outcome.report, outcome.editor))
}

/// Result of a lifelong run with optional mid-stream diagnostics.
pub struct LifelongOutcome {
    /// (edits applied, report) pairs captured mid-stream.
    pub intermediates: Vec<(usize, MetricsReport)>,
    /// The protocol's final evaluation over all applied records.
    pub report: MetricsReport,
    pub editor: Editor,
}

/// Diagnostic variant of the lifelong run: when `eval_every` is set, the
/// stream is additionally evaluated over the records applied so far after
/// every that-many batches. Intermediate reports do not affect the final
/// one; the protocol still evaluates once at the end.
pub fn run_lifelong_periodic(
    model: &ToyModel,
    embedder: &Embedder,
    head: &ProjectionHead,
    params: &RunParams,
    dataset: &[EditRecord],
    t: usize,
    eval_every: Option<usize>,
) -> Result<LifelongOutcome> {
    if t > dataset.len() {
        return Err(Error::InsufficientData(format!(
            "requested {t} edits but dataset has {}",
            dataset.len()
        )));
    }
    if eval_every == Some(0) {
        return Err(Error::InvalidInput("eval_every must be >= 1".into()));
    }
    let records = &dataset[..t];
    validate_answers(records, model)?;
    let mut editor = build_editor(model, embedder, head, params)?;
    let baseline = capture_baseline(&editor.model, records)?;
    let mut intermediates = Vec::new();
    for (index, batch) in records.chunks(params.batch_size).enumerate() {
        editor.apply_batch(batch)?;
        if let Some(every) = eval_every {
            let is_last = editor.edits_applied() == t;
            if (index + 1) % every == 0 && !is_last {
                let applied = editor.edits_applied();
                let report = evaluate(&editor, &records[..applied], &baseline[..applied])?;
                log::info!(
                    "after {applied} edits: reliability {:.4}, generality {:.4}, locality {:.4}",
                    report.reliability,
                    report.generality,
                    report.locality
                );
                intermediates.push((applied, report));
            }
        }
    }
    let report = evaluate(&editor, records, &baseline)?;
    Ok(LifelongOutcome {
        intermediates,
        report,
        editor,
    })
}

/// Result of a single-editing run: the averaged report and the per-batch
/// reports it averages.
#[derive(Debug, Clone)]
pub struct SingleEditOutcome {
    pub averaged: MetricsReport,
    pub per_trial: Vec<MetricsReport>,
}

/// Single-editing protocol: apply one batch, evaluate it, roll back, and
/// repeat for `n_trials` batches. After every rollback, ten probe queries
/// must predict exactly what they predicted before the batch; any drift is
/// an error.
pub fn run_single(
    model: &ToyModel,
    embedder: &Embedder,
    head: &ProjectionHead,
    params: &RunParams,
    dataset: &[EditRecord],
    n_trials: usize,
) -> Result<SingleEditOutcome> {
    if n_trials == 0 {
        return Err(Error::InvalidInput("n_trials must be >= 1".into()));
    }
    let needed = n_trials * params.batch_size;
    if needed > dataset.len() {
        return Err(Error::InsufficientData(format!(
            "{n_trials} trials of batch size {} need {needed} records, dataset has {}",
            params.batch_size,
            dataset.len()
        )));
    }
    let records = &dataset[..needed];
    validate_answers(records, model)?;
    let mut editor = build_editor(model, embedder, head, params)?;
    let baseline = capture_baseline(&editor.model, records)?;

    let probes: Vec<&str> = records
        .iter()
        .map(|r| r.edit.prompt.as_str())
        .chain(records.iter().map(|r| r.locality.prompt.as_str()))
        .take(10)
        .collect();

    let mut per_trial = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let start = trial * params.batch_size;
        let batch = &records[start..start + params.batch_size];
        let batch_baseline = &baseline[start..start + params.batch_size];
        let before: Vec<String> = probes
            .iter()
            .map(|p| editor.predict(p))
            .collect::<Result<_>>()?;
        let snapshot = editor.snapshot();
        editor.apply_batch(batch)?;
        let mut report = evaluate(&editor, batch, batch_baseline)?;
        report.edits = batch.len();
        per_trial.push(report);
        editor.restore(snapshot);
        let after: Vec<String> = probes
            .iter()
            .map(|p| editor.predict(p))
            .collect::<Result<_>>()?;
        if before != after {
            return Err(Error::InvalidState(format!(
                "rollback after trial {trial} changed probe predictions"
            )));
        }
    }

    let n = per_trial.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| per_trial.iter().map(f).sum::<f64>() / n;
    let vacuous = VacuousFlags {
        reliability: per_trial.iter().all(|r| r.vacuous.reliability),
        generality: per_trial.iter().all(|r| r.vacuous.generality),
        locality: per_trial.iter().all(|r| r.vacuous.locality),
    };
    let averaged = MetricsReport::from_metrics(
        mean(|r| r.reliability),
        mean(|r| r.generality),
        mean(|r| r.locality),
        needed,
        vacuous,
    );
    Ok(SingleEditOutcome {
        averaged,
        per_trial,
    })
}

/// Hyper-parameter axes exposed to the sweep runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Layer,
    Experts,
    Epsilon,
    TopK,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::Layer),
            "experts" => Ok(Self::Experts),
            "epsilon" => Ok(Self::Epsilon),
            "top_k" => Ok(Self::TopK),
            other => Err(Error::InvalidInput(format!(
                "unknown ablation axis '{other}' (expected layer|experts|epsilon|top_k)"
            ))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Layer => "layer",
            Self::Experts => "experts",
            Self::Epsilon => "epsilon",
            Self::TopK => "top_k",
        };
        f.write_str(name)
    }
}

fn integral(value: f64, axis: AblationAxis) -> Result<usize> {
    if value.fract() != 0.0 || value < 0.0 {
        return Err(Error::InvalidInput(format!(
            "axis {axis} needs a non-negative integer, got {value}"
        )));
    }
    Ok(value as usize)
}

/// Validate every axis value against the base parameters and return the
/// per-value run configurations.
pub fn plan_ablation(
    model: &ToyModel,
    base: &RunParams,
    axis: AblationAxis,
    values: &[f64],
) -> Result<Vec<(f64, RunParams)>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one value".into()));
    }
    let mut plan = Vec::with_capacity(values.len());
    for &value in values {
        let mut params = base.clone();
        match axis {
            AblationAxis::Layer => {
                let layer = integral(value, axis)?;
                if layer >= model.layer_count() {
                    return Err(Error::InvalidInput(format!(
                        "layer {layer} out of range for a {}-layer model",
                        model.layer_count()
                    )));
                }
                params.layer_index = layer;
            }
            AblationAxis::Experts => {
                let experts = integral(value, axis)?;
                if experts == 0 {
                    return Err(Error::InvalidInput("experts must be >= 1".into()));
                }
                params.experts = experts;
                params.router.top_k = params.router.top_k.min(experts);
            }
            AblationAxis::Epsilon => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::InvalidInput(format!(
                        "epsilon {value} outside [0, 1]"
                    )));
                }
                params.router.epsilon = value;
            }
            AblationAxis::TopK => {
                let top_k = integral(value, axis)?;
                if top_k == 0 || top_k > params.experts {
                    return Err(Error::InvalidInput(format!(
                        "top_k {top_k} invalid for {} experts",
                        params.experts
                    )));
                }
                params.router.top_k = top_k;
            }
        }
        plan.push((value, params));
    }
    Ok(plan)
}

/// Execute a planned sweep: one full lifelong run per value.
pub fn run_ablation(
    model: &ToyModel,
    embedder: &Embedder,
    head: &ProjectionHead,
    plan: Vec<(f64, RunParams)>,
    dataset: &[EditRecord],
    t: usize,
) -> Result<Vec<(f64, MetricsReport)>> {
    let mut results = Vec::with_capacity(plan.len());
    for (value, params) in plan {
        let report = run_lifelong(model, embedder, head, &params, dataset, t)?;
        results.push((value, report));
    }
    Ok(results)
}

/// One full lifelong run per axis value, all other knobs fixed. Returns
/// (value, report) pairs in the given order.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    model: &ToyModel,
    embedder: &Embedder,
    head: &ProjectionHead,
    base: &RunParams,
    dataset: &[EditRecord],
    t: usize,
    axis: AblationAxis,
    values: &[f64],
) -> Result<Vec<(f64, MetricsReport)>> {
    let plan = plan_ablation(model, base, axis, values)?;
    run_ablation(model, embedder, head, plan, dataset, t)
}

/// Write an ablation sweep as CSV with a fixed header.
pub fn write_sweep_csv(results: &[(f64, MetricsReport)], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "axis_value,reliability,generality,locality,score")?;
    for (value, report) in results {
        writeln!(
            file,
            "{},{},{},{},{}",
            value, report.reliability, report.generality, report.locality, report.score
        )?;
    }
    file.flush()?;
    Ok(())
}

/// Write a router-training loss curve as CSV.
pub fn write_loss_curve_csv(curve: &[f64], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "epoch,mean_loss")?;
    for (epoch, loss) in curve.iter().enumerate() {
        writeln!(file, "{epoch},{loss}")?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingTable;
    use crate::model::ModelSpec;
    use crate::synth::{generate, IrrelevantKind, SynthConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    const DIM: usize = 48;

    fn toy_model(table: &EmbeddingTable, vocab: Vec<String>) -> ToyModel {
        let spec = ModelSpec {
            seed: 5,
            layers: 3,
            hidden: DIM,
            vocab,
        };
        ToyModel::from_spec(&spec, Embedder::Table(table.clone())).unwrap()
    }

    fn default_params(experts: usize) -> RunParams {
        RunParams {
            router: RouterConfig::default(),
            experts,
            lambda: 1.0,
            layer_index: 0,
            per_edit_epochs: 60,
            expert_lr: 60.0,
            batch_size: 5,
        }
    }

    fn synth_setup(n_edits: usize) -> (ToyModel, Embedder, Vec<EditRecord>) {
        let config = SynthConfig {
            n_edits,
            rephrases_per_edit: 2,
            sigma: 0.05,
            dim: DIM,
            vocab_size: 8,
            irrelevant: IrrelevantKind::Orthogonal,
            seed: 31,
        };
        let data = generate(&config).unwrap();
        let model = toy_model(&data.table, data.vocab.clone());
        (model, Embedder::Table(data.table), data.records)
    }

    #[test]
    fn dataset_round_trip_and_line_errors() {
        let (_, _, records) = synth_setup(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edits.jsonl");
        save_dataset(&records, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(records, loaded);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"edit\": {\"prompt\": \"x\"}}\n");
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(Error::ParseError { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn apply_edit_converges_and_preserves_locality() {
        let (model, embedder, records) = synth_setup(4);
        let head = ProjectionHead::identity(DIM);
        let mut editor = build_editor(&model, &embedder, &head, &default_params(1)).unwrap();
        let record = &records[0];
        let before_irrelevant = editor.predict(&record.locality.prompt).unwrap();
        editor.apply_edit(record).unwrap();
        assert_eq!(editor.predict(&record.edit.prompt).unwrap(), record.edit.answer);
        assert_eq!(
            editor.predict(&record.locality.prompt).unwrap(),
            before_irrelevant
        );
    }

    #[test]
    fn applying_same_record_twice_is_duplicate() {
        let (model, embedder, records) = synth_setup(2);
        let head = ProjectionHead::identity(DIM);
        let mut editor = build_editor(&model, &embedder, &head, &default_params(1)).unwrap();
        editor.apply_edit(&records[0]).unwrap();
        assert!(matches!(
            editor.apply_edit(&records[0]),
            Err(Error::DuplicateEdit(_))
        ));
    }

    #[test]
    fn evaluate_empty_record_set_is_vacuous() {
        let (model, embedder, _) = synth_setup(2);
        let head = ProjectionHead::identity(DIM);
        let editor = build_editor(&model, &embedder, &head, &default_params(1)).unwrap();
        let report = evaluate(&editor, &[], &[]).unwrap();
        assert_eq!(report.reliability, 1.0);
        assert_eq!(report.generality, 1.0);
        assert_eq!(report.locality, 1.0);
        assert!(report.vacuous.reliability);
        assert!(report.vacuous.generality);
        assert!(report.vacuous.locality);
        assert_abs_diff_eq!(report.score, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_missing_baseline_is_invalid_state() {
        let (model, embedder, records) = synth_setup(2);
        let head = ProjectionHead::identity(DIM);
        let editor = build_editor(&model, &embedder, &head, &default_params(1)).unwrap();
        assert!(matches!(
            evaluate(&editor, &records, &[]),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn oracle_setup_scores_all_ones() {
        let (model, embedder, records) = synth_setup(6);
        let head = ProjectionHead::identity(DIM);
        let params = default_params(2);
        let report = run_lifelong(&model, &embedder, &head, &params, &records, 6).unwrap();
        assert_eq!(report.reliability, 1.0);
        assert_eq!(report.generality, 1.0);
        assert_eq!(report.locality, 1.0);
        assert_abs_diff_eq!(report.score, 1.0, epsilon = 1e-12);
        assert_eq!(report.edits, 6);
    }

    /// Three records engineered for exactly one failure per metric:
    /// record 2's edit embedding duplicates record 0's direction so its
    /// later training overwrites record 0 (reliability and generality miss
    /// on record 0), and record 2's irrelevant probe sits close to record
    /// 1's edit so it gates on and loses locality.
    #[test]
    fn hand_built_two_thirds_metrics() {
        let dim = 24;
        let mut table = EmbeddingTable::new(dim);
        let basis = |i: usize| {
            let mut v = vec![0.0; dim];
            v[i] = 1.0;
            Array1::from_vec(v)
        };
        let near = |i: usize, j: usize, w: f64| {
            let mut v = vec![0.0; dim];
            v[i] = w;
            v[j] = (1.0 - w * w).sqrt();
            Array1::from_vec(v)
        };
        table.insert("edit-0", basis(0)).unwrap();
        table.insert("edit-0-r", near(0, 10, 0.999)).unwrap();
        table.insert("irr-0", basis(11)).unwrap();
        table.insert("edit-1", basis(1)).unwrap();
        table.insert("edit-1-r", near(1, 12, 0.999)).unwrap();
        table.insert("irr-1", basis(13)).unwrap();
        // Same direction as edit-0, distinct text: trained later, wins.
        table.insert("edit-2", basis(0)).unwrap();
        table.insert("edit-2-r", near(0, 14, 0.999)).unwrap();
        // Close to edit-1: gates on and is answered like edit-1.
        table.insert("irr-2", near(1, 15, 0.95)).unwrap();

        let vocab: Vec<String> = (0..6).map(|i| format!("ans{i:02}")).collect();
        let model = toy_model_with_dim(&table, vocab.clone(), dim);
        let embedder = Embedder::Table(table);
        let head = ProjectionHead::identity(dim);

        let baseline_r = model.predict("edit-1-r", None).unwrap();
        let baseline_irr2 = model.predict("irr-2", None).unwrap();
        // Pick answers that make every intended failure observable.
        let y0 = vocab[0].clone();
        let y2 = vocab[1].clone();
        let y1 = vocab
            .iter()
            .find(|v| **v != baseline_r && **v != baseline_irr2)
            .unwrap()
            .clone();

        let record = |edit: &str, answer: &str, rephrase: &str, irr: &str| EditRecord {
            edit: PromptAnswer {
                prompt: edit.into(),
                answer: answer.into(),
            },
            rephrases: vec![rephrase.into()],
            locality: PromptAnswer {
                prompt: irr.into(),
                answer: answer.into(),
            },
        };
        let records = vec![
            record("edit-0", &y0, "edit-0-r", "irr-0"),
            record("edit-1", &y1, "edit-1-r", "irr-1"),
            record("edit-2", &y2, "edit-2-r", "irr-2"),
        ];

        let mut params = default_params(1);
        params.per_edit_epochs = 120;
        params.batch_size = 1;
        let report = run_lifelong(&model, &embedder, &head, &params, &records, 3).unwrap();
        assert_abs_diff_eq!(report.reliability, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.generality, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.locality, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.score, 2.0 / 3.0, epsilon = 1e-12);
    }

    fn toy_model_with_dim(table: &EmbeddingTable, vocab: Vec<String>, dim: usize) -> ToyModel {
        let spec = ModelSpec {
            seed: 5,
            layers: 3,
            hidden: dim,
            vocab,
        };
        ToyModel::from_spec(&spec, Embedder::Table(table.clone())).unwrap()
    }

    #[test]
    fn lifelong_t1_equals_single_edit_eval() {
        let (model, embedder, records) = synth_setup(3);
        let head = ProjectionHead::identity(DIM);
        let params = default_params(1);
        let lifelong = run_lifelong(&model, &embedder, &head, &params, &records, 1).unwrap();

        let mut single_params = params.clone();
        single_params.batch_size = 1;
        let single = run_single(&model, &embedder, &head, &single_params, &records, 1).unwrap();
        assert_eq!(lifelong.reliability, single.averaged.reliability);
        assert_eq!(lifelong.generality, single.averaged.generality);
        assert_eq!(lifelong.locality, single.averaged.locality);
    }

    #[test]
    fn run_lifelong_rejects_oversized_t() {
        let (model, embedder, records) = synth_setup(3);
        let head = ProjectionHead::identity(DIM);
        assert!(matches!(
            run_lifelong(&model, &embedder, &head, &default_params(1), &records, 4),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn run_single_averages_match_per_trial_mean() {
        let (model, embedder, records) = synth_setup(8);
        let head = ProjectionHead::identity(DIM);
        let mut params = default_params(2);
        params.batch_size = 2;
        let outcome = run_single(&model, &embedder, &head, &params, &records, 4).unwrap();
        assert_eq!(outcome.per_trial.len(), 4);
        let mean =
            |f: fn(&MetricsReport) -> f64| outcome.per_trial.iter().map(f).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(
            outcome.averaged.reliability,
            mean(|r| r.reliability),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            outcome.averaged.generality,
            mean(|r| r.generality),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            outcome.averaged.locality,
            mean(|r| r.locality),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            outcome.averaged.score,
            mean(|r| r.score),
            epsilon = 1e-12
        );
    }

    #[test]
    fn rollback_restores_probe_predictions() {
        let (model, embedder, records) = synth_setup(6);
        let head = ProjectionHead::identity(DIM);
        let mut params = default_params(2);
        params.batch_size = 3;
        let mut editor = build_editor(&model, &embedder, &head, &params).unwrap();
        let probes: Vec<&str> = records.iter().map(|r| r.edit.prompt.as_str()).collect();
        let before: Vec<String> = probes.iter().map(|p| editor.predict(p).unwrap()).collect();
        let snapshot = editor.snapshot();
        editor.apply_batch(&records[..3]).unwrap();
        editor.restore(snapshot);
        let after: Vec<String> = probes.iter().map(|p| editor.predict(p).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn evaluate_is_order_insensitive() {
        let (model, embedder, records) = synth_setup(6);
        let head = ProjectionHead::identity(DIM);
        let params = default_params(2);
        let mut editor = build_editor(&model, &embedder, &head, &params).unwrap();
        let baseline = capture_baseline(editor.model(), &records).unwrap();
        for batch in records.chunks(params.batch_size) {
            editor.apply_batch(batch).unwrap();
        }
        let forward = evaluate(&editor, &records, &baseline).unwrap();

        let mut shuffled: Vec<(EditRecord, String)> = records
            .iter()
            .cloned()
            .zip(baseline.iter().cloned())
            .collect();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let (records_shuffled, baseline_shuffled): (Vec<_>, Vec<_>) =
            shuffled.into_iter().unzip();
        let reordered = evaluate(&editor, &records_shuffled, &baseline_shuffled).unwrap();
        assert_eq!(forward.reliability, reordered.reliability);
        assert_eq!(forward.generality, reordered.generality);
        assert_eq!(forward.locality, reordered.locality);
    }

    #[test]
    fn periodic_diagnostics_do_not_change_the_final_report() {
        let (model, embedder, records) = synth_setup(9);
        let head = ProjectionHead::identity(DIM);
        let mut params = default_params(2);
        params.batch_size = 3;
        let plain = run_lifelong(&model, &embedder, &head, &params, &records, 9).unwrap();
        let outcome = run_lifelong_periodic(
            &model, &embedder, &head, &params, &records, 9,
            Some(1),
        )
        .unwrap();
        let intermediates = outcome.intermediates;
        assert_eq!(outcome.report, plain);
        // three batches, last one evaluated as the final report only
        assert_eq!(intermediates.len(), 2);
        assert_eq!(intermediates[0].0, 3);
        assert_eq!(intermediates[1].0, 6);
        for (_, report) in &intermediates {
            assert!(report.reliability >= 0.0 && report.reliability <= 1.0);
        }
    }

    #[test]
    fn identical_runs_are_reproducible() {
        let (model, embedder, records) = synth_setup(6);
        let head = ProjectionHead::identity(DIM);
        let params = default_params(2);
        let a = run_lifelong(&model, &embedder, &head, &params, &records, 6).unwrap();
        let b = run_lifelong(&model, &embedder, &head, &params, &records, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_rejects_bad_values() {
        let (model, embedder, records) = synth_setup(2);
        let head = ProjectionHead::identity(DIM);
        let params = default_params(2);
        assert!(matches!(
            ablate(
                &model, &embedder, &head, &params, &records, 2,
                AblationAxis::Epsilon, &[1.5],
            ),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            ablate(
                &model, &embedder, &head, &params, &records, 2,
                AblationAxis::Layer, &[7.0],
            ),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            ablate(
                &model, &embedder, &head, &params, &records, 2,
                AblationAxis::TopK, &[2.5],
            ),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sweep_csv_has_header_and_rows() {
        let (model, embedder, records) = synth_setup(4);
        let head = ProjectionHead::identity(DIM);
        let params = default_params(2);
        let results = ablate(
            &model,
            &embedder,
            &head,
            &params,
            &records,
            4,
            AblationAxis::Epsilon,
            &[0.3, 0.6],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&results, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "axis_value,reliability,generality,locality,score");
        assert_eq!(lines.len(), 3);
    }
}
