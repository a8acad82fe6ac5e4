//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
//! error. Logging level comes from the `UNIADAPT_LOG` environment variable
//! (error|warn|info|debug).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::{load_vocab, save_vocab, EncoderKind, EngineConfig};
use crate::embedding::{load_table, Embedder, EmbeddingTable, EmbeddingVector, ProjectionHead};
use crate::error::Error;
use crate::harness::{
    self, load_dataset, router_examples, write_loss_curve_csv, write_sweep_csv, AblationAxis,
    EditRecord,
};
use crate::model::{ModelSpec, ToyModel};
use crate::router::{gate, routing_scores, train_router};
use crate::synth::{generate, IrrelevantKind, SynthConfig};
use crate::vector_store::VectorStore;

const EXIT_CONFIG: i32 = 2;
const EXIT_DATA: i32 = 3;
const EXIT_RUNTIME: i32 = 4;

#[derive(Parser)]
#[command(name = "uniadapt", version, about = "Lifelong model editing on a frozen toy model")]
struct Cli {
    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override any config field, e.g. --set router.epsilon=0.4
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Evaluation threads (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Override the model, router, and harness seeds at once.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Single,
    Lifelong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scenario {
    /// Orthogonal edits, small rephrase noise, orthogonal irrelevants.
    Separable,
    /// Irrelevant probes with controlled similarity to one edit.
    NoisyIrrelevant,
}

#[derive(Subcommand)]
enum Command {
    /// Train the router projection head and write its checkpoint.
    TrainRouter {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Head checkpoint output (default: paths.checkpoint).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Optional per-epoch loss curve CSV.
        #[arg(long, value_name = "PATH")]
        curve: Option<PathBuf>,
    },
    /// Apply an edit stream and write a metrics report.
    EditEval {
        #[arg(long, value_enum, default_value_t = Mode::Lifelong)]
        mode: Mode,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Report output (default: paths.report, then report.json).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Lifelong mode only: log diagnostic metrics every N batches.
        #[arg(long, value_name = "N")]
        eval_every: Option<usize>,
    },
    /// Run one hyper-parameter sweep and write a CSV.
    Ablate {
        /// One of: layer, experts, epsilon, top_k.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. 0.1,0.3,0.5
        #[arg(long)]
        values: String,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Sweep CSV output (default: sweep.csv).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Measure store insert throughput and routing latency.
    Bench {
        #[arg(long, default_value_t = 6000)]
        n_edits: usize,
        /// Also write the timing report to this path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset, embedding table, vocab, and config.
    GenData {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        edits: usize,
        #[arg(long, value_enum, default_value_t = Scenario::Separable)]
        scenario: Scenario,
        /// Rephrase perturbation magnitude.
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 2)]
        rephrases: usize,
        #[arg(long, default_value_t = 32)]
        vocab_size: usize,
        /// Similarity band for noisy irrelevants.
        #[arg(long, default_value_t = 0.2)]
        sim_lo: f64,
        #[arg(long, default_value_t = 0.8)]
        sim_hi: f64,
    },
}

struct CliError {
    code: i32,
    message: String,
}

type CliResult<T> = std::result::Result<T, CliError>;

fn err_at(code: i32) -> impl Fn(Error) -> CliError {
    move |e| CliError {
        code,
        message: e.to_string(),
    }
}

/// Runtime-stage classification: missing data stays a data error even when
/// detected mid-run.
fn run_err(e: Error) -> CliError {
    let code = match &e {
        Error::InsufficientData(_) => EXIT_DATA,
        _ => EXIT_RUNTIME,
    };
    CliError {
        code,
        message: e.to_string(),
    }
}

/// Parse arguments, execute, and return the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("UNIADAPT_LOG", "warn"),
    )
    .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => EngineConfig::load(path).map_err(err_at(EXIT_CONFIG))?,
        None => EngineConfig::default(),
    };
    config
        .apply_overrides(&cli.overrides)
        .map_err(err_at(EXIT_CONFIG))?;
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    if let Some(seed) = cli.seed {
        config.model.seed = seed;
        config.router.seed = seed;
        config.harness.seed = seed;
    }
    config.validate().map_err(err_at(EXIT_CONFIG))?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build_global();

    match cli.command {
        Command::TrainRouter { dataset, out, curve } => {
            cmd_train_router(&config, dataset, out, curve)
        }
        Command::EditEval {
            mode,
            dataset,
            out,
            eval_every,
        } => cmd_edit_eval(&config, mode, dataset, out, eval_every),
        Command::Ablate {
            axis,
            values,
            dataset,
            out,
        } => cmd_ablate(&config, &axis, &values, dataset, out),
        Command::Bench { n_edits, out } => cmd_bench(&config, n_edits, out),
        Command::GenData {
            out_dir,
            edits,
            scenario,
            sigma,
            rephrases,
            vocab_size,
            sim_lo,
            sim_hi,
        } => cmd_gen_data(
            &config, &out_dir, edits, scenario, sigma, rephrases, vocab_size, sim_lo, sim_hi,
        ),
    }
}

fn dataset_path(config: &EngineConfig, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    flag.or_else(|| config.paths.dataset.clone())
        .ok_or_else(|| CliError {
            code: EXIT_CONFIG,
            message: "no dataset path (use --dataset or set paths.dataset)".into(),
        })
}

fn load_records(path: &Path) -> CliResult<Vec<EditRecord>> {
    load_dataset(path).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

/// Load the embedding table once when either the router embedder or the
/// model encoder needs it.
fn load_shared_table(config: &EngineConfig) -> CliResult<Option<EmbeddingTable>> {
    let needed =
        config.embedder == EncoderKind::Table || config.model.encoder == EncoderKind::Table;
    if !needed {
        return Ok(None);
    }
    let path = config.paths.embeddings.as_ref().expect("validated");
    let loaded = load_table(path).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(Some(loaded.table))
}

fn router_embedder(
    config: &EngineConfig,
    table: &Option<EmbeddingTable>,
) -> CliResult<Embedder> {
    match config.embedder {
        EncoderKind::Hashed => Ok(Embedder::hashed(config.dim)),
        EncoderKind::Table => {
            let table = table.clone().expect("validated");
            if table.dim() != config.dim {
                return Err(CliError {
                    code: EXIT_DATA,
                    message: format!(
                        "embedding table dim {} does not match config dim {}",
                        table.dim(),
                        config.dim
                    ),
                });
            }
            Ok(Embedder::Table(table))
        }
    }
}

fn build_model(config: &EngineConfig, table: &Option<EmbeddingTable>) -> CliResult<ToyModel> {
    let spec = match &config.model.spec_path {
        Some(path) => ModelSpec::load(path).map_err(|e| CliError {
            code: EXIT_DATA,
            message: format!("{}: {e}", path.display()),
        })?,
        None => {
            let vocab_path = config.model.vocab_path.as_ref().ok_or_else(|| CliError {
                code: EXIT_CONFIG,
                message: "model.vocab_path (or model.spec_path) is required".into(),
            })?;
            let vocab = load_vocab(vocab_path).map_err(|e| CliError {
                code: EXIT_DATA,
                message: format!("{}: {e}", vocab_path.display()),
            })?;
            ModelSpec {
                seed: config.model.seed,
                layers: config.model.layers,
                hidden: config.model.d,
                vocab,
            }
        }
    };
    let encoder = match config.model.encoder {
        EncoderKind::Hashed => Embedder::hashed(spec.hidden),
        EncoderKind::Table => {
            let table = table.clone().expect("validated");
            if table.dim() != spec.hidden {
                return Err(CliError {
                    code: EXIT_DATA,
                    message: format!(
                        "embedding table dim {} does not match model.d {}",
                        table.dim(),
                        spec.hidden
                    ),
                });
            }
            Embedder::Table(table)
        }
    };
    ToyModel::from_spec(&spec, encoder).map_err(err_at(EXIT_DATA))
}

fn load_head(config: &EngineConfig) -> CliResult<ProjectionHead> {
    let path = config.paths.checkpoint.as_ref().ok_or_else(|| CliError {
        code: EXIT_CONFIG,
        message: "paths.checkpoint is required (train the router first)".into(),
    })?;
    ProjectionHead::load(path).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn cmd_train_router(
    config: &EngineConfig,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    curve: Option<PathBuf>,
) -> CliResult<()> {
    let out = out
        .or_else(|| config.paths.checkpoint.clone())
        .ok_or_else(|| CliError {
            code: EXIT_CONFIG,
            message: "no checkpoint output (use --out or set paths.checkpoint)".into(),
        })?;
    let dataset = dataset_path(config, dataset)?;
    let records = load_records(&dataset)?;
    let table = load_shared_table(config)?;
    let embedder = router_embedder(config, &table)?;
    let examples = router_examples(&records);

    let head = crate::embedding::ProjectionHead::with_scale(config.dim, config.router.scale);
    let trained = train_router(&embedder, &examples, &config.router, head).map_err(run_err)?;
    trained.head.save(&out).map_err(run_err)?;
    if let Some(curve_path) = curve {
        write_loss_curve_csv(&trained.loss_curve, &curve_path).map_err(run_err)?;
    }
    let final_loss = trained
        .loss_curve
        .last()
        .map(|l| format!("{l:.6}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "trained router head: dim {}, {} edits, {} epochs, final mean loss {} -> {}",
        config.dim,
        examples.len(),
        config.router.epochs,
        final_loss,
        out.display()
    );
    Ok(())
}

fn cmd_edit_eval(
    config: &EngineConfig,
    mode: Mode,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    eval_every: Option<usize>,
) -> CliResult<()> {
    let out = out
        .or_else(|| config.paths.report.clone())
        .unwrap_or_else(|| PathBuf::from("report.json"));
    let dataset = dataset_path(config, dataset)?;
    let records = load_records(&dataset)?;
    let table = load_shared_table(config)?;
    let embedder = router_embedder(config, &table)?;
    let model = build_model(config, &table)?;
    let head = load_head(config)?;
    let params = config.run_params();

    let mut report = match mode {
        Mode::Lifelong => {
            let t = config.harness.t.unwrap_or(records.len());
            let outcome = harness::run_lifelong_periodic(
                &model, &embedder, &head, &params, &records, t, eval_every,
            )
            .map_err(run_err)?;
            let (report, editor) = (outcome.report, outcome.editor);
            if let Some(store_path) = &config.paths.store {
                editor.adapter().store().save(store_path).map_err(run_err)?;
            }
            if let Some(adapter_path) = &config.paths.adapter {
                editor.adapter().save(adapter_path).map_err(run_err)?;
            }
            report
        }
        Mode::Single => {
            let outcome = harness::run_single(
                &model,
                &embedder,
                &head,
                &params,
                &records,
                config.harness.n_trials,
            )
            .map_err(run_err)?;
            outcome.averaged
        }
    };
    report.config = config.snapshot();
    report.save(&out).map_err(run_err)?;
    let mode_name = match mode {
        Mode::Lifelong => "lifelong",
        Mode::Single => "single",
    };
    println!(
        "mode={} edits={} reliability={:.4} generality={:.4} locality={:.4} score={:.4} -> {}",
        mode_name,
        report.edits,
        report.reliability,
        report.generality,
        report.locality,
        report.score,
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    config: &EngineConfig,
    axis: &str,
    values: &str,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let axis: AblationAxis = axis.parse().map_err(err_at(EXIT_CONFIG))?;
    let values: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim().parse::<f64>().map_err(|_| CliError {
                code: EXIT_CONFIG,
                message: format!("bad axis value '{}'", v.trim()),
            })
        })
        .collect::<CliResult<_>>()?;
    let out = out.unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let dataset = dataset_path(config, dataset)?;
    let records = load_records(&dataset)?;
    let table = load_shared_table(config)?;
    let embedder = router_embedder(config, &table)?;
    let model = build_model(config, &table)?;
    let head = load_head(config)?;
    let params = config.run_params();
    let t = config.harness.t.unwrap_or(records.len());

    // Value validation is a config-stage concern; the runs themselves are
    // runtime.
    let plan =
        harness::plan_ablation(&model, &params, axis, &values).map_err(err_at(EXIT_CONFIG))?;
    let results =
        harness::run_ablation(&model, &embedder, &head, plan, &records, t).map_err(run_err)?;
    write_sweep_csv(&results, &out).map_err(run_err)?;
    println!(
        "ablation over {axis}: {} runs (T={t}) -> {}",
        results.len(),
        out.display()
    );
    Ok(())
}

fn cmd_bench(config: &EngineConfig, n_edits: usize, out: Option<PathBuf>) -> CliResult<()> {
    if n_edits == 0 {
        return Err(CliError {
            code: EXIT_CONFIG,
            message: "bench needs n_edits >= 1".into(),
        });
    }
    let dim = config.dim;
    let shards = config.adapter.experts;
    let mut rng = ChaCha8Rng::seed_from_u64(config.harness.seed);
    let random_unit = |rng: &mut ChaCha8Rng| loop {
        let values: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(v) = EmbeddingVector::new(ndarray::Array1::from_vec(values)) {
            break v;
        }
    };
    let embeddings: Vec<EmbeddingVector> = (0..n_edits).map(|_| random_unit(&mut rng)).collect();

    let mut store = VectorStore::new(shards, dim).map_err(err_at(EXIT_CONFIG))?;
    let insert_start = Instant::now();
    for (id, embedding) in embeddings.iter().enumerate() {
        store
            .insert(id as u64, embedding.clone())
            .map_err(run_err)?;
    }
    let insert_elapsed = insert_start.elapsed();
    let inserts_per_sec = n_edits as f64 / insert_elapsed.as_secs_f64().max(1e-12);

    let n_queries = 200.min(n_edits.max(10));
    let queries: Vec<EmbeddingVector> = (0..n_queries)
        .map(|i| {
            if i % 2 == 0 {
                embeddings[i % n_edits].clone()
            } else {
                random_unit(&mut rng)
            }
        })
        .collect();
    // warm caches before timing
    for query in queries.iter().take(20) {
        let scores = routing_scores(&store, query, config.router.epsilon).map_err(run_err)?;
        std::hint::black_box(gate(&scores, config.router.top_k));
    }
    let mut latencies: Vec<f64> = Vec::with_capacity(n_queries);
    for query in &queries {
        let start = Instant::now();
        let scores = routing_scores(&store, query, config.router.epsilon).map_err(run_err)?;
        let decision = gate(&scores, config.router.top_k);
        std::hint::black_box(decision);
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
    }
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let percentile = |p: f64| latencies[((latencies.len() as f64 * p).ceil() as usize - 1).min(latencies.len() - 1)];
    let p50 = percentile(0.50);
    let p99 = percentile(0.99);

    let sizes: Vec<usize> = (0..shards)
        .map(|s| store.shard_len(s).expect("valid shard"))
        .collect();
    let balance = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();

    let mut lines = Vec::new();
    lines.push(format!(
        "inserted {n_edits} edits (dim {dim}, {shards} shards) in {:.3} s ({:.0} inserts/s)",
        insert_elapsed.as_secs_f64(),
        inserts_per_sec
    ));
    lines.push(format!(
        "routing latency over {n_queries} queries: p50 {p50:.4} ms, p99 {p99:.4} ms"
    ));
    lines.push(format!(
        "shard balance: max-min = {balance} (sizes {:?})",
        summarize_sizes(&sizes)
    ));
    for line in &lines {
        println!("{line}");
    }
    if balance > 1 {
        return Err(CliError {
            code: EXIT_RUNTIME,
            message: format!("store shards unbalanced after bench: {sizes:?}"),
        });
    }
    if let Some(out) = out {
        std::fs::write(&out, lines.join("\n") + "\n").map_err(|e| CliError {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn summarize_sizes(sizes: &[usize]) -> Vec<usize> {
    if sizes.len() <= 12 {
        sizes.to_vec()
    } else {
        sizes[..12].to_vec()
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    config: &EngineConfig,
    out_dir: &Path,
    edits: usize,
    scenario: Scenario,
    sigma: f64,
    rephrases: usize,
    vocab_size: usize,
    sim_lo: f64,
    sim_hi: f64,
) -> CliResult<()> {
    let synth_config = SynthConfig {
        n_edits: edits,
        rephrases_per_edit: rephrases,
        sigma,
        dim: config.dim,
        vocab_size,
        irrelevant: match scenario {
            Scenario::Separable => IrrelevantKind::Orthogonal,
            Scenario::NoisyIrrelevant => IrrelevantKind::Noisy { sim_lo, sim_hi },
        },
        seed: config.harness.seed,
    };
    let data = generate(&synth_config).map_err(err_at(EXIT_CONFIG))?;

    std::fs::create_dir_all(out_dir).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })?;
    let dataset_path = out_dir.join("edits.jsonl");
    let table_path = out_dir.join("embeddings.tsv");
    let vocab_path = out_dir.join("vocab.json");
    let model_path = out_dir.join("model.json");
    let config_path = out_dir.join("config.toml");

    harness::save_dataset(&data.records, &dataset_path).map_err(run_err)?;
    data.table.save(&table_path).map_err(run_err)?;
    save_vocab(&data.vocab, &vocab_path).map_err(run_err)?;

    let model_spec = ModelSpec {
        seed: config.model.seed,
        layers: config.model.layers,
        hidden: config.dim,
        vocab: data.vocab.clone(),
    };
    model_spec.save(&model_path).map_err(run_err)?;

    let mut run_config = config.clone();
    run_config.embedder = EncoderKind::Table;
    run_config.model.encoder = EncoderKind::Table;
    run_config.model.d = config.dim;
    run_config.model.vocab_path = Some(vocab_path.clone());
    run_config.paths.dataset = Some(dataset_path.clone());
    run_config.paths.embeddings = Some(table_path.clone());
    run_config.paths.checkpoint = Some(out_dir.join("head.uaph"));
    run_config.paths.report = Some(out_dir.join("report.json"));
    run_config.save(&config_path).map_err(run_err)?;

    println!(
        "generated {} records ({} rephrases each, {:?}) under {}",
        data.records.len(),
        rephrases,
        scenario,
        out_dir.display()
    );
    Ok(())
}
