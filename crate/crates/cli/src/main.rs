use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use phe::config::RunConfig;
use phe::finetune::{
    build_task, evaluate, export_uniformity_sample, finetune, Init, RankingTask, Split, TunedModel,
};
use phe::graph::{load_graph, type_histogram, HeteroGraph};
use phe::metrics::{QueryAverages, SeedAggregate};
use phe::pretrain::{
    load_checkpoint, pretrain_observed, reports_jsonl, save_checkpoint, Checkpoint, TrainEvent,
};
use phe::sampler::{temporal_split, SampledSubgraph};
use phe::PheError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "phe", version, about = "Contrastive pre-training for heterogeneous graphs")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` (and `finetune_seeds` for finetune).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Per-batch sampler statistics as JSON lines on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct GraphArgs {
    /// Node file; overrides `nodes` in the config.
    #[arg(long)]
    nodes: Option<PathBuf>,
    /// Edge file; overrides `edges` in the config.
    #[arg(long)]
    edges: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a graph and print its schema report.
    Ingest(GraphArgs),
    /// Generate a synthetic academic graph.
    Synth,
    /// Pre-train an encoder on the pre-training view of a graph.
    Pretrain(GraphArgs),
    /// Fine-tune on a link-ranking task, once per fine-tuning seed.
    Finetune {
        #[command(flatten)]
        graph: GraphArgs,
        /// Pre-trained checkpoint; overrides `checkpoint` in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train from random weights instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        scratch: bool,
    },
    /// Evaluate fine-tuned models on the test split.
    Eval {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
    },
    /// Finite-difference gradient checks on a small fixed graph.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write final-layer embeddings and a uniformity sample.
    ExportEmbeddings {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rows in the uniformity sample.
        #[arg(long, default_value_t = 500)]
        sample: usize,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Phe(#[from] PheError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Phe(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Phe(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_VALIDATION,
            CliError::Phe(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Phe(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Tensors of a few hundred KB are allocated and freed every step; glibc's
/// default thresholds turn each into an mmap/munmap pair.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn steady_allocator() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn steady_allocator() {}

fn main() -> ExitCode {
    steady_allocator();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("PHE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PHE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
        if matches!(cli.command, Command::Finetune { .. }) {
            config.finetune_seeds = vec![s];
        }
    }
    config.sync_seed();
    let ctx = Ctx {
        out: cli.out,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Ingest(g) => ingest(&ctx, &mut config, g),
        Command::Synth => synth(&ctx, &mut config),
        Command::Pretrain(g) => pretrain(&ctx, &mut config, g),
        Command::Finetune {
            graph,
            checkpoint,
            scratch,
        } => run_finetune(&ctx, &mut config, graph, checkpoint, scratch),
        Command::Eval { graph, models } => eval(&ctx, &mut config, graph, &models),
        Command::Gradcheck { tolerance } => gradcheck(&ctx, cli.seed.unwrap_or(7), tolerance),
        Command::ExportEmbeddings {
            graph,
            checkpoint,
            sample,
        } => export(&ctx, &mut config, graph, checkpoint, sample),
    }
}

struct Ctx {
    out: Option<PathBuf>,
    verbose: bool,
}

impl Ctx {
    fn out_dir(&self) -> CliResult<&Path> {
        let dir = self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))?;
        fs::create_dir_all(dir)?;
        Ok(dir)
    }
}

fn check_config(config: &RunConfig) -> CliResult<()> {
    let problems = config.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(PheError::ConfigKeys(problems).into())
    }
}

fn load(config: &mut RunConfig, args: GraphArgs) -> CliResult<HeteroGraph> {
    if args.nodes.is_some() {
        config.nodes = args.nodes;
    }
    if args.edges.is_some() {
        config.edges = args.edges;
    }
    let (Some(nodes), Some(edges)) = (&config.nodes, &config.edges) else {
        return Err(CliError::Usage("node and edge files are required (--nodes/--edges or config)".into()));
    };
    let started = Instant::now();
    let g = load_graph(nodes, edges)?;
    info!(
        "loaded {} nodes, {} edges in {:.2}s",
        g.node_count(),
        g.edge_count(),
        started.elapsed().as_secs_f64()
    );
    Ok(g)
}

/// Prints a line to stdout; a closed pipe (`phe ingest | head`) is not an error.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn ingest(ctx: &Ctx, config: &mut RunConfig, args: GraphArgs) -> CliResult<()> {
    let g = load(config, args)?;
    let report = json!({
        "schema": g.schema_report(),
        "types": type_histogram(&g),
    });
    emit(&serde_json::to_string_pretty(&report)?);
    if ctx.out.is_some() {
        let dir = ctx.out_dir()?;
        write_json(&dir.join("schema.json"), &report)?;
        config.write_echo(dir)?;
    }
    Ok(())
}

fn synth(ctx: &Ctx, config: &mut RunConfig) -> CliResult<()> {
    let dir = ctx.out_dir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = phe::synth::synth_academic(&config.synth, &mut rng)?;
    let (nodes, edges) = (dir.join("nodes.tsv"), dir.join("edges.tsv"));
    s.graph.write_tsv(&nodes, &edges)?;
    let mut comm = String::from("node\tcommunity\n");
    for (v, c) in s.community.iter().enumerate() {
        comm.push_str(&format!("{}\t{c}\n", s.graph.node_name(v)));
    }
    fs::write(dir.join("communities.tsv"), comm)?;
    config.nodes = Some(nodes);
    config.edges = Some(edges);
    config.write_echo(dir)?;
    info!("wrote {} nodes and {} edges to {}", s.graph.node_count(), s.graph.edge_count(), dir.display());
    Ok(())
}

fn pretrain(ctx: &Ctx, config: &mut RunConfig, args: GraphArgs) -> CliResult<()> {
    check_config(config)?;
    let dir = ctx.out_dir()?.to_path_buf();
    let g = load(config, args)?;
    let views = temporal_split(&g, &config.split)?;
    config.write_echo(&dir)?;

    let mut metrics = fs::File::create(dir.join("metrics.jsonl"))?;
    let mut stderr = std::io::stderr();
    let verbose = ctx.verbose;
    let started = Instant::now();
    let result = pretrain_observed(&views.pretrain, &config.pretrain, |event| match event {
        TrainEvent::Batch(b) if verbose => {
            if let Ok(line) = serde_json::to_string(b) {
                let _ = writeln!(stderr, "{line}");
            }
        }
        TrainEvent::Batch(_) => {}
        TrainEvent::Skipped { epoch, batch } => warn!("epoch {epoch} batch {batch}: no triplets, skipped"),
        TrainEvent::Epoch(r) => {
            info!("epoch {} loss {:.4} (l1 {:.4}, l2 {:.4}) val {:.4}", r.epoch, r.loss, r.l1, r.l2, r.validation);
            if let Ok(line) = serde_json::to_string(r) {
                let _ = writeln!(metrics, "{line}");
            }
        }
    });
    let outcome = match result {
        Ok(o) => o,
        Err(PheError::Diverged {
            epoch,
            batch,
            last_finite,
        }) => {
            let path = dir.join("last_finite.phe");
            save_checkpoint(&last_finite, &path)?;
            warn!("saved last finite parameters to {}", path.display());
            return Err(PheError::Diverged {
                epoch,
                batch,
                last_finite,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    // rewrite in one piece so the file is complete even if a line failed above
    fs::write(dir.join("metrics.jsonl"), reports_jsonl(&outcome.reports)?)?;
    save_checkpoint(&outcome.best, &dir.join("best.phe"))?;
    let last = Checkpoint {
        params: outcome.last,
        config: outcome.best.config.clone(),
        best_validation: outcome.best.best_validation,
        epoch: outcome.reports.len().saturating_sub(1),
    };
    save_checkpoint(&last, &dir.join("last.phe"))?;
    write_json(
        &dir.join("timings.json"),
        &json!({
            "epoch_seconds": outcome.epoch_seconds,
            "total_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    info!("best epoch {} validation {:?}", outcome.best.epoch, outcome.best.best_validation);
    Ok(())
}

fn task_for(config: &RunConfig, g: &HeteroGraph) -> CliResult<RankingTask> {
    Ok(build_task(g, &config.split, &config.finetune.task)?)
}

fn run_finetune(
    ctx: &Ctx,
    config: &mut RunConfig,
    args: GraphArgs,
    checkpoint: Option<PathBuf>,
    scratch: bool,
) -> CliResult<()> {
    if checkpoint.is_some() {
        config.checkpoint = checkpoint;
    }
    if scratch {
        config.checkpoint = None;
    } else if config.checkpoint.is_none() {
        return Err(CliError::Usage("a pre-trained checkpoint is required (or pass --scratch)".into()));
    }
    check_config(config)?;
    let dir = ctx.out_dir()?.to_path_buf();
    let g = load(config, args)?;
    let task = task_for(config, &g)?;
    let pretrained = config.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    config.write_echo(&dir)?;

    let mut per_seed = Vec::new();
    let mut timings = BTreeMap::new();
    for &seed in &config.finetune_seeds {
        let mut fc = config.finetune.clone();
        fc.seed = seed;
        let init = match &pretrained {
            Some(c) => Init::Pretrained(c),
            None => Init::Scratch(config.pretrain.encoder),
        };
        let started = Instant::now();
        let outcome = finetune(&task, init, &fc)?;
        timings.insert(seed.to_string(), started.elapsed().as_secs_f64());
        let mut history = String::new();
        for h in &outcome.history {
            history.push_str(&serde_json::to_string(h)?);
            history.push('\n');
        }
        fs::write(dir.join(format!("finetune_seed{seed}.jsonl")), history)?;
        let best_val = outcome.history.get(outcome.best_epoch).map(|h| h.val_ndcg);
        save_checkpoint(
            &outcome.model.to_checkpoint(outcome.best_epoch, best_val)?,
            &dir.join(format!("model_seed{seed}.phe")),
        )?;
        let test = evaluate(&outcome.model, &task, Split::Test, &fc)?;
        info!(
            "seed {seed}: best epoch {} test ndcg@{} {:.4} recall@{} {:.4}",
            outcome.best_epoch, fc.k, test.averages.ndcg, fc.k, test.averages.recall
        );
        per_seed.push((seed, test.averages));
    }
    let agg = SeedAggregate::new(&task.name, config.finetune.mode.as_str(), pretrained.is_some(), &per_seed);
    write_metrics(&dir, &agg, &per_seed)?;
    write_json(&dir.join("timings.json"), &json!({ "finetune_seconds": timings }))?;
    emit(&serde_json::to_string(&agg)?);
    Ok(())
}

fn write_metrics(dir: &Path, agg: &SeedAggregate, per_seed: &[(u64, QueryAverages)]) -> CliResult<()> {
    let seeds: Vec<_> = per_seed.iter().map(|(s, a)| json!({"seed": s, "test": a})).collect();
    write_json(&dir.join("metrics.json"), &json!({ "aggregate": agg, "per_seed": seeds }))
}

fn eval(ctx: &Ctx, config: &mut RunConfig, args: GraphArgs, models: &[PathBuf]) -> CliResult<()> {
    check_config(config)?;
    let dir = ctx.out_dir()?.to_path_buf();
    let g = load(config, args)?;
    config.write_echo(&dir)?;
    let mut tasks: BTreeMap<String, RankingTask> = BTreeMap::new();
    let mut per_seed = Vec::new();
    let mut first: Option<TunedModel> = None;
    for path in models {
        let model = TunedModel::from_checkpoint(&load_checkpoint(path)?)?;
        if let Some(f) = &first {
            if f.task != model.task || f.mode != model.mode || f.pretrained != model.pretrained {
                return Err(CliError::Check(format!(
                    "{} is a different task, mode or initialization from {}",
                    path.display(),
                    models[0].display()
                )));
            }
        }
        if !tasks.contains_key(&model.task) {
            let t = build_task(&g, &config.split, &model.task)?;
            tasks.insert(model.task.clone(), t);
        }
        let task = &tasks[&model.task];
        let mut fc = config.finetune.clone();
        fc.task = model.task.clone();
        fc.seed = model.seed;
        let result = evaluate(&model, task, Split::Test, &fc)?;
        let mut rows = String::new();
        for r in &result.rows {
            rows.push_str(&serde_json::to_string(r)?);
            rows.push('\n');
        }
        fs::write(dir.join(format!("rankings_seed{}.jsonl", model.seed)), rows)?;
        per_seed.push((model.seed, result.averages));
        first.get_or_insert(model);
    }
    let m = first.expect("at least one model");
    let agg = SeedAggregate::new(&m.task, m.mode.as_str(), m.pretrained, &per_seed);
    write_metrics(&dir, &agg, &per_seed)?;
    emit(&serde_json::to_string(&agg)?);
    Ok(())
}

fn gradcheck(ctx: &Ctx, seed: u64, tolerance: f64) -> CliResult<()> {
    let s = phe::toy::run_gradcheck_suite(seed)?;
    emit(&format!("encoder  {:.3e}", s.encoder));
    emit(&format!("l1       {:.3e}", s.l1));
    emit(&format!("l2       {:.3e}", s.l2));
    emit(&format!("joint    {:.3e}", s.joint));
    emit(&format!("coordinates {}", s.coordinates));
    if ctx.out.is_some() {
        write_json(&ctx.out_dir()?.join("gradcheck.json"), &s)?;
    }
    if s.max() < tolerance {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {:.3e} exceeds {tolerance:.0e}", s.max())))
    }
}

fn export(
    ctx: &Ctx,
    config: &mut RunConfig,
    args: GraphArgs,
    checkpoint: Option<PathBuf>,
    sample: usize,
) -> CliResult<()> {
    if checkpoint.is_some() {
        config.checkpoint = checkpoint;
    }
    let path = config
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let dir = ctx.out_dir()?.to_path_buf();
    let g = load(config, args)?;
    let c = load_checkpoint(&path)?;
    // fine-tuned checkpoints carry an adapter; encode them on their task context
    let (emb, graph) = if c.params.get(phe::finetune::ADAPTER).is_some() {
        let model = TunedModel::from_checkpoint(&c)?;
        let task = build_task(&g, &config.split, &model.task)?;
        let emb = model.embeddings(&task)?;
        (emb, task.context)
    } else {
        let pc = c.pretrain_config()?;
        let view = temporal_split(&g, &config.split)?.pretrain;
        let table = phe::encoder::encode_table(&c.params, &pc.encoder, &SampledSubgraph::full(&view))?;
        (table.output().clone(), view)
    };
    config.write_echo(&dir)?;

    let mut csv = String::from("node\ttype");
    for j in 0..emb.cols() {
        csv.push_str(&format!("\tx{j}"));
    }
    csv.push('\n');
    for v in 0..emb.rows() {
        csv.push_str(graph.node_name(v));
        csv.push('\t');
        csv.push_str(graph.type_name(graph.node_type(v)));
        for x in emb.row(v) {
            csv.push_str(&format!("\t{x}"));
        }
        csv.push('\n');
    }
    fs::write(dir.join("embeddings.tsv"), csv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let u = export_uniformity_sample(&emb, sample.min(emb.rows()), &dir.join("uniformity.csv"), &mut rng)?;
    info!(
        "wrote {} embeddings; uniformity sample of {} in {}",
        emb.rows(),
        u.nodes.len(),
        u.histogram_path.display()
    );
    Ok(())
}
