//! Command-line front end: dataset synthesis, graph construction and
//! statistics, training, evaluation, variant comparison, and the
//! passage-count sweep.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kgfuse_core::kgstore::KnowledgeGraph;
use kgfuse_core::localgraph::{graph_stats_from_sizes, read_graph_records, GraphRecord, StatsReport};
use kgfuse_core::reader::{Reader, ReaderConfig};
use kgfuse_core::scalar::Scalar;
use kgfuse_pipeline::config::PipelineConfig;
use kgfuse_pipeline::data::{
    prepare, skipped_span_count, write_graph_files, LoadedData, PreparedData,
};
use kgfuse_pipeline::experiment::{build_eval_report, run_experiment, sweep_passages};
use kgfuse_pipeline::synth::synth_dataset;
use kgfuse_pipeline::train::{load_checkpoint, train, Precision};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "kgfuse",
    about = "Question answering over passages with knowledge-graph fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args)]
struct RunArgs {
    /// Run configuration: a text file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override every configured random seed with this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives this run's artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-graph maintenance.
    Kg {
        #[command(subcommand)]
        cmd: KgCmd,
    },
    /// Dataset creation.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Per-passage graph construction and statistics.
    Graphs {
        #[command(subcommand)]
        cmd: GraphsCmd,
    },
    /// Train one model and write metrics plus checkpoints.
    Train(RunArgs),
    /// Score a trained checkpoint on the test split.
    Eval(RunArgs),
    /// Train every configured variant across seeds and compare them.
    Ablate(RunArgs),
    /// Evaluate a checkpoint at several retrieved-passage counts.
    Sweep(RunArgs),
}

#[derive(Subcommand)]
enum KgCmd {
    /// Parse, deduplicate, and canonicalize a triples file.
    Build(RunArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate the synthetic dataset, lexicon, vocabulary, and graph source.
    Synth(RunArgs),
}

#[derive(Subcommand)]
enum GraphsCmd {
    /// Build one graph per (question, passage) pair for every split.
    Build(RunArgs),
    /// Summarize graph sizes from previously built graph files.
    Stats(RunArgs),
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Dispatch a generic runner on the configured parameter precision.
macro_rules! with_precision {
    ($runner:ident, $args:expr) => {{
        let args = $args;
        let cfg = load_run_config(&args)?;
        match cfg.precision() {
            Precision::F32 => $runner::<f32>(&cfg, &args),
            Precision::F64 => $runner::<f64>(&cfg, &args),
        }
    }};
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Kg { cmd: KgCmd::Build(args) } => kg_build(&args),
        Command::Data { cmd: DataCmd::Synth(args) } => data_synth(&args),
        Command::Graphs { cmd: GraphsCmd::Build(args) } => graphs_build(&args),
        Command::Graphs { cmd: GraphsCmd::Stats(args) } => graphs_stats(&args),
        Command::Train(args) => with_precision!(run_train, args),
        Command::Eval(args) => with_precision!(run_eval, args),
        Command::Ablate(args) => with_precision!(run_ablate, args),
        Command::Sweep(args) => with_precision!(run_sweep, args),
    }
}

fn load_run_config(args: &RunArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn data_dir<'a>(cfg: &'a PipelineConfig, args: &'a RunArgs) -> &'a Path {
    cfg.data_dir.as_deref().unwrap_or(&args.out)
}

fn load_prepared(
    cfg: &PipelineConfig,
    args: &RunArgs,
) -> anyhow::Result<(PreparedData, ReaderConfig)> {
    let dir = data_dir(cfg, args);
    let loaded = LoadedData::load_dir(dir)
        .with_context(|| format!("loading dataset from {}", dir.display()))?;
    let rcfg = cfg.reader_config(loaded.vocab.len())?;
    let prepared = prepare(loaded, &rcfg)?;
    Ok((prepared, rcfg))
}

fn warn_if_pool_short(data: &PreparedData, k: usize) {
    let smallest = data.test.iter().map(|ex| ex.docs.len()).min().unwrap_or(0);
    if k > smallest {
        eprintln!(
            "warning: asked for {k} passages but the smallest pool has {smallest}; \
             short pools are used whole"
        );
    }
}

fn kg_build(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_run_config(args)?;
    let source = cfg
        .kg_triples
        .clone()
        .unwrap_or_else(|| data_dir(&cfg, args).join("kg.tsv"));
    let kg = KnowledgeGraph::load_triples(&source, true)
        .with_context(|| format!("reading triples from {}", source.display()))?;
    std::fs::create_dir_all(&args.out)?;
    let mut text = String::new();
    for t in kg.triples() {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            kg.entity_label(t.head),
            kg.relation_label(t.relation),
            kg.entity_label(t.tail)
        ));
    }
    let dest = args.out.join("kg.tsv");
    std::fs::write(&dest, text)?;
    println!(
        "entities {}  relations {}  triples {}  -> {}",
        kg.entity_count(),
        kg.relation_count(),
        kg.triples().len(),
        dest.display()
    );
    Ok(())
}

fn data_synth(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_run_config(args)?;
    let out = synth_dataset(&cfg.synth)?;
    out.write(&args.out)?;
    println!(
        "entities {}  relations {}  triples {}  train {}  dev {}  test {}  vocab {}  -> {}",
        out.kg.entity_count(),
        out.kg.relation_count(),
        out.kg.triples().len(),
        out.train.len(),
        out.dev.len(),
        out.test.len(),
        out.vocab.len(),
        args.out.display()
    );
    Ok(())
}

fn graphs_build(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_run_config(args)?;
    let (prepared, _) = load_prepared(&cfg, args)?;
    write_graph_files(&prepared, &args.out)?;
    let skipped = skipped_span_count(&prepared);
    if skipped > 0 {
        eprintln!(
            "warning: {skipped} mention spans fell past the document length cap and were dropped"
        );
    }
    for (name, split) in [
        ("train", &prepared.train),
        ("dev", &prepared.dev),
        ("test", &prepared.test),
    ] {
        let graphs: usize = split.iter().map(|ex| ex.docs.len()).sum();
        println!(
            "{name}: {} questions, {graphs} graphs -> {}",
            split.len(),
            args.out.join(format!("graphs-{name}.jsonl")).display()
        );
    }
    Ok(())
}

fn stats_from_records(records: &[GraphRecord]) -> StatsReport {
    let questions = records.iter().map(|r| r.question + 1).max().unwrap_or(0);
    let mut sizes = vec![Vec::new(); questions];
    for r in records {
        sizes[r.question].push((r.u_nodes.len(), r.v_nodes.len()));
    }
    graph_stats_from_sizes(&sizes)
}

fn graphs_stats(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_run_config(args)?;
    let dir = data_dir(&cfg, args);
    let mut reports = BTreeMap::new();
    for name in ["train", "dev", "test"] {
        let path = dir.join(format!("graphs-{name}.jsonl"));
        if !path.exists() {
            bail!(
                "{} is missing; run `graphs build` into this directory first",
                path.display()
            );
        }
        let records = read_graph_records(&path)?;
        reports.insert(name.to_string(), stats_from_records(&records));
    }
    for (name, report) in &reports {
        println!("[{name}]");
        print!("{}", report.to_text());
    }
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("graph-stats.json");
    std::fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
    println!("-> {}", path.display());
    Ok(())
}

fn run_train<T: Scalar>(cfg: &PipelineConfig, args: &RunArgs) -> anyhow::Result<()> {
    let (data, rcfg) = load_prepared(cfg, args)?;
    std::fs::create_dir_all(&args.out)?;
    let outcome = train::<T>(&rcfg, &cfg.train, &data, Some(&args.out))?;
    match outcome.best_dev_em {
        Some(em) => println!(
            "trained {} steps; best dev EM {:.4} at step {} -> {}",
            cfg.train.steps,
            em,
            outcome.best_step,
            args.out.display()
        ),
        None => println!("trained {} steps -> {}", cfg.train.steps, args.out.display()),
    }
    Ok(())
}

fn load_eval_parts<T: Scalar>(
    cfg: &PipelineConfig,
    args: &RunArgs,
) -> anyhow::Result<(Reader<T>, PreparedData)> {
    let ckpt = cfg
        .eval_checkpoint
        .clone()
        .unwrap_or_else(|| args.out.join("checkpoint-best.json"));
    let (rcfg, params) = load_checkpoint::<T>(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let dir = data_dir(cfg, args);
    let loaded = LoadedData::load_dir(dir)
        .with_context(|| format!("loading dataset from {}", dir.display()))?;
    if loaded.vocab.len() != rcfg.vocab_size {
        bail!(
            "checkpoint was trained with a vocabulary of {} but the dataset has {}",
            rcfg.vocab_size,
            loaded.vocab.len()
        );
    }
    let data = prepare(loaded, &rcfg)?;
    let reader = Reader::from_parts(rcfg, params)?;
    Ok((reader, data))
}

fn run_eval<T: Scalar>(cfg: &PipelineConfig, args: &RunArgs) -> anyhow::Result<()> {
    let (reader, data) = load_eval_parts::<T>(cfg, args)?;
    warn_if_pool_short(&data, cfg.options.eval_k);
    let report = build_eval_report(&reader, &data, cfg.options.eval_k)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("report.json"), report.to_json())?;
    std::fs::write(args.out.join("report.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_ablate<T: Scalar>(cfg: &PipelineConfig, args: &RunArgs) -> anyhow::Result<()> {
    let (data, rcfg) = load_prepared(cfg, args)?;
    let outcome = run_experiment::<T>(&rcfg, &cfg.train, &data, &cfg.options, Some(&args.out))?;
    println!(
        "{:<12}{:>12}{:>12}{:>16}{:>14}{:>14}",
        "variant", "overall", "subset", "discriminative", "d(overall)", "d(subset)"
    );
    for v in &outcome.summary.variants {
        println!(
            "{:<12}{:>12.4}{:>12.4}{:>16.4}{:>14.4}{:>14.4}",
            v.name,
            v.mean_overall_em,
            v.mean_subset_em,
            v.mean_discriminative_em,
            v.mean_overall_delta,
            v.mean_subset_delta
        );
    }
    println!("-> {}", args.out.join("summary.json").display());
    Ok(())
}

fn run_sweep<T: Scalar>(cfg: &PipelineConfig, args: &RunArgs) -> anyhow::Result<()> {
    let (reader, data) = load_eval_parts::<T>(cfg, args)?;
    if let Some(&largest) = cfg.k_values.iter().max() {
        warn_if_pool_short(&data, largest);
    }
    let rows = sweep_passages(
        &reader.config,
        &reader.params,
        &data,
        &cfg.k_values,
        Some(&args.out),
    )?;
    for (k, em) in &rows {
        println!("{k}\t{em:.6}");
    }
    println!("-> {}", args.out.join("sweep.tsv").display());
    Ok(())
}
