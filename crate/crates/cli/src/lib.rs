//! Command-line front end: configuration resolution and one subcommand per
//! pipeline stage.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use tagmae::config::{env_overrides, parse_assignment, resolve_config, RunConfig};
use tagmae::embed::{self, EmbeddingMatrix, EmbeddingSource, EmbeddingTable};
use tagmae::eval::{self, Example, LabeledSplits};
use tagmae::graph_store::{self, TextAttributedGraph};
use tagmae::instruct::{self, Domain, PromptTemplate};
use tagmae::model::{write_json, ModelState, MANIFEST_FILE};
use tagmae::ppr::{self, TaskLevel};
use tagmae::pretrain::{self, CheckpointPolicy, LatentSource, StepReport};

pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "tagmae", version, about = "Masked graph pre-training for text-attributed graphs")]
pub struct Cli {
    /// JSON config file (flat snake_case keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Defaults profile: desk or paper.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution with fixed reduction order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Override any config key, e.g. `--set topk=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic stochastic-block-model graph with class-specific text.
    GenSynth(GenSynthArgs),
    /// Pre-train the encoder and write a checkpoint directory.
    Pretrain(PretrainArgs),
    /// Embed every node with a checkpoint and write a TSV.
    Embed(EmbedArgs),
    /// Print the PPR contextual subgraph(s) for anchors.
    SamplePpr(SamplePprArgs),
    /// Linear probe on frozen embeddings.
    Probe(ProbeArgs),
    /// N-way K-shot prototype evaluation on frozen embeddings.
    Fewshot(FewshotArgs),
    /// Render instruction prompts paired with embedding rows.
    EmitInstructions(EmitArgs),
    /// Compare analytic and finite-difference gradients on a micro model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub nodes_per_class: usize,
    #[arg(long, default_value_t = 0.2)]
    pub intra: f64,
    #[arg(long, default_value_t = 0.01)]
    pub inter: f64,
    #[arg(long, default_value_t = 48)]
    pub vocab_words: usize,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Directory holding nodes.jsonl, edges.jsonl and optionally splits.json.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_anchors: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// gnn (default) or lm_cls for pre-propagation diagnostics.
    #[arg(long, default_value = "gnn")]
    pub source: String,
}

#[derive(Debug, Args)]
pub struct SamplePprArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Original node ids, comma separated.
    #[arg(long, alias = "anchor", value_delimiter = ',')]
    pub anchors: Vec<i64>,
    #[arg(long, default_value = "node")]
    pub level: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub max_queries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// citation, products, web or knowledge.
    #[arg(long, default_value = "citation")]
    pub domain: String,
    /// Anchor split for node domains: train, valid, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Embed float arrays in each record instead of row references only.
    #[arg(long)]
    pub inline: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value = "lm_cls")]
    pub latent_source: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

fn flag_overrides(cli: &Cli) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    for s in &cli.set {
        let (k, v) = parse_assignment(s)?;
        m.insert(k, v);
    }
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    put("profile", cli.profile.clone().map(Value::from));
    put("seed", cli.seed.map(Value::from));
    if cli.deterministic {
        put("deterministic", Some(Value::Bool(true)));
    }
    match &cli.command {
        Command::Pretrain(a) => {
            put("mask_rate", a.mask_rate.map(Value::from));
            put("lr", a.lr.map(Value::from));
            put("steps", a.steps.map(Value::from));
            put("epochs", a.epochs.map(Value::from));
            put("batch_anchors", a.batch_anchors.map(Value::from));
            put("lambda", a.lambda.map(Value::from));
            put("checkpoint_every", a.checkpoint_every.map(Value::from));
        }
        Command::SamplePpr(a) => {
            put("ppr_alpha", a.alpha.map(Value::from));
            put("ppr_epsilon", a.epsilon.map(Value::from));
            put("topk", a.topk.map(Value::from));
        }
        Command::Probe(a) => {
            put("probe_lr", a.lr.map(Value::from));
            put("probe_epochs", a.epochs.map(Value::from));
        }
        Command::Fewshot(a) => {
            put("ways", a.ways.map(Value::from));
            put("shots", a.shots.map(Value::from));
            put("num_tasks", a.tasks.map(Value::from));
            put("max_queries", a.max_queries.map(Value::from));
        }
        _ => {}
    }
    Ok(m)
}

/// Resolved configuration for a parsed command line, reading `TAGMAE_*`
/// variables from the process environment.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let flags = flag_overrides(cli)?;
    Ok(resolve_config(cli.config.as_deref(), env_overrides(std::env::vars()), flags)?)
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = resolve(cli)?;
    log::info!("resolved config: {}", cfg.to_json());
    match &cli.command {
        Command::GenSynth(a) => gen_synth(&cfg, a),
        Command::Pretrain(a) => pretrain_cmd(&cfg, a),
        Command::Embed(a) => embed_cmd(&cfg, a),
        Command::SamplePpr(a) => sample_ppr(&cfg, a),
        Command::Probe(a) => probe_cmd(&cfg, a),
        Command::Fewshot(a) => fewshot_cmd(&cfg, a),
        Command::EmitInstructions(a) => emit_cmd(&cfg, a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn run_echo(command: &str, cfg: &RunConfig) -> Value {
    json!({ "command": command, "seed": cfg.seed, "config": cfg.to_json() })
}

/// Sidecar manifest for a single-file artifact: `<file>.manifest.json`.
pub fn sidecar_manifest(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path, command: &str, cfg: &RunConfig, extra: Value) -> Result<()> {
    let mut m = run_echo(command, cfg);
    if let (Value::Object(m), Value::Object(x)) = (&mut m, extra) {
        m.extend(x);
    }
    write_json(&sidecar_manifest(path), &m)?;
    Ok(())
}

fn write_report(out: Option<&Path>, value: &Value) -> Result<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

pub fn load_data(dir: &Path) -> Result<TextAttributedGraph> {
    let splits = dir.join(SPLITS_FILE);
    let g = graph_store::load_tag(
        &dir.join(NODES_FILE),
        &dir.join(EDGES_FILE),
        splits.exists().then_some(splits.as_path()),
    )
    .with_context(|| format!("loading graph from {}", dir.display()))?;
    Ok(g)
}

fn gen_synth(cfg: &RunConfig, a: &GenSynthArgs) -> Result<i32> {
    let words = graph_store::synthetic_vocabulary(a.vocab_words);
    let g = graph_store::generate_synthetic_tag(a.classes, a.nodes_per_class, a.intra, a.inter, &words, cfg.seed);
    fs::create_dir_all(&a.out)?;
    graph_store::save_tag(
        &g,
        &a.out.join(NODES_FILE),
        &a.out.join(EDGES_FILE),
        Some(&a.out.join(SPLITS_FILE)),
    )?;
    let mut m = run_echo("gen-synth", cfg);
    m["synthetic"] = json!({
        "classes": a.classes,
        "nodes_per_class": a.nodes_per_class,
        "intra": a.intra,
        "inter": a.inter,
        "vocab_words": a.vocab_words,
    });
    write_json(&a.out.join(MANIFEST_FILE), &m)?;
    log::info!("wrote {} nodes to {}", g.num_nodes(), a.out.display());
    Ok(0)
}

fn pretrain_cmd(cfg: &RunConfig, a: &PretrainArgs) -> Result<i32> {
    let g = load_data(&a.data.data)?;
    let pcfg = cfg.pretrain();
    let resuming = a.resume && a.out.join(MANIFEST_FILE).exists();
    let mut state = if resuming {
        let (state, _) = ModelState::load(&a.out)?;
        log::info!("resuming from step {}", state.step);
        state
    } else {
        pretrain::init_state(&g, cfg.model(), &pcfg)?
    };
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join(TRAIN_LOG_FILE);
    let file = if resuming {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(file);
    let policy = CheckpointPolicy {
        dir: a.out.clone(),
        every: cfg.checkpoint_every,
        run_echo: run_echo("pretrain", cfg),
    };
    let mut sink = |r: &StepReport| -> tagmae::Result<()> {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        Ok(())
    };
    let reports = pretrain::run_pretraining(&mut state, &g, &pcfg, Some(&policy), &mut sink)?;
    log.flush()?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        log::info!(
            "steps {}..={}: loss {:.4} -> {:.4}",
            first.step,
            last.step,
            first.loss_total,
            last.loss_total
        );
    }
    Ok(0)
}

fn embed_cmd(cfg: &RunConfig, a: &EmbedArgs) -> Result<i32> {
    let g = load_data(&a.data.data)?;
    let (state, manifest) = ModelState::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let source: EmbeddingSource = a.source.parse()?;
    let emb = embed::embed_all_nodes(&state, &g, &cfg.ppr(), source)?;
    embed::save_embeddings_tsv(&a.out, &emb, &g)?;
    write_sidecar(
        &a.out,
        "embed",
        cfg,
        json!({
            "source": source,
            "checkpoint_step": manifest.step,
            "rows": emb.node_ids.len(),
            "dim": emb.dim(),
        }),
    )?;
    Ok(0)
}

fn dense(g: &TextAttributedGraph, id: i64) -> Result<usize> {
    g.dense_id(id).ok_or_else(|| anyhow!("unknown node id {id}"))
}

fn sample_ppr(cfg: &RunConfig, a: &SamplePprArgs) -> Result<i32> {
    let g = load_data(&a.data.data)?;
    let level: TaskLevel = a.level.parse()?;
    let anchors = a.anchors.iter().map(|&id| dense(&g, id)).collect::<Result<Vec<_>>>()?;
    let params = cfg.ppr();
    let subs = ppr::contextual_subgraphs_for_task(&g, &anchors, level, &params)?;
    let ids = g.original_ids();
    let mut out = Vec::new();
    for (i, sub) in subs.iter().enumerate() {
        let scores = match level {
            TaskLevel::Graph => Value::Null,
            _ => {
                let s = ppr::approximate_ppr(&g, anchors[i], &params)?;
                Value::Object(
                    sub.local_to_global
                        .iter()
                        .map(|&v| (ids[v].to_string(), json!(s.get(v))))
                        .collect(),
                )
            }
        };
        out.push(json!({
            "anchor": ids[sub.anchor_global()],
            "nodes": sub.local_to_global.iter().map(|&v| ids[v]).collect::<Vec<_>>(),
            "num_edge_entries": sub.num_edge_entries(),
            "scores": scores,
        }));
    }
    let report = json!({ "level": level, "subgraphs": out });
    write_report(a.out.as_deref(), &report)?;
    if let Some(p) = &a.out {
        write_sidecar(p, "sample-ppr", cfg, json!({}))?;
    }
    Ok(0)
}

/// Labeled examples for every split node, looked up by original id.
pub fn labeled_splits(g: &TextAttributedGraph, table: &EmbeddingTable) -> Result<LabeledSplits> {
    let splits = g
        .splits()
        .ok_or_else(|| anyhow!("graph has no splits; {SPLITS_FILE} is required"))?;
    let ids = g.original_ids();
    let collect = |nodes: &[usize]| -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for &v in nodes {
            let Some(label) = g.label(v) else { continue };
            let row = table
                .row_index(ids[v])
                .ok_or_else(|| anyhow!("node {} has no embedding row", ids[v]))?;
            out.push(Example {
                embedding: table.rows.row(row).to_vec(),
                label: label.to_string(),
            });
        }
        Ok(out)
    };
    Ok(LabeledSplits {
        train: collect(&splits.train)?,
        valid: collect(&splits.valid)?,
        test: collect(&splits.test)?,
    })
}

fn probe_cmd(cfg: &RunConfig, a: &ProbeArgs) -> Result<i32> {
    let g = load_data(&a.data.data)?;
    let table = embed::load_embeddings_tsv(&a.embeddings)?;
    let data = labeled_splits(&g, &table)?;
    let r = eval::linear_probe(&data, &cfg.probe())?;
    let report = json!({
        "test_accuracy": r.test_accuracy,
        "valid_accuracy": r.valid_accuracy,
        "best_epoch": r.best_epoch,
        "epochs_run": r.epochs_run,
        "classes": r.classes,
    });
    write_report(a.out.as_deref(), &report)?;
    if let Some(p) = &a.out {
        write_sidecar(p, "probe", cfg, json!({}))?;
    }
    Ok(0)
}

fn fewshot_cmd(cfg: &RunConfig, a: &FewshotArgs) -> Result<i32> {
    let g = load_data(&a.data.data)?;
    let table = embed::load_embeddings_tsv(&a.embeddings)?;
    let data = labeled_splits(&g, &table)?;
    let tasks = eval::sample_fewshot_tasks(&data, cfg.ways, cfg.shots, cfg.num_tasks, cfg.max_queries, cfg.seed)?;
    let report = eval::fewshot_report(&tasks)?;
    write_report(a.out.as_deref(), &serde_json::to_value(&report)?)?;
    if let Some(p) = &a.out {
        write_sidecar(p, "fewshot", cfg, json!({}))?;
    }
    Ok(0)
}

/// Embedding rows keyed by dense id, in TSV row order.
pub fn table_to_matrix(g: &TextAttributedGraph, table: &EmbeddingTable) -> Result<EmbeddingMatrix> {
    let node_ids = table.ids.iter().map(|&id| dense(g, id)).collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingMatrix::new(table.rows.clone(), node_ids)?)
}

fn emit_cmd(cfg: &RunConfig, a: &EmitArgs) -> Result<i32> {
    let g = load_data(&a.data.data)?;
    let table = embed::load_embeddings_tsv(&a.embeddings)?;
    let emb = table_to_matrix(&g, &table)?;
    let domain: Domain = a.domain.parse()?;
    let template = PromptTemplate::builtin(domain);
    let anchors: Vec<usize> = if domain == Domain::Knowledge {
        Vec::new()
    } else {
        match a.split.as_str() {
            "all" => (0..g.num_nodes()).filter(|&v| g.label(v).is_some()).collect(),
            name => {
                let s = g.splits().ok_or_else(|| anyhow!("graph has no splits"))?;
                match name {
                    "train" => s.train.clone(),
                    "valid" => s.valid.clone(),
                    "test" => s.test.clone(),
                    other => bail!("unknown split {other:?}"),
                }
            }
        }
    };
    let n = instruct::emit_instruction_dataset(&g, &emb, &anchors, &template, &cfg.export_options(a.inline), &a.out)?;
    write_sidecar(
        &a.out,
        "emit-instructions",
        cfg,
        json!({ "domain": domain, "split": a.split, "records": n, "level": instruct::domain_level(domain) }),
    )?;
    log::info!("wrote {n} records to {}", a.out.display());
    Ok(0)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<i32> {
    let source: LatentSource = a.latent_source.parse()?;
    let (state, batch, _) = pretrain::micro_fixture(0, a.lambda, source)?;
    let report = pretrain::gradient_check(&state, &batch, a.lambda, source, a.tolerance)?;
    write_report(a.out.as_deref(), &serde_json::to_value(&report)?)?;
    eprintln!(
        "max relative error {:.3e} ({}), tolerance {:.1e}: {}",
        report.max_rel_error,
        report.worst_group,
        report.tolerance,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(if report.passed { 0 } else { 1 })
}

