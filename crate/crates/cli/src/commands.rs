use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use keci::corpus::toy::{generate_toy, ToySpec};
use keci::corpus::{
    kfold_split, load_schema, read_raw_dataset, save_raw_dataset, Document, RawDocument, TaskSchema,
};
use keci::eval::{
    attention_report, cross_validate, evaluate, predict, run_ablation, AblationRow, Metrics,
};
use keci::kb::KnowledgeBase;
use keci::model::Model;
use keci::train::{
    fit_with_callback, load_checkpoint, pipeline_gradcheck, save_checkpoint, GRADCHECK_TOLERANCE,
};
use keci::{KeciError, ModelConfig, Result, Variant};

#[derive(Debug, Parser)]
#[command(
    name = "keci",
    version,
    about = "Joint entity and relation extraction with background knowledge"
)]
pub struct Cli {
    /// Worker threads for per-document parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint, or train and compare model variants.
    Eval(EvalArgs),
    /// Write predicted span graphs as JSONL.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Mean attention per semantic type of the knowledge base.
    AnalyzeAttention(AttentionArgs),
    /// Generate a synthetic corpus with a matching knowledge base.
    GenToy(GenToyArgs),
    /// Split a dataset into k train/test folds.
    Kfold(KfoldArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Entity and relation types; inferred from the data when absent.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant to train.
    #[arg(long, default_value = "full")]
    ablation: Variant,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to score on --test.
    #[arg(long, conflicts_with_all = ["train", "config"])]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated variants, or `all`.
    #[arg(long, default_value = "full")]
    ablation: String,
    /// Cross-validate on --train instead of using --dev/--test.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Include per-span attention weights.
    #[arg(long)]
    attn: bool,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "full")]
    ablation: Variant,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    kb: PathBuf,
}

#[derive(Debug, Args)]
struct GenToyArgs {
    /// Generator settings as JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct KfoldArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(KeciError::Argument("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| KeciError::Argument(format!("cannot set thread count: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::AnalyzeAttention(a) => analyze_attention(a),
        Command::GenToy(a) => gen_toy(a),
        Command::Kfold(a) => kfold(a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ModelConfig> {
    let mut config = match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn load_kb(path: Option<&Path>) -> Result<Option<KnowledgeBase>> {
    path.map(KnowledgeBase::load).transpose()
}

/// Reads datasets and resolves them against one schema.
fn load_sets(
    schema: Option<&Path>,
    paths: &[Option<&Path>],
) -> Result<(TaskSchema, Vec<Vec<Document>>)> {
    let raw = paths
        .iter()
        .map(|p| {
            p.map(read_raw_dataset)
                .transpose()
                .map(Option::unwrap_or_default)
        })
        .collect::<Result<Vec<Vec<RawDocument>>>>()?;
    let schema = match schema {
        Some(p) => load_schema(p)?,
        None => TaskSchema::infer(&raw.concat())?,
    };
    let docs = raw
        .into_iter()
        .map(|set| set.into_iter().map(|d| d.resolve(&schema)).collect())
        .collect::<Result<_>>()?;
    Ok((schema, docs))
}

fn needs_kb(variant: Variant, kb: &Option<KnowledgeBase>) -> Result<()> {
    if variant.uses_kg() && kb.is_none() {
        return Err(KeciError::Argument(format!("variant {variant} needs --kb")));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let config = load_config(a.config.as_deref(), a.seed)?;
    let kb = load_kb(a.data.kb.as_deref())?;
    needs_kb(a.ablation, &kb)?;
    let (schema, sets) = load_sets(
        a.data.schema.as_deref(),
        &[Some(&a.train), a.dev.as_deref()],
    )?;
    let mut out = io::stdout().lock();
    let result = fit_with_callback(
        &config,
        a.ablation,
        &schema,
        &sets[0],
        &sets[1],
        kb.as_ref(),
        |e| {
            let dev = e.dev.map_or(String::new(), |m| {
                format!(
                    " dev_entity_f1={:.4} dev_relation_f1={:.4}",
                    m.entity.micro.f1, m.relation.micro.f1
                )
            });
            let _ = writeln!(
                out,
                "epoch={} loss={:.6} l1e={:.6} l1r={:.6} l2e={:.6} l2r={:.6}{dev}",
                e.epoch, e.loss.total, e.loss.l1e, e.loss.l1r, e.loss.l2e, e.loss.l2r
            );
        },
    )?;
    save_checkpoint(&result.model, &a.out)?;
    println!(
        "best_epoch={} checkpoint={}",
        result.best_epoch,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path, kb: Option<&KnowledgeBase>) -> Result<Model<f32>> {
    let model = load_checkpoint(path)?;
    model.check_kb(kb)?;
    Ok(model)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text).map_err(|e| KeciError::io(p, e))?;
    }
    Ok(())
}

fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    if s == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',').map(|v| v.trim().parse()).collect()
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let kb = load_kb(a.data.kb.as_deref())?;
    if let Some(model_path) = &a.model {
        let model = load_model(model_path, kb.as_ref())?;
        let test = a
            .test
            .as_deref()
            .ok_or_else(|| KeciError::Argument("eval --model needs --test".into()))?;
        let raw = read_raw_dataset(test)?;
        let schema = match &a.data.schema {
            Some(p) => load_schema(p)?,
            None => model.schema.clone(),
        };
        model.check_schema(&schema)?;
        let docs = raw
            .into_iter()
            .map(|d| d.resolve(&schema))
            .collect::<Result<Vec<_>>>()?;
        let metrics = evaluate(&model, &docs, kb.as_ref().filter(|_| model.kb.is_some()))?;
        print_metrics(&metrics);
        write_output(a.out.as_deref(), &(metrics.to_json() + "\n"))?;
        return Ok(ExitCode::SUCCESS);
    }
    let train = a.train.as_deref().ok_or_else(|| {
        KeciError::Argument("eval needs --model, or --train for an ablation run".into())
    })?;
    let variants = parse_variants(&a.ablation)?;
    for v in &variants {
        needs_kb(*v, &kb)?;
    }
    let config = load_config(a.config.as_deref(), a.seed)?;
    let (schema, sets) = load_sets(
        a.data.schema.as_deref(),
        &[Some(train), a.dev.as_deref(), a.test.as_deref()],
    )?;
    let rows = match a.folds {
        Some(k) => cross_validate(&variants, &config, &schema, &sets[0], kb.as_ref(), k)?,
        None => {
            let test = if sets[2].is_empty() {
                &sets[1]
            } else {
                &sets[2]
            };
            if test.is_empty() {
                return Err(KeciError::Argument(
                    "ablation needs --dev or --test to score on".into(),
                ));
            }
            run_ablation(
                &variants,
                &config,
                &schema,
                &sets[0],
                &sets[1],
                test,
                kb.as_ref(),
            )?
        }
    };
    print_ablation(&rows);
    let json = serde_json::to_string(&rows).expect("rows serialize");
    println!("{json}");
    write_output(a.out.as_deref(), &(json + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn print_metrics(m: &Metrics) {
    print!("{}", m.table());
    println!("{}", m.to_json());
}

fn print_ablation(rows: &[AblationRow]) {
    println!(
        "{:<18} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "variant", "ent_micro", "ent_macro", "rel_micro", "rel_macro", "params"
    );
    for r in rows {
        let m = &r.metrics;
        println!(
            "{:<18} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
            r.variant.name(),
            m.entity.micro.f1,
            m.entity.macro_.f1,
            m.relation.micro.f1,
            m.relation.macro_.f1,
            r.num_parameters
        );
    }
}

fn predict_cmd(a: PredictArgs) -> Result<ExitCode> {
    let kb = load_kb(a.kb.as_deref())?;
    let model = load_model(&a.model, kb.as_ref())?;
    let docs = read_raw_dataset(&a.test)?
        .into_iter()
        .map(|mut d| {
            // gold is optional on prediction input
            d.entities.clear();
            d.relations.clear();
            d.resolve(&model.schema)
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = predict(&model, &docs, kb.as_ref().filter(|_| model.kb.is_some()))?;
    let mut lines = String::new();
    for (doc, p) in docs.iter().zip(&preds) {
        let raw = RawDocument::from_document(&p.graph.annotate(doc), &model.schema);
        let mut value = serde_json::to_value(raw).expect("documents serialize");
        if a.attn {
            let ids = |e: usize| kb.as_ref().map(|kb| kb.entities()[e].id.clone());
            let attn: Vec<_> = p
                .attention
                .iter()
                .map(|s| {
                    json!({
                        "start": s.span.start,
                        "end": s.span.end,
                        "sentinel": s.sentinel,
                        "candidates": s.candidates.iter()
                            .map(|(e, w)| json!({"id": ids(*e), "weight": w}))
                            .collect::<Vec<_>>(),
                    })
                })
                .collect();
            value["attention"] = json!(attn);
        }
        lines.push_str(&value.to_string());
        lines.push('\n');
    }
    match &a.out {
        Some(p) => write_output(Some(p), &lines)?,
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            w.write_all(lines.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| KeciError::io("<stdout>", e))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let config = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        // small enough to check every scalar in a few seconds
        None => ModelConfig {
            d: 6,
            d_tok: 5,
            d_len: 3,
            d_kb: 4,
            max_span_len: 4,
            ..ModelConfig::default()
        },
    };
    let report = pipeline_gradcheck(&config, a.ablation, a.seed)?;
    println!(
        "max_relative_error={:.3e} worst_parameter={}[{}] analytic={:.6e} numeric={:.6e} checked={}",
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric,
        report.checked
    );
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::from(2))
    }
}

fn analyze_attention(a: AttentionArgs) -> Result<ExitCode> {
    let kb = KnowledgeBase::load(&a.kb)?;
    let model = load_model(&a.model, Some(&kb))?;
    if model.kb.is_none() {
        return Err(KeciError::Argument(format!(
            "variant {} has no knowledge attention",
            model.variant
        )));
    }
    let docs = read_raw_dataset(&a.test)?
        .into_iter()
        .map(|d| d.resolve(&model.schema))
        .collect::<Result<Vec<_>>>()?;
    let report = attention_report(&predict(&model, &docs, Some(&kb))?, &kb);
    println!("{:<32} {:>10} {:>8}", "semantic_type", "mean", "count");
    for (t, a) in &report.per_type {
        println!("{:<32} {:>10.4} {:>8}", t, a.mean, a.count);
    }
    println!(
        "{:<32} {:>10.4} {:>8}",
        "<sentinel>", report.sentinel_mean, report.spans
    );
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(ExitCode::SUCCESS)
}

fn gen_toy(a: GenToyArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.spec).map_err(|e| KeciError::io(&a.spec, e))?;
    let spec: ToySpec = serde_json::from_str(&text).map_err(|e| KeciError::Parse {
        source_name: a.spec.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    generate_toy(&spec, a.seed)?.write(&a.out)?;
    println!("wrote toy corpus to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn kfold(a: KfoldArgs) -> Result<ExitCode> {
    let docs = read_raw_dataset(&a.train)?;
    let folds = kfold_split(docs.len(), a.folds, a.seed)?;
    for (i, f) in folds.iter().enumerate() {
        let dir = a.out.join(format!("fold{i}"));
        fs::create_dir_all(&dir).map_err(|e| KeciError::io(&dir, e))?;
        let pick = |idx: &[usize]| idx.iter().map(|j| docs[*j].clone()).collect::<Vec<_>>();
        save_raw_dataset(&dir.join("train.jsonl"), &pick(&f.train))?;
        save_raw_dataset(&dir.join("test.jsonl"), &pick(&f.test))?;
    }
    println!("wrote {} folds to {}", folds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
