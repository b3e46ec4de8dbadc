use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxsql_autograd::{grad_check, GradCheckConfig, TensorError};
use ctxsql_core::cqr::{cqr_train, token_accuracy, CqrConfig, CqrModel, CqrTrainConfig};
use ctxsql_core::dataset::{load_interactions, load_seed_annotations, save_interactions, Interaction};
use ctxsql_core::decoder::DecoderConfig;
use ctxsql_core::encoder::EncoderConfig;
use ctxsql_core::eval::{predict_all, score};
use ctxsql_core::grammar::{actions_to_sql, sql_to_actions, Grammar};
use ctxsql_core::losses::{gold_item_indices, turn_loss, LossInput, LossWeights, Variant};
use ctxsql_core::model::{Model, ModelConfig};
use ctxsql_core::schema::{index_schemas, load_schemas, ColumnType, Schema};
use ctxsql_core::selftrain::{checker_pairs, seed_examples, self_train, SelfTrainConfig, CHECK_BEAM};
use ctxsql_core::sql::normalize;
use ctxsql_core::train::{train, write_metrics, TrainConfig};
use ctxsql_core::vocab::Vocab;

#[derive(Parser)]
#[command(name = "ctxsql", version, about = "Context-dependent text-to-SQL training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the parser and write a checkpoint plus a JSON-lines metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print one predicted SQL query per turn.
    Predict(PredictArgs),
    /// Train the question reformulator on seed annotations.
    CqrTrain(CqrTrainArgs),
    /// Grow self-contained questions for every turn by checked self-training.
    CqrSelftrain(SelfTrainArgs),
    /// Compare loss gradients with central differences.
    GradCheck(GradCheckArgs),
    /// Check that every query in a corpus survives SQL -> actions -> SQL.
    Roundtrip(RoundtripArgs),
    /// Load schemas and report structural problems.
    SchemaLint(SchemaLintArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small widths for CPU-scale data.
    Desk,
    /// Full widths.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoSg,
    NoSpKl,
    EndToEnd,
    EndToEndBow,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoSg => Variant::NoSg,
            VariantArg::NoSpKl => Variant::NoSpKl,
            VariantArg::EndToEnd => Variant::EndToEnd,
            VariantArg::EndToEndBow => Variant::EndToEndBow,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct DataArgs {
    /// Interactions JSON.
    #[arg(long)]
    data: PathBuf,
    /// Schemas JSON (list of database records).
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    io: DataArgs,
    /// Optional dev set scored after every epoch.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, default_value_t = 3.0)]
    lambda2: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    variant: VariantArg,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Defaults to 3e-3 for the desk preset and 5e-5 for the full one.
    #[arg(long)]
    lr: Option<f64>,
    /// Defaults to 4 for the desk preset and 32 for the full one.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long)]
    no_dropout: bool,
    /// Stop once every training question is matched.
    #[arg(long)]
    stop_at_perfect: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    io: DataArgs,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Accepted for uniformity; evaluation uses no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    io: DataArgs,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Accepted for uniformity; prediction uses no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CqrTrainArgs {
    #[command(flatten)]
    io: DataArgs,
    /// Seed annotations JSON.
    #[arg(long)]
    seeds: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelfTrainArgs {
    #[command(flatten)]
    io: DataArgs,
    #[arg(long)]
    seeds: PathBuf,
    /// Checker parser checkpoint; trained on first turns and seeds when absent.
    #[arg(long)]
    parser: Option<PathBuf>,
    /// Where to write the dataset with a self-contained question on every turn.
    #[arg(long)]
    out: PathBuf,
    /// Optional path for the final reformulator checkpoint.
    #[arg(long)]
    cqr_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    loop_cap: usize,
    #[arg(long, default_value_t = CHECK_BEAM)]
    check_beam: usize,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    cqr_epochs: Option<usize>,
    /// Epoch budget for a checker trained here.
    #[arg(long, default_value_t = 150)]
    checker_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    io: DataArgs,
    /// Checkpoint to check; a fresh desk model when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    interaction: usize,
    #[arg(long, default_value_t = 0)]
    turn: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, default_value_t = 3.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 8)]
    entries: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    abs_floor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RoundtripArgs {
    /// One query per line, optionally prefixed by `db_id<TAB>`; `#` starts a comment.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Database for lines without a prefix.
    #[arg(long)]
    db: Option<String>,
    /// Accepted for uniformity; the check uses no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SchemaLintArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Accepted for uniformity; linting uses no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors and 0 for --help
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::CqrTrain(a) => cmd_cqr_train(a),
        Command::CqrSelftrain(a) => cmd_selftrain(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Roundtrip(a) => cmd_roundtrip(a),
        Command::SchemaLint(a) => cmd_schema_lint(a),
    };
    match out {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain, skipping causes that the message before them already quotes.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        if !out.ends_with(&cause) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&cause);
        }
    }
    out
}

fn load(io: &DataArgs) -> Result<(HashMap<String, Schema>, Vec<Interaction>)> {
    let schemas = index_schemas(load_schemas(&io.schema)?);
    let data = load_interactions(&io.data, &schemas)?;
    Ok((schemas, data))
}

fn model_config(preset: Preset, vocab: Vocab) -> ModelConfig {
    let grammar = Grammar::sql();
    match preset {
        Preset::Desk => ModelConfig::desk(vocab, &grammar),
        Preset::Full => ModelConfig::new(EncoderConfig::default(), DecoderConfig::default(), vocab, &grammar),
    }
}

fn cqr_config(preset: Preset) -> CqrConfig {
    match preset {
        Preset::Desk => CqrConfig::desk(),
        Preset::Full => CqrConfig::default(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let (schemas, data) = load(&a.io)?;
    let dev = a.dev.as_ref().map(|p| load_interactions(p, &schemas)).transpose()?;
    let mut vocab_src = data.clone();
    if let Some(d) = &dev {
        vocab_src.extend(d.iter().cloned());
    }
    let vocab = Vocab::build(&vocab_src, schemas.values());
    let mut model = Model::new(model_config(a.preset, vocab), a.seed)?;
    let (lr, batch) = match a.preset {
        Preset::Desk => (3e-3, 4),
        Preset::Full => (5e-5, 32),
    };
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(lr),
        batch_size: a.batch_size.unwrap_or(batch),
        epochs: a.epochs,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        variant: a.variant.into(),
        dropout: !a.no_dropout,
        seed: a.seed,
        eval_train: a.stop_at_perfect,
        stop_at_perfect: a.stop_at_perfect,
        ..TrainConfig::default()
    };
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"));
    let mut log = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let mut io_err = None;
    let history = train(&mut model, &data, &schemas, dev.as_deref(), &cfg, |m| {
        match write_metrics(&mut log, m).and_then(|_| log.flush()) {
            Ok(()) => true,
            Err(e) => {
                io_err = Some(e);
                false
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    model.save(&a.out)?;
    if let Some(last) = history.last() {
        eprintln!(
            "trained {} epochs, final loss {:.4}; checkpoint {}, metrics {}",
            last.epoch,
            last.total,
            a.out.display(),
            metrics_path.display()
        );
    }
    Ok(true)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let model = Model::load(&a.ckpt)?;
    let (schemas, data) = load(&a.io)?;
    let preds = predict_all(&model, &data, &schemas, a.beam)?;
    let report = score(&data, &preds, &schemas)?;
    report.check()?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Text => print!("{}", report.to_text()),
    }
    Ok(true)
}

fn cmd_predict(a: PredictArgs) -> Result<bool> {
    let model = Model::load(&a.ckpt)?;
    let (schemas, data) = load(&a.io)?;
    let preds = predict_all(&model, &data, &schemas, a.beam)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, turns) in preds.iter().enumerate() {
        for (t, p) in turns.iter().enumerate() {
            match p {
                Ok(sql) => writeln!(out, "{sql}")?,
                Err(e) => {
                    log::warn!("interaction {i}, turn {t}: {e}");
                    writeln!(out)?;
                }
            }
        }
    }
    Ok(true)
}

fn cmd_cqr_train(a: CqrTrainArgs) -> Result<bool> {
    let (schemas, data) = load(&a.io)?;
    let seeds = load_seed_annotations(&a.seeds)?;
    let examples = seed_examples(&seeds, &data)?;
    let vocab = Vocab::build(&data, schemas.values());
    let mut model = CqrModel::new(cqr_config(a.preset), vocab, a.seed)?;
    let defaults = CqrTrainConfig::default();
    let cfg = CqrTrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed: a.seed,
        ..defaults
    };
    cqr_train(&mut model, &examples, &schemas, &cfg)?;
    let acc = token_accuracy(&model, &examples, &schemas)?;
    model.save(&a.out)?;
    eprintln!("{} examples, token accuracy {acc:.4}; checkpoint {}", examples.len(), a.out.display());
    Ok(true)
}

fn cmd_selftrain(a: SelfTrainArgs) -> Result<bool> {
    let (schemas, data) = load(&a.io)?;
    let seeds = load_seed_annotations(&a.seeds)?;
    let parser = match &a.parser {
        Some(p) => Model::load(p)?,
        None => {
            let vocab = Vocab::build(&data, schemas.values());
            let mut parser = Model::new(model_config(a.preset, vocab), a.seed)?;
            let pairs = checker_pairs(&seeds, &data)?;
            let cfg = TrainConfig {
                lr: 3e-3,
                batch_size: 4,
                epochs: a.checker_epochs,
                dropout: false,
                seed: a.seed,
                eval_train: true,
                stop_at_perfect: true,
                ..TrainConfig::default()
            };
            let h = train(&mut parser, &pairs, &schemas, None, &cfg, |_| true)?;
            eprintln!(
                "checker trained on {} pairs for {} epochs, training QM {:?}",
                pairs.len(),
                h.len(),
                h.last().and_then(|m| m.train_qm)
            );
            parser
        }
    };
    let vocab = parser.config.vocab.clone();
    let defaults = CqrTrainConfig::default();
    let cfg = SelfTrainConfig {
        loop_cap: a.loop_cap,
        check_beam: a.check_beam,
        model: cqr_config(a.preset),
        train: CqrTrainConfig {
            epochs: a.cqr_epochs.unwrap_or(defaults.epochs),
            seed: a.seed,
            ..defaults
        },
    };
    let r = self_train(&seeds, &data, &schemas, &parser, &vocab, &cfg)?;
    save_interactions(&a.out, &r.merged)?;
    if let Some(p) = &a.cqr_out {
        r.model.save(p)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "loops": r.loops,
            "accepted": r.accepted.len(),
            "turns": data.iter().map(|i| i.turns.len()).sum::<usize>(),
            "hit_cap": r.hit_cap,
        }))?
    );
    Ok(true)
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<bool> {
    let (schemas, data) = load(&a.io)?;
    let model = match &a.ckpt {
        Some(p) => Model::load(p)?,
        None => Model::new(ModelConfig::desk(Vocab::build(&data, schemas.values()), &Grammar::sql()), a.seed)?,
    };
    let inter = data
        .get(a.interaction)
        .with_context(|| format!("no interaction {}", a.interaction))?;
    let turn = inter
        .turns
        .get(a.turn)
        .with_context(|| format!("interaction {} has no turn {}", a.interaction, a.turn))?;
    let schema = &schemas[&inter.database_id];
    let gold = sql_to_actions(&turn.gold_sql, schema, &model.grammar)?;
    let items = gold_item_indices(&turn.gold, schema);
    let ctx = inter.context(a.turn);
    let input = LossInput {
        context: &ctx,
        self_contained: turn.self_contained.as_deref(),
        schema,
        gold_actions: &gold,
        gold_items: &items,
    };
    let weights = LossWeights {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        variant: Variant::Full,
    };
    let report = grad_check(
        |store, g| {
            let m = Model {
                params: store.clone(),
                ..model.clone()
            };
            let terms = turn_loss(g, &m, &input, &weights).map_err(|e| TensorError::Invalid(e.to_string()))?;
            Ok(terms.total)
        },
        &model.params,
        &GradCheckConfig {
            step: a.step,
            tolerance: a.tolerance,
            max_entries_per_param: Some(a.entries),
            abs_floor: a.abs_floor,
            seed: a.seed,
        },
    )?;
    let worst = report.worst.as_ref().map(|w| {
        serde_json::json!({
            "param": w.param, "index": w.index, "analytic": w.analytic, "numeric": w.numeric, "rel_error": w.rel_error,
        })
    });
    println!(
        "{}",
        serde_json::json!({
            "entries_checked": report.entries_checked,
            "max_rel_error": report.max_rel_error,
            "tolerance": a.tolerance,
            "passed": report.passed,
            "worst": worst,
        })
    );
    Ok(report.passed)
}

fn cmd_roundtrip(a: RoundtripArgs) -> Result<bool> {
    let schemas = index_schemas(load_schemas(&a.schema)?);
    let text = std::fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let grammar = Arc::new(Grammar::sql());
    let (mut total, mut failed) = (0, 0);
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (db, sql) = match line.split_once('\t') {
            Some((db, sql)) => (db.trim(), sql.trim()),
            None => match &a.db {
                Some(db) => (db.as_str(), line),
                None => bail!("line {}: no database prefix and no --db", n + 1),
            },
        };
        let schema = schemas
            .get(db)
            .with_context(|| format!("line {}: unknown database `{db}`", n + 1))?;
        total += 1;
        let outcome = (|| -> Result<Option<String>> {
            let actions = sql_to_actions(sql, schema, &grammar)?;
            let back = actions_to_sql(&actions, schema, &grammar)?;
            Ok((normalize(&back, schema)? != normalize(sql, schema)?).then_some(back))
        })();
        match outcome {
            Ok(None) => {}
            Ok(Some(back)) => {
                failed += 1;
                println!("FAIL line {}: {sql}\n  came back as: {back}", n + 1);
            }
            Err(e) => {
                failed += 1;
                println!("FAIL line {}: {sql}\n  {e:#}", n + 1);
            }
        }
    }
    println!("{}/{total} queries round-trip", total - failed);
    Ok(failed == 0)
}

fn cmd_schema_lint(a: SchemaLintArgs) -> Result<bool> {
    let schemas = load_schemas(&a.schema)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut problems = 0;
    for s in &schemas {
        if !seen.insert(s.db_id.clone()) {
            println!("{}: duplicate database id", s.db_id);
            problems += 1;
        }
        let mut warnings = Vec::new();
        for (t, table) in s.tables.iter().enumerate() {
            if table.columns.is_empty() {
                warnings.push(format!("table `{}` has no columns", table.name));
            } else if !s.primary_keys.iter().any(|&c| s.columns[c].table == t) {
                warnings.push(format!("table `{}` has no primary key", table.name));
            }
        }
        for &(a, b) in &s.foreign_keys {
            let (ca, cb) = (&s.columns[a], &s.columns[b]);
            if ca.ty != cb.ty && ca.ty != ColumnType::Others && cb.ty != ColumnType::Others {
                warnings.push(format!(
                    "foreign key {} -> {} joins {:?} to {:?}",
                    s.qualified(a),
                    s.qualified(b),
                    ca.ty,
                    cb.ty
                ));
            }
            if a == b {
                warnings.push(format!("foreign key {} references itself", s.qualified(a)));
            }
        }
        println!(
            "{}: {} tables, {} columns, {} primary keys, {} foreign keys",
            s.db_id,
            s.tables.len(),
            s.columns.len(),
            s.primary_keys.len(),
            s.foreign_keys.len()
        );
        for w in &warnings {
            println!("  warning: {w}");
        }
    }
    Ok(problems == 0)
}
