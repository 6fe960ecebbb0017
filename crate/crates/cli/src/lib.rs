//! The `intervene` command line: data generation, LM training, unit search,
//! evaluation, trace export, estimator comparison, and report tables.
//!
//! Every command resolves its settings as flag > manifest entry > default,
//! echoes the resolved configuration into its outputs, and writes files
//! atomically. Re-running a command from the same manifest reproduces its
//! result records bit-for-bit, wall-clock fields excluded.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use intervene::datagen::{
    generate_agreement_corpus, generate_gender_corpus, read_corpus, task_vocabulary, write_corpus,
    LexiconPools, SentenceInstance, Task,
};
use intervene::intervention::{
    forward_with_intervention, InterventionMode, InterventionParams, MaskSpec,
};
use intervene::lstm::{
    agreement_accuracy, load_checkpoint, perplexity, save_checkpoint, train_lm, LMConfig,
    LMParameters, TrainConfig, Vocabulary,
};
use intervene::search::{
    aggregate_runs, evaluate_frozen, prepare_instances, run_search, Direction, Estimator,
    RunAggregate, SearchConfig, SearchResult,
};
use intervene::RealArray;

/// Errors mapped onto the exit-code contract:
/// 1 usage, 2 data, 3 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Data(e) | CliError::Numerical(e) => format!("{e:#}"),
        }
    }
}

impl From<intervene::Error> for CliError {
    fn from(e: intervene::Error) -> Self {
        match e {
            intervene::Error::Numerical(_) | intervene::Error::NonFinite(_) => {
                CliError::Numerical(e.into())
            }
            other => CliError::Data(other.into()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn data_err<T>(r: anyhow::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Data)
}

#[derive(Parser, Debug)]
#[command(
    name = "intervene",
    version,
    about = "Find sparse hidden-unit interventions in a small recurrent LM"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus (train + eval splits).
    GenData(GenDataArgs),
    /// Train the language model and write a checkpoint.
    TrainLm(TrainLmArgs),
    /// Learn sparse interventions against a frozen checkpoint.
    FindUnits(FindUnitsArgs),
    /// Evaluate a checkpoint, optionally under a saved intervention.
    Evaluate(EvaluateArgs),
    /// Export per-step activations of a saved intervention as TSV.
    Trace(TraceArgs),
    /// Run the relaxed and REINFORCE estimators under matched budgets.
    CompareEstimators(CompareArgs),
    /// Aggregate result records into a prevalence table.
    Report(ReportArgs),
}

/// Manifest file: the same knobs as the flags, all optional. Flags win.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub task: Option<Task>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub n_train: Option<usize>,
    pub n_eval: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub hidden_size: Option<usize>,
    pub embedding_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub clip_norm: Option<f64>,
    pub mode: Option<InterventionMode>,
    pub direction: Option<Direction>,
    pub estimator: Option<Estimator>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub kl_weight: Option<f64>,
    pub lambda_init: Option<f64>,
    pub lr_params: Option<f64>,
    pub lr_lambda: Option<f64>,
    pub search_epochs: Option<usize>,
    pub search_batch_size: Option<usize>,
    pub samples_per_step: Option<usize>,
    pub max_train_instances: Option<usize>,
    pub repeats: Option<usize>,
    pub lm_seeds: Option<Vec<u64>>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = data_err(
            std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("cannot read manifest {}: {e}", path.display())),
        )?;
        data_err(
            serde_json::from_str(&text)
                .map_err(|e| anyhow::anyhow!("malformed manifest {}: {e}", path.display())),
        )
    }

    fn from_opt(path: &Option<PathBuf>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

fn pick<T: Clone>(flag: &Option<T>, manifest: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| manifest.clone()).unwrap_or(default)
}

fn require<T: Clone>(flag: &Option<T>, manifest: &Option<T>, name: &str) -> CliResult<T> {
    flag.clone()
        .or_else(|| manifest.clone())
        .ok_or_else(|| CliError::Usage(format!("missing required option --{name}")))
}

fn atomic_write(path: &Path, contents: &str) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    data_err(
        std::fs::write(&tmp, contents)
            .map_err(|e| anyhow::anyhow!("cannot write {}: {e}", tmp.display())),
    )?;
    data_err(
        std::fs::rename(&tmp, path)
            .map_err(|e| anyhow::anyhow!("cannot rename into {}: {e}", path.display())),
    )
}

fn load_corpus(path: &Path) -> CliResult<Vec<SentenceInstance>> {
    read_corpus(path).map_err(|e| {
        CliError::Data(anyhow::anyhow!("corpus {}: {e}", path.display()))
    })
}

fn load_ckpt(path: &Path) -> CliResult<(LMConfig, LMParameters, Vocabulary)> {
    load_checkpoint(path).map_err(|e| {
        CliError::Data(anyhow::anyhow!("checkpoint {}: {e}", path.display()))
    })
}

fn encode_for(
    vocab: &Vocabulary,
    instances: &[SentenceInstance],
    what: &str,
) -> CliResult<Vec<intervene::datagen::EncodedInstance>> {
    instances
        .iter()
        .map(|i| i.encode(vocab))
        .collect::<intervene::Result<Vec<_>>>()
        .map_err(|e| {
            CliError::Data(anyhow::anyhow!(
                "incompatible checkpoint/corpus vocabularies ({what}): {e}"
            ))
        })
}

// ── gen-data ─────────────────────────────────────────────────────────

#[derive(Args, Debug, Default)]
pub struct GenDataArgs {
    /// agreement | gender
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `<task>.train.tsv` and `<task>.eval.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<(PathBuf, PathBuf)> {
    let m = ExperimentManifest::from_opt(&args.manifest)?;
    let task = require(&args.task, &m.task, "task")?;
    let seed = pick(&args.seed, &m.seed, 0);
    let out = require(&args.out, &m.out, "out")?;
    let (default_train, default_eval) = match task {
        Task::Agreement => (11_000, 1_000),
        Task::Gender => (2_673, 200),
    };
    let n_train = pick(&args.n_train, &m.n_train, default_train);
    let n_eval = pick(&args.n_eval, &m.n_eval, default_eval);

    let pools = LexiconPools::default();
    let (train, eval) = match task {
        Task::Agreement => generate_agreement_corpus(&pools, seed, n_train, n_eval)?,
        Task::Gender => generate_gender_corpus(&pools, seed, n_train, n_eval)?,
    };
    data_err(
        std::fs::create_dir_all(&out)
            .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", out.display())),
    )?;
    let train_path = out.join(format!("{task}.train.tsv"));
    let eval_path = out.join(format!("{task}.eval.tsv"));
    write_corpus(&train_path, &train)?;
    write_corpus(&eval_path, &eval)?;
    println!(
        "wrote {} train / {} eval {task} instances to {}",
        train.len(),
        eval.len(),
        out.display()
    );
    Ok((train_path, eval_path))
}

// ── train-lm ─────────────────────────────────────────────────────────

#[derive(Args, Debug, Default)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Optional eval corpus for the post-training preference accuracy.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub embedding_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub config: LMConfig,
    pub train: TrainConfig,
    pub task: Task,
    pub loss_curve: Vec<f64>,
    pub eval_accuracy: Option<f64>,
    pub eval_perplexity: Option<f64>,
}

pub fn cmd_train_lm(args: &TrainLmArgs) -> CliResult<TrainMetrics> {
    let m = ExperimentManifest::from_opt(&args.manifest)?;
    let corpus_path = require(&args.corpus, &m.corpus, "corpus")?;
    let out = require(&args.out, &m.out, "out")?;
    let instances = load_corpus(&corpus_path)?;
    if instances.is_empty() {
        return Err(CliError::Data(anyhow::anyhow!(
            "corpus {} is empty",
            corpus_path.display()
        )));
    }
    let task = instances[0].task;
    let pools = LexiconPools::default();
    let vocab = task_vocabulary(&pools, task);

    let cfg = LMConfig::new(
        pick(&args.hidden_size, &m.hidden_size, 64),
        pick(&args.embedding_size, &m.embedding_size, 64),
        vocab.len(),
    )?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        learning_rate: pick(&args.learning_rate, &m.learning_rate, defaults.learning_rate),
        lr_decay: pick(&args.lr_decay, &m.lr_decay, defaults.lr_decay),
        momentum: pick(&args.momentum, &m.momentum, defaults.momentum),
        epochs: pick(&args.epochs, &m.epochs, defaults.epochs),
        batch_size: pick(&args.batch_size, &m.batch_size, defaults.batch_size),
        clip_norm: pick(&args.clip_norm, &m.clip_norm, defaults.clip_norm),
        seed: pick(&args.seed, &m.seed, defaults.seed),
    };

    let encoded = encode_for(&vocab, &instances, "train corpus")?;
    let sentences: Vec<Vec<u32>> = encoded.into_iter().map(|e| e.tokens).collect();
    let (params, curve) = train_lm(&cfg, &sentences, &train_cfg)?;
    for (epoch, loss) in curve.iter().enumerate() {
        println!("epoch {epoch}: {loss:.4} nats/token");
    }

    let (mut eval_accuracy, mut eval_perplexity) = (None, None);
    let eval_path = args.eval_corpus.clone().or(m.eval_corpus.clone());
    if let Some(eval_path) = eval_path {
        let eval = load_corpus(&eval_path)?;
        let eval_enc = encode_for(&vocab, &eval, "eval corpus")?;
        eval_accuracy = Some(agreement_accuracy(&params, &cfg, &eval_enc)?);
        let eval_sents: Vec<Vec<u32>> = eval_enc.into_iter().map(|e| e.tokens).collect();
        eval_perplexity = Some(perplexity(&params, &cfg, &eval_sents)?);
        println!(
            "eval preference accuracy {:.4}, perplexity {:.2}",
            eval_accuracy.unwrap(),
            eval_perplexity.unwrap()
        );
    }

    save_checkpoint(&out, &cfg, &params, &vocab)?;
    let metrics = TrainMetrics {
        config: cfg,
        train: train_cfg,
        task,
        loss_curve: curve,
        eval_accuracy,
        eval_perplexity,
    };
    let metrics_path = out.with_extension("metrics.json");
    atomic_write(
        &metrics_path,
        &data_err(serde_json::to_string_pretty(&metrics).map_err(Into::into))?,
    )?;
    println!("checkpoint written to {}", out.display());
    Ok(metrics)
}

// ── find-units ───────────────────────────────────────────────────────

#[derive(Args, Debug, Default, Clone)]
pub struct SearchArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub lambda_init: Option<f64>,
    #[arg(long)]
    pub lr_params: Option<f64>,
    #[arg(long)]
    pub lr_lambda: Option<f64>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub search_batch_size: Option<usize>,
    #[arg(long)]
    pub samples_per_step: Option<usize>,
    #[arg(long)]
    pub max_train_instances: Option<usize>,
    /// single | every
    #[arg(long)]
    pub mode: Option<InterventionMode>,
    /// to-singular | to-plural | to-he | to-she
    #[arg(long)]
    pub direction: Option<Direction>,
    /// relaxed | reinforce
    #[arg(long)]
    pub estimator: Option<Estimator>,
}

impl SearchArgs {
    fn resolve(&self, m: &ExperimentManifest, seed: u64) -> SearchConfig {
        let d = SearchConfig::default();
        SearchConfig {
            alpha: pick(&self.alpha, &m.alpha, d.alpha),
            beta: pick(&self.beta, &m.beta, d.beta),
            lambda_init: pick(&self.lambda_init, &m.lambda_init, d.lambda_init),
            lr_params: pick(&self.lr_params, &m.lr_params, d.lr_params),
            lr_lambda: pick(&self.lr_lambda, &m.lr_lambda, d.lr_lambda),
            kl_weight: pick(&self.kl_weight, &m.kl_weight, d.kl_weight),
            epochs: pick(&self.search_epochs, &m.search_epochs, d.epochs),
            batch_size: pick(&self.search_batch_size, &m.search_batch_size, d.batch_size),
            samples_per_step: pick(&self.samples_per_step, &m.samples_per_step, d.samples_per_step),
            max_train_instances: pick(
                &self.max_train_instances,
                &m.max_train_instances,
                d.max_train_instances,
            ),
            seed,
            mode: pick(&self.mode, &m.mode, d.mode),
            direction: pick(&self.direction, &m.direction, d.direction),
            estimator: pick(&self.estimator, &m.estimator, d.estimator),
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct FindUnitsArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independent runs; run r uses seed + r.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Results path (JSON-lines); the prevalence table lands next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_find_units(args: &FindUnitsArgs) -> CliResult<(Vec<SearchResult>, RunAggregate)> {
    let m = ExperimentManifest::from_opt(&args.manifest)?;
    let ckpt_path = require(&args.checkpoint, &m.checkpoint, "checkpoint")?;
    let corpus_path = require(&args.corpus, &m.corpus, "corpus")?;
    let eval_path = require(&args.eval_corpus, &m.eval_corpus, "eval-corpus")?;
    let out = require(&args.out, &m.out, "out")?;
    let seed = pick(&args.seed, &m.seed, 0);
    let repeats = pick(&args.repeats, &m.repeats, 1).max(1);

    let (cfg, params, vocab) = load_ckpt(&ckpt_path)?;
    let train = encode_for(&vocab, &load_corpus(&corpus_path)?, "train corpus")?;
    let eval = encode_for(&vocab, &load_corpus(&eval_path)?, "eval corpus")?;

    let mut results = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let config = args.search.resolve(&m, seed + r as u64);
        let mut result = run_search(&params, &cfg, &vocab, &train, &eval, &config)?;
        result.run_id = r;
        println!(
            "run {r}: accuracy {:.3}, {} units {:?}, kl {:.4}, {} steps, {:.1}s{}",
            result.accuracy,
            result.units,
            result.unit_ids,
            result.mean_kl,
            result.steps,
            result.wall_seconds,
            if result.degenerate {
                " [degenerate: empty mask]"
            } else if result.budget_exceeded {
                " [budget exceeded]"
            } else {
                ""
            }
        );
        results.push(result);
    }

    let aggregate = aggregate_runs(&results)?;
    let mut lines = String::new();
    for result in &results {
        lines.push_str(&data_err(serde_json::to_string(result).map_err(Into::into))?);
        lines.push('\n');
    }
    atomic_write(&out, &lines)?;
    let agg_path = out.with_extension("aggregate.json");
    atomic_write(
        &agg_path,
        &data_err(serde_json::to_string_pretty(&aggregate).map_err(Into::into))?,
    )?;
    print_aggregate(&aggregate);
    println!("results written to {}", out.display());
    Ok((results, aggregate))
}

fn print_aggregate(agg: &RunAggregate) {
    println!(
        "aggregate over {} runs: accuracy {:.3} ± {:.3}, units {:.1} ± {:.1}, kl {:.4}",
        agg.runs, agg.mean_accuracy, agg.std_accuracy, agg.mean_units, agg.std_units, agg.mean_kl
    );
    println!("unit\tprevalence\tbaseline");
    for row in &agg.rows {
        println!(
            "{}\t{:.0}%\t{:.2} ± {:.2}",
            row.unit,
            row.prevalence * 100.0,
            row.mean_baseline,
            row.std_baseline
        );
    }
}

// ── evaluate ─────────────────────────────────────────────────────────

#[derive(Args, Debug, Default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// Results JSON-lines to re-evaluate; omit to score the bare model.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Which record in the results file.
    #[arg(long, default_value_t = 0)]
    pub run: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct EvaluateOutput {
    pub preference_accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    pub intervention: Option<intervene::search::EvalMetrics>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<EvaluateOutput> {
    let m = ExperimentManifest::from_opt(&args.manifest)?;
    let ckpt_path = require(&args.checkpoint, &m.checkpoint, "checkpoint")?;
    let eval_path = require(&args.eval_corpus, &m.eval_corpus, "eval-corpus")?;
    let (cfg, params, vocab) = load_ckpt(&ckpt_path)?;
    let eval = encode_for(&vocab, &load_corpus(&eval_path)?, "eval corpus")?;

    if let Some(results_path) = args.results.clone() {
        let record = read_result(&results_path, args.run)?;
        let prepared = prepare_instances(&eval, &params, &cfg, &vocab, record.config.direction)?;
        let (mask, baseline) = record.frozen(cfg.total_units());
        let metrics = evaluate_frozen(
            &params,
            &cfg,
            &mask,
            &baseline,
            record.config.mode,
            &prepared,
        )?;
        println!(
            "intervention run {}: accuracy {:.3}, {} units, kl {:.4} over {} instances",
            args.run,
            metrics.accuracy,
            metrics.units,
            metrics.mean_kl,
            prepared.len()
        );
        Ok(EvaluateOutput {
            preference_accuracy: None,
            perplexity: None,
            intervention: Some(metrics),
        })
    } else {
        let acc = agreement_accuracy(&params, &cfg, &eval)?;
        let sents: Vec<Vec<u32>> = eval.into_iter().map(|e| e.tokens).collect();
        let ppl = perplexity(&params, &cfg, &sents)?;
        println!("preference accuracy {acc:.4}, perplexity {ppl:.2}");
        Ok(EvaluateOutput {
            preference_accuracy: Some(acc),
            perplexity: Some(ppl),
            intervention: None,
        })
    }
}

fn read_result(path: &Path, run: usize) -> CliResult<SearchResult> {
    let reader = BufReader::new(data_err(
        File::open(path).map_err(|e| anyhow::anyhow!("cannot open {}: {e}", path.display())),
    )?);
    let mut records = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = data_err(line.map_err(Into::into))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SearchResult = data_err(serde_json::from_str(&line).map_err(|e| {
            anyhow::anyhow!("{}:{}: malformed result record: {e}", path.display(), line_no + 1)
        }))?;
        records.push(record);
    }
    records.into_iter().nth(run).ok_or_else(|| {
        CliError::Data(anyhow::anyhow!(
            "results file {} has no record {run}",
            path.display()
        ))
    })
}

// ── trace ────────────────────────────────────────────────────────────

#[derive(Args, Debug, Default)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub run: usize,
    /// Index into the direction-filtered evaluation set.
    #[arg(long, default_value_t = 0)]
    pub instance: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_trace(args: &TraceArgs) -> CliResult<PathBuf> {
    let m = ExperimentManifest::from_opt(&args.manifest)?;
    let ckpt_path = require(&args.checkpoint, &m.checkpoint, "checkpoint")?;
    let eval_path = require(&args.eval_corpus, &m.eval_corpus, "eval-corpus")?;
    let results_path = require(&args.results, &None, "results")?;
    let out = require(&args.out, &m.out, "out")?;

    let (cfg, params, vocab) = load_ckpt(&ckpt_path)?;
    let eval = encode_for(&vocab, &load_corpus(&eval_path)?, "eval corpus")?;
    let record = read_result(&results_path, args.run)?;
    let prepared = prepare_instances(&eval, &params, &cfg, &vocab, record.config.direction)?;
    let inst = prepared.get(args.instance).ok_or_else(|| {
        CliError::Data(anyhow::anyhow!(
            "instance index {} out of range ({} instances match direction {})",
            args.instance,
            prepared.len(),
            record.config.direction
        ))
    })?;

    let (mask, baseline) = record.frozen(cfg.total_units());
    let iparams = InterventionParams::new(
        MaskSpec::Binary(mask.clone()),
        RealArray::vector(baseline)?,
        record.config.mode,
    )?;
    let mask_values = iparams.mask.binary_values().expect("binary mask");
    let (_, trace) =
        forward_with_intervention(&params, &cfg, &iparams, &inst.instance, &mask_values)?;

    let tokens: Vec<String> = inst
        .instance
        .tokens
        .iter()
        .map(|&t| vocab.token(t).to_string())
        .collect();
    trace.write_tsv(
        &out,
        &tokens,
        &record.unit_ids,
        inst.instance.d as usize,
        inst.instance.t as usize,
    )?;
    println!(
        "trace of {} steps x {} units written to {}",
        trace.steps.len(),
        record.unit_ids.len(),
        out.display()
    );
    Ok(out)
}

// ── compare-estimators ───────────────────────────────────────────────

#[derive(Args, Debug, Default)]
pub struct CompareArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sparsity budgets to sweep, e.g. --alpha-list 0.02,0.05
    #[arg(long, value_delimiter = ',')]
    pub alpha_list: Vec<f64>,
    /// Epoch budget applied to both estimators.
    #[arg(long)]
    pub budget_epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub estimator: Estimator,
    pub alpha: f64,
    pub accuracy: f64,
    pub units: usize,
    pub steps: usize,
    pub epochs_run: usize,
    /// Early stop fired within the budget.
    pub converged: bool,
    pub wall_seconds: f64,
}

pub fn cmd_compare_estimators(args: &CompareArgs) -> CliResult<Vec<ComparisonRow>> {
    let m = ExperimentManifest::from_opt(&args.manifest)?;
    let ckpt_path = require(&args.checkpoint, &m.checkpoint, "checkpoint")?;
    let corpus_path = require(&args.corpus, &m.corpus, "corpus")?;
    let eval_path = require(&args.eval_corpus, &m.eval_corpus, "eval-corpus")?;
    let out = require(&args.out, &m.out, "out")?;
    let seed = pick(&args.seed, &m.seed, 0);
    let budget = pick(&args.budget_epochs, &m.search_epochs, 50);
    let alphas = if args.alpha_list.is_empty() {
        vec![pick(&args.search.alpha, &m.alpha, 0.05)]
    } else {
        args.alpha_list.clone()
    };

    let (cfg, params, vocab) = load_ckpt(&ckpt_path)?;
    let train = encode_for(&vocab, &load_corpus(&corpus_path)?, "train corpus")?;
    let eval = encode_for(&vocab, &load_corpus(&eval_path)?, "eval corpus")?;

    let mut rows = Vec::new();
    println!("estimator\talpha\tacc\tunits\tsteps\twall_s\tconverged");
    for &alpha in &alphas {
        for estimator in [Estimator::Relaxed, Estimator::Reinforce] {
            let config = SearchConfig {
                alpha,
                estimator,
                epochs: budget,
                ..args.search.resolve(&m, seed)
            };
            let result = run_search(&params, &cfg, &vocab, &train, &eval, &config)?;
            let row = ComparisonRow {
                estimator,
                alpha,
                accuracy: result.accuracy,
                units: result.units,
                steps: result.steps,
                epochs_run: result.epochs_run,
                converged: result.epochs_run < budget,
                wall_seconds: result.wall_seconds,
            };
            println!(
                "{}\t{}\t{:.3}\t{}\t{}\t{:.1}\t{}",
                row.estimator, row.alpha, row.accuracy, row.units, row.steps, row.wall_seconds,
                row.converged
            );
            rows.push(row);
        }
    }
    let mut lines = String::new();
    for row in &rows {
        lines.push_str(&data_err(serde_json::to_string(row).map_err(Into::into))?);
        lines.push('\n');
    }
    atomic_write(&out, &lines)?;
    println!("comparison written to {}", out.display());
    Ok(rows)
}

// ── report ───────────────────────────────────────────────────────────

#[derive(Args, Debug, Default)]
pub struct ReportArgs {
    /// One or more results JSON-lines files.
    #[arg(long, required = true)]
    pub results: Vec<PathBuf>,
    /// Prevalence table output (TSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<RunAggregate> {
    let mut records = Vec::new();
    for path in &args.results {
        let reader = BufReader::new(data_err(
            File::open(path).map_err(|e| anyhow::anyhow!("cannot open {}: {e}", path.display())),
        )?);
        for line in reader.lines() {
            let line = data_err(line.map_err(Into::into))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(data_err(
                serde_json::from_str::<SearchResult>(&line).map_err(Into::into),
            )?);
        }
    }
    let aggregate = aggregate_runs(&records)?;
    print_aggregate(&aggregate);
    if let Some(out) = &args.out {
        let mut tsv = String::from("unit\tprevalence\tmean_baseline\tstd_baseline\truns\n");
        for row in &aggregate.rows {
            tsv.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                row.unit, row.prevalence, row.mean_baseline, row.std_baseline, row.runs_selecting
            ));
        }
        atomic_write(out, &tsv)?;
        println!("prevalence table written to {}", out.display());
    }
    Ok(aggregate)
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args).map(|_| ()),
        Command::TrainLm(args) => cmd_train_lm(&args).map(|_| ()),
        Command::FindUnits(args) => cmd_find_units(&args).map(|_| ()),
        Command::Evaluate(args) => cmd_evaluate(&args).map(|_| ()),
        Command::Trace(args) => cmd_trace(&args).map(|_| ()),
        Command::CompareEstimators(args) => cmd_compare_estimators(&args).map(|_| ()),
        Command::Report(args) => cmd_report(&args).map(|_| ()),
    }
}
