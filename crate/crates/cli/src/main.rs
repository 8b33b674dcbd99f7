//! `docmeta` command-line driver.
//!
//! Every command reads an optional JSON config (`--config`), applies flag
//! overrides, and works inside one output directory, so the stages can be
//! run one at a time or all at once with `run`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use docmeta::pipeline::{self, CorpusSource, Method, RunConfig, RunPaths, SCHEMA_VERSIONS};
use docmeta::{Error, MetricsReport};

#[derive(Debug, Parser)]
#[command(
    name = "docmeta",
    about = "Episodic few-shot document entity retrieval",
    disable_version_flag = true
)]
struct Cli {
    /// Print the crate and file-format versions.
    #[arg(long, short = 'V')]
    version: bool,
    /// Log progress at info level (RUST_LOG takes precedence).
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the output directory.
    GenCorpus(Opts),
    /// Split the corpus classes into base and novel pools.
    Split(Opts),
    /// Sample the meta-testing tasks.
    SampleTasks(Opts),
    /// Meta-train and write a checkpoint and training log.
    MetaTrain(Opts),
    /// Evaluate a checkpoint on the sampled meta-testing tasks.
    MetaTest(Opts),
    /// Print the metrics of a finished meta-test.
    Report {
        #[command(flatten)]
        opts: Opts,
        /// Print the raw JSON report.
        #[arg(long)]
        json: bool,
    },
    /// Run every stage in order.
    Run(Opts),
}

#[derive(Debug, Args)]
struct Opts {
    /// JSON file mirroring the run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,

    /// Read the corpus from a JSON file instead of generating one.
    #[arg(long)]
    corpus_file: Option<PathBuf>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    n_documents: Option<usize>,
    #[arg(long)]
    class_frequency_skew: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,

    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    u_threshold: Option<usize>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    k_query: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    max_documents: Option<usize>,

    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    meta_steps: Option<usize>,
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long)]
    meta_lr: Option<f64>,
    #[arg(long)]
    n_test_tasks: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Average per-worker validation losses without token weighting.
    #[arg(long)]
    plain_mean_validation: bool,

    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    window: Option<usize>,

    #[arg(long)]
    threshold_quantile: Option<f64>,
    #[arg(long)]
    threshold_margin: Option<f64>,
    #[arg(long)]
    ridge_scale: Option<f64>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

macro_rules! set {
    ($($src:expr => $dst:expr),* $(,)?) => {
        { $(if let Some(v) = $src.clone() { $dst = v; })* }
    };
}

impl Opts {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str::<RunConfig>(&text).map_err(|source| Error::Parse {
                    path: path.clone(),
                    source,
                })?
            }
            None => RunConfig::default(),
        };
        set! {
            self.out_dir => cfg.out_dir,
            self.seed => cfg.seed,
            self.threads => cfg.threads,
            self.gamma => cfg.gamma,
            self.u_threshold => cfg.u_threshold,
            self.n_way => cfg.n_way,
            self.k_shot => cfg.k_shot,
            self.k_query => cfg.k_query,
            self.rho => cfg.rho,
            self.max_documents => cfg.max_documents,
            self.method => cfg.method,
            self.inner_steps => cfg.inner.steps,
            self.inner_lr => cfg.inner.lr,
            self.meta_steps => cfg.meta_steps,
            self.meta_batch => cfg.meta_batch,
            self.meta_lr => cfg.meta_lr,
            self.n_test_tasks => cfg.n_test_tasks,
            self.workers => cfg.workers,
            self.d_model => cfg.encoder.d_model,
            self.d_hidden => cfg.encoder.d_hidden,
            self.d_out => cfg.encoder.d_out,
            self.depth => cfg.encoder.depth,
            self.window => cfg.encoder.window,
            self.threshold_quantile => cfg.threshold_quantile,
            self.threshold_margin => cfg.threshold_margin,
            self.ridge_scale => cfg.ridge_scale,
        }
        cfg.plain_mean_validation |= self.plain_mean_validation;
        if let Some(path) = &self.corpus_file {
            cfg.corpus = CorpusSource::File { path: path.clone() };
        }
        let synthetic_flags = self.n_classes.is_some()
            || self.n_documents.is_some()
            || self.class_frequency_skew.is_some()
            || self.feature_noise.is_some();
        match &mut cfg.corpus {
            CorpusSource::Synthetic(s) => set! {
                self.n_classes => s.n_classes,
                self.n_documents => s.n_documents,
                self.class_frequency_skew => s.class_frequency_skew,
                self.feature_noise => s.feature_noise,
            },
            CorpusSource::File { .. } if synthetic_flags => {
                return Err(
                    Error::Config("synthetic corpus flags given with a corpus file".into()).into(),
                )
            }
            CorpusSource::File { .. } => {}
        }
        let threshold_flags = self.threshold_quantile.is_some()
            || self.threshold_margin.is_some()
            || self.ridge_scale.is_some();
        if threshold_flags && cfg.method != Method::Contrastproto {
            return Err(Error::Config(format!(
                "threshold and ridge flags apply to contrastproto only, method is {}",
                cfg.method
            ))
            .into());
        }
        if (self.inner_steps.is_some() || self.inner_lr.is_some()) && cfg.method.is_metric() {
            return Err(
                Error::Config(format!("inner-loop flags do not apply to {}", cfg.method)).into(),
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit status per error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config(_) | Error::InvalidArch(_) => 2,
        Error::MissingInput { .. } => 3,
        Error::Io { .. } => 4,
        Error::Parse { .. }
        | Error::Schema(_)
        | Error::TokenOutOfVocab { .. }
        | Error::EmptyCorpus => 5,
        Error::InfeasibleConfig(_)
        | Error::SplitInfeasible(_)
        | Error::ClassPoolTooSmall { .. }
        | Error::TaskInfeasible(_)
        | Error::DatasetInfeasible(_) => 6,
        Error::Checkpoint(_) | Error::LayoutMismatch(_) => 7,
        _ => 8,
    }
}

fn print_report(r: &MetricsReport) {
    println!("tasks          {}", r.n_tasks);
    println!("precision      {:.4}", r.precision);
    println!("recall         {:.4}", r.recall);
    println!("micro-F1       {:.4}", r.micro_f1);
    println!(
        "spans          true {} / predicted {} / matched {}",
        r.true_spans, r.pred_spans, r.matched_spans
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
    println!("mean AUROC     {}", fmt(r.mean_auroc));
    println!("pooled AUROC   {}", fmt(r.pooled_auroc));
    let skipped = r.per_task_auroc.iter().filter(|a| a.is_none()).count();
    if skipped > 0 {
        println!("AUROC undefined for {skipped} task(s)");
    }
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    let (opts, json) = match &cmd {
        Command::Report { opts, json } => (opts, *json),
        Command::GenCorpus(o)
        | Command::Split(o)
        | Command::SampleTasks(o)
        | Command::MetaTrain(o)
        | Command::MetaTest(o)
        | Command::Run(o) => (o, false),
    };
    let cfg = opts.resolve()?;
    let paths = RunPaths::new(&cfg.out_dir);
    pipeline::with_threads(cfg.threads, || -> anyhow::Result<()> {
        match cmd {
            Command::GenCorpus(_) => {
                let CorpusSource::Synthetic(_) = cfg.corpus else {
                    return Err(
                        Error::Config("gen-corpus needs a synthetic corpus source".into()).into(),
                    );
                };
                let c = pipeline::stage_corpus(&cfg)?;
                println!(
                    "{} documents -> {}",
                    c.documents.len(),
                    paths.corpus().display()
                );
            }
            Command::Split(_) => {
                let s = pipeline::stage_split(&cfg, &pipeline::read_corpus(&cfg)?)?;
                println!(
                    "{} base / {} novel classes -> {}",
                    s.base_classes.len(),
                    s.novel_classes.len(),
                    paths.split().display()
                );
            }
            Command::SampleTasks(_) => {
                let d = pipeline::stage_sample_tasks(
                    &cfg,
                    &pipeline::read_corpus(&cfg)?,
                    &pipeline::read_split(&cfg)?,
                )?;
                println!(
                    "{} tasks -> {}",
                    d.tasks.len(),
                    paths.test_tasks().display()
                );
            }
            Command::MetaTrain(_) => {
                let corpus = pipeline::read_corpus(&cfg)?;
                let split = pipeline::read_split(&cfg)?;
                pipeline::stage_meta_train(&cfg, &corpus, &split)?;
                println!(
                    "{} steps of {} -> {}",
                    cfg.meta_steps,
                    cfg.method,
                    paths.checkpoint().display()
                );
            }
            Command::MetaTest(_) => {
                let model = pipeline::read_checkpoint(&cfg)?;
                let tasks = pipeline::read_test_tasks(&cfg)?;
                print_report(&pipeline::stage_meta_test(&cfg, &model, &tasks.tasks)?);
            }
            Command::Report { .. } => {
                let r = pipeline::read_metrics(&cfg)?;
                if json {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&r).context("serializing report")?
                    );
                } else {
                    print_report(&r);
                }
            }
            Command::Run(_) => print_report(&pipeline::run(&cfg)?),
        }
        Ok(())
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.version {
        println!("docmeta {}", env!("CARGO_PKG_VERSION"));
        for (name, v) in SCHEMA_VERSIONS {
            println!("{name} schema v{v}");
        }
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: no command given; see `docmeta --help`");
        return ExitCode::from(2);
    };
    match execute(cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
