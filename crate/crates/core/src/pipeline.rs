//! End-to-end stages: corpus, class split, task sampling, meta-training,
//! meta-testing and report files. Every stage seed is derived from the run
//! seed, so a run is a pure function of its [`RunConfig`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
use crate::corpus::{generate_synthetic_corpus, load_corpus, save_corpus, Corpus, SyntheticConfig};
use crate::encoder::{init_params, EncoderConfig, OutputActivation};
use crate::error::{Error, Result};
use crate::eval::{dump_embeddings, roc_points, MetricsReport, TaskOutcome};
use crate::fedsim::{
    federated_anil_meta_step, federated_inner_loop, federated_reptile_meta_step,
    federated_statistics, partition_seed, partition_task,
};
use crate::io::{read_json, write_atomic, write_json};
use crate::linalg::Matrix;
use crate::metalearn::{
    argmax_label, calibrate_threshold, compute_otd_prototype, compute_prototypes,
    contrastproto_meta_step, default_ridge, embed_task, fit_covariance, head_predict,
    inner_loop_sgd, otd_detect_and_classify, protonet_classify, protonet_meta_step, DecoderConfig,
    DecoderParams, HeadKind, InnerLoopConfig, MetaParams, MetaStepReport, OuterOptimizer,
    TaskEmbeddings, TaskStatistics,
};
use crate::sampler::{
    sample_meta_dataset, split_classes, ClassSplit, EpisodeDataset, Phase, Task, TaskLabel,
    TaskSpec,
};
use crate::seed;

/// Version numbers of every file format written by a run.
pub const SCHEMA_VERSIONS: &[(&str, u32)] = &[
    ("corpus", 1),
    ("task", 1),
    ("config", 1),
    ("checkpoint", CHECKPOINT_VERSION),
    ("metrics", 1),
    ("train_log", 1),
    ("embedding_dump", 1),
];

/// Default additive covariance ridge, relative to the mean per-dimension
/// within-class variance of the task.
pub const DEFAULT_RIDGE_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Protonet,
    ProtonetEod,
    Contrastproto,
    Anil,
    AnilHc,
    Reptile,
    ReptileHc,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Protonet,
        Method::ProtonetEod,
        Method::Contrastproto,
        Method::Anil,
        Method::AnilHc,
        Method::Reptile,
        Method::ReptileHc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Protonet => "protonet",
            Method::ProtonetEod => "protonet_eod",
            Method::Contrastproto => "contrastproto",
            Method::Anil => "anil",
            Method::AnilHc => "anil_hc",
            Method::Reptile => "reptile",
            Method::ReptileHc => "reptile_hc",
        }
    }

    /// Metric-based methods have no decoder.
    pub fn is_metric(self) -> bool {
        matches!(
            self,
            Method::Protonet | Method::ProtonetEod | Method::Contrastproto
        )
    }

    pub fn head(self) -> HeadKind {
        match self {
            Method::AnilHc | Method::ReptileHc => HeadKind::Hierarchical,
            _ => HeadKind::Plain,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic(SyntheticConfig),
    File { path: PathBuf },
}

/// Encoder widths; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderArch {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub depth: usize,
    pub window: usize,
    pub output_activation: OutputActivation,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_hidden: 64,
            d_out: 16,
            depth: 2,
            window: 4,
            output_activation: OutputActivation::Sphere,
        }
    }
}

impl EncoderArch {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            d_out: self.d_out,
            depth: self.depth,
            window: self.window,
            output_activation: self.output_activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub gamma: f64,
    pub u_threshold: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
    pub rho: f64,
    pub max_documents: usize,
    pub method: Method,
    /// Inner-loop settings; the loss follows from `method`.
    pub inner: InnerLoopConfig,
    pub meta_steps: usize,
    pub meta_batch: usize,
    pub meta_lr: f64,
    pub n_test_tasks: usize,
    pub workers: usize,
    pub plain_mean_validation: bool,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub encoder: EncoderArch,
    pub threshold_quantile: f64,
    pub threshold_margin: f64,
    pub ridge_scale: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusSource::Synthetic(SyntheticConfig {
                n_classes: 12,
                ..SyntheticConfig::default()
            }),
            gamma: 0.6,
            u_threshold: 20,
            n_way: 4,
            k_shot: 4,
            k_query: 4,
            rho: 3.0,
            max_documents: crate::sampler::DEFAULT_MAX_DOCUMENTS,
            method: Method::Contrastproto,
            inner: InnerLoopConfig::default(),
            meta_steps: 300,
            meta_batch: 4,
            meta_lr: 1e-3,
            n_test_tasks: 64,
            workers: 1,
            plain_mean_validation: false,
            threads: 0,
            encoder: EncoderArch::default(),
            threshold_quantile: crate::metalearn::DEFAULT_QUANTILE,
            threshold_margin: crate::metalearn::DEFAULT_MARGIN,
            ridge_scale: DEFAULT_RIDGE_SCALE,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.task_spec(Phase::Train, 0).validate()?;
        self.inner.validate()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.meta_batch == 0 || self.n_test_tasks == 0 || self.workers == 0 {
            return bad("meta_batch, n_test_tasks and workers must be at least 1".into());
        }
        if !(self.meta_lr > 0.0) {
            return bad(format!("meta_lr must be positive, got {}", self.meta_lr));
        }
        if self.method == Method::Contrastproto {
            if !(0.0..=1.0).contains(&self.threshold_quantile) {
                return bad(format!(
                    "threshold_quantile must lie in [0, 1], got {}",
                    self.threshold_quantile
                ));
            }
            if !(self.threshold_margin > 0.0) || !(self.ridge_scale > 0.0) {
                return bad("threshold_margin and ridge_scale must be positive".into());
            }
        }
        Ok(())
    }

    pub fn task_spec(&self, phase: Phase, seed: u64) -> TaskSpec {
        TaskSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            k_query: self.k_query,
            rho: self.rho,
            seed,
            phase,
            max_documents: self.max_documents,
        }
    }

    fn inner_cfg(&self) -> InnerLoopConfig {
        InnerLoopConfig {
            loss: self.method.head(),
            ..self.inner.clone()
        }
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        seed::derive(self.seed, stage)
    }
}

/// Runs `f` on a pool of `threads` workers (all cores when 0).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loads the corpus file or generates the synthetic corpus from the run seed.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        CorpusSource::File { path } => load_corpus(path),
        CorpusSource::Synthetic(s) => generate_synthetic_corpus(&SyntheticConfig {
            seed: cfg.stage_seed(seed::STAGE_CORPUS),
            ..s.clone()
        }),
    }
}

pub fn build_split(cfg: &RunConfig, corpus: &Corpus) -> Result<ClassSplit> {
    split_classes(
        corpus,
        cfg.gamma,
        cfg.u_threshold,
        cfg.stage_seed(seed::STAGE_SPLIT),
    )
}

pub fn sample_test_tasks(
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &ClassSplit,
) -> Result<EpisodeDataset> {
    let spec = cfg.task_spec(Phase::Test, cfg.stage_seed(seed::STAGE_TEST_TASKS));
    sample_meta_dataset(corpus, split, &spec, cfg.n_test_tasks)
}

/// The training tasks of meta-step `step`.
pub fn sample_train_batch(
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &ClassSplit,
    step: usize,
) -> Result<Vec<Task>> {
    let base = seed::derive(cfg.stage_seed(seed::STAGE_TRAIN_TASKS), step as u64);
    let spec = cfg.task_spec(Phase::Train, base);
    Ok(sample_meta_dataset(corpus, split, &spec, cfg.meta_batch)?.tasks)
}

pub fn vocab_size(corpus: &Corpus) -> usize {
    corpus
        .documents
        .iter()
        .flat_map(|d| d.tokens.iter())
        .map(|t| t.token_id as usize + 1)
        .max()
        .unwrap_or(1)
}

/// Freshly initialized parameters for `cfg.method`.
pub fn init_model(cfg: &RunConfig, vocab: usize) -> Result<Checkpoint> {
    let init = cfg.stage_seed(seed::STAGE_INIT);
    let encoder = init_params(&cfg.encoder.config(vocab), init)?;
    let decoder = if cfg.method.is_metric() {
        None
    } else {
        let dc = DecoderConfig {
            d_in: cfg.encoder.d_out,
            n_max: cfg.n_way,
        };
        Some(DecoderParams::init(&dc, seed::derive(init, 1))?)
    };
    Ok(Checkpoint::new(
        cfg.method.as_str(),
        cfg.seed,
        0,
        encoder,
        decoder,
    ))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub task_losses: Vec<f64>,
    pub meta_loss: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Meta-trains `cfg.method` from a fresh initialization; `on_step` sees every
/// log record.
pub fn meta_train(
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &ClassSplit,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let ckpt = init_model(cfg, vocab_size(corpus))?;
    let mut opt = OuterOptimizer::adam(cfg.meta_lr);
    let inner = cfg.inner_cfg();
    let mut encoder = ckpt.encoder;
    let mut decoder = ckpt.decoder;
    let start = Instant::now();
    for step in 0..cfg.meta_steps {
        let tasks = sample_train_batch(cfg, corpus, split, step)?;
        let report: MetaStepReport = match cfg.method {
            Method::Protonet => protonet_meta_step(&mut encoder, &tasks, false, &mut opt)?,
            Method::ProtonetEod => protonet_meta_step(&mut encoder, &tasks, true, &mut opt)?,
            Method::Contrastproto => contrastproto_meta_step(&mut encoder, &tasks, &mut opt)?,
            m => {
                let mut params = MetaParams {
                    encoder,
                    decoder: decoder.take().expect("gradient methods carry a decoder"),
                };
                let r = match m {
                    Method::Anil | Method::AnilHc => federated_anil_meta_step(
                        &mut params,
                        &tasks,
                        &inner,
                        cfg.workers,
                        &mut opt,
                    )?,
                    _ => federated_reptile_meta_step(
                        &mut params,
                        &tasks,
                        &inner,
                        cfg.workers,
                        &mut opt,
                    )?,
                };
                encoder = params.encoder;
                decoder = Some(params.decoder);
                r
            }
        };
        on_step(&TrainRecord {
            step,
            task_losses: report.task_losses,
            meta_loss: report.meta_loss,
            grad_norm: report.grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Checkpoint::new(
        cfg.method.as_str(),
        cfg.seed,
        cfg.meta_steps,
        encoder,
        decoder,
    ))
}

/// Query-set predictions of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub labels: Vec<Vec<TaskLabel>>,
    /// Higher means more likely in-task.
    pub itd_scores: Vec<Vec<f64>>,
    pub query_embeddings: Vec<Matrix<f64>>,
}

fn metric_stats(
    cfg: &RunConfig,
    emb: &TaskEmbeddings<f64>,
    task: &Task,
    ridge: Option<f64>,
) -> Result<TaskStatistics<f64>> {
    if cfg.workers > 1 {
        let shards = partition_task(task, cfg.workers, partition_seed(task))?;
        federated_statistics(emb, task, &shards, ridge)
    } else {
        let s = compute_prototypes(emb, task)?;
        match ridge {
            Some(r) => fit_covariance(emb, s, r),
            None => Ok(s),
        }
    }
}

/// Adapts on the support set and labels the query set.
pub fn evaluate_task(cfg: &RunConfig, model: &Checkpoint, task: &Task) -> Result<TaskEval> {
    let n = task.n_way();
    match cfg.method {
        Method::Protonet | Method::ProtonetEod | Method::Contrastproto => {
            let (emb, _) = embed_task(&model.encoder, task)?;
            let (labels, itd_scores) = if cfg.method == Method::Contrastproto {
                let base = metric_stats(cfg, &emb, task, None)?;
                let ridge = default_ridge(&emb, &base, cfg.ridge_scale);
                let mut stats = metric_stats(cfg, &emb, task, Some(ridge))?;
                stats.threshold = Some(calibrate_threshold(
                    &emb,
                    &stats,
                    cfg.threshold_quantile,
                    cfg.threshold_margin,
                )?);
                let d = otd_detect_and_classify(&emb, &stats, task)?;
                (d.labels, d.itd_scores)
            } else {
                let mut stats = metric_stats(cfg, &emb, task, None)?;
                let eod = cfg.method == Method::ProtonetEod;
                if eod && stats.otd_prototype.is_none() {
                    stats.otd_prototype = Some(compute_otd_prototype(&emb, task)?);
                }
                let probs = protonet_classify(&emb.query, &stats, eod)?;
                let labels = probs
                    .iter()
                    .map(|p| p.iter_rows().map(|r| argmax_label(r, n)).collect())
                    .collect();
                let scores = if eod {
                    probs
                        .iter()
                        .map(|p| p.iter_rows().map(|r| 1.0 - r[n]).collect())
                        .collect()
                } else {
                    emb.query
                        .iter()
                        .map(|q| {
                            q.iter_rows()
                                .map(|h| {
                                    -stats
                                        .prototypes
                                        .iter()
                                        .map(|mu| {
                                            h.iter()
                                                .zip(mu)
                                                .map(|(a, b)| (a - b) * (a - b))
                                                .sum::<f64>()
                                        })
                                        .fold(f64::INFINITY, f64::min)
                                })
                                .collect()
                        })
                        .collect()
                };
                (labels, scores)
            };
            Ok(TaskEval {
                labels,
                itd_scores,
                query_embeddings: emb.query,
            })
        }
        m => {
            let params = MetaParams {
                encoder: model.encoder.clone(),
                decoder: model
                    .decoder
                    .clone()
                    .ok_or_else(|| Error::Checkpoint(format!("{m} checkpoint has no decoder")))?,
            };
            let adapt_encoder = matches!(m, Method::Reptile | Method::ReptileHc);
            let inner = cfg.inner_cfg();
            let adapted = if cfg.workers > 1 {
                let shards = partition_task(task, cfg.workers, partition_seed(task))?;
                federated_inner_loop(&params, task, &shards, &inner, adapt_encoder, false)?
            } else {
                inner_loop_sgd(&params, task, &inner, adapt_encoder, false)?
            };
            let p = adapted.params;
            let (emb, _) = embed_task(&p.encoder, task)?;
            let mut labels = Vec::with_capacity(emb.query.len());
            let mut scores = Vec::with_capacity(emb.query.len());
            for q in &emb.query {
                let probs = head_predict(&p.decoder, inner.loss, n, q)?;
                labels.push(
                    probs
                        .iter_rows()
                        .map(|r| match argmax_label(r, n + 1) {
                            TaskLabel::Class(0) => TaskLabel::Outside,
                            TaskLabel::Class(c) => TaskLabel::Class(c - 1),
                            other => other,
                        })
                        .collect(),
                );
                scores.push(probs.iter_rows().map(|r| 1.0 - r[0]).collect());
            }
            Ok(TaskEval {
                labels,
                itd_scores: scores,
                query_embeddings: emb.query,
            })
        }
    }
}

/// Evaluates every task (in parallel, results in task order).
pub fn meta_test(cfg: &RunConfig, model: &Checkpoint, tasks: &[Task]) -> Result<Vec<TaskEval>> {
    if model.header.method != cfg.method.as_str() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with {}, run asks for {}",
            model.header.method, cfg.method
        )));
    }
    tasks
        .par_iter()
        .map(|t| evaluate_task(cfg, model, t))
        .collect()
}

pub fn report(tasks: &[Task], evals: &[TaskEval]) -> MetricsReport {
    let outcomes: Vec<TaskOutcome> = tasks
        .iter()
        .zip(evals)
        .map(|(t, e)| TaskOutcome::new(t, &e.labels, &e.itd_scores))
        .collect();
    MetricsReport::from_outcomes(&outcomes)
}

/// Writes `metrics.json`, `roc/task_NNNNN.csv` and
/// `embeddings/task_NNNNN.jsonl` under `out`.
pub fn write_test_outputs(out: &Path, tasks: &[Task], evals: &[TaskEval]) -> Result<MetricsReport> {
    let rep = report(tasks, evals);
    for (i, (t, e)) in tasks.iter().zip(evals).enumerate() {
        let o = TaskOutcome::new(t, &e.labels, &e.itd_scores);
        if let Ok(curve) = roc_points(i, &o.scores, &o.itd) {
            write_atomic(
                &out.join("roc").join(format!("task_{i:05}.csv")),
                curve.to_csv().as_bytes(),
            )?;
        }
        dump_embeddings(
            &out.join("embeddings").join(format!("task_{i:05}.jsonl")),
            t,
            &e.query_embeddings,
            &e.labels,
            &e.itd_scores,
        )?;
    }
    write_json(&out.join("metrics.json"), &rep)?;
    Ok(rep)
}

pub fn train_log_line(r: &TrainRecord) -> String {
    let mut s = serde_json::to_string(r).expect("record serializes");
    s.push('\n');
    s
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.json")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn test_tasks(&self) -> PathBuf {
        self.root.join("tasks").join("test")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput {
            path,
            hint: hint.to_string(),
        })
    }
}

/// Builds the corpus; a synthetic corpus is also written to the run directory.
pub fn stage_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = build_corpus(cfg)?;
    if matches!(cfg.corpus, CorpusSource::Synthetic(_)) {
        save_corpus(&corpus, RunPaths::new(&cfg.out_dir).corpus())?;
    }
    Ok(corpus)
}

pub fn read_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        CorpusSource::File { path } => load_corpus(require(path.clone(), "check the corpus path")?),
        CorpusSource::Synthetic(_) => load_corpus(require(
            RunPaths::new(&cfg.out_dir).corpus(),
            "run `gen-corpus` with the same output directory first",
        )?),
    }
}

pub fn stage_split(cfg: &RunConfig, corpus: &Corpus) -> Result<ClassSplit> {
    let split = build_split(cfg, corpus)?;
    write_json(&RunPaths::new(&cfg.out_dir).split(), &split)?;
    Ok(split)
}

pub fn read_split(cfg: &RunConfig) -> Result<ClassSplit> {
    read_json(&require(
        RunPaths::new(&cfg.out_dir).split(),
        "run `split` with the same output directory first",
    )?)
}

pub fn stage_sample_tasks(
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &ClassSplit,
) -> Result<EpisodeDataset> {
    let test = sample_test_tasks(cfg, corpus, split)?;
    test.save(&RunPaths::new(&cfg.out_dir).test_tasks())?;
    Ok(test)
}

pub fn read_test_tasks(cfg: &RunConfig) -> Result<EpisodeDataset> {
    let dir = RunPaths::new(&cfg.out_dir).test_tasks();
    require(
        dir.join("manifest.json"),
        "run `sample-tasks` with the same output directory first",
    )?;
    EpisodeDataset::load(&dir)
}

/// Meta-trains and writes `checkpoint.bin` and `train_log.jsonl`.
pub fn stage_meta_train(
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &ClassSplit,
) -> Result<Checkpoint> {
    let paths = RunPaths::new(&cfg.out_dir);
    let mut log = String::new();
    let model = meta_train(cfg, corpus, split, |r| {
        log::info!(
            "step {} meta-loss {:.5} grad-norm {:.4}",
            r.step,
            r.meta_loss,
            r.grad_norm
        );
        log.push_str(&train_log_line(r));
    })?;
    write_atomic(&paths.train_log(), log.as_bytes())?;
    save_checkpoint(&paths.checkpoint(), &model)?;
    Ok(model)
}

pub fn read_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    load_checkpoint(&require(
        RunPaths::new(&cfg.out_dir).checkpoint(),
        "run `meta-train` with the same output directory first",
    )?)
}

/// Meta-tests and writes the metrics, ROC curves and embedding dumps.
pub fn stage_meta_test(
    cfg: &RunConfig,
    model: &Checkpoint,
    tasks: &[Task],
) -> Result<MetricsReport> {
    let evals = meta_test(cfg, model, tasks)?;
    let rep = write_test_outputs(&cfg.out_dir, tasks, &evals)?;
    if let Some(a) = rep.mean_auroc {
        log::info!("micro-F1 {:.4}, mean AUROC {:.4}", rep.micro_f1, a);
    }
    Ok(rep)
}

pub fn read_metrics(cfg: &RunConfig) -> Result<MetricsReport> {
    read_json(&require(
        RunPaths::new(&cfg.out_dir).metrics(),
        "run `meta-test` with the same output directory first",
    )?)
}

/// Full run: every artifact under `cfg.out_dir`.
pub fn run(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        write_json(&RunPaths::new(&cfg.out_dir).config(), cfg)?;
        let corpus = stage_corpus(cfg)?;
        let split = stage_split(cfg, &corpus)?;
        let test = stage_sample_tasks(cfg, &corpus, &split)?;
        let model = stage_meta_train(cfg, &corpus, &split)?;
        stage_meta_test(cfg, &model, &test.tasks)
    })?
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> RunConfig {
        RunConfig {
            corpus: CorpusSource::Synthetic(SyntheticConfig {
                n_classes: 8,
                n_documents: 120,
                ..SyntheticConfig::default()
            }),
            gamma: 0.5,
            n_way: 3,
            k_shot: 2,
            k_query: 2,
            method,
            meta_steps: 3,
            meta_batch: 2,
            n_test_tasks: 4,
            inner: InnerLoopConfig {
                steps: 2,
                ..Default::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("maml".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig {
            rho: 0.5,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            workers: 0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            threshold_quantile: 2.0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        let json = serde_json::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, RunConfig::default());
        let partial: RunConfig =
            serde_json::from_str(r#"{"method": "anil_hc", "n_way": 2}"#).unwrap();
        assert_eq!(
            (partial.method, partial.n_way, partial.k_shot),
            (Method::AnilHc, 2, 4)
        );
    }

    #[test]
    fn every_method_trains_and_evaluates() {
        for m in Method::ALL {
            let cfg = small(m);
            let corpus = build_corpus(&cfg).unwrap();
            let split = build_split(&cfg, &corpus).unwrap();
            let model = meta_train(&cfg, &corpus, &split, |_| {}).unwrap();
            assert_eq!(model.decoder.is_none(), m.is_metric());
            let test = sample_test_tasks(&cfg, &corpus, &split).unwrap();
            let evals = meta_test(&cfg, &model, &test.tasks).unwrap();
            let r = report(&test.tasks, &evals);
            assert!((0.0..=1.0).contains(&r.micro_f1), "{m}");
            assert!(r.mean_auroc.is_some(), "{m}");
        }
    }

    #[test]
    fn workers_do_not_change_metric_predictions() {
        let cfg = small(Method::Contrastproto);
        let corpus = build_corpus(&cfg).unwrap();
        let split = build_split(&cfg, &corpus).unwrap();
        let model = init_model(&cfg, vocab_size(&corpus)).unwrap();
        let test = sample_test_tasks(&cfg, &corpus, &split).unwrap();
        let a = meta_test(&cfg, &model, &test.tasks).unwrap();
        let b = meta_test(&RunConfig { workers: 3, ..cfg }, &model, &test.tasks).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn mismatched_checkpoint_rejected() {
        let cfg = small(Method::Anil);
        let corpus = build_corpus(&cfg).unwrap();
        let model = init_model(&small(Method::Protonet), vocab_size(&corpus)).unwrap();
        assert!(matches!(
            meta_test(&cfg, &model, &[]),
            Err(Error::Checkpoint(_))
        ));
    }
}
