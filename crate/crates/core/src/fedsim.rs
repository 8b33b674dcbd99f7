//! Simulated multi-worker episodic training.
//!
//! The documents of a task are split across `W` logical workers. Gradient
//! learners take one local full-batch step per worker and average the
//! resulting parameters after every inner step; metric learners aggregate
//! worker-local sums into prototypes and covariances. Workers run
//! sequentially or in parallel with a fixed reduction order, so results do
//! not depend on scheduling.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{param_average, FlatParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metalearn::{
    anil_task_gradient_weighted, embed_sides, head_features, head_loss_grad, inner_loop_sgd,
    mean_of, Adapted, HeadKind, IndexSets, InnerLoopConfig, MetaParams, MetaStepReport,
    OuterOptimizer, Side, TaskEmbeddings, TaskStatistics, TokenRef,
};
use crate::sampler::Task;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederatedConfig {
    pub n_workers: usize,
    /// Average worker validation losses with equal weights instead of by
    /// token count.
    pub plain_mean_validation: bool,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            n_workers: 1,
            plain_mean_validation: false,
        }
    }
}

/// Support and query document indices held by one worker, in task order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerShard {
    pub worker_id: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl WorkerShard {
    /// The sub-task made of this worker's documents.
    pub fn task(&self, task: &Task) -> Task {
        Task {
            target_classes: task.target_classes.clone(),
            support: self
                .support
                .iter()
                .map(|&i| task.support[i].clone())
                .collect(),
            query: self.query.iter().map(|&i| task.query[i].clone()).collect(),
            seed: task.seed,
            phase: task.phase,
        }
    }
}

fn round_robin(n_docs: usize, w: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(rng);
    let mut shards = vec![Vec::new(); w];
    for (k, doc) in order.into_iter().enumerate() {
        shards[k % w].push(doc);
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    shards
}

/// Seeded shuffle, then round-robin assignment of support and query
/// documents (independently) to `w` workers.
pub fn partition_task(task: &Task, w: usize, seed: u64) -> Result<Vec<WorkerShard>> {
    if w == 0 {
        return Err(Error::Config("at least one worker is required".into()));
    }
    let mut rng = seed::rng(seed);
    let s = round_robin(task.support.len(), w, &mut rng);
    let q = round_robin(task.query.len(), w, &mut rng);
    Ok(s.into_iter()
        .zip(q)
        .enumerate()
        .map(|(worker_id, (support, query))| WorkerShard {
            worker_id,
            support,
            query,
        })
        .collect())
}

/// Partition seed of a task.
pub fn partition_seed(task: &Task) -> u64 {
    seed::derive(task.seed, seed::STAGE_PARTITION)
}

fn sides_for(include_query: bool) -> &'static [Side] {
    if include_query {
        &[Side::Support, Side::Query]
    } else {
        &[Side::Support]
    }
}

fn n_tokens(task: &Task, sides: &[Side]) -> usize {
    sides
        .iter()
        .map(|s| match s {
            Side::Support => &task.support,
            Side::Query => &task.query,
        })
        .flat_map(|docs| docs.iter())
        .map(|d| d.unmasked().count())
        .sum()
}

/// Token-count weighted mean (or plain mean) of per-worker losses; workers
/// with no tokens are excluded.
pub fn federated_validate<T: Scalar>(losses: &[(T, usize)], plain_mean: bool) -> Option<T> {
    let active: Vec<(T, usize)> = losses.iter().copied().filter(|&(_, n)| n > 0).collect();
    match active.as_slice() {
        [] => None,
        [(l, _)] => Some(*l),
        _ if plain_mean => {
            Some(active.iter().map(|&(l, _)| l).sum::<T>() / T::of_usize(active.len()))
        }
        _ => {
            let total: usize = active.iter().map(|&(_, n)| n).sum();
            Some(active.iter().map(|&(l, n)| l * T::of_usize(n)).sum::<T>() / T::of_usize(total))
        }
    }
}

/// Inner-loop adaptation with per-step parameter averaging across workers.
/// The reported losses are token-weighted means of the worker losses.
pub fn federated_inner_loop<T: Scalar>(
    params: &MetaParams<T>,
    task: &Task,
    shards: &[WorkerShard],
    cfg: &InnerLoopConfig,
    adapt_encoder: bool,
    include_query: bool,
) -> Result<Adapted<T>> {
    cfg.validate()?;
    let sides = sides_for(include_query);
    let subtasks: Vec<Task> = shards
        .iter()
        .map(|s| s.task(task))
        .filter(|t| n_tokens(t, sides) > 0)
        .collect();
    if subtasks.is_empty() {
        return Err(Error::Config("every worker shard is empty".into()));
    }
    let counts: Vec<usize> = subtasks.iter().map(|t| n_tokens(t, sides)).collect();
    let n = task.n_way();
    let lr = T::of(cfg.lr);
    let mut cur = params.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let weigh = |ls: &[T]| -> T {
        let pairs: Vec<(T, usize)> = ls.iter().copied().zip(counts.iter().copied()).collect();
        federated_validate(&pairs, false).expect("active workers")
    };
    if !adapt_encoder {
        let feats: Vec<_> = subtasks
            .iter()
            .map(|t| {
                let (emb, _) = embed_sides(&params.encoder, t, sides)?;
                Ok(head_features(&emb, t, sides))
            })
            .collect::<Result<_>>()?;
        for step in 0..=cfg.steps {
            let grads: Vec<_> = feats
                .iter()
                .map(|f| head_loss_grad(&cur.decoder, cfg.loss, n, &f.h, &f.targets))
                .collect::<Result<_>>()?;
            let ls: Vec<T> = grads.iter().map(|g| g.loss).collect();
            losses.push(crate::metalearn::ensure_finite(
                weigh(&ls),
                "inner-loop loss",
            )?);
            if step == cfg.steps {
                break;
            }
            let locals: Vec<_> = grads
                .iter()
                .map(|g| {
                    let mut d = cur.decoder.clone();
                    crate::scalar::axpy_slice(-lr, &g.grad_decoder, d.flat_mut());
                    d
                })
                .collect();
            cur.decoder = param_average(&locals)?;
        }
        return Ok(Adapted {
            params: cur,
            losses,
        });
    }
    let one = InnerLoopConfig {
        steps: 1,
        ..cfg.clone()
    };
    let zero = InnerLoopConfig {
        steps: 0,
        ..cfg.clone()
    };
    for step in 0..=cfg.steps {
        let c = if step == cfg.steps { &zero } else { &one };
        let locals: Vec<Adapted<T>> = subtasks
            .par_iter()
            .map(|t| inner_loop_sgd(&cur, t, c, true, include_query))
            .collect::<Result<_>>()?;
        let ls: Vec<T> = locals.iter().map(|a| a.losses[0]).collect();
        losses.push(weigh(&ls));
        if step == cfg.steps {
            break;
        }
        let encs: Vec<_> = locals.iter().map(|a| a.params.encoder.clone()).collect();
        let decs: Vec<_> = locals.iter().map(|a| a.params.decoder.clone()).collect();
        cur.encoder = param_average(&encs)?;
        cur.decoder = param_average(&decs)?;
    }
    Ok(Adapted {
        params: cur,
        losses,
    })
}

/// Per-worker query losses of `params` combined by [`federated_validate`].
pub fn federated_query_loss<T: Scalar>(
    params: &MetaParams<T>,
    task: &Task,
    shards: &[WorkerShard],
    kind: HeadKind,
    plain_mean: bool,
) -> Result<T> {
    let per: Vec<(T, usize)> = shards
        .iter()
        .map(|s| {
            let t = s.task(task);
            let (emb, _) = embed_sides(&params.encoder, &t, &[Side::Query])?;
            let f = head_features(&emb, &t, &[Side::Query]);
            let l = head_loss_grad(&params.decoder, kind, task.n_way(), &f.h, &f.targets)?.loss;
            Ok((l, f.targets.len()))
        })
        .collect::<Result<_>>()?;
    federated_validate(&per, plain_mean)
        .ok_or_else(|| Error::Config("query set has no unmasked tokens".into()))
}

/// Support-token weights `1 / (W_active · n_w)` that make one weighted
/// full-batch step equal to averaging the workers' local steps.
pub fn federated_support_weights<T: Scalar>(task: &Task, shards: &[WorkerShard]) -> Vec<T> {
    let mut owner = vec![0usize; task.support.len()];
    let mut sizes = vec![0usize; shards.len()];
    for (w, s) in shards.iter().enumerate() {
        for &d in &s.support {
            owner[d] = w;
            sizes[w] += task.support[d].unmasked().count();
        }
    }
    let active = sizes.iter().filter(|&&n| n > 0).count();
    let mut out = Vec::new();
    for (d, doc) in task.support.iter().enumerate() {
        let n = sizes[owner[d]];
        for _ in doc.unmasked() {
            out.push(T::one() / T::of_usize(active * n));
        }
    }
    out
}

/// ANIL meta-update where every task's inner loop runs across `w` workers.
pub fn federated_anil_meta_step<T: Scalar>(
    params: &mut MetaParams<T>,
    tasks: &[Task],
    cfg: &InnerLoopConfig,
    w: usize,
    opt: &mut OuterOptimizer,
) -> Result<MetaStepReport> {
    if w == 1 {
        return crate::metalearn::anil_meta_step(params, tasks, cfg, opt);
    }
    if tasks.is_empty() {
        return Err(Error::Config("meta-batch is empty".into()));
    }
    let per: Vec<(T, Vec<T>, Vec<T>)> = tasks
        .par_iter()
        .map(|t| {
            let shards = partition_task(t, w, partition_seed(t))?;
            let ws = federated_support_weights(t, &shards);
            anil_task_gradient_weighted(params, t, cfg, Some(&ws))
        })
        .collect::<Result<_>>()?;
    let losses: Vec<T> = per.iter().map(|p| p.0).collect();
    let (ge, gd): (Vec<_>, Vec<_>) = per.into_iter().map(|(_, e, d)| (e, d)).unzip();
    let (ge, gd) = (mean_of(&ge), mean_of(&gd));
    let report = MetaStepReport::new(&losses, &[&ge, &gd]);
    opt.step(
        &mut [params.encoder.flat_mut(), params.decoder.flat_mut()],
        &[&ge, &gd],
    )?;
    Ok(report)
}

/// Reptile meta-update with federated inner loops.
pub fn federated_reptile_meta_step<T: Scalar>(
    params: &mut MetaParams<T>,
    tasks: &[Task],
    cfg: &InnerLoopConfig,
    w: usize,
    opt: &mut OuterOptimizer,
) -> Result<MetaStepReport> {
    if w == 1 {
        return crate::metalearn::reptile_meta_step(params, tasks, cfg, opt);
    }
    if tasks.is_empty() {
        return Err(Error::Config("meta-batch is empty".into()));
    }
    let adapted: Vec<Adapted<T>> = tasks
        .iter()
        .map(|t| {
            let shards = partition_task(t, w, partition_seed(t))?;
            federated_inner_loop(params, t, &shards, cfg, true, true)
        })
        .collect::<Result<_>>()?;
    let losses: Vec<T> = adapted.iter().map(|a| a.losses[0]).collect();
    let diff = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&x, &y)| y - x).collect() };
    let (ge, gd): (Vec<_>, Vec<_>) = adapted
        .iter()
        .map(|a| {
            (
                diff(a.params.encoder.flat(), params.encoder.flat()),
                diff(a.params.decoder.flat(), params.decoder.flat()),
            )
        })
        .unzip();
    let (ge, gd) = (mean_of(&ge), mean_of(&gd));
    let report = MetaStepReport::new(&losses, &[&ge, &gd]);
    opt.step(
        &mut [params.encoder.flat_mut(), params.decoder.flat_mut()],
        &[&ge, &gd],
    )?;
    Ok(report)
}

/// Running `(count, mean, scatter)` of a set of vectors.
#[derive(Debug, Clone)]
struct Moments<T> {
    n: usize,
    mean: Vec<T>,
    scatter: Matrix<T>,
}

impl<T: Scalar> Moments<T> {
    fn of(emb: &TaskEmbeddings<T>, refs: &[TokenRef], dim: usize) -> Self {
        let mut mean = vec![T::zero(); dim];
        for &r in refs {
            crate::scalar::axpy_slice(T::one(), emb.get(r), &mut mean);
        }
        if !refs.is_empty() {
            let n = T::of_usize(refs.len());
            mean.iter_mut().for_each(|m| *m /= n);
        }
        let mut scatter = Matrix::zeros(dim, dim);
        for &r in refs {
            let h = emb.get(r);
            for i in 0..dim {
                for j in 0..dim {
                    scatter[(i, j)] += (h[i] - mean[i]) * (h[j] - mean[j]);
                }
            }
        }
        Self {
            n: refs.len(),
            mean,
            scatter,
        }
    }

    /// Pairwise combination of two sets.
    fn merge(self, other: Self) -> Self {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other;
        }
        let (na, nb) = (T::of_usize(self.n), T::of_usize(other.n));
        let n = na + nb;
        let delta: Vec<T> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(&b, &a)| b - a)
            .collect();
        let mean: Vec<T> = self
            .mean
            .iter()
            .zip(&delta)
            .map(|(&a, &d)| a + d * nb / n)
            .collect();
        let mut scatter = self.scatter;
        let f = na * nb / n;
        for i in 0..delta.len() {
            for j in 0..delta.len() {
                scatter[(i, j)] += other.scatter[(i, j)] + delta[i] * delta[j] * f;
            }
        }
        Self {
            n: self.n + other.n,
            mean,
            scatter,
        }
    }
}

/// Prototypes (and, with a ridge, covariances) aggregated from worker-local
/// moments in worker order.
pub fn federated_statistics<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    task: &Task,
    shards: &[WorkerShard],
    ridge: Option<T>,
) -> Result<TaskStatistics<T>> {
    let index = IndexSets::new(task);
    let dim = emb.dim();
    let mut owner = vec![0usize; task.support.len()];
    for (w, s) in shards.iter().enumerate() {
        for &d in &s.support {
            owner[d] = w;
        }
    }
    let aggregate = |refs: &[TokenRef]| -> Moments<T> {
        let mut per_worker: Vec<Vec<TokenRef>> = vec![Vec::new(); shards.len()];
        for &r in refs {
            per_worker[owner[r.doc]].push(r);
        }
        per_worker
            .iter()
            .map(|rs| Moments::of(emb, rs, dim))
            .reduce(Moments::merge)
            .expect("at least one worker")
    };
    let mut prototypes = Vec::new();
    let mut counts = Vec::new();
    let mut covariances = Vec::new();
    let mut factors = Vec::new();
    for (e, refs) in index.trn_by_class.iter().enumerate() {
        if refs.is_empty() {
            return Err(Error::EmptyClass(e));
        }
        let m = aggregate(refs);
        if let Some(ridge) = ridge {
            let mut c = m.scatter.clone();
            let n = T::of_usize(m.n);
            c.map_inplace(|v| v / n);
            for i in 0..dim {
                c[(i, i)] += ridge;
            }
            factors.push(c.cholesky()?);
            covariances.push(c);
        }
        prototypes.push(m.mean);
        counts.push(m.n);
    }
    let otd_prototype = (!index.trn_otd.is_empty()).then(|| aggregate(&index.trn_otd).mean);
    Ok(TaskStatistics {
        prototypes,
        counts,
        otd_prototype,
        covariances,
        factors,
        ridge,
        threshold: None,
        index,
    })
}
