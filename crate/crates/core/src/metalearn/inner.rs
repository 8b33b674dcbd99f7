//! Inner-loop adaptation and the gradient-based meta-updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{head_target, sgd_step_adjoint};
use super::{ensure_finite, OuterOptimizer, Side, TaskEmbeddings, TokenRef};
use crate::encoder::{EncoderParams, FlatParams, ForwardTrace};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sampler::{Task, TaskDocument};
use crate::scalar::Scalar;

use super::head::{head_loss_grad, head_loss_grad_weighted, DecoderParams, HeadKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerLoopConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: HeadKind,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self {
            steps: 15,
            lr: 0.015,
            loss: HeadKind::Plain,
        }
    }
}

impl InnerLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "inner learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Encoder and decoder meta-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams<T> {
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Scalar> MetaParams<T> {
    fn segments_mut(&mut self) -> [&mut [T]; 2] {
        [self.encoder.flat_mut(), self.decoder.flat_mut()]
    }
}

/// Parameters after inner-loop adaptation.
#[derive(Debug, Clone)]
pub struct Adapted<T> {
    pub params: MetaParams<T>,
    /// Adaptation loss before each step, then after the last one.
    pub losses: Vec<T>,
}

/// Summary of one meta-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub task_losses: Vec<f64>,
    pub meta_loss: f64,
    pub grad_norm: f64,
}

impl MetaStepReport {
    pub(crate) fn new<T: Scalar>(losses: &[T], grads: &[&[T]]) -> Self {
        let task_losses: Vec<f64> = losses.iter().map(|l| l.to_f64_lossy()).collect();
        let meta_loss = task_losses.iter().sum::<f64>() / task_losses.len().max(1) as f64;
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        Self {
            task_losses,
            meta_loss,
            grad_norm,
        }
    }
}

/// Unmasked tokens of some task documents as a feature matrix with head
/// targets.
pub(crate) struct HeadFeatures<T> {
    pub h: Matrix<T>,
    pub targets: Vec<usize>,
    pub refs: Vec<TokenRef>,
}

pub(crate) fn head_features<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    task: &Task,
    sides: &[Side],
) -> HeadFeatures<T> {
    let mut refs = Vec::new();
    let mut targets = Vec::new();
    for &side in sides {
        for (doc, d) in super::docs_of(task, side).iter().enumerate() {
            for (token, label) in d.unmasked() {
                refs.push(TokenRef { side, doc, token });
                targets.push(head_target(label).expect("unmasked label"));
            }
        }
    }
    let dim = emb.dim();
    let mut h = Matrix::zeros(refs.len(), dim);
    for (i, &r) in refs.iter().enumerate() {
        h.row_mut(i).copy_from_slice(emb.get(r));
    }
    HeadFeatures { h, targets, refs }
}

pub(crate) fn scatter_rows<T: Scalar>(
    rows: &Matrix<T>,
    refs: &[TokenRef],
    into: &mut TaskEmbeddings<T>,
) {
    for (i, &r) in refs.iter().enumerate() {
        crate::scalar::axpy_slice(T::one(), rows.row(i), into.get_mut(r));
    }
}

type Traces<T> = (Vec<ForwardTrace<T>>, Vec<ForwardTrace<T>>);

/// Encodes the documents of the requested sides; the others stay empty.
pub(crate) fn embed_sides<T: Scalar>(
    enc: &EncoderParams<T>,
    task: &Task,
    sides: &[Side],
) -> Result<(TaskEmbeddings<T>, Traces<T>)> {
    let run = |docs: &[TaskDocument], side: Side| -> Result<Vec<ForwardTrace<T>>> {
        if !sides.contains(&side) {
            return Ok(Vec::new());
        }
        docs.par_iter().map(|d| enc.forward(&d.tokens)).collect()
    };
    let s = run(&task.support, Side::Support)?;
    let q = run(&task.query, Side::Query)?;
    let emb = TaskEmbeddings {
        support: s.iter().map(|t| t.output.clone()).collect(),
        query: q.iter().map(|t| t.output.clone()).collect(),
    };
    Ok((emb, (s, q)))
}

pub(crate) fn backprop_sides<T: Scalar>(
    enc: &EncoderParams<T>,
    task: &Task,
    traces: &Traces<T>,
    upstream: &TaskEmbeddings<T>,
    grad: &mut [T],
) -> Result<()> {
    for (docs, tr, up) in [
        (&task.support, &traces.0, &upstream.support),
        (&task.query, &traces.1, &upstream.query),
    ] {
        for ((d, t), u) in docs.iter().zip(tr).zip(up) {
            enc.backward_into(&d.tokens, t, u, grad)?;
        }
    }
    Ok(())
}

fn sides_for(on_query: bool) -> &'static [Side] {
    if on_query {
        &[Side::Support, Side::Query]
    } else {
        &[Side::Support]
    }
}

/// Full-batch SGD on the mean token loss of the support set (and the query
/// set when `include_query`). With `adapt_encoder = false` the encoder is
/// left untouched and its features are computed once.
pub fn inner_loop_sgd<T: Scalar>(
    params: &MetaParams<T>,
    task: &Task,
    cfg: &InnerLoopConfig,
    adapt_encoder: bool,
    include_query: bool,
) -> Result<Adapted<T>> {
    cfg.validate()?;
    let n = task.n_way();
    let sides = sides_for(include_query);
    let lr = T::of(cfg.lr);
    let mut out = params.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    if !adapt_encoder {
        let (emb, _) = embed_sides(&params.encoder, task, sides)?;
        let f = head_features(&emb, task, sides);
        for step in 0..=cfg.steps {
            let g = head_loss_grad(&out.decoder, cfg.loss, n, &f.h, &f.targets)?;
            losses.push(ensure_finite(g.loss, "inner-loop loss")?);
            if step < cfg.steps {
                crate::scalar::axpy_slice(-lr, &g.grad_decoder, out.decoder.flat_mut());
            }
        }
        return Ok(Adapted {
            params: out,
            losses,
        });
    }
    for step in 0..=cfg.steps {
        let (emb, traces) = embed_sides(&out.encoder, task, sides)?;
        let f = head_features(&emb, task, sides);
        let g = head_loss_grad(&out.decoder, cfg.loss, n, &f.h, &f.targets)?;
        losses.push(ensure_finite(g.loss, "inner-loop loss")?);
        if step == cfg.steps {
            break;
        }
        let mut upstream = emb.zeros_like();
        scatter_rows(&g.grad_features, &f.refs, &mut upstream);
        let mut ge = vec![T::zero(); out.encoder.n_params()];
        backprop_sides(&out.encoder, task, &traces, &upstream, &mut ge)?;
        crate::scalar::axpy_slice(-lr, &ge, out.encoder.flat_mut());
        crate::scalar::axpy_slice(-lr, &g.grad_decoder, out.decoder.flat_mut());
    }
    Ok(Adapted {
        params: out,
        losses,
    })
}

/// Query loss after decoder-only adaptation on the support set.
pub fn task_head_loss<T: Scalar>(
    params: &MetaParams<T>,
    task: &Task,
    cfg: &InnerLoopConfig,
) -> Result<T> {
    let adapted = inner_loop_sgd(params, task, cfg, false, false)?;
    let (emb, _) = embed_sides(&params.encoder, task, &[Side::Query])?;
    let f = head_features(&emb, task, &[Side::Query]);
    Ok(head_loss_grad(
        &adapted.params.decoder,
        cfg.loss,
        task.n_way(),
        &f.h,
        &f.targets,
    )?
    .loss)
}

/// Exact gradient of [`task_head_loss`] w.r.t. encoder and decoder
/// meta-parameters, differentiating through every inner step.
pub fn anil_task_gradient<T: Scalar>(
    params: &MetaParams<T>,
    task: &Task,
    cfg: &InnerLoopConfig,
) -> Result<(T, Vec<T>, Vec<T>)> {
    anil_task_gradient_weighted(params, task, cfg, None)
}

/// As [`anil_task_gradient`], with the inner loss weighted per support
/// token (weights in support reading order over unmasked tokens).
pub fn anil_task_gradient_weighted<T: Scalar>(
    params: &MetaParams<T>,
    task: &Task,
    cfg: &InnerLoopConfig,
    support_weights: Option<&[T]>,
) -> Result<(T, Vec<T>, Vec<T>)> {
    cfg.validate()?;
    let n = task.n_way();
    let lr = T::of(cfg.lr);
    let both = [Side::Support, Side::Query];
    let (emb, traces) = embed_sides(&params.encoder, task, &both)?;
    let fs = head_features(&emb, task, &[Side::Support]);
    let fq = head_features(&emb, task, &[Side::Query]);
    let mut path = Vec::with_capacity(cfg.steps + 1);
    path.push(params.decoder.clone());
    for _ in 0..cfg.steps {
        let cur = path.last().expect("non-empty");
        let g = head_loss_grad_weighted(cur, cfg.loss, n, &fs.h, &fs.targets, support_weights)?;
        ensure_finite(g.loss, "inner-loop loss")?;
        let mut next = cur.clone();
        crate::scalar::axpy_slice(-lr, &g.grad_decoder, next.flat_mut());
        path.push(next);
    }
    let q = head_loss_grad(
        path.last().expect("non-empty"),
        cfg.loss,
        n,
        &fq.h,
        &fq.targets,
    )?;
    let loss = ensure_finite(q.loss, "query loss")?;
    let mut psi_bar = q.grad_decoder;
    let mut hs_bar = Matrix::zeros(fs.h.rows(), fs.h.cols());
    for psi in path[..cfg.steps].iter().rev() {
        sgd_step_adjoint(
            psi,
            cfg.loss,
            n,
            &fs.h,
            &fs.targets,
            support_weights,
            lr,
            &mut psi_bar,
            &mut hs_bar,
        );
    }
    let mut upstream = emb.zeros_like();
    scatter_rows(&hs_bar, &fs.refs, &mut upstream);
    scatter_rows(&q.grad_features, &fq.refs, &mut upstream);
    let mut ge = vec![T::zero(); params.encoder.n_params()];
    backprop_sides(&params.encoder, task, &traces, &upstream, &mut ge)?;
    Ok((loss, ge, psi_bar))
}

pub(crate) fn mean_of<T: Scalar>(vs: &[Vec<T>]) -> Vec<T> {
    let mut out = vs[0].clone();
    for v in &vs[1..] {
        crate::scalar::axpy_slice(T::one(), v, &mut out);
    }
    if vs.len() > 1 {
        let n = T::of_usize(vs.len());
        out.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn non_empty(tasks: &[Task]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("meta-batch is empty".into()));
    }
    Ok(())
}

/// One ANIL meta-update: per-task exact meta-gradients, averaged over the
/// batch, applied by `opt`.
pub fn anil_meta_step<T: Scalar>(
    params: &mut MetaParams<T>,
    tasks: &[Task],
    cfg: &InnerLoopConfig,
    opt: &mut OuterOptimizer,
) -> Result<MetaStepReport> {
    non_empty(tasks)?;
    let per_task: Vec<(T, Vec<T>, Vec<T>)> = tasks
        .par_iter()
        .map(|t| anil_task_gradient(params, t, cfg))
        .collect::<Result<_>>()?;
    let losses: Vec<T> = per_task.iter().map(|p| p.0).collect();
    let (ge, gd): (Vec<_>, Vec<_>) = per_task.into_iter().map(|(_, e, d)| (e, d)).unzip();
    let (ge, gd) = (mean_of(&ge), mean_of(&gd));
    let report = MetaStepReport::new(&losses, &[&ge, &gd]);
    opt.step(&mut params.segments_mut(), &[&ge, &gd])?;
    Ok(report)
}

/// One Reptile meta-update: adapt encoder and decoder on support and query,
/// move the initialization towards the mean adapted parameters. The reported
/// task loss is the adaptation loss at the initialization.
pub fn reptile_meta_step<T: Scalar>(
    params: &mut MetaParams<T>,
    tasks: &[Task],
    cfg: &InnerLoopConfig,
    opt: &mut OuterOptimizer,
) -> Result<MetaStepReport> {
    non_empty(tasks)?;
    let adapted: Vec<Adapted<T>> = tasks
        .par_iter()
        .map(|t| inner_loop_sgd(params, t, cfg, true, true))
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
    opt.step(&mut params.segments_mut(), &[&ge, &gd])?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::head::DecoderConfig;
    use super::super::test_support::task;
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn params(seed: u64) -> MetaParams<f64> {
        let mut cfg = EncoderConfig::new(10, 4);
        cfg.d_model = 6;
        cfg.d_hidden = 8;
        cfg.depth = 1;
        cfg.window = 1;
        MetaParams {
            encoder: init_params(&cfg, seed).unwrap(),
            decoder: DecoderParams::init(&DecoderConfig { d_in: 4, n_max: 3 }, seed + 1).unwrap(),
        }
    }

    fn toy() -> Task {
        task(
            2,
            &[&[0, -1, 1, -2, 0], &[-1, 1, 1, -1]],
            &[&[1, 0, -1], &[-1, 0, -2, 1]],
        )
    }

    #[test]
    fn zero_steps_is_identity() {
        let p = params(1);
        let cfg = InnerLoopConfig {
            steps: 0,
            ..Default::default()
        };
        for enc in [false, true] {
            let a = inner_loop_sgd(&p, &toy(), &cfg, enc, false).unwrap();
            assert_eq!(a.params, p);
            assert_eq!(a.losses.len(), 1);
        }
    }

    #[test]
    fn frozen_encoder_is_bitwise_unchanged_and_loss_drops() {
        let p = params(2);
        for loss in [HeadKind::Plain, HeadKind::Hierarchical] {
            let cfg = InnerLoopConfig {
                steps: 15,
                lr: 0.5,
                loss,
            };
            let a = inner_loop_sgd(&p, &toy(), &cfg, false, false).unwrap();
            assert_eq!(a.params.encoder.flat(), p.encoder.flat());
            assert!(a.losses[15] <= a.losses[0]);
            let b = inner_loop_sgd(&p, &toy(), &cfg, true, true).unwrap();
            assert!(b.losses[15] <= b.losses[0]);
            assert_ne!(b.params.encoder.flat(), p.encoder.flat());
        }
    }

    #[test]
    fn anil_gradient_matches_finite_differences() {
        let t = toy();
        for (steps, loss) in [
            (0, HeadKind::Plain),
            (1, HeadKind::Plain),
            (1, HeadKind::Hierarchical),
            (3, HeadKind::Hierarchical),
        ] {
            let p = params(3);
            let cfg = InnerLoopConfig {
                steps,
                lr: 0.4,
                loss,
            };
            let (_, ge, gd) = anil_task_gradient(&p, &t, &cfg).unwrap();
            let mut rng = crate::seed::rng(steps as u64);
            use rand::Rng as _;
            for which in 0..2 {
                for _ in 0..10 {
                    let (len, g) = if which == 0 {
                        (ge.len(), &ge)
                    } else {
                        (gd.len(), &gd)
                    };
                    let i = rng.random_range(0..len);
                    let bump = |delta: f64| {
                        let mut q = p.clone();
                        if which == 0 {
                            q.encoder.flat_mut()[i] += delta;
                        } else {
                            q.decoder.flat_mut()[i] += delta;
                        }
                        task_head_loss(&q, &t, &cfg).unwrap()
                    };
                    let fd = (bump(1e-6) - bump(-1e-6)) / 2e-6;
                    let tol = 1e-3 * fd.abs().max(g[i].abs()).max(1e-6);
                    assert!(
                        (fd - g[i]).abs() <= tol,
                        "steps {steps} {loss:?} seg {which} idx {i}: {fd} vs {}",
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_step_anil_is_joint_query_gradient() {
        let t = toy();
        let p = params(4);
        let cfg = InnerLoopConfig {
            steps: 0,
            ..Default::default()
        };
        let (loss, _, gd) = anil_task_gradient(&p, &t, &cfg).unwrap();
        let (emb, _) = embed_sides(&p.encoder, &t, &[Side::Query]).unwrap();
        let f = head_features(&emb, &t, &[Side::Query]);
        let direct = head_loss_grad(&p.decoder, cfg.loss, 2, &f.h, &f.targets).unwrap();
        assert_eq!(loss, direct.loss);
        assert_eq!(gd, direct.grad_decoder);
    }

    #[test]
    fn reptile_contracts() {
        let t = toy();
        let p = params(5);
        let cfg0 = InnerLoopConfig {
            steps: 0,
            ..Default::default()
        };
        let mut q = p.clone();
        reptile_meta_step(
            &mut q,
            std::slice::from_ref(&t),
            &cfg0,
            &mut OuterOptimizer::Sgd { lr: 1.0 },
        )
        .unwrap();
        assert_eq!(q, p);

        let cfg = InnerLoopConfig {
            steps: 3,
            lr: 0.1,
            ..Default::default()
        };
        let adapted = inner_loop_sgd(&p, &t, &cfg, true, true).unwrap().params;
        let mut q = p.clone();
        reptile_meta_step(
            &mut q,
            std::slice::from_ref(&t),
            &cfg,
            &mut OuterOptimizer::Sgd { lr: 1.0 },
        )
        .unwrap();
        for (a, b) in q
            .encoder
            .flat()
            .iter()
            .zip(adapted.encoder.flat())
            .chain(q.decoder.flat().iter().zip(adapted.decoder.flat()))
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_deltas_cancel() {
        let a = vec![0.5, -1.0];
        let b = vec![-0.5, 1.0];
        assert_eq!(mean_of(&[a, b]), vec![0.0, 0.0]);
    }

    #[test]
    fn anil_meta_loss_trends_down() {
        let t = toy();
        let t2 = task(2, &[&[1, 1, -1, 0], &[0, -1]], &[&[0, -1, 1], &[1, 1, 0]]);
        let mut p = params(6);
        let cfg = InnerLoopConfig {
            steps: 3,
            lr: 0.1,
            loss: HeadKind::Hierarchical,
        };
        let mut opt = OuterOptimizer::adam(0.01);
        let first = anil_meta_step(&mut p, &[t.clone(), t2.clone()], &cfg, &mut opt)
            .unwrap()
            .meta_loss;
        let mut last = first;
        for _ in 0..50 {
            last = anil_meta_step(&mut p, &[t.clone(), t2.clone()], &cfg, &mut opt)
                .unwrap()
                .meta_loss;
        }
        assert!(last < first, "{last} vs {first}");
    }

    #[test]
    fn empty_batch_rejected() {
        let mut p = params(7);
        let cfg = InnerLoopConfig::default();
        assert!(anil_meta_step(&mut p, &[], &cfg, &mut OuterOptimizer::default()).is_err());
        assert!(inner_loop_sgd(
            &p,
            &toy(),
            &InnerLoopConfig { lr: 0.0, ..cfg },
            false,
            false
        )
        .is_err());
    }
}
