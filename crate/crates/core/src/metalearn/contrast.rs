//! Metric-based meta-updates: contrastive prototypes and plain ProtoNet.

use rayon::prelude::*;

use super::inner::mean_of;
use super::{
    backprop_task, compute_otd_prototype, compute_prototypes, embed_task, mcon_loss, protonet_loss,
    MetaStepReport, OuterOptimizer,
};
use crate::encoder::{EncoderParams, FlatParams};
use crate::error::{Error, Result};
use crate::sampler::Task;
use crate::scalar::Scalar;

/// Contrastive loss of one task and its gradient w.r.t. the encoder.
pub fn contrastproto_task_gradient<T: Scalar>(
    enc: &EncoderParams<T>,
    task: &Task,
) -> Result<(T, Vec<T>)> {
    let (emb, traces) = embed_task(enc, task)?;
    let stats = compute_prototypes(&emb, task)?;
    let out = mcon_loss(&emb, &stats, task)?;
    let mut g = vec![T::zero(); enc.n_params()];
    backprop_task(enc, task, &traces, &out.grad, &mut g)?;
    Ok((out.loss, g))
}

/// Prototype cross-entropy of one task and its encoder gradient.
pub fn protonet_task_gradient<T: Scalar>(
    enc: &EncoderParams<T>,
    task: &Task,
    include_otd: bool,
) -> Result<(T, Vec<T>)> {
    let (emb, traces) = embed_task(enc, task)?;
    let mut stats = compute_prototypes(&emb, task)?;
    if include_otd {
        stats.otd_prototype = Some(compute_otd_prototype(&emb, task)?);
    }
    let out = protonet_loss(&emb, &stats, task, include_otd)?;
    let loss = super::ensure_finite(out.loss, "prototype loss")?;
    let mut g = vec![T::zero(); enc.n_params()];
    backprop_task(enc, task, &traces, &out.grad, &mut g)?;
    Ok((loss, g))
}

fn metric_step<T: Scalar>(
    enc: &mut EncoderParams<T>,
    tasks: &[Task],
    opt: &mut OuterOptimizer,
    f: impl Fn(&EncoderParams<T>, &Task) -> Result<(T, Vec<T>)> + Sync,
) -> Result<MetaStepReport> {
    if tasks.is_empty() {
        return Err(Error::Config("meta-batch is empty".into()));
    }
    let per_task: Vec<(T, Vec<T>)> = tasks.par_iter().map(|t| f(enc, t)).collect::<Result<_>>()?;
    let (losses, grads): (Vec<T>, Vec<Vec<T>>) = per_task.into_iter().unzip();
    let g = mean_of(&grads);
    let report = MetaStepReport::new(&losses, &[&g]);
    opt.step(&mut [enc.flat_mut()], &[&g])?;
    Ok(report)
}

/// One meta-update of the encoder on the batch-mean contrastive loss.
pub fn contrastproto_meta_step<T: Scalar>(
    enc: &mut EncoderParams<T>,
    tasks: &[Task],
    opt: &mut OuterOptimizer,
) -> Result<MetaStepReport> {
    metric_step(enc, tasks, opt, contrastproto_task_gradient)
}

/// One meta-update of the encoder on the batch-mean prototype loss, with or
/// without the `O` prototype.
pub fn protonet_meta_step<T: Scalar>(
    enc: &mut EncoderParams<T>,
    tasks: &[Task],
    include_otd: bool,
    opt: &mut OuterOptimizer,
) -> Result<MetaStepReport> {
    metric_step(enc, tasks, opt, |e, t| {
        protonet_task_gradient(e, t, include_otd)
    })
}
