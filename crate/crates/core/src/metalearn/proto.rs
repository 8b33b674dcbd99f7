//! Prototypes, ProtoNet classification and loss, nearest-neighbour labelling.

use super::{IndexSets, TaskEmbeddings, TaskStatistics, TokenRef};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sampler::{Task, TaskLabel};
use crate::scalar::{log_sum_exp, softmax_into, Scalar};

fn mean_of<T: Scalar>(emb: &TaskEmbeddings<T>, refs: &[TokenRef], dim: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); dim];
    for &r in refs {
        for (a, &v) in acc.iter_mut().zip(emb.get(r)) {
            *a += v;
        }
    }
    let n = T::of_usize(refs.len());
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Per-class mean support embeddings.
pub fn compute_prototypes<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    task: &Task,
) -> Result<TaskStatistics<T>> {
    let index = IndexSets::new(task);
    let dim = emb.dim();
    let mut prototypes = Vec::with_capacity(task.n_way());
    let mut counts = Vec::with_capacity(task.n_way());
    for (c, refs) in index.trn_by_class.iter().enumerate() {
        if refs.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        prototypes.push(mean_of(emb, refs, dim));
        counts.push(refs.len());
    }
    Ok(TaskStatistics {
        prototypes,
        counts,
        otd_prototype: None,
        covariances: Vec::new(),
        factors: Vec::new(),
        ridge: None,
        threshold: None,
        index,
    })
}

/// Mean embedding of the `O`-labelled support tokens.
pub fn compute_otd_prototype<T: Scalar>(emb: &TaskEmbeddings<T>, task: &Task) -> Result<Vec<T>> {
    let index = IndexSets::new(task);
    if index.trn_otd.is_empty() {
        return Err(Error::NoOtdTokens);
    }
    Ok(mean_of(emb, &index.trn_otd, emb.dim()))
}

fn neg_sq_dist<T: Scalar>(h: &[T], mu: &[T]) -> T {
    -h.iter()
        .zip(mu)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
}

fn prototype_list<T: Scalar>(stats: &TaskStatistics<T>, include_otd: bool) -> Result<Vec<&[T]>> {
    let mut protos: Vec<&[T]> = stats.prototypes.iter().map(Vec::as_slice).collect();
    if include_otd {
        protos.push(
            stats
                .otd_prototype
                .as_deref()
                .ok_or(Error::MissingOtdPrototype)?,
        );
    }
    Ok(protos)
}

/// Softmax over negative squared distances to the class prototypes (and the
/// `O` prototype, last, when `include_otd`). Returns one `[L × K]` matrix per
/// query document.
pub fn protonet_classify<T: Scalar>(
    query: &[Matrix<T>],
    stats: &TaskStatistics<T>,
    include_otd: bool,
) -> Result<Vec<Matrix<T>>> {
    let protos = prototype_list(stats, include_otd)?;
    let k = protos.len();
    let mut logits = vec![T::zero(); k];
    Ok(query
        .iter()
        .map(|doc| {
            let mut out = Matrix::zeros(doc.rows(), k);
            for (l, h) in doc.iter_rows().enumerate() {
                for (z, mu) in logits.iter_mut().zip(&protos) {
                    *z = neg_sq_dist(h, mu);
                }
                softmax_into(&logits, out.row_mut(l));
            }
            out
        })
        .collect())
}

/// Argmax of a distribution row, lowest index on ties; index `n_way` is `O`.
pub fn argmax_label<T: Scalar>(probs: &[T], n_way: usize) -> TaskLabel {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    if best == n_way {
        TaskLabel::Outside
    } else {
        TaskLabel::Class(best)
    }
}

/// Loss value and per-token embedding gradients of a metric-based objective.
#[derive(Debug, Clone)]
pub struct ProtoLoss<T> {
    pub loss: T,
    pub grad: TaskEmbeddings<T>,
}

/// Mean prototype cross-entropy over query tokens.
///
/// Without the `O` prototype only target-class query tokens are scored; with
/// it every unmasked query token is, `O` tokens targeting the extra
/// prototype. Gradients flow through the prototypes into support tokens.
pub fn protonet_loss<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    stats: &TaskStatistics<T>,
    task: &Task,
    include_otd: bool,
) -> Result<ProtoLoss<T>> {
    let protos = prototype_list(stats, include_otd)?;
    let k = protos.len();
    let n = stats.n_way();
    let idx = &stats.index;
    let anchors: Vec<(TokenRef, usize)> = idx
        .all
        .iter()
        .filter(|r| r.side == super::Side::Query)
        .filter_map(|&r| match super::label_of(task, r) {
            TaskLabel::Class(c) => Some((r, c)),
            TaskLabel::Outside if include_otd => Some((r, n)),
            _ => None,
        })
        .collect();
    let mut grad = emb.zeros_like();
    if anchors.is_empty() {
        return Ok(ProtoLoss {
            loss: T::zero(),
            grad,
        });
    }
    let dim = emb.dim();
    let scale = T::one() / T::of_usize(anchors.len());
    let mut proto_grad = vec![vec![T::zero(); dim]; k];
    let mut loss = T::zero();
    let mut logits = vec![T::zero(); k];
    let mut probs = vec![T::zero(); k];
    let two = T::of(2.0);
    for &(r, y) in &anchors {
        let h = emb.get(r).to_vec();
        for (z, mu) in logits.iter_mut().zip(&protos) {
            *z = neg_sq_dist(&h, mu);
        }
        loss += log_sum_exp(&logits) - logits[y];
        softmax_into(&logits, &mut probs);
        let gh = grad.get_mut(r);
        for (j, mu) in protos.iter().enumerate() {
            let delta = (probs[j] - if j == y { T::one() } else { T::zero() }) * scale;
            // d(-|h-mu|^2)/dh = -2(h-mu); d/dmu = 2(h-mu)
            for i in 0..dim {
                let diff = h[i] - mu[i];
                gh[i] -= two * delta * diff;
                proto_grad[j][i] += two * delta * diff;
            }
        }
    }
    loss *= scale;
    let mut sets: Vec<&[TokenRef]> = idx.trn_by_class.iter().map(Vec::as_slice).collect();
    if include_otd {
        sets.push(&idx.trn_otd);
    }
    for (g, refs) in proto_grad.iter().zip(sets) {
        let share = T::one() / T::of_usize(refs.len());
        for &r in refs {
            for (o, &v) in grad.get_mut(r).iter_mut().zip(g) {
                *o += v * share;
            }
        }
    }
    Ok(ProtoLoss { loss, grad })
}

/// Labels every query token with the label of the unmasked support token of
/// largest inner product; ties go to the lowest `(doc, token)`.
pub fn nn_classify<T: Scalar>(emb: &TaskEmbeddings<T>, task: &Task) -> Vec<Vec<TaskLabel>> {
    let idx = IndexSets::new(task);
    emb.query
        .iter()
        .map(|doc| {
            doc.iter_rows()
                .map(|h| {
                    let mut best: Option<(T, TokenRef)> = None;
                    for &r in &idx.trn_all {
                        let s = crate::scalar::dot(h, emb.get(r));
                        if best.is_none_or(|(b, _)| s > b) {
                            best = Some((s, r));
                        }
                    }
                    best.map_or(TaskLabel::Outside, |(_, r)| super::label_of(task, r))
                })
                .collect()
        })
        .collect()
}
