//! Meta-learners over episodic tasks.
//!
//! Metric-based: prototypes, the meta contrastive loss, nearest-neighbour
//! labelling and a Mahalanobis out-of-task detector. Gradient-based: linear
//! heads (plain and hierarchical), full-batch inner-loop SGD, ANIL with exact
//! unrolled meta-gradients and first-order Reptile. Meta-parameters are
//! updated with Adam.

mod adam;
mod contrast;
mod head;
mod inner;
mod mahalanobis;
mod mcon;
mod proto;

use rayon::prelude::*;

use crate::encoder::{EncoderParams, ForwardTrace};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sampler::{Task, TaskDocument, TaskLabel};
use crate::scalar::Scalar;

pub use adam::{AdamState, OuterOptimizer};
pub use contrast::{
    contrastproto_meta_step, contrastproto_task_gradient, protonet_meta_step,
    protonet_task_gradient,
};
pub use head::{
    hc_forward, head_loss_grad, head_loss_grad_weighted, head_predict, DecoderConfig,
    DecoderParams, HeadKind, HeadLoss,
};
pub use inner::{
    anil_meta_step, anil_task_gradient, anil_task_gradient_weighted, inner_loop_sgd,
    reptile_meta_step, task_head_loss, Adapted, InnerLoopConfig, MetaParams, MetaStepReport,
};
pub(crate) use inner::{embed_sides, head_features, mean_of};
pub use mahalanobis::{
    calibrate_threshold, default_ridge, fit_covariance, mahalanobis_score, otd_detect_and_classify,
    quantile, Detection, DEFAULT_MARGIN, DEFAULT_QUANTILE,
};
pub use mcon::{mcon_loss, MconOutput};
pub use proto::{
    argmax_label, compute_otd_prototype, compute_prototypes, nn_classify, protonet_classify,
    protonet_loss, ProtoLoss,
};

/// Which half of a task a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Support,
    Query,
}

/// Address of one token inside a task. Orders support before query, then by
/// document and token index; this is the tie-breaking order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenRef {
    pub side: Side,
    pub doc: usize,
    pub token: usize,
}

/// Token index sets of one task; masked tokens appear in none of them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndexSets {
    /// Support tokens per relative class.
    pub trn_by_class: Vec<Vec<TokenRef>>,
    /// Support tokens labelled `O`.
    pub trn_otd: Vec<TokenRef>,
    /// Query tokens of a target class.
    pub val_itd: Vec<TokenRef>,
    /// Every unmasked support and query token.
    pub all: Vec<TokenRef>,
    /// Every unmasked support token.
    pub trn_all: Vec<TokenRef>,
}

impl IndexSets {
    pub fn new(task: &Task) -> Self {
        let mut s = IndexSets {
            trn_by_class: vec![Vec::new(); task.n_way()],
            ..Default::default()
        };
        for (side, docs) in [(Side::Support, &task.support), (Side::Query, &task.query)] {
            for (doc, d) in docs.iter().enumerate() {
                for (token, label) in d.unmasked() {
                    let r = TokenRef { side, doc, token };
                    s.all.push(r);
                    match (side, label) {
                        (Side::Support, TaskLabel::Class(c)) => s.trn_by_class[c].push(r),
                        (Side::Support, _) => s.trn_otd.push(r),
                        (Side::Query, TaskLabel::Class(_)) => s.val_itd.push(r),
                        (Side::Query, _) => {}
                    }
                    if side == Side::Support {
                        s.trn_all.push(r);
                    }
                }
            }
        }
        s
    }
}

pub(crate) fn label_of(task: &Task, r: TokenRef) -> TaskLabel {
    docs_of(task, r.side)[r.doc].labels[r.token]
}

pub(crate) fn docs_of(task: &Task, side: Side) -> &[TaskDocument] {
    match side {
        Side::Support => &task.support,
        Side::Query => &task.query,
    }
}

/// Token embeddings of every document in a task, aligned with its documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbeddings<T> {
    pub support: Vec<Matrix<T>>,
    pub query: Vec<Matrix<T>>,
}

impl<T: Scalar> TaskEmbeddings<T> {
    pub fn get(&self, r: TokenRef) -> &[T] {
        self.side(r.side)[r.doc].row(r.token)
    }

    pub fn get_mut(&mut self, r: TokenRef) -> &mut [T] {
        let docs = match r.side {
            Side::Support => &mut self.support,
            Side::Query => &mut self.query,
        };
        docs[r.doc].row_mut(r.token)
    }

    pub fn side(&self, side: Side) -> &[Matrix<T>] {
        match side {
            Side::Support => &self.support,
            Side::Query => &self.query,
        }
    }

    /// Zero-filled matrices of the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Matrix<T>>| {
            v.iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect()
        };
        Self {
            support: z(&self.support),
            query: z(&self.query),
        }
    }

    pub fn dim(&self) -> usize {
        self.support
            .first()
            .or(self.query.first())
            .map_or(0, Matrix::cols)
    }

    pub fn is_finite(&self) -> bool {
        self.support
            .iter()
            .chain(&self.query)
            .all(Matrix::is_finite)
    }
}

/// Forward traces of a task encoding, for backpropagation.
pub struct TaskTraces<T> {
    support: Vec<ForwardTrace<T>>,
    query: Vec<ForwardTrace<T>>,
}

/// Encodes every document of a task (documents in parallel).
pub fn embed_task<T: Scalar>(
    enc: &EncoderParams<T>,
    task: &Task,
) -> Result<(TaskEmbeddings<T>, TaskTraces<T>)> {
    let run = |docs: &[TaskDocument]| -> Result<Vec<ForwardTrace<T>>> {
        docs.par_iter().map(|d| enc.forward(&d.tokens)).collect()
    };
    let support = run(&task.support)?;
    let query = run(&task.query)?;
    let emb = TaskEmbeddings {
        support: support.iter().map(|t| t.output.clone()).collect(),
        query: query.iter().map(|t| t.output.clone()).collect(),
    };
    Ok((emb, TaskTraces { support, query }))
}

/// Backpropagates per-token embedding gradients into encoder parameter
/// gradients, accumulated into `grad` in document order.
pub fn backprop_task<T: Scalar>(
    enc: &EncoderParams<T>,
    task: &Task,
    traces: &TaskTraces<T>,
    upstream: &TaskEmbeddings<T>,
    grad: &mut [T],
) -> Result<()> {
    for (docs, tr, up) in [
        (&task.support, &traces.support, &upstream.support),
        (&task.query, &traces.query, &upstream.query),
    ] {
        for ((d, t), u) in docs.iter().zip(tr).zip(up) {
            if u.as_slice().iter().all(|v| *v == T::zero()) {
                continue;
            }
            enc.backward_into(&d.tokens, t, u, grad)?;
        }
    }
    Ok(())
}

pub(crate) fn ensure_finite<T: Scalar>(v: T, what: &str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(what.to_string()))
    }
}

/// Per-task statistics of the task-dependent embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStatistics<T> {
    /// Mean support embedding per relative class.
    pub prototypes: Vec<Vec<T>>,
    /// Number of support tokens behind each prototype.
    pub counts: Vec<usize>,
    pub otd_prototype: Option<Vec<T>>,
    /// Regularized per-class covariance, once fitted.
    pub covariances: Vec<Matrix<T>>,
    pub factors: Vec<crate::linalg::Cholesky<T>>,
    pub ridge: Option<T>,
    pub threshold: Option<T>,
    pub index: IndexSets,
}

impl<T: Scalar> TaskStatistics<T> {
    pub fn n_way(&self) -> usize {
        self.prototypes.len()
    }
}
