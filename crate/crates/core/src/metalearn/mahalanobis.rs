//! Class covariances, Mahalanobis out-of-task scores and the thresholded
//! detector.

use super::{nn_classify, TaskEmbeddings, TaskStatistics};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sampler::{Task, TaskLabel};
use crate::scalar::Scalar;

pub const DEFAULT_QUANTILE: f64 = 1.0;
pub const DEFAULT_MARGIN: f64 = 1.5;

fn scatter<T: Scalar>(emb: &TaskEmbeddings<T>, refs: &[super::TokenRef], mu: &[T]) -> Matrix<T> {
    let d = mu.len();
    let mut s = Matrix::zeros(d, d);
    let mut diff = vec![T::zero(); d];
    for &r in refs {
        for ((o, &h), &m) in diff.iter_mut().zip(emb.get(r)).zip(mu) {
            *o = h - m;
        }
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] += diff[i] * diff[j];
            }
        }
    }
    let n = T::of_usize(refs.len());
    s.map_inplace(|v| v / n);
    s
}

/// Ridge `scale · tr(Σ_pooled) / d`, where `Σ_pooled` is the count-weighted
/// mean of the per-class covariances; never below `1e-9`.
pub fn default_ridge<T: Scalar>(emb: &TaskEmbeddings<T>, stats: &TaskStatistics<T>, scale: T) -> T {
    let d = emb.dim();
    let total: usize = stats.counts.iter().sum();
    let mut tr = T::zero();
    for (e, refs) in stats.index.trn_by_class.iter().enumerate() {
        let mu = &stats.prototypes[e];
        let ss: T = refs
            .iter()
            .map(|&r| {
                emb.get(r)
                    .iter()
                    .zip(mu)
                    .map(|(&h, &m)| (h - m) * (h - m))
                    .sum::<T>()
            })
            .sum();
        tr += ss;
    }
    let pooled = tr / T::of_usize(total.max(1)) / T::of_usize(d.max(1));
    (scale * pooled).max(T::of(1e-9))
}

/// Count-normalized class covariances plus `ridge · I`, factorized.
pub fn fit_covariance<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    mut stats: TaskStatistics<T>,
    ridge: T,
) -> Result<TaskStatistics<T>> {
    let mut covs = Vec::with_capacity(stats.n_way());
    let mut factors = Vec::with_capacity(stats.n_way());
    for (e, refs) in stats.index.trn_by_class.iter().enumerate() {
        if refs.is_empty() {
            return Err(Error::EmptyClass(e));
        }
        let mut c = scatter(emb, refs, &stats.prototypes[e]);
        for i in 0..c.rows() {
            c[(i, i)] += ridge;
        }
        factors.push(c.cholesky()?);
        covs.push(c);
    }
    stats.covariances = covs;
    stats.factors = factors;
    stats.ridge = Some(ridge);
    Ok(stats)
}

/// Minimum squared Mahalanobis distance to the class prototypes, with the
/// minimizing class (lowest index on ties).
pub fn mahalanobis_score<T: Scalar>(h: &[T], stats: &TaskStatistics<T>) -> (T, usize) {
    let mut best = (T::infinity(), 0);
    let mut diff = vec![T::zero(); h.len()];
    for (e, (mu, f)) in stats.prototypes.iter().zip(&stats.factors).enumerate() {
        for ((o, &a), &b) in diff.iter_mut().zip(h).zip(mu) {
            *o = a - b;
        }
        let r = f.inv_quadratic_form(&diff);
        if r < best.0 {
            best = (r, e);
        }
    }
    best
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile<T: Scalar>(values: &[T], q: f64) -> Option<T> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    Some(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Threshold `quantile_q(r over support ITD tokens) · margin`.
pub fn calibrate_threshold<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    stats: &TaskStatistics<T>,
    q: f64,
    margin: f64,
) -> Result<T> {
    if !(0.0..=1.0).contains(&q) || margin <= 0.0 {
        return Err(Error::Config(format!(
            "threshold quantile {q} / margin {margin} out of range"
        )));
    }
    let scores: Vec<T> = stats
        .index
        .trn_by_class
        .iter()
        .flatten()
        .map(|&r| mahalanobis_score(emb.get(r), stats).0)
        .collect();
    let base = quantile(&scores, q).ok_or(Error::EmptyClass(0))?;
    Ok(base * T::of(margin))
}

/// Labels and in-task scores for every query token.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub labels: Vec<Vec<TaskLabel>>,
    /// `-r(h)`; higher means more likely in-task.
    pub itd_scores: Vec<Vec<T>>,
}

/// `O` where `r(h) ≥ R`, the nearest-neighbour label otherwise.
pub fn otd_detect_and_classify<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    stats: &TaskStatistics<T>,
    task: &Task,
) -> Result<Detection<T>> {
    let threshold = stats
        .threshold
        .ok_or_else(|| Error::Config("detection threshold not calibrated".into()))?;
    if stats.factors.len() != stats.n_way() {
        return Err(Error::Config("class covariances not fitted".into()));
    }
    let mut labels = nn_classify(emb, task);
    let mut itd_scores = Vec::with_capacity(emb.query.len());
    for (doc, lab) in emb.query.iter().zip(labels.iter_mut()) {
        let mut scores = Vec::with_capacity(doc.rows());
        for (h, l) in doc.iter_rows().zip(lab.iter_mut()) {
            let r = mahalanobis_score(h, stats).0;
            if r >= threshold {
                *l = TaskLabel::Outside;
            }
            scores.push(-r);
        }
        itd_scores.push(scores);
    }
    Ok(Detection { labels, itd_scores })
}
