//! Meta contrastive loss over the query tokens of a task.

use super::{ensure_finite, label_of, Side, TaskEmbeddings, TaskStatistics, TokenRef};
use crate::error::{Error, Result};
use crate::sampler::Task;
use crate::scalar::{dot, log_sum_exp, softmax_into, Scalar};

/// Loss with gradients w.r.t. token embeddings (total, prototype paths
/// included) and w.r.t. the prototypes themselves.
#[derive(Debug, Clone)]
pub struct MconOutput<T> {
    pub loss: T,
    pub grad: TaskEmbeddings<T>,
    pub proto_grad: Vec<Vec<T>>,
    /// Number of anchors that contributed.
    pub n_anchors: usize,
}

enum Item {
    Token(TokenRef),
    Proto(usize),
}

/// Supervised contrastive loss summed over target-class query anchors.
///
/// Positives of an anchor are the other query tokens of its class plus the
/// class prototype; the contrast set is every unmasked support and query
/// token except the anchor, plus all prototypes. Anchors without positives
/// contribute zero.
pub fn mcon_loss<T: Scalar>(
    emb: &TaskEmbeddings<T>,
    stats: &TaskStatistics<T>,
    task: &Task,
) -> Result<MconOutput<T>> {
    if !emb.is_finite() || stats.prototypes.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "embeddings passed to the contrastive loss".into(),
        ));
    }
    let idx = &stats.index;
    let dim = emb.dim();
    let n_way = stats.n_way();
    let mut items: Vec<Item> = idx.all.iter().map(|&r| Item::Token(r)).collect();
    items.extend((0..n_way).map(Item::Proto));
    let vec_of = |it: &Item| -> &[T] {
        match *it {
            Item::Token(r) => emb.get(r),
            Item::Proto(e) => &stats.prototypes[e],
        }
    };
    let class_of = |it: &Item| -> Option<usize> {
        match *it {
            Item::Token(r) if r.side == Side::Query => label_of(task, r).class(),
            Item::Token(_) => None,
            Item::Proto(e) => Some(e),
        }
    };
    let classes: Vec<Option<usize>> = items.iter().map(class_of).collect();

    let mut grad = emb.zeros_like();
    let mut proto_grad = vec![vec![T::zero(); dim]; n_way];
    let mut loss = T::zero();
    let mut n_anchors = 0;
    let mut logits = Vec::with_capacity(items.len());
    let mut probs = Vec::new();
    let mut gh = vec![T::zero(); dim];
    for (a, anchor) in items.iter().enumerate() {
        let Item::Token(ar) = *anchor else { continue };
        if ar.side != Side::Query {
            continue;
        }
        let Some(y) = classes[a] else { continue };
        let h = emb.get(ar).to_vec();
        let others: Vec<usize> = (0..items.len()).filter(|&u| u != a).collect();
        let positives: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&u| classes[u] == Some(y))
            .collect();
        if positives.is_empty() {
            continue;
        }
        n_anchors += 1;
        logits.clear();
        logits.extend(others.iter().map(|&u| dot(&h, vec_of(&items[u]))));
        probs.resize(logits.len(), T::zero());
        let lse = log_sum_exp(&logits);
        softmax_into(&logits, &mut probs);
        let inv_p = T::one() / T::of_usize(positives.len());
        let pos_mean_logit: T = positives
            .iter()
            .map(|&u| dot(&h, vec_of(&items[u])))
            .sum::<T>()
            * inv_p;
        loss += lse - pos_mean_logit;

        gh.iter_mut().for_each(|g| *g = T::zero());
        let add_to =
            |u: usize, coef: T, grad: &mut TaskEmbeddings<T>, proto_grad: &mut [Vec<T>]| {
                let target = match items[u] {
                    Item::Token(r) => grad.get_mut(r),
                    Item::Proto(e) => proto_grad[e].as_mut_slice(),
                };
                crate::scalar::axpy_slice(coef, &h, target);
            };
        for (&u, &p) in others.iter().zip(&probs) {
            crate::scalar::axpy_slice(p, vec_of(&items[u]), &mut gh);
            add_to(u, p, &mut grad, &mut proto_grad);
        }
        for &u in &positives {
            crate::scalar::axpy_slice(-inv_p, vec_of(&items[u]), &mut gh);
            add_to(u, -inv_p, &mut grad, &mut proto_grad);
        }
        crate::scalar::axpy_slice(T::one(), &gh, grad.get_mut(ar));
    }
    ensure_finite(loss, "contrastive loss")?;
    for (e, refs) in idx.trn_by_class.iter().enumerate() {
        let share = T::one() / T::of_usize(refs.len());
        for &r in refs {
            crate::scalar::axpy_slice(share, &proto_grad[e], grad.get_mut(r));
        }
    }
    Ok(MconOutput {
        loss,
        grad,
        proto_grad,
        n_anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{random_embeddings, task};
    use super::super::{compute_prototypes, IndexSets};
    use super::*;
    use crate::sampler::TaskLabel;
    use proptest::prelude::*;

    /// Literal transcription of the loss: explicit sets, explicit sums.
    fn oracle(emb: &TaskEmbeddings<f64>, t: &Task) -> f64 {
        let n = t.n_way();
        let mut protos = vec![vec![0.0; emb.dim()]; n];
        let mut counts = vec![0usize; n];
        let mut all: Vec<(Vec<f64>, bool, Option<usize>, (usize, usize))> = Vec::new();
        for (j, d) in t.support.iter().enumerate() {
            for (l, lab) in d.labels.iter().enumerate() {
                if lab.is_masked() {
                    continue;
                }
                let h = emb.support[j].row(l).to_vec();
                if let TaskLabel::Class(c) = lab {
                    counts[*c] += 1;
                    for i in 0..h.len() {
                        protos[*c][i] += h[i];
                    }
                }
                all.push((h, false, None, (j, l)));
            }
        }
        for (c, p) in protos.iter_mut().enumerate() {
            p.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
        for (j, d) in t.query.iter().enumerate() {
            for (l, lab) in d.labels.iter().enumerate() {
                if !lab.is_masked() {
                    all.push((emb.query[j].row(l).to_vec(), true, lab.class(), (j, l)));
                }
            }
        }
        let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for (ai, (h, is_q, y, _)) in all.iter().enumerate() {
            let (true, Some(y)) = (*is_q, *y) else {
                continue;
            };
            let mut pos: Vec<&[f64]> = Vec::new();
            let mut den: Vec<&[f64]> = Vec::new();
            for (bi, (v, vq, vy, _)) in all.iter().enumerate() {
                if bi == ai {
                    continue;
                }
                den.push(v);
                if *vq && *vy == Some(y) {
                    pos.push(v);
                }
            }
            for (e, p) in protos.iter().enumerate() {
                den.push(p);
                if e == y {
                    pos.push(p);
                }
            }
            let z: f64 = den.iter().map(|u| dotp(h, u).exp()).sum();
            let s: f64 = pos.iter().map(|v| (dotp(h, v).exp() / z).ln()).sum();
            total += -s / pos.len() as f64;
        }
        total
    }

    fn loss_of(emb: &TaskEmbeddings<f64>, t: &Task) -> MconOutput<f64> {
        let s = compute_prototypes(emb, t).unwrap();
        mcon_loss(emb, &s, t).unwrap()
    }

    #[test]
    fn single_anchor_with_only_prototype_is_zero() {
        let t = task(1, &[&[0]], &[&[0]]);
        let emb = random_embeddings(&t, 3, 1, 1.0);
        let out = loss_of(&emb, &t);
        assert!((out.loss - oracle(&emb, &t)).abs() < 1e-12);
        let mut only_proto = compute_prototypes(&emb, &t).unwrap();
        only_proto.index.all.retain(|r| r.side == Side::Query);
        let out = mcon_loss(&emb, &only_proto, &t).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert_eq!(out.n_anchors, 1);
    }

    #[test]
    fn toy_task_matches_oracle_and_finite_differences() {
        let t = task(2, &[&[0, -1, 1], &[1, 0, -2]], &[&[0, 1, -1], &[0, -1, 1]]);
        let emb = random_embeddings(&t, 4, 11, 1.0);
        let out = loss_of(&emb, &t);
        assert!((out.loss - oracle(&emb, &t)).abs() < 1e-10);
        for r in IndexSets::new(&t).all {
            for i in 0..4 {
                let mut p = emb.clone();
                p.get_mut(r)[i] += 1e-5;
                let mut m = emb.clone();
                m.get_mut(r)[i] -= 1e-5;
                let fd = (oracle(&p, &t) - oracle(&m, &t)) / 2e-5;
                let g = out.grad.get(r)[i];
                assert!(
                    (fd - g).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "{r:?} {i}: {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn prototype_gradient_matches_finite_differences() {
        let t = task(2, &[&[0, -1, 1, 1]], &[&[0, 1, -1, 0]]);
        let emb = random_embeddings(&t, 3, 5, 1.0);
        let s = compute_prototypes(&emb, &t).unwrap();
        let out = mcon_loss(&emb, &s, &t).unwrap();
        for e in 0..2 {
            for i in 0..3 {
                let mut sp = s.clone();
                sp.prototypes[e][i] += 1e-5;
                let mut sm = s.clone();
                sm.prototypes[e][i] -= 1e-5;
                let fd = (mcon_loss(&emb, &sp, &t).unwrap().loss
                    - mcon_loss(&emb, &sm, &t).unwrap().loss)
                    / 2e-5;
                assert!((fd - out.proto_grad[e][i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let t = task(1, &[&[0]], &[&[0]]);
        let mut emb = random_embeddings(&t, 2, 1, 1.0);
        let s = compute_prototypes(&emb, &t).unwrap();
        emb.query[0].row_mut(0)[0] = f64::NAN;
        assert!(matches!(mcon_loss(&emb, &s, &t), Err(Error::NonFinite(_))));
    }

    fn label_strategy(n: usize) -> impl Strategy<Value = Vec<i64>> {
        prop::collection::vec(prop_oneof![3 => -1i64..(n as i64), 1 => Just(-2i64)], 1..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn fuzzed_tasks_match_oracle_and_are_nonnegative(
            n in 1usize..=3,
            seed in any::<u64>(),
            sup in prop::collection::vec(label_strategy(3), 1..4),
            qry in prop::collection::vec(label_strategy(3), 1..3),
        ) {
            let mut sup: Vec<Vec<i64>> = sup.into_iter().map(|d| d.into_iter().map(|l| if l >= n as i64 { -1 } else { l }).collect()).collect();
            let qry: Vec<Vec<i64>> = qry.into_iter().map(|d| d.into_iter().map(|l| if l >= n as i64 { -1 } else { l }).collect()).collect();
            sup.push((0..n as i64).collect());
            let sr: Vec<&[i64]> = sup.iter().map(Vec::as_slice).collect();
            let qr: Vec<&[i64]> = qry.iter().map(Vec::as_slice).collect();
            let t = task(n, &sr, &qr);
            let emb = random_embeddings(&t, 3, seed, 1.5);
            let out = loss_of(&emb, &t);
            prop_assert!(out.loss >= -1e-12);
            prop_assert!((out.loss - oracle(&emb, &t)).abs() < 1e-10 * out.loss.abs().max(1.0));
        }
    }
}
