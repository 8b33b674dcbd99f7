//! Span-level precision/recall/F1, AUROC of in-task scores, ROC export and
//! embedding dumps.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::label_runs;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::sampler::{Task, TaskLabel};

/// A maximal run of one relative class in a labelled document.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub doc_id: String,
    pub class: usize,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

/// Runs of identical class labels; `O` and masked tokens both end a run.
pub fn decode_spans(doc_id: &str, labels: &[TaskLabel]) -> Vec<EntitySpan> {
    label_runs(labels, TaskLabel::class)
        .into_iter()
        .map(|(class, start, end)| EntitySpan {
            doc_id: doc_id.to_string(),
            class,
            start,
            end,
        })
        .collect()
}

/// Exact-match span counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub true_spans: usize,
    pub pred_spans: usize,
    pub matched: usize,
}

impl SpanCounts {
    pub fn add(&mut self, other: SpanCounts) {
        self.true_spans += other.true_spans;
        self.pred_spans += other.pred_spans;
        self.matched += other.matched;
    }

    /// `(precision, recall, f1)`, zero where undefined.
    pub fn prf1(&self) -> (f64, f64, f64) {
        let p = ratio(self.matched, self.pred_spans);
        let r = ratio(self.matched, self.true_spans);
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        (p, r, f)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Span counts of one document. Truth labels decide which tokens are masked;
/// predictions on masked tokens are ignored.
pub fn count_spans(doc_id: &str, truth: &[TaskLabel], pred: &[TaskLabel]) -> SpanCounts {
    let pred: Vec<TaskLabel> = truth
        .iter()
        .zip(pred)
        .map(|(t, &p)| if t.is_masked() { TaskLabel::Masked } else { p })
        .collect();
    let t: BTreeSet<EntitySpan> = decode_spans(doc_id, truth).into_iter().collect();
    let p: BTreeSet<EntitySpan> = decode_spans(doc_id, &pred).into_iter().collect();
    SpanCounts {
        true_spans: t.len(),
        pred_spans: p.len(),
        matched: t.intersection(&p).count(),
    }
}

/// Micro-averaged counts over the query documents of every task.
pub fn micro_prf1<'a>(
    tasks: impl IntoIterator<Item = (&'a Task, &'a [Vec<TaskLabel>])>,
) -> SpanCounts {
    let mut c = SpanCounts::default();
    for (task, preds) in tasks {
        for (doc, pred) in task.query.iter().zip(preds) {
            c.add(count_spans(&doc.doc_id, &doc.labels, pred));
        }
    }
    c
}

/// Probability that a random in-task token outscores a random out-of-task
/// token, ties counted half.
pub fn auroc(scores: &[f64], itd: &[bool]) -> Result<f64> {
    let (wins, ties, n1, n0) = rank_counts(scores, itd)?;
    Ok((2 * wins + ties) as f64 / (2 * n1 * n0) as f64)
}

/// Groups of equal score in descending order as `(positives, negatives)`.
fn sorted_groups(scores: &[f64], itd: &[bool]) -> Result<Vec<(u128, u128)>> {
    if scores.len() != itd.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            itd.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("in-task score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u128, u128)> = Vec::new();
    let mut last = None;
    for i in idx {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed");
        if itd[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    let n1: u128 = groups.iter().map(|g| g.0).sum();
    let n0: u128 = groups.iter().map(|g| g.1).sum();
    if n1 == 0 || n0 == 0 {
        return Err(Error::SingleClass);
    }
    Ok(groups)
}

/// `(wins, ties, n_itd, n_otd)` over all in-task/out-of-task pairs.
fn rank_counts(scores: &[f64], itd: &[bool]) -> Result<(u128, u128, u128, u128)> {
    let groups = sorted_groups(scores, itd)?;
    let n0: u128 = groups.iter().map(|g| g.1).sum();
    let n1: u128 = groups.iter().map(|g| g.0).sum();
    let mut neg_above = 0u128;
    let (mut wins, mut ties) = (0u128, 0u128);
    for &(p, n) in &groups {
        wins += p * (n0 - neg_above - n);
        ties += p * n;
        neg_above += n;
    }
    Ok((wins, ties, n1, n0))
}

/// ROC curve with one point per distinct score threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub task_id: usize,
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (x, y) in &self.points {
            s.push_str(&format!("{x},{y}\n"));
        }
        s
    }
}

pub fn roc_points(task_id: usize, scores: &[f64], itd: &[bool]) -> Result<RocCurve> {
    let groups = sorted_groups(scores, itd)?;
    let n1 = groups.iter().map(|g| g.0).sum::<u128>() as f64;
    let n0 = groups.iter().map(|g| g.1).sum::<u128>() as f64;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u128, 0u128);
    for &(p, n) in &groups {
        tp += p;
        fp += n;
        points.push((fp as f64 / n0, tp as f64 / n1));
    }
    Ok(RocCurve { task_id, points })
}

/// Evaluation summary over meta-testing tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub true_spans: usize,
    pub pred_spans: usize,
    pub matched_spans: usize,
    pub n_tasks: usize,
    /// `None` where a task's query tokens are all in-task or all out-of-task.
    pub per_task_auroc: Vec<Option<f64>>,
    pub mean_auroc: Option<f64>,
    pub pooled_auroc: Option<f64>,
}

/// Per-task query outputs needed for the report.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub counts: SpanCounts,
    pub scores: Vec<f64>,
    pub itd: Vec<bool>,
}

impl TaskOutcome {
    /// Counts and unmasked-token scores of one task's query set.
    pub fn new(task: &Task, preds: &[Vec<TaskLabel>], scores: &[Vec<f64>]) -> Self {
        let counts = micro_prf1([(task, preds)]);
        let mut s = Vec::new();
        let mut itd = Vec::new();
        for (doc, sc) in task.query.iter().zip(scores) {
            for (l, &v) in doc.labels.iter().zip(sc) {
                if !l.is_masked() {
                    s.push(v);
                    itd.push(l.class().is_some());
                }
            }
        }
        Self {
            counts,
            scores: s,
            itd,
        }
    }
}

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[TaskOutcome]) -> Self {
        let mut counts = SpanCounts::default();
        let mut per_task_auroc = Vec::with_capacity(outcomes.len());
        let (mut all_s, mut all_l) = (Vec::new(), Vec::new());
        for (i, o) in outcomes.iter().enumerate() {
            counts.add(o.counts);
            let a = auroc(&o.scores, &o.itd).ok();
            if a.is_none() {
                log::warn!("task {i}: AUROC undefined, skipped in the mean");
            }
            per_task_auroc.push(a);
            all_s.extend_from_slice(&o.scores);
            all_l.extend_from_slice(&o.itd);
        }
        let defined: Vec<f64> = per_task_auroc.iter().flatten().copied().collect();
        let mean_auroc =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let (precision, recall, micro_f1) = counts.prf1();
        Self {
            precision,
            recall,
            micro_f1,
            true_spans: counts.true_spans,
            pred_spans: counts.pred_spans,
            matched_spans: counts.matched,
            n_tasks: outcomes.len(),
            per_task_auroc,
            mean_auroc,
            pooled_auroc: auroc(&all_s, &all_l).ok(),
        }
    }
}

/// One unmasked query token in an embedding dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub doc_id: String,
    pub doc: usize,
    pub token: usize,
    pub vector: Vec<f64>,
    /// Relative class, `-1` for `O`.
    pub true_label: i64,
    pub pred_label: i64,
    pub itd_score: f64,
}

/// Writes one JSON line per unmasked query token.
pub fn dump_embeddings(
    path: &Path,
    task: &Task,
    embeddings: &[crate::linalg::Matrix<f64>],
    preds: &[Vec<TaskLabel>],
    scores: &[Vec<f64>],
) -> Result<usize> {
    let mut buf = Vec::new();
    let mut n = 0;
    for (j, doc) in task.query.iter().enumerate() {
        for (l, label) in doc.unmasked() {
            let rec = EmbeddingRecord {
                doc_id: doc.doc_id.clone(),
                doc: j,
                token: l,
                vector: embeddings[j].row(l).to_vec(),
                true_label: label.to_wire(),
                pred_label: preds[j][l].to_wire(),
                itd_score: scores[j][l],
            };
            serde_json::to_writer(&mut buf, &rec).map_err(|e| Error::Schema(e.to_string()))?;
            buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            n += 1;
        }
    }
    write_atomic(path, &buf)?;
    Ok(n)
}

pub fn load_embedding_dump(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| Error::Parse {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metalearn::test_support::task;
    use proptest::prelude::*;
    use TaskLabel::{Class, Masked, Outside};

    fn spans(v: &[EntitySpan]) -> Vec<(usize, usize, usize)> {
        v.iter().map(|s| (s.class, s.start, s.end)).collect()
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            spans(&decode_spans("d", &[Outside, Class(1), Class(1), Outside])),
            vec![(1, 1, 2)]
        );
        assert_eq!(
            spans(&decode_spans("d", &[Class(1), Masked, Class(1)])),
            vec![(1, 0, 0), (1, 2, 2)]
        );
        assert_eq!(
            spans(&decode_spans("d", &[Class(0), Class(1)])),
            vec![(0, 0, 0), (1, 1, 1)]
        );
    }

    /// Independent run-length decoder.
    fn rle(labels: &[TaskLabel]) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < labels.len() {
            if let Class(c) = labels[i] {
                let mut j = i;
                while j + 1 < labels.len() && labels[j + 1] == Class(c) {
                    j += 1;
                }
                out.push((c, i, j));
                i = j + 1;
            } else {
                i += 1;
            }
        }
        out
    }

    fn label() -> impl Strategy<Value = TaskLabel> {
        prop_oneof![Just(Outside), Just(Masked), (0usize..3).prop_map(Class)]
    }

    proptest! {
        #[test]
        fn decode_matches_run_length_oracle(labels in prop::collection::vec(label(), 0..40)) {
            prop_assert_eq!(spans(&decode_spans("d", &labels)), rle(&labels));
        }

        #[test]
        fn spans_to_labels_round_trip(raw in prop::collection::vec((0usize..3, 1usize..4, 1usize..3), 0..6)) {
            let mut labels = Vec::new();
            let mut expect = Vec::new();
            for (c, len, gap) in raw {
                labels.extend(std::iter::repeat_n(Outside, gap));
                expect.push((c, labels.len(), labels.len() + len - 1));
                labels.extend(std::iter::repeat_n(Class(c), len));
            }
            prop_assert_eq!(spans(&decode_spans("d", &labels)), expect);
        }

        #[test]
        fn auroc_matches_pairwise_oracle(v in prop::collection::vec((0u8..8, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = v.iter().map(|x| x.0 as f64 / 4.0).collect();
            let itd: Vec<bool> = v.iter().map(|x| x.1).collect();
            let (n1, n0) = (itd.iter().filter(|&&b| b).count(), itd.iter().filter(|&&b| !b).count());
            prop_assume!(n1 > 0 && n0 > 0);
            let mut num = 0u64;
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if itd[i] && !itd[j] {
                        num += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                    }
                }
            }
            let oracle = num as f64 / (2 * n1 * n0) as f64;
            let a = auroc(&scores, &itd).unwrap();
            prop_assert_eq!(a, oracle);
            prop_assert!((roc_points(0, &scores, &itd).unwrap().area() - a).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&warped, &itd).unwrap(), a);
            let c = roc_points(0, &scores, &itd).unwrap();
            prop_assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            prop_assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.5, 0.2], &[true, true]),
            Err(Error::SingleClass)
        ));
        let perfect = roc_points(0, &[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!(perfect.points.contains(&(0.0, 1.0)));
        let ties = roc_points(0, &[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(ties.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(ties.to_csv(), "fpr,tpr\n0,0\n1,1\n");
    }

    #[test]
    fn prf1_examples() {
        let truth = [Outside, Class(1), Class(1), Outside];
        let c = count_spans("d", &truth, &truth);
        assert_eq!(c.prf1(), (1.0, 1.0, 1.0));
        let c = count_spans("d", &truth, &[Outside, Class(1), Outside, Outside]);
        assert_eq!((c.matched, c.prf1()), (0, (0.0, 0.0, 0.0)));
        // Predictions under the mask are ignored.
        let c = count_spans(
            "d",
            &[Class(0), Masked, Outside],
            &[Class(0), Class(0), Outside],
        );
        assert_eq!((c.true_spans, c.pred_spans, c.matched), (1, 1, 1));
    }

    #[test]
    fn micro_counts_match_set_intersection_oracle() {
        use rand::Rng as _;
        let mut rng = crate::seed::rng(12);
        let mut draw = |n: usize| -> Vec<i64> { (0..n).map(|_| rng.random_range(-1..3)).collect() };
        let q: Vec<Vec<i64>> = (0..20).map(|_| draw(12)).collect();
        let qr: Vec<&[i64]> = q.iter().map(Vec::as_slice).collect();
        let t = task(3, &[&[0, 1, 2]], &qr);
        let preds: Vec<Vec<TaskLabel>> = (0..20)
            .map(|_| {
                draw(12)
                    .into_iter()
                    .map(|l| if l < 0 { Outside } else { Class(l as usize) })
                    .collect()
            })
            .collect();
        let c = micro_prf1([(&t, preds.as_slice())]);
        let mut truth = BTreeSet::new();
        let mut pred = BTreeSet::new();
        for (j, d) in t.query.iter().enumerate() {
            for s in rle(&d.labels) {
                truth.insert((j, s));
            }
            for s in rle(&preds[j]) {
                pred.insert((j, s));
            }
        }
        assert_eq!(c.true_spans, truth.len());
        assert_eq!(c.pred_spans, pred.len());
        assert_eq!(c.matched, truth.intersection(&pred).count());
        let (p, r, f) = c.prf1();
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-15);
    }

    #[test]
    fn report_aggregation() {
        let t = task(1, &[&[0]], &[&[0, -1, 0], &[-1, -1]]);
        let preds = vec![vec![Class(0), Outside, Outside], vec![Outside, Outside]];
        let scores = vec![vec![0.9, 0.1, 0.8], vec![0.2, 0.3]];
        let o = TaskOutcome::new(&t, &preds, &scores);
        let single = TaskOutcome::new(
            &task(1, &[&[0]], &[&[-1, -1]]),
            &[vec![Outside, Outside]],
            &[vec![0.0, 0.0]],
        );
        let r = MetricsReport::from_outcomes(&[o, single]);
        assert_eq!(r.n_tasks, 2);
        assert_eq!(r.per_task_auroc, vec![Some(1.0), None]);
        assert_eq!(r.mean_auroc, Some(1.0));
        assert_eq!((r.true_spans, r.pred_spans, r.matched_spans), (2, 1, 1));
        assert!(r.matched_spans <= r.true_spans.min(r.pred_spans));
    }

    #[test]
    fn embedding_dump_round_trip() {
        let t = task(1, &[&[0]], &[&[0, -2, -1], &[-1]]);
        let emb = crate::metalearn::test_support::random_embeddings(&t, 3, 2, 1.0);
        let preds = vec![vec![Class(0), Outside, Outside], vec![Class(0)]];
        let scores = vec![vec![0.5, 0.0, -0.1], vec![0.25]];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let n = dump_embeddings(&path, &t, &emb.query, &preds, &scores).unwrap();
        assert_eq!(n, 3);
        let back = load_embedding_dump(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].vector, emb.query[0].row(0));
        assert_eq!(back[1].vector, emb.query[0].row(2));
        for r in &back {
            assert_eq!(r.true_label, t.query[r.doc].labels[r.token].to_wire());
        }
    }
}
