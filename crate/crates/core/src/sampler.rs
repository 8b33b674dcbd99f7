//! Episodic task construction.
//!
//! Classes are split into disjoint base (meta-training) and novel
//! (meta-testing) pools. Each task draws `N` target classes from one pool and
//! fills its support and query sets with cross-document rejection sampling:
//! the currently least-covered class picks the next document, every target
//! class is credited with all of its occurrences in that document, and any
//! occurrences beyond the soft cap `⌊ρK⌋` are masked. Labels are finally
//! converted to task-relative ids with everything else mapped to `O`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{
    count_occurrences, extract_occurrences, label_runs, ClassId, Corpus, Label, TokenFeatures,
};
use crate::error::{Error, Result};
use crate::{io, seed};

/// Default cap on support (and, separately, query) documents per task.
pub const DEFAULT_MAX_DOCUMENTS: usize = 32;
/// Default number of fresh draws per task before giving up.
pub const DEFAULT_RETRY_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_classes: BTreeSet<ClassId>,
    pub novel_classes: BTreeSet<ClassId>,
    pub gamma: f64,
    pub u_threshold: usize,
}

impl ClassSplit {
    pub fn pool(&self, phase: Phase) -> &BTreeSet<ClassId> {
        match phase {
            Phase::Train => &self.base_classes,
            Phase::Test => &self.novel_classes,
        }
    }
}

/// Splits the catalog into base and novel classes.
///
/// Classes found in fewer than `u_threshold` documents are forced into the
/// novel pool; the remaining `round(γ·|C|)` novel slots are drawn uniformly.
/// If the forced classes alone exceed the quota, all of them are kept and a
/// warning is logged.
pub fn split_classes(
    corpus: &Corpus,
    gamma: f64,
    u_threshold: usize,
    seed: u64,
) -> Result<ClassSplit> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let n = corpus.n_classes();
    if n == 0 {
        return Err(Error::SplitInfeasible("empty class catalog".into()));
    }
    let quota = (gamma * n as f64).round() as usize;
    let counts = count_occurrences(corpus);
    let (forced, mut free): (Vec<ClassId>, Vec<ClassId>) =
        (0..n as ClassId).partition(|c| counts[c].documents < u_threshold);
    if forced.len() > quota {
        log::warn!(
            "{} classes occur in fewer than {u_threshold} documents but only {quota} novel slots exist; keeping all of them novel",
            forced.len()
        );
    }
    let mut rng = seed::rng(seed);
    free.shuffle(&mut rng);
    let extra = quota.saturating_sub(forced.len());
    let novel: BTreeSet<ClassId> = forced
        .iter()
        .copied()
        .chain(free.iter().copied().take(extra))
        .collect();
    let base: BTreeSet<ClassId> = (0..n as ClassId).filter(|c| !novel.contains(c)).collect();
    if base.is_empty() || novel.is_empty() {
        return Err(Error::SplitInfeasible(format!(
            "split leaves {} base and {} novel classes",
            base.len(),
            novel.len()
        )));
    }
    Ok(ClassSplit {
        base_classes: base,
        novel_classes: novel,
        gamma,
        u_threshold,
    })
}

/// Documents (as corpus indices, ascending) containing each requested class.
pub fn build_candidate_index(
    corpus: &Corpus,
    classes: &BTreeSet<ClassId>,
) -> BTreeMap<ClassId, Vec<usize>> {
    let mut index: BTreeMap<ClassId, Vec<usize>> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    for (j, doc) in corpus.documents.iter().enumerate() {
        let present: BTreeSet<ClassId> = doc.labels.iter().filter_map(|l| l.entity()).collect();
        for c in present {
            if let Some(list) = index.get_mut(&c) {
                list.push(j);
            }
        }
    }
    index
}

/// [`build_candidate_index`] keyed by document id.
pub fn candidate_doc_ids(
    corpus: &Corpus,
    classes: &BTreeSet<ClassId>,
) -> BTreeMap<ClassId, Vec<String>> {
    build_candidate_index(corpus, classes)
        .into_iter()
        .map(|(c, docs)| {
            (
                c,
                docs.into_iter()
                    .map(|j| corpus.documents[j].doc_id.clone())
                    .collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
    pub rho: f64,
    pub seed: u64,
    pub phase: Phase,
    #[serde(default = "default_max_documents")]
    pub max_documents: usize,
}

fn default_max_documents() -> usize {
    DEFAULT_MAX_DOCUMENTS
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.k_query == 0 {
            return Err(Error::Config(
                "n_way, k_shot and k_query must be at least 1".into(),
            ));
        }
        if !(self.rho > 1.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!(
                "rho must exceed 1, got {}",
                self.rho
            )));
        }
        if self.max_documents == 0 {
            return Err(Error::Config("max_documents must be positive".into()));
        }
        Ok(())
    }

    /// `⌊ρK⌋`
    pub fn support_cap(&self) -> usize {
        (self.rho * self.k_shot as f64).floor() as usize
    }

    /// `⌊ρK_q⌋`
    pub fn query_cap(&self) -> usize {
        (self.rho * self.k_query as f64).floor() as usize
    }
}

/// Label of a token inside a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskLabel {
    /// Background or a non-target entity type.
    Outside,
    /// Task-relative class id in `0..N`.
    Class(usize),
    /// Surplus occurrence removed by the soft-shot cap; excluded from every
    /// loss, statistic and metric but still fed to the encoder as context.
    Masked,
}

impl TaskLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            TaskLabel::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_masked(self) -> bool {
        self == TaskLabel::Masked
    }

    /// `-1` for `O` and masked tokens; the task file's `mask` disambiguates.
    pub fn to_wire(self) -> i64 {
        match self {
            TaskLabel::Class(c) => c as i64,
            TaskLabel::Outside | TaskLabel::Masked => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDocument {
    pub doc_id: String,
    pub domain_tag: String,
    pub tokens: Vec<TokenFeatures>,
    pub labels: Vec<TaskLabel>,
}

impl TaskDocument {
    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.is_masked()).collect()
    }

    pub fn unmasked(&self) -> impl Iterator<Item = (usize, TaskLabel)> + '_ {
        self.labels
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, l)| !l.is_masked())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Catalog classes in relative-id order.
    pub target_classes: Vec<ClassId>,
    pub support: Vec<TaskDocument>,
    pub query: Vec<TaskDocument>,
    pub seed: u64,
    pub phase: Phase,
}

impl Task {
    pub fn n_way(&self) -> usize {
        self.target_classes.len()
    }

    /// Relative id → catalog class.
    pub fn provenance(&self) -> BTreeMap<usize, ClassId> {
        self.target_classes.iter().copied().enumerate().collect()
    }

    /// Per-document masks, support documents first.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.support
            .iter()
            .chain(&self.query)
            .map(TaskDocument::mask)
            .collect()
    }

    pub fn documents(&self) -> impl Iterator<Item = &TaskDocument> {
        self.support.iter().chain(&self.query)
    }
}

/// A document drawn into a task with original labels and its surplus mask.
#[derive(Debug, Clone)]
pub struct RawTaskDocument<'a> {
    pub corpus_index: usize,
    pub labels: &'a [Label],
    pub mask: Vec<bool>,
}

/// Relative-label conversion: targets become `0..N` in order, masked tokens
/// stay masked, everything else becomes `O`.
pub fn convert_labels(labels: &[Label], mask: &[bool], targets: &[ClassId]) -> Vec<TaskLabel> {
    labels
        .iter()
        .zip(mask)
        .map(|(l, &masked)| {
            if masked {
                return TaskLabel::Masked;
            }
            match l {
                Label::Entity(c) => targets
                    .iter()
                    .position(|t| t == c)
                    .map_or(TaskLabel::Outside, TaskLabel::Class),
                Label::Background => TaskLabel::Outside,
            }
        })
        .collect()
}

/// Maps relative labels back to catalog labels through the provenance map.
/// Masked tokens map to `None`.
pub fn restore_labels(
    labels: &[TaskLabel],
    provenance: &BTreeMap<usize, ClassId>,
) -> Vec<Option<Label>> {
    labels
        .iter()
        .map(|l| match l {
            TaskLabel::Class(c) => Some(Label::Entity(provenance[c])),
            TaskLabel::Outside => Some(Label::Background),
            TaskLabel::Masked => None,
        })
        .collect()
}

/// Samples one task with classes drawn from the phase's pool.
pub fn xdr_sample_task(corpus: &Corpus, split: &ClassSplit, spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let pool: Vec<ClassId> = split.pool(spec.phase).iter().copied().collect();
    let index = build_candidate_index(corpus, split.pool(spec.phase));
    let available = index.values().filter(|v| !v.is_empty()).count();
    if pool.len() < spec.n_way || available < spec.n_way {
        return Err(Error::ClassPoolTooSmall {
            needed: spec.n_way,
            available: available.min(pool.len()),
        });
    }
    let mut rng = seed::rng(spec.seed);
    let targets: Vec<ClassId> = pool
        .choose_multiple(&mut rng, spec.n_way)
        .copied()
        .collect();
    sample_documents(corpus, &targets, spec, &mut rng)
}

/// Samples a task for a fixed, ordered target class list.
pub fn xdr_sample_task_for(corpus: &Corpus, targets: &[ClassId], spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    sample_documents(corpus, targets, spec, &mut rng)
}

fn sample_documents(
    corpus: &Corpus,
    targets: &[ClassId],
    spec: &TaskSpec,
    rng: &mut seed::Rng,
) -> Result<Task> {
    let class_set: BTreeSet<ClassId> = targets.iter().copied().collect();
    if class_set.len() != targets.len() {
        return Err(Error::Config("duplicate target classes".into()));
    }
    let index = build_candidate_index(corpus, &class_set);
    let mut candidates: Vec<Vec<usize>> = targets.iter().map(|c| index[c].clone()).collect();
    if let Some(pos) = candidates.iter().position(Vec::is_empty) {
        return Err(Error::TaskInfeasible(format!(
            "class {} occurs in no document",
            targets[pos]
        )));
    }

    let support = fill_set(
        corpus,
        targets,
        &mut candidates,
        spec.k_shot,
        spec.support_cap(),
        spec.max_documents,
        rng,
        "support",
    )?;
    let query = fill_set(
        corpus,
        targets,
        &mut candidates,
        spec.k_query,
        spec.query_cap(),
        spec.max_documents,
        rng,
        "query",
    )?;

    let finish = |raw: Vec<RawTaskDocument>| -> Vec<TaskDocument> {
        raw.into_iter()
            .map(|r| {
                let doc = &corpus.documents[r.corpus_index];
                TaskDocument {
                    doc_id: doc.doc_id.clone(),
                    domain_tag: doc.domain_tag.clone(),
                    tokens: doc.tokens.clone(),
                    labels: convert_labels(r.labels, &r.mask, targets),
                }
            })
            .collect()
    };
    Ok(Task {
        target_classes: targets.to_vec(),
        support: finish(support),
        query: finish(query),
        seed: spec.seed,
        phase: spec.phase,
    })
}

/// One greedy least-frequent-class fill of a support or query set.
#[allow(clippy::too_many_arguments)]
fn fill_set<'a>(
    corpus: &'a Corpus,
    targets: &[ClassId],
    candidates: &mut [Vec<usize>],
    k: usize,
    cap: usize,
    max_documents: usize,
    rng: &mut seed::Rng,
    what: &str,
) -> Result<Vec<RawTaskDocument<'a>>> {
    let mut count = vec![0usize; targets.len()];
    let mut out: Vec<RawTaskDocument> = Vec::new();
    while count.iter().copied().min().unwrap_or(k) < k {
        if out.len() >= max_documents {
            return Err(Error::TaskInfeasible(format!(
                "{what} set reached the cap of {max_documents} documents"
            )));
        }
        // Least frequent class; ties go to the lowest relative id.
        let (e_hat, _) = count
            .iter()
            .enumerate()
            .min_by_key(|&(i, &c)| (c, i))
            .expect("non-empty targets");
        let Some(&j) = candidates[e_hat].choose(rng) else {
            return Err(Error::TaskInfeasible(format!(
                "candidates for class {} exhausted while filling the {what} set",
                targets[e_hat]
            )));
        };
        for list in candidates.iter_mut() {
            list.retain(|&d| d != j);
        }
        let doc = &corpus.documents[j];
        let mut mask = vec![false; doc.len()];
        let occurrences = extract_occurrences(doc);
        for (e, &class) in targets.iter().enumerate() {
            let mine: Vec<_> = occurrences
                .iter()
                .filter(|o| o.entity_type == class)
                .collect();
            count[e] += mine.len();
            if count[e] > cap {
                // Mask the surplus starting from the last occurrence in reading order.
                let surplus = count[e] - cap;
                for occ in mine.iter().rev().take(surplus) {
                    mask[occ.start..=occ.end].iter_mut().for_each(|m| *m = true);
                }
                count[e] = cap;
            }
        }
        out.push(RawTaskDocument {
            corpus_index: j,
            labels: &doc.labels,
            mask,
        });
    }
    Ok(out)
}

/// A set of sampled tasks together with the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDataset {
    pub tasks: Vec<Task>,
    pub spec: TaskSpec,
    pub split: ClassSplit,
}

/// Samples `n_tasks` tasks; task `i` starts from seed `spec.seed + i` and
/// infeasible draws are retried with fresh class sets.
pub fn sample_meta_dataset(
    corpus: &Corpus,
    split: &ClassSplit,
    spec: &TaskSpec,
    n_tasks: usize,
) -> Result<EpisodeDataset> {
    sample_meta_dataset_with_budget(corpus, split, spec, n_tasks, DEFAULT_RETRY_BUDGET)
}

pub fn sample_meta_dataset_with_budget(
    corpus: &Corpus,
    split: &ClassSplit,
    spec: &TaskSpec,
    n_tasks: usize,
    retry_budget: usize,
) -> Result<EpisodeDataset> {
    spec.validate()?;
    if n_tasks == 0 {
        return Err(Error::Config("n_tasks must be at least 1".into()));
    }
    let tasks = (0..n_tasks)
        .into_par_iter()
        .map(|i| {
            let base = spec.seed.wrapping_add(i as u64);
            let mut last = None;
            for attempt in 0..retry_budget.max(1) {
                let task_seed = if attempt == 0 {
                    base
                } else {
                    seed::derive(base, attempt as u64)
                };
                let s = TaskSpec {
                    seed: task_seed,
                    ..spec.clone()
                };
                match xdr_sample_task(corpus, split, &s) {
                    Ok(t) => return Ok(t),
                    Err(e @ Error::TaskInfeasible(_)) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(Error::DatasetInfeasible(format!(
                "task {i}: retry budget of {retry_budget} exhausted (last error: {})",
                last.map(|e| e.to_string()).unwrap_or_default()
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeDataset {
        tasks,
        spec: spec.clone(),
        split: split.clone(),
    })
}

/// Checks the task contract by recounting labels; returns the first violation.
pub fn check_task(task: &Task, spec: &TaskSpec) -> std::result::Result<(), String> {
    let n = task.n_way();
    if n != spec.n_way {
        return Err(format!(
            "task has {n} classes, spec asks for {}",
            spec.n_way
        ));
    }
    let mut seen = BTreeSet::new();
    for d in task.documents() {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(format!("document {} appears twice", d.doc_id));
        }
        if d.labels.len() != d.tokens.len() {
            return Err(format!("document {} misaligned", d.doc_id));
        }
        for l in &d.labels {
            if let TaskLabel::Class(c) = l {
                if *c >= n {
                    return Err(format!("relative label {c} out of range"));
                }
            }
        }
    }
    for (set, docs, lo, hi) in [
        ("support", &task.support, spec.k_shot, spec.support_cap()),
        ("query", &task.query, spec.k_query, spec.query_cap()),
    ] {
        let mut counts = vec![0usize; n];
        for d in docs {
            for (c, _, _) in label_runs(&d.labels, TaskLabel::class) {
                counts[c] += 1;
            }
        }
        for (c, &k) in counts.iter().enumerate() {
            if k < lo || k > hi {
                return Err(format!(
                    "{set} class {c} has {k} occurrences, outside [{lo}, {hi}]"
                ));
            }
        }
    }
    Ok(())
}

// --- task files -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireToken {
    token_id: u32,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireDocument {
    doc_id: String,
    domain_tag: String,
    tokens: Vec<WireToken>,
    labels: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct WireTask {
    target_classes: Vec<ClassId>,
    support: Vec<WireDocument>,
    query: Vec<WireDocument>,
    mask: Vec<Vec<bool>>,
    #[serde(serialize_with = "ser_provenance", deserialize_with = "de_provenance")]
    provenance: BTreeMap<usize, ClassId>,
    seed: u64,
    phase: Phase,
}

fn ser_provenance<S: Serializer>(
    p: &BTreeMap<usize, ClassId>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let m: BTreeMap<String, ClassId> = p.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    m.serialize(s)
}

fn de_provenance<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<BTreeMap<usize, ClassId>, D::Error> {
    let m = BTreeMap::<String, ClassId>::deserialize(d)?;
    m.into_iter()
        .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(serde::de::Error::custom))
        .collect()
}

impl Task {
    pub fn to_json(&self) -> String {
        let wire = |d: &TaskDocument| WireDocument {
            doc_id: d.doc_id.clone(),
            domain_tag: d.domain_tag.clone(),
            tokens: d
                .tokens
                .iter()
                .map(|t| WireToken {
                    token_id: t.token_id,
                    bbox: t.bbox,
                    text: t.text.clone(),
                })
                .collect(),
            labels: d.labels.iter().map(|l| l.to_wire()).collect(),
        };
        let w = WireTask {
            target_classes: self.target_classes.clone(),
            support: self.support.iter().map(wire).collect(),
            query: self.query.iter().map(wire).collect(),
            mask: self.mask(),
            provenance: self.provenance(),
            seed: self.seed,
            phase: self.phase,
        };
        serde_json::to_string(&w).expect("task serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: WireTask = serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        let n = w.target_classes.len();
        if w.mask.len() != w.support.len() + w.query.len() {
            return Err(Error::Schema("mask does not cover every document".into()));
        }
        let mut masks = w.mask.into_iter();
        let mut convert = |d: WireDocument| -> Result<TaskDocument> {
            let mask = masks.next().expect("length checked");
            if mask.len() != d.labels.len() || d.tokens.len() != d.labels.len() {
                return Err(Error::Schema(format!("document {} misaligned", d.doc_id)));
            }
            let labels = d
                .labels
                .iter()
                .zip(&mask)
                .map(|(&l, &m)| match (m, l) {
                    (true, _) => Ok(TaskLabel::Masked),
                    (false, -1) => Ok(TaskLabel::Outside),
                    (false, c) if c >= 0 && (c as usize) < n => Ok(TaskLabel::Class(c as usize)),
                    (false, c) => Err(Error::Schema(format!("relative label {c} out of range"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskDocument {
                doc_id: d.doc_id,
                domain_tag: d.domain_tag,
                tokens: d
                    .tokens
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| TokenFeatures {
                        token_id: t.token_id,
                        pos_1d: i,
                        bbox: t.bbox,
                        text: t.text,
                    })
                    .collect(),
                labels,
            })
        };
        let support = w
            .support
            .into_iter()
            .map(&mut convert)
            .collect::<Result<Vec<_>>>()?;
        let query = w
            .query
            .into_iter()
            .map(&mut convert)
            .collect::<Result<Vec<_>>>()?;
        Ok(Task {
            target_classes: w.target_classes,
            support,
            query,
            seed: w.seed,
            phase: w.phase,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: TaskSpec,
    pub split: ClassSplit,
    pub tasks: Vec<String>,
}

impl EpisodeDataset {
    /// Writes `manifest.json` and one `task_NNNNN.json` per task into `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        let mut names = Vec::with_capacity(self.tasks.len());
        for (i, t) in self.tasks.iter().enumerate() {
            let name = format!("task_{i:05}.json");
            io::write_atomic(&dir.join(&name), t.to_json().as_bytes())?;
            names.push(name);
        }
        let manifest = DatasetManifest {
            spec: self.spec.clone(),
            split: self.split.clone(),
            tasks: names,
        };
        io::write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
        let tasks = manifest
            .tasks
            .iter()
            .map(|name| {
                let path = dir.join(name);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Task::from_json(&text)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tasks,
            spec: manifest.spec,
            split: manifest.split,
        })
    }
}
