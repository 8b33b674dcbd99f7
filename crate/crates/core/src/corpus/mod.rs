//! Token-labelled document corpora.
//!
//! A [`Corpus`] is a list of [`Document`]s, each a token sequence carrying
//! token id, reading-order position and a normalized bounding box, plus one
//! I/O label per token. Labels index the corpus `class_catalog` or are
//! [`Label::Background`].
//!
//! On disk the corpus is a single JSON object:
//!
//! ```json
//! {"class_catalog": ["total", "date"],
//!  "documents": [{"doc_id": "r1", "domain_tag": "receipt",
//!                 "tokens": [{"token_id": 5, "bbox": [0.1, 0.1, 0.2, 0.15]}],
//!                 "labels": [-1]}]}
//! ```
//!
//! Background is stored as `-1`.

mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_corpus, SyntheticConfig};

/// Index into a corpus class catalog.
pub type ClassId = u32;

/// Default upper bound on document length.
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;

/// Per-token I/O label in catalog space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Background,
    Entity(ClassId),
}

impl Label {
    pub fn entity(self) -> Option<ClassId> {
        match self {
            Label::Entity(c) => Some(c),
            Label::Background => None,
        }
    }

    pub fn to_wire(self) -> i64 {
        match self {
            Label::Background => -1,
            Label::Entity(c) => i64::from(c),
        }
    }

    pub fn from_wire(v: i64) -> Result<Self> {
        match v {
            -1 => Ok(Label::Background),
            c if c >= 0 && c <= i64::from(ClassId::MAX) => Ok(Label::Entity(c as ClassId)),
            other => Err(Error::Schema(format!("invalid label {other}"))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i64(self.to_wire())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_wire(v).map_err(serde::de::Error::custom)
    }
}

/// Multimodal features of one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatures {
    pub token_id: u32,
    /// Reading-order index; implied by position on disk.
    #[serde(skip)]
    pub pos_1d: usize,
    /// Normalized `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl TokenFeatures {
    pub fn new(token_id: u32, pos_1d: usize, bbox: [f64; 4]) -> Self {
        Self {
            token_id,
            pos_1d,
            bbox,
            text: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub domain_tag: String,
    pub tokens: Vec<TokenFeatures>,
    pub labels: Vec<Label>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Recomputes `pos_1d` from token order.
    fn renumber(&mut self) {
        for (i, t) in self.tokens.iter_mut().enumerate() {
            t.pos_1d = i;
        }
    }

    fn validate(&self, n_classes: usize, max_len: usize) -> Result<()> {
        let ctx = |msg: String| Error::Schema(format!("document {:?}: {msg}", self.doc_id));
        if self.tokens.len() != self.labels.len() {
            return Err(ctx(format!(
                "{} tokens but {} labels",
                self.tokens.len(),
                self.labels.len()
            )));
        }
        if self.tokens.is_empty() || self.tokens.len() > max_len {
            return Err(ctx(format!(
                "length {} outside [1, {max_len}]",
                self.tokens.len()
            )));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.pos_1d != i {
                return Err(ctx(format!("token {i} has pos_1d {}", t.pos_1d)));
            }
            let [x0, y0, x1, y1] = t.bbox;
            let in_unit = t.bbox.iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || x0 > x1 || y0 > y1 {
                return Err(ctx(format!("token {i} has invalid bbox {:?}", t.bbox)));
            }
        }
        for (i, l) in self.labels.iter().enumerate() {
            if let Label::Entity(c) = l {
                if *c as usize >= n_classes {
                    return Err(ctx(format!(
                        "label {c} at token {i} exceeds catalog size {n_classes}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub class_catalog: Vec<String>,
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Builds and validates a corpus.
    pub fn new(class_catalog: Vec<String>, documents: Vec<Document>) -> Result<Self> {
        let corpus = Self {
            class_catalog,
            documents,
        };
        corpus.validate(DEFAULT_MAX_SEQ_LEN)?;
        Ok(corpus)
    }

    pub fn n_classes(&self) -> usize {
        self.class_catalog.len()
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for d in &self.documents {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::Schema(format!("duplicate doc_id {:?}", d.doc_id)));
            }
            d.validate(self.class_catalog.len(), max_len)?;
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json_str_with_limit(s, DEFAULT_MAX_SEQ_LEN, Path::new("<string>"))
    }

    fn from_json_str_with_limit(s: &str, max_len: usize, path: &Path) -> Result<Self> {
        // Parse structurally first so schema problems are reported as such.
        let value: serde_json::Value = serde_json::from_str(s).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let mut corpus: Corpus =
            serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        for d in &mut corpus.documents {
            d.renumber();
        }
        corpus.validate(max_len)?;
        Ok(corpus)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("corpus serializes")
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }
}

/// Loads and validates a corpus JSON file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    load_corpus_with_limit(path, DEFAULT_MAX_SEQ_LEN)
}

pub fn load_corpus_with_limit(path: impl AsRef<Path>, max_len: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_json_str_with_limit(&text, max_len, path)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), corpus.to_json().as_bytes())
}

/// A maximal run of tokens sharing one entity label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityOccurrence {
    pub doc_id: String,
    pub entity_type: ClassId,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

impl EntityOccurrence {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maximal runs of identical entity labels, ordered by start.
pub fn extract_occurrences(doc: &Document) -> Vec<EntityOccurrence> {
    label_runs(&doc.labels, Label::entity)
        .into_iter()
        .map(|(entity_type, start, end)| EntityOccurrence {
            doc_id: doc.doc_id.clone(),
            entity_type,
            start,
            end,
        })
        .collect()
}

/// Maximal runs of equal `Some` keys: `(key, start, end_inclusive)`.
pub(crate) fn label_runs<L: Copy, K: PartialEq + Copy>(
    labels: &[L],
    key: impl Fn(L) -> Option<K>,
) -> Vec<(K, usize, usize)> {
    let mut runs = Vec::new();
    let mut current: Option<(K, usize)> = None;
    for (i, &l) in labels.iter().enumerate() {
        let k = key(l);
        match (current, k) {
            (Some((c, _)), Some(k)) if c == k => {}
            (Some((c, s)), _) => {
                runs.push((c, s, i - 1));
                current = k.map(|k| (k, i));
            }
            (None, _) => current = k.map(|k| (k, i)),
        }
    }
    if let Some((c, s)) = current {
        runs.push((c, s, labels.len() - 1));
    }
    runs
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccurrenceCount {
    pub occurrences: usize,
    pub documents: usize,
}

/// Occurrence and document-frequency counts for every catalog class.
pub fn count_occurrences(corpus: &Corpus) -> BTreeMap<ClassId, OccurrenceCount> {
    let mut counts: BTreeMap<ClassId, OccurrenceCount> = (0..corpus.n_classes() as ClassId)
        .map(|c| (c, OccurrenceCount::default()))
        .collect();
    for doc in &corpus.documents {
        let mut present = HashSet::new();
        for occ in extract_occurrences(doc) {
            let entry = counts.entry(occ.entity_type).or_default();
            entry.occurrences += 1;
            if present.insert(occ.entity_type) {
                entry.documents += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn labels(spec: &[i64]) -> Vec<Label> {
        spec.iter().map(|&v| Label::from_wire(v).unwrap()).collect()
    }

    pub fn doc(id: &str, spec: &[i64]) -> Document {
        let n = spec.len();
        Document {
            doc_id: id.to_string(),
            domain_tag: "test".into(),
            tokens: (0..n)
                .map(|i| {
                    let x = i as f64 / n as f64;
                    TokenFeatures::new(i as u32 % 7, i, [x, 0.1, x, 0.2])
                })
                .collect(),
            labels: labels(spec),
        }
    }
}
