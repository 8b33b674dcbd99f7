//! Seeded synthetic corpora with planted, geometrically banded entities.
//!
//! Vocabulary layout: ids `[0, background_vocab)` are background tokens;
//! class `c` owns ids `background_vocab + c * tokens_per_class ..` (one
//! contiguous block per class). Tokens are laid out left-to-right,
//! top-to-bottom on a grid of `GRID_COLS` columns; occurrences are placed in
//! class order and pulled toward a vertical band proportional to the class
//! index, then every box is jittered by Gaussian noise of scale
//! `feature_noise`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{ClassId, Corpus, Document, Label, TokenFeatures, DEFAULT_MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::seed;

const GRID_COLS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_documents: usize,
    /// Inclusive token-count range.
    pub doc_length_range: (usize, usize),
    /// Inclusive range of planted occurrences per document.
    pub occurrences_per_doc_range: (usize, usize),
    /// Zipf exponent over class index; 0 is uniform.
    pub class_frequency_skew: f64,
    /// Standard deviation of the bounding-box jitter.
    pub feature_noise: f64,
    pub seed: u64,
    /// Inclusive token-length range of one occurrence.
    pub entity_length_range: (usize, usize),
    pub tokens_per_class: usize,
    pub background_vocab: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_documents: 400,
            doc_length_range: (32, 48),
            occurrences_per_doc_range: (3, 6),
            class_frequency_skew: 0.0,
            feature_noise: 0.02,
            seed: 7,
            entity_length_range: (1, 3),
            tokens_per_class: 6,
            background_vocab: 64,
        }
    }
}

impl SyntheticConfig {
    pub fn vocab_size(&self) -> usize {
        self.background_vocab + self.n_classes * self.tokens_per_class
    }

    fn class_block(&self, c: usize) -> usize {
        self.background_vocab + c * self.tokens_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InfeasibleConfig(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.n_documents == 0 {
            return bad("n_documents must be positive");
        }
        for (name, (lo, hi)) in [
            ("doc_length_range", self.doc_length_range),
            ("occurrences_per_doc_range", self.occurrences_per_doc_range),
            ("entity_length_range", self.entity_length_range),
        ] {
            if lo > hi {
                return bad(&format!("{name} is empty ({lo} > {hi})"));
            }
        }
        if self.doc_length_range.0 == 0 || self.doc_length_range.1 > DEFAULT_MAX_SEQ_LEN {
            return bad("doc_length_range must lie in [1, 512]");
        }
        if self.entity_length_range.0 == 0 {
            return bad("entities need at least one token");
        }
        if self.tokens_per_class == 0 || self.background_vocab == 0 {
            return bad("vocabulary blocks must be non-empty");
        }
        if !(self.class_frequency_skew >= 0.0) || !(self.feature_noise >= 0.0) {
            return bad("skew and noise must be non-negative");
        }
        // Worst case: most occurrences, longest entities, one separator between
        // neighbours, shortest document.
        let m = self.occurrences_per_doc_range.1;
        let need = m * self.entity_length_range.1 + m.saturating_sub(1);
        if need > self.doc_length_range.0 {
            return Err(Error::InfeasibleConfig(format!(
                "{m} occurrences of up to {} tokens need {need} positions, documents may have only {}",
                self.entity_length_range.1, self.doc_length_range.0
            )));
        }
        Ok(())
    }
}

/// Generates a corpus that is a pure function of `cfg`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let weights: Vec<f64> = (0..cfg.n_classes)
        .map(|c| (c as f64 + 1.0).powf(-cfg.class_frequency_skew))
        .collect();
    let class_dist = WeightedIndex::new(&weights).expect("positive weights");
    let jitter = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("finite noise");

    let mut documents = Vec::with_capacity(cfg.n_documents);
    for j in 0..cfg.n_documents {
        let len = rng.random_range(cfg.doc_length_range.0..=cfg.doc_length_range.1);
        let m = rng.random_range(cfg.occurrences_per_doc_range.0..=cfg.occurrences_per_doc_range.1);
        let mut planted: Vec<(usize, usize, f64)> = (0..m)
            .map(|_| {
                let c = class_dist.sample(&mut rng);
                let l = rng.random_range(cfg.entity_length_range.0..=cfg.entity_length_range.1);
                let band = (c as f64 + rng.random::<f64>()) / cfg.n_classes as f64;
                (c, l, band)
            })
            .collect();
        planted.sort_by(|a, b| a.2.total_cmp(&b.2));

        let mut labels = vec![Label::Background; len];
        let mut cursor = 0usize;
        for (i, &(c, l, band)) in planted.iter().enumerate() {
            // Room still needed by the occurrences after this one.
            let tail: usize = planted[i + 1..].iter().map(|p| p.1 + 1).sum();
            let latest = len - tail - l;
            let target = (band * len as f64) as usize;
            let start = target.clamp(cursor, latest);
            for lab in &mut labels[start..start + l] {
                *lab = Label::Entity(c as ClassId);
            }
            cursor = start + l + 1;
        }

        let rows = len.div_ceil(GRID_COLS);
        let tokens = labels
            .iter()
            .enumerate()
            .map(|(p, lab)| {
                let token_id = match lab {
                    Label::Background => rng.random_range(0..cfg.background_vocab),
                    Label::Entity(c) => {
                        cfg.class_block(*c as usize) + rng.random_range(0..cfg.tokens_per_class)
                    }
                } as u32;
                let (r, col) = (p / GRID_COLS, p % GRID_COLS);
                let dx = jitter.sample(&mut rng);
                let dy = jitter.sample(&mut rng);
                let x0 = col as f64 / GRID_COLS as f64 + 0.01 + dx;
                let x1 = (col + 1) as f64 / GRID_COLS as f64 - 0.01 + dx;
                let y0 = r as f64 / rows as f64 + 0.005 + dy;
                let y1 = (r + 1) as f64 / rows as f64 - 0.005 + dy;
                let bbox = [x0, y0, x1, y1].map(|v| v.clamp(0.0, 1.0));
                TokenFeatures::new(token_id, p, bbox)
            })
            .collect();
        documents.push(Document {
            doc_id: format!("syn-{j:05}"),
            domain_tag: "synthetic".into(),
            tokens,
            labels,
        });
    }
    let class_catalog = (0..cfg.n_classes).map(|c| format!("class_{c}")).collect();
    Corpus::new(class_catalog, documents)
}
