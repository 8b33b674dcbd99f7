//! Episodic few-shot entity retrieval over visually rich documents.
//!
//! Tasks are sampled so that only the target classes are labelled; the
//! remaining entities become out-of-task distractors. Metric learners
//! (prototypes, contrastive prototypes with a Mahalanobis detector) and
//! gradient learners (ANIL, Reptile, with plain or hierarchical heads) are
//! trained episodically, optionally with simulated federated workers, and
//! evaluated by span-level F1 and in-task AUROC.
//!
//! The numerical core is generic over [`scalar::Scalar`]; the aliases below
//! fix it to `f64`.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fedsim;
pub mod io;
pub mod linalg;
pub mod metalearn;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use corpus::{
    generate_synthetic_corpus, load_corpus, save_corpus, Corpus, Document, Label, SyntheticConfig,
};
pub use error::{Error, Result};
pub use eval::{auroc, micro_prf1, MetricsReport};
pub use metalearn::{HeadKind, InnerLoopConfig, OuterOptimizer};
pub use pipeline::{Method, RunConfig};
pub use sampler::{
    sample_meta_dataset, split_classes, ClassSplit, EpisodeDataset, Phase, Task, TaskLabel,
    TaskSpec,
};

pub type Matrix = linalg::Matrix<f64>;
pub type Encoder = encoder::EncoderParams<f64>;
pub type Decoder = metalearn::DecoderParams<f64>;
pub type MetaParams = metalearn::MetaParams<f64>;
pub type TaskEmbeddings = metalearn::TaskEmbeddings<f64>;
pub type TaskStatistics = metalearn::TaskStatistics<f64>;
