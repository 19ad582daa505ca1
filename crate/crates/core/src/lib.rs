//! Lexical bootstrapping for adapting a multilingual model to a new language.
//!
//! The crate covers the CPU side of that pipeline:
//!
//! - [`corpus`]: deterministic ingestion of monolingual and parallel text
//! - [`tokenizer`]: unigram-LM subword tokenizer (EM training + Viterbi encoding)
//! - [`vocab_search`]: average-log-probability scoring and the stopping-rule
//!   search for a vocabulary size
//! - [`static_embed`]: skip-gram static embeddings used for alignment
//! - [`embed_init`]: building a target embedding matrix from a source model's
//!   embeddings (lexical overlap, mutual-argmax pairs, sparsemax-weighted sums)
//! - [`objective`]: masked-LM cross-entropy and KL regularization as pure
//!   numeric functions, with analytic gradients
//! - [`fusion`]: harmony weights over source languages and logit fusion

pub mod binfmt;
pub mod corpus;
pub mod embed_init;
pub mod fusion;
pub mod objective;
pub mod static_embed;
pub mod tokenizer;
pub mod vocab_search;

pub use corpus::{Corpus, CorpusError, ParallelCorpus};
pub use embed_init::{
    build_target_embedding, lexical_overlap, mutual_argmax_pairs, sparsemax, AlignmentPlan,
    EmbedInitError, InitConfig,
};
pub use fusion::{
    fuse_logits, harmony_weights, pairwise_distance, rank_sources, FusionError, FusionReport,
    HarmonyWeights, HiddenStateSet, Pooling,
};
pub use objective::{
    combined_loss, kl_regularizer, mask_sample, mlm_loss, LossBreakdown, LossInputs, MaskPolicy,
    Matrix, ObjectiveError,
};
pub use static_embed::{
    cosine, train_static, EmbeddingMatrix, StaticEmbedError, StaticTrainConfig,
};
pub use tokenizer::{Segmentation, TokenizerError, UnigramTokenizer};
pub use vocab_search::{
    alp, search, threshold_sweep, SearchConfig, SearchTrace, StopReason, VocabSearchError,
};
