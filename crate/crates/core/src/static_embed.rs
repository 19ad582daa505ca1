//! Static subword embeddings via skip-gram with negative sampling.
//!
//! The trainer runs over the token-id stream produced by a tokenizer and is
//! single-threaded, so results are a pure function of `(corpus, tokenizer,
//! config, seed)`. Tokens seen fewer than `min_count` times keep a zero row
//! and a cleared trained flag; alignment code must skip them.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binfmt::{self, BinFormatError};
use crate::corpus::Corpus;
use crate::tokenizer::UnigramTokenizer;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"UBEM";

#[derive(Debug, Error)]
pub enum StaticEmbedError {
    #[error("corpus yields fewer than 2 tokens; nothing to train on")]
    CorpusTooSmall,
    #[error("embedding dimension must be at least 2, got {0}")]
    BadDim(usize),
    #[error("cosine is undefined for a zero-norm row")]
    ZeroNorm,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("row {row} ({token:?}) contains a non-finite value")]
    NonFinite { row: usize, token: String },
    #[error("token {0:?} appears in more than one row")]
    DuplicateToken(String),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    File(#[from] BinFormatError),
}

/// A dense `|V| x d` matrix with a token-id index and per-row trained flags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    dim: usize,
    data: Vec<f32>,
    trained: Vec<bool>,
}

impl EmbeddingMatrix {
    /// All-zero, all-untrained matrix over the given token list.
    pub fn zeros(tokens: Vec<String>, dim: usize) -> Self {
        let rows = tokens.len();
        let index = build_index(&tokens);
        Self {
            tokens,
            index,
            dim,
            data: vec![0.0; rows * dim],
            trained: vec![false; rows],
        }
    }

    pub fn from_rows(
        tokens: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        trained: Vec<bool>,
    ) -> Result<Self, StaticEmbedError> {
        assert_eq!(data.len(), tokens.len() * dim);
        assert_eq!(trained.len(), tokens.len());
        for (row, chunk) in data.chunks(dim.max(1)).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(StaticEmbedError::NonFinite {
                    row,
                    token: tokens[row].clone(),
                });
            }
        }
        let index = build_index(&tokens);
        if index.len() != tokens.len() {
            // a duplicated token would silently break the id <-> row bijection
            let dup = tokens
                .iter()
                .enumerate()
                .find(|(i, t)| index.get(*t).copied() != Some(*i as u32))
                .map(|(_, t)| t.clone())
                .unwrap_or_default();
            return Err(StaticEmbedError::DuplicateToken(dup));
        }
        Ok(Self {
            tokens,
            index,
            dim,
            data,
            trained,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn row(&self, id: u32) -> &[f32] {
        let id = id as usize;
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn set_row(&mut self, id: u32, values: &[f32], trained: bool) {
        let id = id as usize;
        self.data[id * self.dim..(id + 1) * self.dim].copy_from_slice(values);
        self.trained[id] = trained;
    }

    pub fn is_trained(&self, id: u32) -> bool {
        self.trained[id as usize]
    }

    pub fn trained_count(&self) -> usize {
        self.trained.iter().filter(|t| **t).count()
    }

    /// Binary save: `UBEM` header, row-major f32 data, then one
    /// `token<TAB>trained-flag` line per row.
    pub fn save(&self, path: &Path) -> Result<(), StaticEmbedError> {
        let mut trailer = String::new();
        for (tok, trained) in self.tokens.iter().zip(&self.trained) {
            trailer.push_str(tok);
            trailer.push('\t');
            trailer.push(if *trained { '1' } else { '0' });
            trailer.push('\n');
        }
        binfmt::write_matrix(path, EMBEDDING_MAGIC, self.rows(), self.dim, &self.data, &trailer)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StaticEmbedError> {
        let file = binfmt::read_matrix(path, EMBEDDING_MAGIC)?;
        let format = |message: String| StaticEmbedError::Format {
            path: path.display().to_string(),
            message,
        };
        let mut tokens = Vec::with_capacity(file.rows);
        let mut trained = Vec::with_capacity(file.rows);
        for line in file.trailer.lines() {
            let (token, flag) = line
                .split_once('\t')
                .ok_or_else(|| format(format!("bad token table line {line:?}")))?;
            tokens.push(token.to_string());
            trained.push(match flag {
                "1" => true,
                "0" => false,
                other => return Err(format(format!("bad trained flag {other:?}"))),
            });
        }
        if tokens.len() != file.rows {
            return Err(format(format!(
                "token table has {} entries for {} rows",
                tokens.len(),
                file.rows
            )));
        }
        if tokens.iter().collect::<std::collections::HashSet<_>>().len() != tokens.len() {
            return Err(format("token table contains duplicates".into()));
        }
        Self::from_rows(tokens, file.dim, file.data, trained)
    }

    /// Text format: `token v1 ... vd` per line, whitespace-separated.
    /// Rows that are entirely zero load as untrained.
    pub fn load_text(path: &Path) -> Result<Self, StaticEmbedError> {
        let content = std::fs::read_to_string(path).map_err(|source| BinFormatError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let format = |message: String| StaticEmbedError::Format {
            path: path.display().to_string(),
            message,
        };
        let mut tokens = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let mut dim: Option<usize> = None;
        for (no, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line");
            let values: Vec<f32> = parts
                .map(|p| p.parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|_| format(format!("line {}: bad float", no + 1)))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(format(format!(
                        "line {}: expected {d} values, found {}",
                        no + 1,
                        values.len()
                    )));
                }
                _ => {}
            }
            tokens.push(token.to_string());
            data.extend(values);
        }
        let dim = dim.ok_or_else(|| format("file contains no rows".into()))?;
        if dim < 2 {
            return Err(StaticEmbedError::BadDim(dim));
        }
        let trained: Vec<bool> = data.chunks(dim).map(|row| row.iter().any(|v| *v != 0.0)).collect();
        Self::from_rows(tokens, dim, data, trained)
    }
}

fn build_index(tokens: &[String]) -> HashMap<String, u32> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect()
}

/// Cosine similarity, accumulated in f64. Errors on zero-norm input.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, StaticEmbedError> {
    if a.len() != b.len() {
        return Err(StaticEmbedError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(StaticEmbedError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
pub struct StaticTrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub window: usize,
    pub negatives: usize,
    pub min_count: u64,
    pub subsample_threshold: f64,
}

impl Default for StaticTrainConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            epochs: 3,
            window: 5,
            negatives: 5,
            min_count: 2,
            subsample_threshold: 1e-3,
        }
    }
}

const INITIAL_LR: f64 = 0.025;
const FINAL_LR: f64 = 1e-4;

/// Train skip-gram-with-negative-sampling embeddings over the tokenized
/// corpus. Rows cover the tokenizer's full id space (vocabulary plus byte
/// tokens); ids below `min_count` occurrences stay zero and untrained.
pub fn train_static(
    corpus: &Corpus,
    tok: &UnigramTokenizer,
    cfg: &StaticTrainConfig,
    seed: u64,
) -> Result<EmbeddingMatrix, StaticEmbedError> {
    if cfg.dim < 2 {
        return Err(StaticEmbedError::BadDim(cfg.dim));
    }

    let sentences: Vec<Vec<u32>> = corpus.iter().map(|s| tok.encode(s).ids).collect();
    let total_tokens: usize = sentences.iter().map(Vec::len).sum();
    if total_tokens < 2 {
        return Err(StaticEmbedError::CorpusTooSmall);
    }

    let vocab_rows = tok.total_size();
    let mut counts = vec![0u64; vocab_rows];
    for sentence in &sentences {
        for &id in sentence {
            counts[id as usize] += 1;
        }
    }
    let trained: Vec<bool> = counts.iter().map(|&c| c >= cfg.min_count).collect();

    // negative-sampling table over trained ids, unigram^0.75
    let mut neg_ids: Vec<u32> = Vec::new();
    let mut neg_cdf: Vec<f64> = Vec::new();
    let mut acc = 0.0f64;
    for (id, &c) in counts.iter().enumerate() {
        if trained[id] && c > 0 {
            acc += (c as f64).powf(0.75);
            neg_ids.push(id as u32);
            neg_cdf.push(acc);
        }
    }
    if neg_ids.len() < 2 {
        return Err(StaticEmbedError::CorpusTooSmall);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = cfg.dim;
    let mut input = vec![0.0f32; vocab_rows * dim];
    let mut output = vec![0.0f32; vocab_rows * dim];
    for v in input.iter_mut() {
        *v = (rng.gen_range(-0.5..0.5) / dim as f64) as f32;
    }

    let corpus_total = total_tokens as f64;
    let keep_prob = |id: u32| -> f64 {
        let f = counts[id as usize] as f64 / corpus_total;
        if f > cfg.subsample_threshold {
            (cfg.subsample_threshold / f).sqrt()
        } else {
            1.0
        }
    };

    let schedule_total = (cfg.epochs * total_tokens).max(1) as f64;
    let mut processed = 0usize;
    let mut gradient = vec![0.0f32; dim];

    for _ in 0..cfg.epochs {
        for sentence in &sentences {
            // subsample frequent tokens, then slide the window
            let kept: Vec<u32> = sentence
                .iter()
                .copied()
                .filter(|&id| trained[id as usize] && rng.gen_bool(keep_prob(id).clamp(0.0, 1.0)))
                .collect();
            processed += sentence.len();
            if kept.len() < 2 {
                continue;
            }
            let lr = {
                let progress = (processed as f64 / schedule_total).min(1.0);
                (INITIAL_LR * (1.0 - progress)).max(FINAL_LR)
            };
            for (pos, &center) in kept.iter().enumerate() {
                let span = rng.gen_range(1..=cfg.window);
                let lo = pos.saturating_sub(span);
                let hi = (pos + span).min(kept.len() - 1);
                for (off, &context) in kept[lo..=hi].iter().enumerate() {
                    if lo + off == pos {
                        continue;
                    }
                    gradient.iter_mut().for_each(|g| *g = 0.0);
                    let c_off = center as usize * dim;
                    // positive pair plus negative samples
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0f64)
                        } else {
                            (sample_negative(&neg_ids, &neg_cdf, &mut rng, context), 0.0)
                        };
                        let t_off = target as usize * dim;
                        let mut dot = 0.0f64;
                        for d in 0..dim {
                            dot += input[c_off + d] as f64 * output[t_off + d] as f64;
                        }
                        let g = (label - sigmoid(dot)) * lr;
                        for d in 0..dim {
                            gradient[d] += (g * output[t_off + d] as f64) as f32;
                            output[t_off + d] += (g * input[c_off + d] as f64) as f32;
                        }
                    }
                    for d in 0..dim {
                        input[c_off + d] += gradient[d];
                    }
                }
            }
        }
    }

    // untrained rows stay exactly zero
    for (id, flag) in trained.iter().enumerate() {
        if !flag {
            input[id * dim..(id + 1) * dim].fill(0.0);
        }
    }

    let tokens = all_token_strings(tok);
    EmbeddingMatrix::from_rows(tokens, dim, input, trained)
}

/// Every surface form in the tokenizer's id space, byte tokens included.
pub fn all_token_strings(tok: &UnigramTokenizer) -> Vec<String> {
    (0..tok.total_size() as u32)
        .map(|id| tok.token(id).expect("id in range"))
        .collect()
}

fn sample_negative(ids: &[u32], cdf: &[f64], rng: &mut ChaCha8Rng, exclude: u32) -> u32 {
    let total = *cdf.last().expect("non-empty table");
    loop {
        let x = rng.gen_range(0.0..total);
        let idx = cdf.partition_point(|&c| c < x);
        let id = ids[idx.min(ids.len() - 1)];
        if id != exclude {
            return id;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_tokenizer(tokens: &[&str]) -> UnigramTokenizer {
        let p = (1.0 / tokens.len() as f64).ln();
        UnigramTokenizer::from_entries(
            tokens.iter().map(|t| (t.to_string(), p)).collect(),
            tokens.len() + 8,
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-9);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-9);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(StaticEmbedError::ZeroNorm)
        ));
    }

    #[test]
    fn output_covers_the_full_id_space() {
        let tok = uniform_tokenizer(&["a", "b", " "]);
        let corpus = Corpus::from_sentences(["a b a b", "b a b a"], "xx").unwrap();
        let cfg = StaticTrainConfig {
            dim: 8,
            epochs: 1,
            ..Default::default()
        };
        let emb = train_static(&corpus, &tok, &cfg, 1).unwrap();
        assert_eq!(emb.rows(), tok.total_size());
        assert_eq!(emb.dim(), 8);
    }

    #[test]
    fn rare_tokens_stay_zero_and_untrained() {
        let tok = uniform_tokenizer(&["a", "b", "q", " "]);
        // q appears once, below min_count = 2
        let corpus = Corpus::from_sentences(["a b a b a b a q", "b a b a"], "xx").unwrap();
        let cfg = StaticTrainConfig {
            dim: 4,
            epochs: 2,
            ..Default::default()
        };
        let emb = train_static(&corpus, &tok, &cfg, 1).unwrap();
        let q = emb.index_of("q").unwrap();
        assert!(!emb.is_trained(q));
        assert!(emb.row(q).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let tok = uniform_tokenizer(&["x", "y", "z", " "]);
        let corpus = Corpus::from_sentences(["x y x y z", "y x z z y"], "xx").unwrap();
        let cfg = StaticTrainConfig {
            dim: 6,
            epochs: 2,
            ..Default::default()
        };
        let a = train_static(&corpus, &tok, &cfg, 42).unwrap();
        let b = train_static(&corpus, &tok, &cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cooccurring_tokens_end_up_closer() {
        // x and y always share a window; z lives in separate sentences
        let tok = uniform_tokenizer(&["x", "y", "z", "q", " "]);
        let mut sentences = Vec::new();
        for _ in 0..60 {
            sentences.push("x y x y x y");
            sentences.push("z q z q z q");
        }
        let corpus = Corpus::from_sentences(sentences, "xx").unwrap();
        let cfg = StaticTrainConfig {
            dim: 16,
            epochs: 3,
            // every token in this 5-token toy is "frequent"; subsampling
            // would throw away nearly the whole stream
            subsample_threshold: 1.0,
            ..Default::default()
        };
        let mut wins = 0;
        for seed in 0..20 {
            let emb = train_static(&corpus, &tok, &cfg, seed).unwrap();
            let x = emb.index_of("x").unwrap();
            let y = emb.index_of("y").unwrap();
            let z = emb.index_of("z").unwrap();
            let xy = cosine(emb.row(x), emb.row(y)).unwrap();
            let xz = cosine(emb.row(x), emb.row(z)).unwrap();
            if xy > xz {
                wins += 1;
            }
        }
        assert!(wins >= 19, "cos(x,y) > cos(x,z) in only {wins}/20 runs");
    }

    #[test]
    fn binary_round_trip() {
        let tok = uniform_tokenizer(&["a", "b", " "]);
        let corpus = Corpus::from_sentences(["a b a b", "b a a b"], "xx").unwrap();
        let cfg = StaticTrainConfig {
            dim: 4,
            epochs: 1,
            ..Default::default()
        };
        let emb = train_static(&corpus, &tok, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        emb.save(&path).unwrap();
        let loaded = EmbeddingMatrix::load(&path).unwrap();
        assert_eq!(loaded, emb);
    }

    #[test]
    fn text_format_loads_and_infers_trained_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "hello 1.0 2.0 3.0\nworld -1.0 0.5 0\nblank 0 0 0\n").unwrap();
        let emb = EmbeddingMatrix::load_text(&path).unwrap();
        assert_eq!(emb.rows(), 3);
        assert_eq!(emb.dim(), 3);
        assert_eq!(emb.row(0), &[1.0, 2.0, 3.0]);
        assert!(emb.is_trained(0));
        assert!(!emb.is_trained(emb.index_of("blank").unwrap()));
    }

    #[test]
    fn duplicate_tokens_are_rejected_on_text_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.txt");
        std::fs::write(&path, "same 1 2
same 3 4
").unwrap();
        let err = EmbeddingMatrix::load_text(&path).unwrap_err();
        assert!(matches!(err, StaticEmbedError::DuplicateToken(_)));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(EmbeddingMatrix::load(&path).is_err());
    }
}
