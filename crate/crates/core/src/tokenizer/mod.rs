//! Unigram language-model subword tokenizer.
//!
//! A tokenizer is a vocabulary of token strings with unigram log
//! probabilities (nats). Encoding finds the maximum-probability segmentation
//! of a sentence by dynamic programming over the substring lattice. Byte
//! fallback keeps every input encodable: 256 reserved byte tokens sit after
//! the vocabulary in the id space, so characters outside the vocabulary
//! expand to their UTF-8 bytes instead of an unknown token.
//!
//! Id layout: `[0..5)` special tokens, `[5..vocab_len)` learned tokens in
//! descending log-probability order, `[vocab_len..vocab_len+256)` byte
//! tokens. `vocab_len` (the "actual size") counts specials plus learned
//! tokens only.

mod trainer;

pub use trainer::{train, train_with_options, TrainOptions};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::Corpus;

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];
pub const SPECIAL_COUNT: usize = SPECIAL_TOKENS.len();
pub const BYTE_TOKEN_COUNT: usize = 256;

/// Specials and byte tokens are priced this far (in nats) below the least
/// probable learned token so Viterbi never prefers them over a learned path.
const RESERVED_PENALTY_NATS: f64 = 4.605170185988092; // ln(100)

/// Learned probabilities must sum to 1 within this tolerance.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("requested size {requested} cannot hold the character inventory; need at least {minimum} (specials + {char_count} characters + 1)")]
    RequestedSizeTooSmall {
        requested: usize,
        minimum: usize,
        char_count: usize,
    },
    #[error("corpus has fewer than 2 tokens of usable text")]
    CorpusTooSmall,
    #[error("token {0:?} is empty or contains a tab or newline")]
    InvalidToken(String),
    #[error("duplicate token {token:?}{}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    DuplicateToken { token: String, line: Option<usize> },
    #[error("token probabilities sum to {sum:.6}, expected 1 within {PROB_SUM_TOLERANCE:e}; normalization failure")]
    NotNormalized { sum: f64 },
    #[error("{path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A maximum-likelihood segmentation of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub ids: Vec<u32>,
    /// Sum of per-token log probabilities, folded left to right over `ids`.
    pub log_prob_sum: f64,
}

#[derive(Debug, Clone)]
pub struct UnigramTokenizer {
    /// Specials then learned tokens; index = id.
    tokens: Vec<String>,
    /// Log probability per vocabulary id (nats).
    log_p: Vec<f64>,
    lookup: HashMap<Box<str>, u32>,
    max_token_chars: usize,
    requested_size: usize,
    byte_log_p: f64,
}

impl UnigramTokenizer {
    /// Assemble a tokenizer from learned `(token, log_p)` entries. Specials
    /// and byte tokens are added automatically. Entries must be unique,
    /// tab/newline-free and their probabilities must sum to 1.
    pub fn from_entries(
        entries: Vec<(String, f64)>,
        requested_size: usize,
    ) -> Result<Self, TokenizerError> {
        for (tok, _) in &entries {
            if tok.is_empty() || tok.contains('\t') || tok.contains('\n') {
                return Err(TokenizerError::InvalidToken(tok.clone()));
            }
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                return Err(TokenizerError::DuplicateToken {
                    token: tok.clone(),
                    line: None,
                });
            }
        }
        let sum: f64 = entries.iter().map(|(_, lp)| lp.exp()).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(TokenizerError::NotNormalized { sum });
        }

        let mut learned = entries;
        learned.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });

        let min_learned = learned
            .iter()
            .map(|(_, lp)| *lp)
            .fold(f64::INFINITY, f64::min);
        let reserved_log_p = if min_learned.is_finite() {
            min_learned - RESERVED_PENALTY_NATS
        } else {
            -RESERVED_PENALTY_NATS
        };

        let mut tokens = Vec::with_capacity(SPECIAL_COUNT + learned.len());
        let mut log_p = Vec::with_capacity(tokens.capacity());
        for s in SPECIAL_TOKENS {
            tokens.push(s.to_string());
            log_p.push(reserved_log_p);
        }
        for (tok, lp) in learned {
            tokens.push(tok);
            log_p.push(lp);
        }

        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone().into_boxed_str(), id as u32).is_some() {
                return Err(TokenizerError::DuplicateToken {
                    token: tok.clone(),
                    line: None,
                });
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);

        Ok(Self {
            tokens,
            log_p,
            lookup,
            max_token_chars,
            requested_size,
            byte_log_p: reserved_log_p,
        })
    }

    /// Specials + learned tokens (the "actual size").
    pub fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    /// Full id space: vocabulary plus the 256 byte tokens.
    pub fn total_size(&self) -> usize {
        self.tokens.len() + BYTE_TOKEN_COUNT
    }

    pub fn requested_size(&self) -> usize {
        self.requested_size
    }

    /// Vocabulary tokens in id order (excludes byte tokens).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    /// Surface form of an id; byte tokens render as `<0xNN>`.
    pub fn token(&self, id: u32) -> Option<String> {
        let id = id as usize;
        if id < self.tokens.len() {
            Some(self.tokens[id].clone())
        } else if id < self.total_size() {
            Some(format!("<0x{:02X}>", id - self.tokens.len()))
        } else {
            None
        }
    }

    pub fn log_p(&self, id: u32) -> f64 {
        let id = id as usize;
        if id < self.log_p.len() {
            self.log_p[id]
        } else {
            debug_assert!(id < self.total_size());
            self.byte_log_p
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_COUNT
    }

    pub fn is_byte(&self, id: u32) -> bool {
        let id = id as usize;
        id >= self.tokens.len() && id < self.total_size()
    }

    pub fn byte_id(&self, byte: u8) -> u32 {
        (self.tokens.len() + byte as usize) as u32
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn cls_id(&self) -> u32 {
        2
    }

    pub fn sep_id(&self) -> u32 {
        3
    }

    pub fn mask_id(&self) -> u32 {
        4
    }

    /// Maximum-probability segmentation by dynamic programming over the
    /// substring lattice. Characters not covered by any token fall back to
    /// their UTF-8 byte tokens, so every input is encodable.
    pub fn encode(&self, sentence: &str) -> Segmentation {
        if sentence.is_empty() {
            return Segmentation {
                ids: Vec::new(),
                log_prob_sum: 0.0,
            };
        }
        // char-boundary byte offsets, plus the end sentinel
        let mut starts: Vec<usize> = sentence.char_indices().map(|(i, _)| i).collect();
        starts.push(sentence.len());
        let n = starts.len() - 1;

        const NO_EDGE: u32 = u32::MAX;
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back_from = vec![0usize; n + 1];
        let mut back_id = vec![NO_EDGE; n + 1];
        best[0] = 0.0;

        for end in 1..=n {
            let window_start = end.saturating_sub(self.max_token_chars);
            for start in window_start..end {
                if best[start] == f64::NEG_INFINITY {
                    continue;
                }
                let piece = &sentence[starts[start]..starts[end]];
                if let Some(&id) = self.lookup.get(piece) {
                    let score = best[start] + self.log_p[id as usize];
                    if score > best[end] {
                        best[end] = score;
                        back_from[end] = start;
                        back_id[end] = id;
                    }
                }
            }
            // byte fallback for the single character ending here
            let start = end - 1;
            if best[start] > f64::NEG_INFINITY {
                let piece = &sentence[starts[start]..starts[end]];
                let score = best[start] + self.byte_log_p * piece.len() as f64;
                if score > best[end] {
                    best[end] = score;
                    back_from[end] = start;
                    back_id[end] = NO_EDGE;
                }
            }
        }

        let mut ids = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let start = back_from[pos];
            if back_id[pos] == NO_EDGE {
                let piece = &sentence[starts[start]..starts[pos]];
                for b in piece.bytes().rev() {
                    ids.push(self.byte_id(b));
                }
            } else {
                ids.push(back_id[pos]);
            }
            pos = start;
        }
        ids.reverse();

        let log_prob_sum = ids.iter().fold(0.0, |acc, &id| acc + self.log_p(id));
        Segmentation { ids, log_prob_sum }
    }

    /// Reassemble the surface string of a segmentation. Inverse of `encode`
    /// for any of its outputs.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            let idx = id as usize;
            if idx < self.tokens.len() {
                bytes.extend_from_slice(self.tokens[idx].as_bytes());
            } else if idx < self.total_size() {
                bytes.push((idx - self.tokens.len()) as u8);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Replace the EM-estimated probabilities with add-one-smoothed counts
    /// of the tokenizer's own segmentation of `corpus`. Kept for comparing
    /// the two probability sources when scoring vocabularies.
    pub fn recount_probs(&self, corpus: &Corpus) -> Result<Self, TokenizerError> {
        let learned_range = SPECIAL_COUNT..self.tokens.len();
        let mut counts = vec![0u64; self.tokens.len()];
        for sentence in corpus.iter() {
            for id in self.encode(sentence).ids {
                let id = id as usize;
                if learned_range.contains(&id) {
                    counts[id] += 1;
                }
            }
        }
        let learned_count = self.tokens.len() - SPECIAL_COUNT;
        let total: u64 = counts.iter().sum::<u64>() + learned_count as u64;
        let entries: Vec<(String, f64)> = learned_range
            .map(|id| {
                let p = (counts[id] + 1) as f64 / total as f64;
                (self.tokens[id].clone(), p.ln())
            })
            .collect();
        Self::from_entries(entries, self.requested_size)
    }

    /// Serialize as UTF-8 TSV: a `#` header block, then one
    /// `token<TAB>log_p` line per id, byte tokens last as `<0xNN>`.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_tsv()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("#version\t1\n");
        out.push_str("#specials\t");
        out.push_str(&SPECIAL_TOKENS.join(" "));
        out.push('\n');
        let _ = writeln!(out, "#requested_size\t{}", self.requested_size);
        for (tok, lp) in self.tokens.iter().zip(&self.log_p) {
            let _ = writeln!(out, "{tok}\t{lp}");
        }
        for b in 0..BYTE_TOKEN_COUNT {
            let _ = writeln!(out, "<0x{b:02X}>\t{}", self.byte_log_p);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tsv(&text, &path.display().to_string())
    }

    pub fn from_tsv(text: &str, origin: &str) -> Result<Self, TokenizerError> {
        let format_err = |line: usize, message: String| TokenizerError::Format {
            path: origin.to_string(),
            line,
            message,
        };

        let mut lines = text.lines().enumerate();
        let mut header: HashMap<String, String> = HashMap::new();
        let mut body: Vec<(usize, &str)> = Vec::new();
        for (idx, line) in &mut lines {
            if let Some(rest) = line.strip_prefix('#') {
                let (key, value) = rest
                    .split_once('\t')
                    .ok_or_else(|| format_err(idx + 1, "malformed header line".into()))?;
                header.insert(key.to_string(), value.to_string());
            } else {
                body.push((idx + 1, line));
            }
        }
        let version = header
            .get("version")
            .ok_or_else(|| format_err(1, "missing #version header".into()))?;
        if version != "1" {
            return Err(format_err(1, format!("unsupported version {version}")));
        }
        let requested_size: usize = header
            .get("requested_size")
            .ok_or_else(|| format_err(1, "missing #requested_size header".into()))?
            .parse()
            .map_err(|_| format_err(1, "#requested_size is not an integer".into()))?;
        let specials = header
            .get("specials")
            .ok_or_else(|| format_err(1, "missing #specials header".into()))?;
        if specials != &SPECIAL_TOKENS.join(" ") {
            return Err(format_err(1, format!("unsupported specials list {specials:?}")));
        }

        if body.len() < SPECIAL_COUNT + BYTE_TOKEN_COUNT {
            let last = body.last().map(|(l, _)| *l).unwrap_or(1);
            return Err(format_err(last, "file truncated".into()));
        }

        let mut parsed: Vec<(usize, String, f64)> = Vec::with_capacity(body.len());
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(body.len());
        for (line_no, line) in &body {
            let (tok, lp) = line
                .split_once('\t')
                .ok_or_else(|| format_err(*line_no, "expected token<TAB>log_p".into()))?;
            let lp: f64 = lp
                .parse()
                .map_err(|_| format_err(*line_no, format!("bad log probability {lp:?}")))?;
            if let Some(_first) = seen.insert(tok, *line_no) {
                return Err(TokenizerError::DuplicateToken {
                    token: tok.to_string(),
                    line: Some(*line_no),
                });
            }
            parsed.push((*line_no, tok.to_string(), lp));
        }

        // fixed sections: specials, learned, then exactly 256 byte tokens
        for (i, spec) in SPECIAL_TOKENS.iter().enumerate() {
            if parsed[i].1 != *spec {
                return Err(format_err(
                    parsed[i].0,
                    format!("expected special token {spec}, found {:?}", parsed[i].1),
                ));
            }
        }
        let byte_section = parsed.len() - BYTE_TOKEN_COUNT;
        for (i, entry) in parsed[byte_section..].iter().enumerate() {
            let expected = format!("<0x{i:02X}>");
            if entry.1 != expected {
                return Err(format_err(
                    entry.0,
                    format!("expected byte token {expected}, found {:?}", entry.1),
                ));
            }
        }

        let entries: Vec<(String, f64)> = parsed[SPECIAL_COUNT..byte_section]
            .iter()
            .map(|(_, tok, lp)| (tok.clone(), *lp))
            .collect();
        let mut tok = Self::from_entries(entries, requested_size)?;

        // preserve the stored order and reserved prices exactly so that
        // load(save(t)) round-trips bit for bit
        tok.tokens = parsed[..byte_section].iter().map(|(_, t, _)| t.clone()).collect();
        tok.log_p = parsed[..byte_section].iter().map(|(_, _, lp)| *lp).collect();
        tok.byte_log_p = parsed[byte_section].2;
        tok.lookup = tok
            .tokens
            .iter()
            .enumerate()
            .map(|(id, t)| (t.clone().into_boxed_str(), id as u32))
            .collect();
        tok.max_token_chars = tok
            .tokens
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> UnigramTokenizer {
        UnigramTokenizer::from_entries(
            vec![
                ("a".to_string(), 0.25f64.ln()),
                ("b".to_string(), 0.25f64.ln()),
                ("ab".to_string(), 0.5f64.ln()),
            ],
            8,
        )
        .unwrap()
    }

    #[test]
    fn viterbi_picks_best_split() {
        let tok = toy();
        let seg = tok.encode("abab");
        let ab = tok.id_of("ab").unwrap();
        assert_eq!(seg.ids, vec![ab, ab]);
        assert!((seg.log_prob_sum - 2.0 * 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_token_input() {
        let tok = toy();
        let seg = tok.encode("ab");
        assert_eq!(seg.ids.len(), 1);
        assert!((seg.log_prob_sum - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unseen_character_falls_back_to_bytes() {
        let tok = toy();
        let seg = tok.encode("a\u{00E9}b"); // é: two UTF-8 bytes
        assert!(seg.ids.iter().any(|&id| tok.is_byte(id)));
        assert_eq!(tok.decode(&seg.ids), "a\u{00E9}b");
    }

    #[test]
    fn round_trip_of_surfaces() {
        let tok = toy();
        for input in ["abab", "ba", "a b ab", "\u{3042}ab\u{3042}"] {
            let seg = tok.encode(input);
            assert_eq!(tok.decode(&seg.ids), input, "round trip failed for {input:?}");
        }
    }

    #[test]
    fn log_prob_sum_is_forward_fold() {
        let tok = toy();
        let seg = tok.encode("abba b");
        let folded = seg.ids.iter().fold(0.0, |acc, &id| acc + tok.log_p(id));
        assert_eq!(seg.log_prob_sum.to_bits(), folded.to_bits());
    }

    #[test]
    fn empty_sentence() {
        let tok = toy();
        let seg = tok.encode("");
        assert!(seg.ids.is_empty());
        assert_eq!(seg.log_prob_sum, 0.0);
    }

    #[test]
    fn specials_priced_below_learned() {
        let tok = toy();
        let min_learned = 0.25f64.ln();
        assert!(tok.log_p(tok.mask_id()) < min_learned);
        assert!(tok.log_p(tok.byte_id(0)) < min_learned);
    }

    #[test]
    fn from_entries_rejects_unnormalized() {
        let err = UnigramTokenizer::from_entries(
            vec![("a".to_string(), 0.4f64.ln()), ("b".to_string(), 0.5f64.ln())],
            8,
        )
        .unwrap_err();
        assert!(matches!(err, TokenizerError::NotNormalized { .. }));
        assert!(err.to_string().contains("normalization failure"));
    }

    #[test]
    fn recounted_probs_stay_normalized_and_reorder_by_usage() {
        let corpus =
            crate::corpus::Corpus::from_sentences(["abab abab", "ab ab ab"], "xx").unwrap();
        let tok = toy();
        let recounted = tok.recount_probs(&corpus).unwrap();
        let sum: f64 = (SPECIAL_COUNT..recounted.vocab_len())
            .map(|id| recounted.log_p(id as u32).exp())
            .sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // "ab" dominates the corpus, so its recounted probability leads
        let ab = recounted.id_of("ab").unwrap();
        let a = recounted.id_of("a").unwrap();
        assert!(recounted.log_p(ab) > recounted.log_p(a));
        // smoothing keeps unused tokens finite
        assert!(recounted.log_p(a).is_finite());
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let tok = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.tsv");
        tok.save(&path).unwrap();
        let loaded = UnigramTokenizer::load(&path).unwrap();
        assert_eq!(loaded.tokens(), tok.tokens());
        assert_eq!(loaded.requested_size(), tok.requested_size());
        for id in 0..tok.vocab_len() as u32 {
            assert_eq!(loaded.log_p(id).to_bits(), tok.log_p(id).to_bits());
        }
        assert_eq!(loaded.byte_log_p.to_bits(), tok.byte_log_p.to_bits());
        // and a second generation is byte-identical on disk
        let path2 = dir.path().join("tok2.tsv");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_duplicate_token() {
        let tok = toy();
        let mut tsv = tok.to_tsv();
        tsv.push_str("ab\t-0.5\n");
        let err = UnigramTokenizer::from_tsv(&tsv, "test").unwrap_err();
        assert!(matches!(err, TokenizerError::DuplicateToken { .. }));
    }

    #[test]
    fn load_rejects_bad_normalization() {
        let text = "#version\t1\n#specials\t<pad> <unk> <cls> <sep> <mask>\n#requested_size\t8\n".to_string()
            + &SPECIAL_TOKENS.map(|s| format!("{s}\t-10\n")).join("")
            + &format!("a\t{}\n", 0.45f64.ln())
            + &format!("b\t{}\n", 0.45f64.ln())
            + &(0..256).map(|b| format!("<0x{b:02X}>\t-10\n")).collect::<String>();
        let err = UnigramTokenizer::from_tsv(&text, "test").unwrap_err();
        assert!(matches!(err, TokenizerError::NotNormalized { .. }));
    }

    #[test]
    fn load_reports_line_numbers() {
        let tok = toy();
        let tsv = tok.to_tsv().replace("a\t", "a "); // break one line's tab
        let err = UnigramTokenizer::from_tsv(&tsv, "test").unwrap_err();
        match err {
            TokenizerError::Format { line, .. } => assert!(line > 0),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
