//! Corpus ingestion and normalization.
//!
//! Text is normalized to NFKC with runs of whitespace collapsed to single
//! spaces; one input line is one sentence and empty lines are dropped.
//! Ingestion is deterministic: the same files in the same order always yield
//! byte-identical corpora.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no usable sentences for '{lang}' after normalization")]
    EmptyCorpus { lang: String },
    #[error("requested {requested} parallel pairs but only {available} valid rows found")]
    InsufficientPairs { requested: usize, available: usize },
}

/// Normalize one raw line: NFKC, then collapse whitespace runs.
/// Returns `None` when nothing remains.
pub fn normalize_line(line: &str) -> Option<String> {
    let folded: String = line.nfkc().collect();
    let mut out = String::with_capacity(folded.len());
    for word in folded.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// An ordered, normalized monolingual corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    sentences: Vec<String>,
    lang: String,
    source_uri: String,
}

/// Manifest emitted next to ingested corpora: language, counts and a
/// content hash so replays can be verified byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub lang: String,
    pub sentence_count: usize,
    pub sha256: String,
}

impl Corpus {
    /// Build a corpus from pre-split sentences, applying the same
    /// normalization as file ingestion.
    pub fn from_sentences<I, S>(sentences: I, lang: &str) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let normalized: Vec<String> = sentences
            .into_iter()
            .filter_map(|s| normalize_line(s.as_ref()))
            .collect();
        if normalized.is_empty() {
            return Err(CorpusError::EmptyCorpus {
                lang: lang.to_string(),
            });
        }
        Ok(Self {
            sentences: normalized,
            lang: lang.to_string(),
            source_uri: "memory".to_string(),
        })
    }

    /// Read newline-delimited UTF-8 files in the given order, keeping at most
    /// `limit` sentences.
    pub fn ingest(
        paths: &[PathBuf],
        lang: &str,
        limit: Option<usize>,
    ) -> Result<Self, CorpusError> {
        let mut sentences = Vec::new();
        'files: for path in paths {
            let file = File::open(path).map_err(|source| CorpusError::Io {
                path: path.clone(),
                source,
            })?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|source| CorpusError::Io {
                    path: path.clone(),
                    source,
                })?;
                if let Some(sentence) = normalize_line(&line) {
                    sentences.push(sentence);
                    if limit.is_some_and(|l| sentences.len() >= l) {
                        break 'files;
                    }
                }
            }
        }
        if sentences.is_empty() {
            return Err(CorpusError::EmptyCorpus {
                lang: lang.to_string(),
            });
        }
        let source_uri = paths
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        Ok(Self {
            sentences,
            lang: lang.to_string(),
            source_uri,
        })
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn source_uri(&self) -> &str {
        &self.source_uri
    }

    /// Split into `n` contiguous shards. Concatenating the shards in order
    /// reproduces the original sentence sequence exactly.
    pub fn shards(&self, n: usize) -> Vec<Corpus> {
        let n = n.max(1).min(self.sentences.len().max(1));
        let base = self.sentences.len() / n;
        let extra = self.sentences.len() % n;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for i in 0..n {
            let take = base + usize::from(i < extra);
            let end = start + take;
            out.push(Corpus {
                sentences: self.sentences[start..end].to_vec(),
                lang: self.lang.clone(),
                source_uri: format!("{}#shard{}", self.source_uri, i),
            });
            start = end;
        }
        out
    }

    /// SHA-256 over the sentence sequence (each sentence followed by `\n`).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.sentences {
            hasher.update(s.as_bytes());
            hasher.update(b"\n");
        }
        to_hex(&hasher.finalize())
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            lang: self.lang.clone(),
            sentence_count: self.sentences.len(),
            sha256: self.content_hash(),
        }
    }

    /// Write one sentence per line; re-ingesting the result yields an
    /// identical corpus.
    pub fn write_to(&self, path: &Path) -> Result<(), CorpusError> {
        let mut file = File::create(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for s in &self.sentences {
            writeln!(file, "{s}").map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Parallel sentence pairs between a target and a source language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<(String, String)>,
    target_lang: String,
    source_lang: String,
    skipped_rows: usize,
}

impl ParallelCorpus {
    /// Read a two-column tab-separated file (`target<TAB>source`) and keep
    /// the first `k` valid pairs. Rows without a tab or with an empty side
    /// are skipped and counted.
    pub fn ingest(
        path: &Path,
        target_lang: &str,
        source_lang: &str,
        k: usize,
    ) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut pairs = Vec::with_capacity(k);
        let mut skipped = 0usize;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if pairs.len() >= k {
                break;
            }
            match parse_pair(&line) {
                Some(pair) => pairs.push(pair),
                None => {
                    // blank lines are neither pairs nor malformed rows
                    if !line.trim().is_empty() {
                        skipped += 1;
                    }
                }
            }
        }
        if pairs.len() < k {
            return Err(CorpusError::InsufficientPairs {
                requested: k,
                available: pairs.len(),
            });
        }
        Ok(Self {
            pairs,
            target_lang: target_lang.to_string(),
            source_lang: source_lang.to_string(),
            skipped_rows: skipped,
        })
    }

    pub fn from_pairs<I>(
        pairs: I,
        target_lang: &str,
        source_lang: &str,
    ) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let normalized: Vec<(String, String)> = pairs
            .into_iter()
            .filter_map(|(t, s)| Some((normalize_line(&t)?, normalize_line(&s)?)))
            .collect();
        if normalized.is_empty() {
            return Err(CorpusError::InsufficientPairs {
                requested: 1,
                available: 0,
            });
        }
        Ok(Self {
            pairs: normalized,
            target_lang: target_lang.to_string(),
            source_lang: source_lang.to_string(),
            skipped_rows: 0,
        })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn target_lang(&self) -> &str {
        &self.target_lang
    }

    pub fn source_lang(&self) -> &str {
        &self.source_lang
    }

    /// Malformed rows encountered (and skipped) during ingestion.
    pub fn skipped_rows(&self) -> usize {
        self.skipped_rows
    }

    /// The target-side sentences as a monolingual corpus.
    pub fn target_side(&self) -> Result<Corpus, CorpusError> {
        Corpus::from_sentences(self.pairs.iter().map(|(t, _)| t.as_str()), &self.target_lang)
    }

    /// The source-side sentences as a monolingual corpus.
    pub fn source_side(&self) -> Result<Corpus, CorpusError> {
        Corpus::from_sentences(self.pairs.iter().map(|(_, s)| s.as_str()), &self.source_lang)
    }
}

fn parse_pair(line: &str) -> Option<(String, String)> {
    let (target, source) = line.split_once('\t')?;
    let target = normalize_line(target)?;
    let source = normalize_line(source)?;
    Some((target, source))
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
