//! Average log probability scoring and the vocabulary-size stopping rule.
//!
//! The search starts at an initial size, grows the vocabulary by a fixed
//! step, and stops once the ALP improvement falls to the threshold or the
//! size would exceed the cap (in which case it builds once at the cap and
//! stops). A trainer that returns fewer tokens than requested is saturated:
//! stepping further would rebuild the identical tokenizer, so the search
//! records the step once and stops with a zero delta.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::tokenizer::{self, TokenizerError, TrainOptions, UnigramTokenizer};

#[derive(Debug, Error)]
pub enum VocabSearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("threshold list is empty")]
    NoThresholds,
    #[error("training failed at size {at_size} after {} completed steps: {source}", .steps.len())]
    TrainingFailed {
        at_size: usize,
        /// Trace recorded up to the failure.
        steps: Vec<SearchStep>,
        #[source]
        source: TokenizerError,
    },
}

/// Parameters of the stopping-rule search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Initial vocabulary size.
    pub initial_size: usize,
    /// Hard cap the search never exceeds.
    pub max_size: usize,
    /// Size increment per step.
    pub step: usize,
    /// Stop once the ALP delta is at or below this (nats per sentence).
    pub stop_threshold: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            initial_size: 7000,
            max_size: 60000,
            step: 1000,
            stop_threshold: 5.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), VocabSearchError> {
        if self.initial_size < 1 {
            return Err(VocabSearchError::InvalidConfig(
                "initial_size must be at least 1".into(),
            ));
        }
        if self.max_size < self.initial_size {
            return Err(VocabSearchError::InvalidConfig(format!(
                "max_size {} is below initial_size {}",
                self.max_size, self.initial_size
            )));
        }
        if self.step < 1 {
            return Err(VocabSearchError::InvalidConfig("step must be at least 1".into()));
        }
        if self.stop_threshold.is_nan() || self.stop_threshold < 0.0 {
            return Err(VocabSearchError::InvalidConfig(
                "stop_threshold must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxSizeCap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchStep {
    pub requested_size: usize,
    pub actual_size: usize,
    pub alp: f64,
    /// ALP difference to the previous step; absent on the first step.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
    pub chosen_size: usize,
    pub stop_reason: StopReason,
}

impl SearchTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// CSV rows `size,alp,delta` for plotting the curve.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,alp,delta\n");
        for step in &self.steps {
            let delta = step.delta.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", step.actual_size, step.alp, delta));
        }
        out
    }
}

/// Average log probability of a tokenizer on a corpus: the mean over
/// sentences of the best segmentation's summed log probability (nats).
pub fn alp(corpus: &Corpus, tok: &UnigramTokenizer) -> f64 {
    let total: f64 = corpus.iter().map(|s| tok.encode(s).log_prob_sum).sum();
    total / corpus.len() as f64
}

/// One completed build during the search.
pub struct TrainedStep {
    pub tokenizer: UnigramTokenizer,
    pub actual_size: usize,
    pub alp: f64,
}

/// Supplies `(tokenizer, actual size, ALP)` per requested size.
///
/// Implementations must be deterministic and saturating: once a build
/// returns `actual_size < requested_size`, any larger request must return
/// the same tokenizer.
pub trait TrainerBackend {
    fn train_and_score(&mut self, requested_size: usize) -> Result<TrainedStep, VocabSearchError>;
}

/// The real backend: trains on a corpus and scores with [`alp`].
pub struct CorpusBackend<'a> {
    corpus: &'a Corpus,
    seed: u64,
    options: TrainOptions,
    recount_probs: bool,
}

impl<'a> CorpusBackend<'a> {
    pub fn new(corpus: &'a Corpus, seed: u64) -> Self {
        Self {
            corpus,
            seed,
            options: TrainOptions::default(),
            recount_probs: false,
        }
    }

    pub fn with_options(mut self, options: TrainOptions) -> Self {
        self.options = options;
        self
    }

    /// Score with probabilities re-counted from the tokenizer's own
    /// segmentation of the corpus instead of the EM estimates.
    pub fn with_recounted_probs(mut self, enabled: bool) -> Self {
        self.recount_probs = enabled;
        self
    }
}

impl TrainerBackend for CorpusBackend<'_> {
    fn train_and_score(&mut self, requested_size: usize) -> Result<TrainedStep, VocabSearchError> {
        let map_err = |source| VocabSearchError::TrainingFailed {
            at_size: requested_size,
            steps: Vec::new(),
            source,
        };
        let mut tok = tokenizer::train_with_options(self.corpus, requested_size, self.seed, &self.options)
            .map_err(map_err)?;
        if self.recount_probs {
            tok = tok.recount_probs(self.corpus).map_err(map_err)?;
        }
        let score = alp(self.corpus, &tok);
        Ok(TrainedStep {
            actual_size: tok.vocab_len(),
            alp: score,
            tokenizer: tok,
        })
    }
}

/// Run the stopping-rule search with the standard corpus backend.
pub fn search(
    corpus: &Corpus,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(UnigramTokenizer, SearchTrace), VocabSearchError> {
    search_with(&mut CorpusBackend::new(corpus, seed), cfg)
}

/// Run the stopping-rule search against any backend.
pub fn search_with<B: TrainerBackend + ?Sized>(
    backend: &mut B,
    cfg: &SearchConfig,
) -> Result<(UnigramTokenizer, SearchTrace), VocabSearchError> {
    cfg.validate()?;

    let mut steps: Vec<SearchStep> = Vec::new();
    let build = |backend: &mut B, size: usize, steps: &[SearchStep]| {
        backend.train_and_score(size).map_err(|e| match e {
            VocabSearchError::TrainingFailed { at_size, source, .. } => {
                VocabSearchError::TrainingFailed {
                    at_size,
                    steps: steps.to_vec(),
                    source,
                }
            }
            other => other,
        })
    };

    let mut size = cfg.initial_size;
    let first = build(backend, size, &steps)?;
    steps.push(SearchStep {
        requested_size: size,
        actual_size: first.actual_size,
        alp: first.alp,
        delta: None,
    });
    let mut tokenizer = first.tokenizer;
    let mut prev_alp = first.alp;
    let mut prev_actual = first.actual_size;

    let finish = |steps: Vec<SearchStep>, tokenizer, stop_reason| {
        let chosen_size = steps.last().expect("at least one step").actual_size;
        Ok((
            tokenizer,
            SearchTrace {
                steps,
                chosen_size,
                stop_reason,
            },
        ))
    };

    // already saturated at the initial size: the forced repeat step would
    // rebuild the same tokenizer with a zero delta
    if prev_actual < size {
        return finish(steps, tokenizer, StopReason::Threshold);
    }

    let mut delta = f64::INFINITY;
    loop {
        if delta <= cfg.stop_threshold {
            return finish(steps, tokenizer, StopReason::Threshold);
        }
        size += cfg.step;
        if size > cfg.max_size {
            size = cfg.max_size;
            let capped = build(backend, size, &steps)?;
            steps.push(SearchStep {
                requested_size: size,
                actual_size: capped.actual_size,
                alp: capped.alp,
                delta: Some(capped.alp - prev_alp),
            });
            return finish(steps, capped.tokenizer, StopReason::MaxSizeCap);
        }
        let built = build(backend, size, &steps)?;
        if built.actual_size == prev_actual && built.actual_size < size {
            // saturated: this is the same tokenizer again, delta is zero
            return finish(steps, tokenizer, StopReason::Threshold);
        }
        delta = built.alp - prev_alp;
        steps.push(SearchStep {
            requested_size: size,
            actual_size: built.actual_size,
            alp: built.alp,
            delta: Some(delta),
        });
        tokenizer = built.tokenizer;
        prev_alp = built.alp;
        prev_actual = built.actual_size;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub threshold: f64,
    pub chosen_size: usize,
    pub trace: SearchTrace,
}

/// One search per threshold. Builds are shared across thresholds through a
/// cache, which cannot change any result because every search walks the same
/// deterministic size sequence.
pub fn threshold_sweep(
    corpus: &Corpus,
    cfg: &SearchConfig,
    thresholds: &[f64],
    seed: u64,
) -> Result<Vec<SweepEntry>, VocabSearchError> {
    threshold_sweep_with(&mut CorpusBackend::new(corpus, seed), cfg, thresholds)
}

pub fn threshold_sweep_with<B: TrainerBackend + ?Sized>(
    backend: &mut B,
    cfg: &SearchConfig,
    thresholds: &[f64],
) -> Result<Vec<SweepEntry>, VocabSearchError> {
    if thresholds.is_empty() {
        return Err(VocabSearchError::NoThresholds);
    }
    let mut caching = CachingBackend {
        inner: backend,
        cache: std::collections::BTreeMap::new(),
    };
    let mut out = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let cfg_t = SearchConfig {
            stop_threshold: threshold,
            ..*cfg
        };
        let (_, trace) = search_with(&mut caching, &cfg_t)?;
        out.push(SweepEntry {
            threshold,
            chosen_size: trace.chosen_size,
            trace,
        });
    }
    Ok(out)
}

struct CachingBackend<'a, B: TrainerBackend + ?Sized> {
    inner: &'a mut B,
    cache: std::collections::BTreeMap<usize, (UnigramTokenizer, usize, f64)>,
}

impl<B: TrainerBackend + ?Sized> TrainerBackend for CachingBackend<'_, B> {
    fn train_and_score(&mut self, requested_size: usize) -> Result<TrainedStep, VocabSearchError> {
        if let Some((tok, actual, score)) = self.cache.get(&requested_size) {
            return Ok(TrainedStep {
                tokenizer: tok.clone(),
                actual_size: *actual,
                alp: *score,
            });
        }
        let step = self.inner.train_and_score(requested_size)?;
        self.cache.insert(
            requested_size,
            (step.tokenizer.clone(), step.actual_size, step.alp),
        );
        Ok(step)
    }
}
