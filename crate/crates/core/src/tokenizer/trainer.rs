//! EM training of the unigram model, SentencePiece style.
//!
//! The corpus is reduced to frequency-weighted units (whitespace-delimited
//! words plus the single-space unit for the gaps between them). Candidate
//! tokens are seeded from within-unit substrings, then alternating rounds of
//! expectation-maximization and utility pruning shrink the candidate set to
//! the requested size. Word characters are never pruned, so every training
//! word stays coverable without byte fallback; everything else competes on
//! expected count.
//!
//! Training is deterministic: hash maps are only used for counting and are
//! drained in sorted order, and the parallel E-step reduces fixed-size unit
//! blocks in index order so the result does not depend on the thread count.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::Corpus;

use super::{TokenizerError, UnigramTokenizer, SPECIAL_COUNT};

const MAX_SEED_TOKEN_CHARS: usize = 16;
const SEED_FREQ_FLOOR: u64 = 2;
const SEED_CAP_FACTOR: usize = 25;
const EM_ITERS_PER_ROUND: usize = 4;
const PRUNE_FRACTION: f64 = 0.25;
/// Units per E-step block; fixed so the reduction order (and therefore the
/// result) is independent of how many threads run.
const E_STEP_BLOCK: usize = 512;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Worker threads for the E-step. The result is identical for any value.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

/// Train a unigram tokenizer of at most `requested_size` tokens.
///
/// Deterministic for a fixed `(corpus, requested_size, seed)`; the EM path
/// itself draws no random numbers, so `seed` is accepted for interface
/// stability only.
pub fn train(
    corpus: &Corpus,
    requested_size: usize,
    seed: u64,
) -> Result<UnigramTokenizer, TokenizerError> {
    train_with_options(corpus, requested_size, seed, &TrainOptions::default())
}

pub fn train_with_options(
    corpus: &Corpus,
    requested_size: usize,
    _seed: u64,
    options: &TrainOptions,
) -> Result<UnigramTokenizer, TokenizerError> {
    let (units, required_chars) = collect_units(corpus)?;

    let minimum = SPECIAL_COUNT + required_chars.len() + 1;
    if requested_size < minimum {
        return Err(TokenizerError::RequestedSizeTooSmall {
            requested: requested_size,
            minimum,
            char_count: required_chars.len(),
        });
    }

    let mut candidates = seed_candidates(&units, &required_chars, requested_size);
    let lattices = build_lattices(&units, &candidates);

    let budget = requested_size - SPECIAL_COUNT;
    let threads = options.threads.max(1);
    loop {
        let mut counts = Vec::new();
        for _ in 0..EM_ITERS_PER_ROUND {
            counts = e_step(&lattices, &units, &candidates, threads);
            m_step(&mut candidates, &counts);
        }
        let alive = candidates.iter().filter(|c| c.alive).count();
        if alive <= budget {
            break;
        }
        if !prune(&mut candidates, &counts, alive - budget) {
            break;
        }
    }

    let mut entries: Vec<(String, f64)> = candidates
        .iter()
        .filter(|c| c.alive)
        .map(|c| (c.text.clone(), c.log_p))
        .collect();
    // exact renormalization so the sum-to-one invariant holds at 1e-6
    let lse = log_sum_exp(entries.iter().map(|(_, lp)| *lp));
    for (_, lp) in &mut entries {
        *lp -= lse;
    }
    UnigramTokenizer::from_entries(entries, requested_size)
}

struct Unit {
    text: String,
    freq: f64,
    /// Char-boundary byte offsets, with the end sentinel.
    starts: Vec<u32>,
}

struct Candidate {
    text: String,
    log_p: f64,
    alive: bool,
    prunable: bool,
}

#[derive(Clone, Copy)]
struct Edge {
    start: u32,
    end: u32,
    cand: u32,
}

struct Lattice {
    positions: usize,
    /// Edges sorted by (end, start) for the forward pass.
    edges: Vec<Edge>,
    /// Permutation of `edges` sorted by start descending, for backward.
    by_start_desc: Vec<u32>,
}

fn collect_units(corpus: &Corpus) -> Result<(Vec<Unit>, BTreeSet<char>), TokenizerError> {
    let mut word_freq: HashMap<&str, u64> = HashMap::new();
    let mut gaps: u64 = 0;
    for sentence in corpus.iter() {
        let mut words = 0u64;
        for word in sentence.split(' ') {
            *word_freq.entry(word).or_insert(0) += 1;
            words += 1;
        }
        gaps += words.saturating_sub(1);
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::CorpusTooSmall);
    }

    let mut required_chars = BTreeSet::new();
    for word in word_freq.keys() {
        required_chars.extend(word.chars());
    }

    let mut units: Vec<(String, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.to_string(), f))
        .collect();
    if gaps > 0 {
        units.push((" ".to_string(), gaps));
    }
    units.sort_by(|a, b| a.0.cmp(&b.0));

    let units = units
        .into_iter()
        .map(|(text, freq)| {
            let mut starts: Vec<u32> = text.char_indices().map(|(i, _)| i as u32).collect();
            starts.push(text.len() as u32);
            Unit {
                text,
                freq: freq as f64,
                starts,
            }
        })
        .collect();
    Ok((units, required_chars))
}

fn seed_candidates(
    units: &[Unit],
    required_chars: &BTreeSet<char>,
    requested_size: usize,
) -> Vec<Candidate> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for unit in units {
        let n = unit.starts.len() - 1;
        for i in 0..n {
            let max_j = (i + MAX_SEED_TOKEN_CHARS).min(n);
            for j in i + 1..=max_j {
                let piece = &unit.text[unit.starts[i] as usize..unit.starts[j] as usize];
                *counts.entry(piece).or_insert(0) += unit.freq as u64;
            }
        }
    }

    let mut singles: Vec<(&str, u64)> = Vec::new();
    let mut multi: Vec<(&str, u64)> = Vec::new();
    for (piece, freq) in &counts {
        if piece.chars().nth(1).is_none() {
            singles.push((piece, *freq));
        } else if *freq >= SEED_FREQ_FLOOR {
            multi.push((piece, *freq));
        }
    }
    singles.sort_by(|a, b| a.0.cmp(b.0));

    // score = frequency * length; keep the best multis under the cap
    let cap = SEED_CAP_FACTOR * requested_size;
    let multi_budget = cap.saturating_sub(singles.len());
    multi.sort_by(|a, b| {
        let score_a = a.1 * a.0.chars().count() as u64;
        let score_b = b.1 * b.0.chars().count() as u64;
        score_b.cmp(&score_a).then_with(|| a.0.cmp(b.0))
    });
    multi.truncate(multi_budget);

    let mut all: Vec<(&str, u64)> = singles.into_iter().chain(multi).collect();
    all.sort_by(|a, b| a.0.cmp(b.0));

    let total_score: f64 = all
        .iter()
        .map(|(piece, freq)| (*freq as f64) * piece.chars().count() as f64)
        .sum();
    all.into_iter()
        .map(|(piece, freq)| {
            let score = (freq as f64) * piece.chars().count() as f64;
            let single_char = piece.chars().count() == 1;
            let is_required =
                single_char && required_chars.contains(&piece.chars().next().unwrap());
            Candidate {
                text: piece.to_string(),
                log_p: (score / total_score).ln(),
                alive: true,
                prunable: !is_required,
            }
        })
        .collect()
}

fn build_lattices(units: &[Unit], candidates: &[Candidate]) -> Vec<Lattice> {
    let index: HashMap<&str, u32> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.text.as_str(), i as u32))
        .collect();
    units
        .iter()
        .map(|unit| {
            let n = unit.starts.len() - 1;
            let mut edges = Vec::new();
            for i in 0..n {
                let max_j = (i + MAX_SEED_TOKEN_CHARS).min(n);
                for j in i + 1..=max_j {
                    let piece = &unit.text[unit.starts[i] as usize..unit.starts[j] as usize];
                    if let Some(&cand) = index.get(piece) {
                        edges.push(Edge {
                            start: i as u32,
                            end: j as u32,
                            cand,
                        });
                    }
                }
            }
            edges.sort_by_key(|e| (e.end, e.start));
            let mut by_start_desc: Vec<u32> = (0..edges.len() as u32).collect();
            by_start_desc.sort_by_key(|&i| std::cmp::Reverse(edges[i as usize].start));
            Lattice {
                positions: n,
                edges,
                by_start_desc,
            }
        })
        .collect()
}

fn e_step(
    lattices: &[Lattice],
    units: &[Unit],
    candidates: &[Candidate],
    threads: usize,
) -> Vec<f64> {
    let blocks: Vec<(usize, usize)> = (0..units.len())
        .step_by(E_STEP_BLOCK)
        .map(|lo| (lo, (lo + E_STEP_BLOCK).min(units.len())))
        .collect();

    let block_counts: Vec<Vec<f64>> = if threads <= 1 || blocks.len() <= 1 {
        blocks
            .iter()
            .map(|&(lo, hi)| e_step_block(&lattices[lo..hi], &units[lo..hi], candidates))
            .collect()
    } else {
        let workers = threads.min(blocks.len());
        let per_worker: Vec<Vec<(usize, Vec<f64>)>> = std::thread::scope(|scope| {
            let blocks = &blocks;
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        let mut i = w;
                        while i < blocks.len() {
                            let (lo, hi) = blocks[i];
                            out.push((i, e_step_block(&lattices[lo..hi], &units[lo..hi], candidates)));
                            i += workers;
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; blocks.len()];
        for partial in per_worker {
            for (i, counts) in partial {
                slots[i] = Some(counts);
            }
        }
        slots.into_iter().map(|s| s.expect("block computed")).collect()
    };

    // merge in block order: the reduction order is fixed
    let mut counts = vec![0.0f64; candidates.len()];
    for block in block_counts {
        for (acc, c) in counts.iter_mut().zip(block) {
            *acc += c;
        }
    }
    counts
}

fn e_step_block(lattices: &[Lattice], units: &[Unit], candidates: &[Candidate]) -> Vec<f64> {
    let mut counts = vec![0.0f64; candidates.len()];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    for (lattice, unit) in lattices.iter().zip(units) {
        let n = lattice.positions;
        alpha.clear();
        alpha.resize(n + 1, f64::NEG_INFINITY);
        beta.clear();
        beta.resize(n + 1, f64::NEG_INFINITY);
        alpha[0] = 0.0;
        beta[n] = 0.0;

        for e in &lattice.edges {
            let c = &candidates[e.cand as usize];
            if !c.alive {
                continue;
            }
            let contribution = alpha[e.start as usize] + c.log_p;
            alpha[e.end as usize] = log_add_exp(alpha[e.end as usize], contribution);
        }
        let total = alpha[n];
        if total == f64::NEG_INFINITY {
            // unit no longer coverable (its only token was pruned); it
            // simply stops contributing counts
            continue;
        }
        for &idx in &lattice.by_start_desc {
            let e = lattice.edges[idx as usize];
            let c = &candidates[e.cand as usize];
            if !c.alive {
                continue;
            }
            let contribution = c.log_p + beta[e.end as usize];
            beta[e.start as usize] = log_add_exp(beta[e.start as usize], contribution);
        }
        for e in &lattice.edges {
            let c = &candidates[e.cand as usize];
            if !c.alive {
                continue;
            }
            let posterior =
                (alpha[e.start as usize] + c.log_p + beta[e.end as usize] - total).exp();
            counts[e.cand as usize] += unit.freq * posterior;
        }
    }
    counts
}

fn m_step(candidates: &mut [Candidate], counts: &[f64]) {
    let total: f64 = candidates
        .iter()
        .zip(counts)
        .filter(|(c, _)| c.alive)
        .map(|(_, &n)| n)
        .sum();
    for (cand, &count) in candidates.iter_mut().zip(counts) {
        if !cand.alive {
            continue;
        }
        if count <= 0.0 {
            if cand.prunable {
                cand.alive = false;
            } else {
                // keep required characters coverable no matter what
                cand.log_p = (f64::MIN_POSITIVE).ln();
            }
            continue;
        }
        cand.log_p = (count / total).ln();
    }
}

/// Remove the lowest-utility prunable candidates: 25% of them per round, or
/// just enough to reach the target, whichever is smaller. Returns false when
/// nothing could be pruned.
fn prune(candidates: &mut [Candidate], counts: &[f64], over_budget: usize) -> bool {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].alive && candidates[i].prunable)
        .collect();
    if order.is_empty() {
        return false;
    }
    order.sort_by(|&a, &b| {
        counts[a]
            .partial_cmp(&counts[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| candidates[a].text.cmp(&candidates[b].text))
    });
    let quarter = ((order.len() as f64) * PRUNE_FRACTION).ceil() as usize;
    let remove = quarter.max(1).min(over_budget).min(order.len());
    for &idx in &order[..remove] {
        candidates[idx].alive = false;
    }
    true
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(sentences: &[&str]) -> Corpus {
        Corpus::from_sentences(sentences.iter().copied(), "xx").unwrap()
    }

    #[test]
    fn learns_chars_and_a_merged_token() {
        let tok = train(&corpus(&["abab abab"]), 8, 0).unwrap();
        assert!(tok.vocab_len() <= 8);
        assert!(tok.id_of("a").is_some());
        assert!(tok.id_of("b").is_some());
        // budget is three learned tokens: both chars plus one multi-char piece
        let multi: Vec<&String> = tok
            .tokens()
            .iter()
            .skip(SPECIAL_COUNT)
            .filter(|t| t.chars().count() > 1)
            .collect();
        assert_eq!(multi.len(), 1, "vocab {:?}", tok.tokens());
        assert!(["ab", "ba", "aba", "bab", "abab"].contains(&multi[0].as_str()));
    }

    #[test]
    fn respects_requested_size() {
        let c = corpus(&["the cat sat on the mat", "the cat ate the rat", "a cat saw a rat"]);
        let tok = train(&c, 30, 0).unwrap();
        assert!(tok.vocab_len() <= 30);
    }

    #[test]
    fn is_deterministic() {
        let c = corpus(&["one two three two one", "three three two"]);
        let t1 = train(&c, 20, 7).unwrap();
        let t2 = train(&c, 20, 7).unwrap();
        assert_eq!(t1.tokens(), t2.tokens());
        for id in 0..t1.vocab_len() as u32 {
            assert_eq!(t1.log_p(id).to_bits(), t2.log_p(id).to_bits());
        }
    }

    #[test]
    fn thread_count_does_not_change_the_result() {
        let c = corpus(&["alpha beta gamma", "beta gamma delta", "gamma delta alpha"]);
        let t1 = train_with_options(&c, 25, 0, &TrainOptions { threads: 1 }).unwrap();
        let t4 = train_with_options(&c, 25, 0, &TrainOptions { threads: 4 }).unwrap();
        assert_eq!(t1.tokens(), t4.tokens());
        for id in 0..t1.vocab_len() as u32 {
            assert_eq!(t1.log_p(id).to_bits(), t4.log_p(id).to_bits());
        }
    }

    #[test]
    fn too_small_request_reports_achievable_size() {
        let err = train(&corpus(&["abcdefg"]), 8, 0).unwrap_err();
        match err {
            TokenizerError::RequestedSizeTooSmall {
                requested,
                minimum,
                char_count,
            } => {
                assert_eq!(requested, 8);
                assert_eq!(char_count, 7);
                assert_eq!(minimum, SPECIAL_COUNT + 7 + 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let c = corpus(&["sum to one sum to one", "one two one"]);
        let tok = train(&c, 20, 0).unwrap();
        let sum: f64 = (SPECIAL_COUNT..tok.vocab_len())
            .map(|id| tok.log_p(id as u32).exp())
            .sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum = {sum}");
    }

    #[test]
    fn saturated_corpus_returns_fewer_tokens() {
        let tok = train(&corpus(&["ab ab"]), 500, 0).unwrap();
        assert!(tok.vocab_len() < 500);
        assert!(tok.vocab_len() >= SPECIAL_COUNT + 2);
    }

    #[test]
    fn round_trips_training_text() {
        let c = corpus(&["mir ist kalt", "kalt ist es", "es ist mir egal"]);
        let tok = train(&c, 25, 0).unwrap();
        for sentence in c.iter() {
            let seg = tok.encode(sentence);
            assert_eq!(tok.decode(&seg.ids), sentence);
        }
    }
}
