//! Target embedding construction from a source model's embeddings.
//!
//! Three phases partition the target vocabulary:
//!
//! 1. lexical overlap: tokens whose surface string exists in the source
//!    vocabulary copy the source embedding bit for bit (leading special
//!    tokens are copied positionally);
//! 2. semantic pairs: among the remaining tokens, mutually-best pairs under
//!    cosine similarity of the two static embeddings inherit their partner's
//!    source embedding;
//! 3. weighted synthesis: every other token with a usable static row gets a
//!    sparsemax-weighted convex combination of the already-initialized
//!    anchors most similar to it in the target static space.
//!
//! Tokens with no usable static row (or no anchors at all) are recorded as
//! unresolved and sampled from a normal distribution matched to the copied
//! rows' per-dimension statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::static_embed::{cosine, EmbeddingMatrix};

#[derive(Debug, Error)]
pub enum EmbedInitError {
    #[error("static embedding dimensions differ: target {target_dim} vs source {source_dim}")]
    StaticDimMismatch { target_dim: usize, source_dim: usize },
    #[error("{which} has {rows} rows but the vocabulary has {vocab} tokens")]
    RowCountMismatch {
        which: &'static str,
        rows: usize,
        vocab: usize,
    },
    #[error("special token copy needs {needed} source rows, source has {available}")]
    MissingSpecials { needed: usize, available: usize },
}

#[derive(Debug, Clone)]
pub struct InitConfig {
    /// Leading ids treated as corresponding specials and copied
    /// positionally, regardless of surface form.
    pub special_count: usize,
    /// Row-block size for the similarity matrix; any value gives the same
    /// result.
    pub block_size: usize,
    /// Seed for the unresolved-token fallback sampler.
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            special_count: 0,
            block_size: 256,
            seed: 0,
        }
    }
}

/// How each target token was initialized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    /// Target token strings copied by surface match (phase 1).
    pub overlap: BTreeSet<String>,
    /// `(target id, source id)` mutually-best pairs (phase 2).
    pub semantic_pairs: Vec<(u32, u32)>,
    /// Target id -> `(anchor target id, weight)` with strictly positive
    /// weights summing to 1 (phase 3).
    pub weighted: BTreeMap<u32, Vec<(u32, f64)>>,
    /// Fell through every phase; initialized by the fallback sampler.
    pub unresolved: Vec<u32>,
}

impl AlignmentPlan {
    /// Verify that overlap, pair, weighted and unresolved ids partition the
    /// target vocabulary.
    pub fn check_partition(&self, vt: &[String]) -> Result<(), String> {
        let index: HashMap<&str, u32> = vt
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let mut seen: Vec<u8> = vec![0; vt.len()];
        let mut mark = |id: u32, what: &str| -> Result<(), String> {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| format!("{what} id {id} out of range"))?;
            *slot += 1;
            if *slot > 1 {
                return Err(format!("{what} id {id} assigned twice"));
            }
            Ok(())
        };
        for token in &self.overlap {
            let id = *index
                .get(token.as_str())
                .ok_or_else(|| format!("overlap token {token:?} not in vocabulary"))?;
            mark(id, "overlap")?;
        }
        for (i, _) in &self.semantic_pairs {
            mark(*i, "semantic")?;
        }
        for id in self.weighted.keys() {
            mark(*id, "weighted")?;
        }
        for id in &self.unresolved {
            mark(*id, "unresolved")?;
        }
        if let Some(missing) = seen.iter().position(|&s| s == 0) {
            return Err(format!("token id {missing} not covered by any phase"));
        }
        Ok(())
    }

    pub fn counts(&self) -> PhaseCounts {
        PhaseCounts {
            overlap: self.overlap.len(),
            semantic: self.semantic_pairs.len(),
            weighted: self.weighted.len(),
            unresolved: self.unresolved.len(),
        }
    }

    /// Per-token provenance, for the audit JSON.
    pub fn report(&self, vt: &[String], vs: &[String]) -> PlanReport {
        let mut entries: Vec<TokenProvenance> = Vec::with_capacity(vt.len());
        let pair_of: HashMap<u32, u32> = self.semantic_pairs.iter().copied().collect();
        for (id, token) in vt.iter().enumerate() {
            let id = id as u32;
            let (phase, source_token, anchors) = if self.overlap.contains(token) {
                (Phase::Overlap, Some(token.clone()), Vec::new())
            } else if let Some(&j) = pair_of.get(&id) {
                (Phase::Semantic, Some(vs[j as usize].clone()), Vec::new())
            } else if let Some(weights) = self.weighted.get(&id) {
                let anchors = weights
                    .iter()
                    .map(|(anchor, w)| AnchorWeight {
                        token: vt[*anchor as usize].clone(),
                        weight: *w,
                    })
                    .collect();
                (Phase::Weighted, None, anchors)
            } else {
                (Phase::Unresolved, None, Vec::new())
            };
            entries.push(TokenProvenance {
                id,
                token: token.clone(),
                phase,
                source_token,
                anchors,
            });
        }
        PlanReport {
            target_vocab: vt.len(),
            counts: self.counts(),
            tokens: entries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub overlap: usize,
    pub semantic: usize,
    pub weighted: usize,
    pub unresolved: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Overlap,
    Semantic,
    Weighted,
    Unresolved,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorWeight {
    pub token: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenProvenance {
    pub id: u32,
    pub token: String,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_token: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub anchors: Vec<AnchorWeight>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReport {
    pub target_vocab: usize,
    pub counts: PhaseCounts,
    pub tokens: Vec<TokenProvenance>,
}

/// Exact surface-string intersection of two vocabularies.
pub fn lexical_overlap(vt: &[String], vs: &[String]) -> BTreeSet<String> {
    let source: HashSet<&str> = vs.iter().map(String::as_str).collect();
    vt.iter()
        .filter(|t| source.contains(t.as_str()))
        .cloned()
        .collect()
}

/// All `(i, j)` where `sim[i][j]` is both the row-`i` maximum and the
/// column-`j` maximum, ties broken toward the lowest index on both axes.
pub fn mutual_argmax_pairs(sim: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = sim.len();
    let cols = if rows == 0 { 0 } else { sim[0].len() };
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let row_argmax: Vec<usize> = sim.iter().map(|row| first_argmax(row.iter().copied())).collect();
    let mut col_argmax = vec![0usize; cols];
    for j in 0..cols {
        col_argmax[j] = first_argmax((0..rows).map(|i| sim[i][j]));
    }
    (0..rows)
        .filter(|&i| col_argmax[row_argmax[i]] == i)
        .map(|i| (i, row_argmax[i]))
        .collect()
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// Euclidean projection onto the probability simplex (sort-based).
///
/// Output is non-negative, sums to 1, and zeroes out low entries, unlike
/// softmax.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "sparsemax of an empty vector");
    let mut sorted: Vec<f64> = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumulative = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (k, &value) in sorted.iter().enumerate() {
        cumulative += value;
        if 1.0 + (k + 1) as f64 * value > cumulative {
            support = k + 1;
            support_sum = cumulative;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Build the target embedding matrix and the plan describing it.
///
/// `e_s` is the source model embedding over `vs`; `f_t`/`f_s` are static
/// embeddings over `vt`/`vs` with a common dimension (independent of the
/// model dimension).
pub fn build_target_embedding(
    vt: &[String],
    vs: &[String],
    e_s: &EmbeddingMatrix,
    f_t: &EmbeddingMatrix,
    f_s: &EmbeddingMatrix,
    cfg: &InitConfig,
) -> Result<(EmbeddingMatrix, AlignmentPlan), EmbedInitError> {
    if f_t.dim() != f_s.dim() {
        return Err(EmbedInitError::StaticDimMismatch {
            target_dim: f_t.dim(),
            source_dim: f_s.dim(),
        });
    }
    check_rows("source model embedding", e_s.rows(), vs.len())?;
    check_rows("target static embedding", f_t.rows(), vt.len())?;
    check_rows("source static embedding", f_s.rows(), vs.len())?;
    if cfg.special_count > vs.len() || cfg.special_count > vt.len() {
        return Err(EmbedInitError::MissingSpecials {
            needed: cfg.special_count,
            available: vs.len().min(vt.len()),
        });
    }

    let dim = e_s.dim();
    let mut target = EmbeddingMatrix::zeros(vt.to_vec(), dim);
    let mut plan = AlignmentPlan::default();
    let mut initialized: Vec<bool> = vec![false; vt.len()];
    let mut used_source: Vec<bool> = vec![false; vs.len()];

    let source_index: HashMap<&str, u32> = vs
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i as u32))
        .collect();

    // phase 1: specials positionally, then exact surface matches
    for id in 0..vt.len() {
        let source_id = if id < cfg.special_count {
            Some(id as u32)
        } else {
            source_index.get(vt[id].as_str()).copied()
        };
        if let Some(j) = source_id {
            target.set_row(id as u32, e_s.row(j), true);
            initialized[id] = true;
            used_source[j as usize] = true;
            plan.overlap.insert(vt[id].clone());
        }
    }

    // static rows usable for similarity: trained and nonzero
    let usable = |m: &EmbeddingMatrix, id: u32| -> bool {
        m.is_trained(id) && m.row(id).iter().any(|v| *v != 0.0)
    };

    // phase 2: mutual-argmax pairs over the leftover tokens
    let cand_t: Vec<u32> = (0..vt.len() as u32)
        .filter(|&i| !initialized[i as usize] && usable(f_t, i))
        .collect();
    let cand_s: Vec<u32> = (0..vs.len() as u32)
        .filter(|&j| !used_source[j as usize] && usable(f_s, j))
        .collect();
    let pairs = blocked_mutual_argmax(&cand_t, &cand_s, f_t, f_s, cfg.block_size);
    for &(i, j) in &pairs {
        target.set_row(i, e_s.row(j), true);
        initialized[i as usize] = true;
        plan.semantic_pairs.push((i, j));
    }

    // phase 3: sparsemax-weighted sums over the anchors
    let anchors: Vec<u32> = (0..vt.len() as u32)
        .filter(|&i| initialized[i as usize] && usable(f_t, i))
        .collect();
    let mut fallback_rows: Vec<u32> = Vec::new();
    for id in 0..vt.len() as u32 {
        if initialized[id as usize] {
            continue;
        }
        if !usable(f_t, id) || anchors.is_empty() {
            fallback_rows.push(id);
            continue;
        }
        let scores: Vec<f64> = anchors
            .iter()
            .map(|&a| cosine(f_t.row(id), f_t.row(a)).expect("usable rows have nonzero norm"))
            .collect();
        let weights = sparsemax(&scores);
        let mut support: Vec<(u32, f64)> = anchors
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&a, &w)| (a, w))
            .collect();
        support.sort_by_key(|(a, _)| *a);
        let mut row = vec![0.0f64; dim];
        for &(anchor, w) in &support {
            for (acc, &v) in row.iter_mut().zip(target.row(anchor)) {
                *acc += w * v as f64;
            }
        }
        let row: Vec<f32> = row.into_iter().map(|v| v as f32).collect();
        target.set_row(id, &row, true);
        plan.weighted.insert(id, support);
        initialized[id as usize] = true;
    }

    // fallback: sample from the copied rows' per-dimension statistics
    if !fallback_rows.is_empty() {
        let copied: Vec<u32> = plan
            .overlap
            .iter()
            .filter_map(|t| vt.iter().position(|v| v == t).map(|i| i as u32))
            .chain(plan.semantic_pairs.iter().map(|(i, _)| *i))
            .collect();
        let (mean, std) = if copied.is_empty() {
            row_stats((0..e_s.rows() as u32).map(|j| e_s.row(j)), dim)
        } else {
            row_stats(copied.iter().map(|&i| target.row(i)), dim)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for &id in &fallback_rows {
            let row: Vec<f32> = (0..dim)
                .map(|d| (mean[d] + std[d] * standard_normal(&mut rng)) as f32)
                .collect();
            target.set_row(id, &row, true);
            plan.unresolved.push(id);
        }
    }

    Ok((target, plan))
}

fn check_rows(which: &'static str, rows: usize, vocab: usize) -> Result<(), EmbedInitError> {
    if rows != vocab {
        Err(EmbedInitError::RowCountMismatch { which, rows, vocab })
    } else {
        Ok(())
    }
}

/// Mutual argmax over `cosine(f_t[row], f_s[col])`, processing rows in
/// fixed-size blocks so only `block x |cols|` scores are live at once. The
/// running column maxima use strict improvement, which reproduces the
/// lowest-index tie rule regardless of block size.
fn blocked_mutual_argmax(
    rows: &[u32],
    cols: &[u32],
    f_t: &EmbeddingMatrix,
    f_s: &EmbeddingMatrix,
    block_size: usize,
) -> Vec<(u32, u32)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    let block_size = block_size.max(1);
    let mut row_argmax: Vec<usize> = vec![0; rows.len()];
    let mut col_best: Vec<f64> = vec![f64::NEG_INFINITY; cols.len()];
    let mut col_argmax: Vec<usize> = vec![0; cols.len()];

    let mut row = vec![0.0f64; cols.len()];
    for (block_no, block) in rows.chunks(block_size).enumerate() {
        for (local, &i) in block.iter().enumerate() {
            for (slot, &j) in row.iter_mut().zip(cols) {
                *slot = cosine(f_t.row(i), f_s.row(j)).expect("usable rows have nonzero norm");
            }
            let global_row = block_no * block_size + local;
            row_argmax[global_row] = first_argmax(row.iter().copied());
            for (j, &score) in row.iter().enumerate() {
                if score > col_best[j] {
                    col_best[j] = score;
                    col_argmax[j] = global_row;
                }
            }
        }
    }

    (0..rows.len())
        .filter(|&r| col_argmax[row_argmax[r]] == r)
        .map(|r| (rows[r], cols[row_argmax[r]]))
        .collect()
}

fn row_stats<'a>(rows: impl Iterator<Item = &'a [f32]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    let mut n = 0.0f64;
    for row in rows {
        n += 1.0;
        for d in 0..dim {
            let x = row[d] as f64;
            let delta = x - mean[d];
            mean[d] += delta / n;
            m2[d] += delta * (x - mean[d]);
        }
    }
    let std = m2
        .iter()
        .map(|&v| if n > 1.0 { (v / (n - 1.0)).sqrt() } else { 0.0 })
        .collect();
    (mean, std)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the log argument is bounded away from zero
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Human-readable alignment illustration: semantic pairs and weighted-sum
/// anchor lists, a few rows per phase.
pub fn similarity_report(
    plan: &AlignmentPlan,
    vt: &[String],
    vs: &[String],
    max_rows: usize,
) -> String {
    let counts = plan.counts();
    let mut out = String::new();
    out.push_str(&format!(
        "target vocabulary: {} tokens\n  overlap {} | semantic {} | weighted {} | unresolved {}\n",
        vt.len(),
        counts.overlap,
        counts.semantic,
        counts.weighted,
        counts.unresolved
    ));
    out.push_str("\nsemantically aligned pairs (target <- source):\n");
    for (i, j) in plan.semantic_pairs.iter().take(max_rows) {
        out.push_str(&format!("  {:<20} <- {}\n", vt[*i as usize], vs[*j as usize]));
    }
    out.push_str("\nweighted-sum tokens (target <- heaviest anchors):\n");
    for (id, support) in plan.weighted.iter().take(max_rows) {
        let mut by_weight: Vec<&(u32, f64)> = support.iter().collect();
        by_weight.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let shown: Vec<String> = by_weight
            .iter()
            .take(8)
            .map(|(a, w)| format!("{} ({w:.3})", vt[*a as usize]))
            .collect();
        let rest = support.len().saturating_sub(8);
        let suffix = if rest > 0 {
            format!(" (+{rest} more)")
        } else {
            String::new()
        };
        out.push_str(&format!(
            "  {:<20} <- {}{}\n",
            vt[*id as usize],
            shown.join(", "),
            suffix
        ));
    }
    out
}
