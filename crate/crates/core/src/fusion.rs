//! Harmony weights over source languages and prediction fusion.
//!
//! Each language contributes one pooled hidden-state vector per parallel
//! sentence. The distance between a target and a source language is the mean
//! Euclidean distance over the K aligned pairs; harmony weights are the
//! softmax of the inverse distances, and fused logits are the weighted sum
//! of the per-source logits. Hidden states arrive as files (`UBHS` binary
//! plus a JSON sidecar); producing them is the encoder's business, not ours.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt::{self, BinFormatError};

pub const HIDDEN_STATE_MAGIC: &[u8; 4] = b"UBHS";

/// Distances are floored here before inversion so identical representations
/// stay finite (and dominate the softmax).
pub const DISTANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("hidden-state set must contain at least one vector")]
    EmptySet,
    #[error("row {row} of {lang:?} hidden states contains a non-finite value")]
    NonFinite { lang: String, row: usize },
    #[error("pairing error: target has K={target_k} sentences, source {lang:?} has K={source_k}")]
    KMismatch {
        target_k: usize,
        source_k: usize,
        lang: String,
    },
    #[error("dimension mismatch: target d={target_dim}, source {lang:?} d={source_dim}")]
    DimMismatch {
        target_dim: usize,
        source_dim: usize,
        lang: String,
    },
    #[error("no source languages given")]
    NoSources,
    #[error("no logits supplied for source {0:?}")]
    MissingLogits(String),
    #[error("logits for {lang:?} have {found} values, expected {expected}")]
    LogitShapeMismatch {
        lang: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {message}")]
    Sidecar { path: String, message: String },
    #[error(transparent)]
    File(#[from] BinFormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Cls,
}

/// Pool per-token states into one sentence vector.
pub fn pool_states(token_states: &[Vec<f32>], pooling: Pooling) -> Vec<f32> {
    assert!(!token_states.is_empty(), "cannot pool an empty sentence");
    match pooling {
        Pooling::Cls => token_states[0].clone(),
        Pooling::Mean => {
            let dim = token_states[0].len();
            let mut out = vec![0.0f64; dim];
            for state in token_states {
                for (acc, &v) in out.iter_mut().zip(state) {
                    *acc += v as f64;
                }
            }
            out.into_iter()
                .map(|v| (v / token_states.len() as f64) as f32)
                .collect()
        }
    }
}

/// K pooled sentence vectors for one language.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateSet {
    lang: String,
    pooling: Pooling,
    k: usize,
    dim: usize,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    lang: String,
    pooling: Pooling,
    #[serde(rename = "K")]
    k: usize,
}

impl HiddenStateSet {
    pub fn new(
        lang: &str,
        pooling: Pooling,
        k: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, FusionError> {
        if k == 0 || dim == 0 {
            return Err(FusionError::EmptySet);
        }
        assert_eq!(data.len(), k * dim);
        for (row, chunk) in data.chunks(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(FusionError::NonFinite {
                    lang: lang.to_string(),
                    row,
                });
            }
        }
        Ok(Self {
            lang: lang.to_string(),
            pooling,
            k,
            dim,
            data,
        })
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Write the `UBHS` binary and its `{lang, pooling, K}` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        binfmt::write_matrix(path, HIDDEN_STATE_MAGIC, self.k, self.dim, &self.data, "")?;
        let sidecar = Sidecar {
            lang: self.lang.clone(),
            pooling: self.pooling,
            k: self.k,
        };
        let sidecar_path = Self::sidecar_path(path);
        std::fs::write(
            &sidecar_path,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )
        .map_err(|source| BinFormatError::Io {
            path: sidecar_path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let file = binfmt::read_matrix(path, HIDDEN_STATE_MAGIC)?;
        let sidecar_path = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar_path).map_err(|source| BinFormatError::Io {
            path: sidecar_path.display().to_string(),
            source,
        })?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| FusionError::Sidecar {
            path: sidecar_path.display().to_string(),
            message: e.to_string(),
        })?;
        if sidecar.k != file.rows {
            return Err(FusionError::Sidecar {
                path: sidecar_path.display().to_string(),
                message: format!("sidecar K={} but file has {} rows", sidecar.k, file.rows),
            });
        }
        Self::new(&sidecar.lang, sidecar.pooling, file.rows, file.dim, file.data)
    }
}

/// Mean Euclidean distance over the K aligned sentence pairs.
pub fn pairwise_distance(ht: &HiddenStateSet, hs: &HiddenStateSet) -> Result<f64, FusionError> {
    if ht.k != hs.k {
        return Err(FusionError::KMismatch {
            target_k: ht.k,
            source_k: hs.k,
            lang: hs.lang.clone(),
        });
    }
    if ht.dim != hs.dim {
        return Err(FusionError::DimMismatch {
            target_dim: ht.dim,
            source_dim: hs.dim,
            lang: hs.lang.clone(),
        });
    }
    let mut total = 0.0f64;
    for i in 0..ht.k {
        let mut sq = 0.0f64;
        for (&a, &b) in ht.row(i).iter().zip(hs.row(i)) {
            let d = a as f64 - b as f64;
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / ht.k as f64)
}

/// Per-source inverse distances and their softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonyWeights {
    /// Source languages, in the order they were supplied.
    pub sources: Vec<String>,
    /// Mean L2 distance per source, before flooring and inversion.
    pub raw_l2: Vec<f64>,
    /// Inverse distances (1 / floored mean L2); strictly positive.
    pub distances: Vec<f64>,
    /// Softmax of the inverse distances; sums to 1, strictly positive.
    pub weights: Vec<f64>,
}

/// Compute harmony weights between a target and N source languages.
pub fn harmony_weights(
    target: &HiddenStateSet,
    sources: &[HiddenStateSet],
) -> Result<HarmonyWeights, FusionError> {
    if sources.is_empty() {
        return Err(FusionError::NoSources);
    }
    let mut raw = Vec::with_capacity(sources.len());
    let mut inverse = Vec::with_capacity(sources.len());
    for source in sources {
        let mean = pairwise_distance(target, source)?;
        raw.push(mean);
        inverse.push(1.0 / mean.max(DISTANCE_FLOOR));
    }
    let max = inverse.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = inverse.iter().map(|d| (d - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let weights: Vec<f64> = exp.into_iter().map(|e| e / total).collect();
    Ok(HarmonyWeights {
        sources: sources.iter().map(|s| s.lang.clone()).collect(),
        raw_l2: raw,
        distances: inverse,
        weights,
    })
}

/// Element-wise weighted sum of the per-source logits. Flattened matrices
/// are fine; shapes just have to agree.
pub fn fuse_logits(
    weights: &HarmonyWeights,
    per_source: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<f64>, FusionError> {
    let mut fused: Option<Vec<f64>> = None;
    for (lang, weight) in weights.sources.iter().zip(&weights.weights) {
        let logits = per_source
            .get(lang)
            .ok_or_else(|| FusionError::MissingLogits(lang.clone()))?;
        match &mut fused {
            None => fused = Some(logits.iter().map(|v| v * weight).collect()),
            Some(acc) => {
                if acc.len() != logits.len() {
                    return Err(FusionError::LogitShapeMismatch {
                        lang: lang.clone(),
                        expected: acc.len(),
                        found: logits.len(),
                    });
                }
                for (a, v) in acc.iter_mut().zip(logits) {
                    *a += v * weight;
                }
            }
        }
    }
    fused.ok_or(FusionError::NoSources)
}

/// Sources by weight, descending; ties break by language tag.
pub fn rank_sources(weights: &HarmonyWeights) -> Vec<String> {
    let mut order: Vec<usize> = (0..weights.sources.len()).collect();
    order.sort_by(|&a, &b| {
        weights.weights[b]
            .partial_cmp(&weights.weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| weights.sources[a].cmp(&weights.sources[b]))
    });
    order.into_iter().map(|i| weights.sources[i].clone()).collect()
}

/// The fusion report emitted by the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionReport {
    pub target: String,
    pub sources: Vec<String>,
    pub raw_l2: Vec<f64>,
    /// Inverse distances, as used by the softmax.
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    pub ranking: Vec<String>,
}

impl FusionReport {
    pub fn new(target: &str, weights: &HarmonyWeights) -> Self {
        Self {
            target: target.to_string(),
            sources: weights.sources.clone(),
            raw_l2: weights.raw_l2.clone(),
            distances: weights.distances.clone(),
            weights: weights.weights.clone(),
            ranking: rank_sources(weights),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(lang: &str, rows: &[&[f32]]) -> HiddenStateSet {
        let dim = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        HiddenStateSet::new(lang, Pooling::Mean, rows.len(), dim, data).unwrap()
    }

    #[test]
    fn distance_of_identical_sets_is_zero() {
        let a = set("aa", &[&[0.5, 1.5], &[2.0, -1.0]]);
        assert_eq!(pairwise_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five_triangle() {
        let a = set("aa", &[&[0.0, 0.0]]);
        let b = set("bb", &[&[3.0, 4.0]]);
        assert!((pairwise_distance(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mean_over_pairs() {
        let a = set("aa", &[&[0.0], &[0.0]]);
        let b = set("bb", &[&[1.0], &[3.0]]);
        assert!((pairwise_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn k_mismatch_is_a_pairing_error() {
        let a = set("aa", &[&[0.0], &[1.0]]);
        let b = set("bb", &[&[1.0]]);
        assert!(matches!(
            pairwise_distance(&a, &b),
            Err(FusionError::KMismatch { .. })
        ));
    }

    #[test]
    fn equidistant_sources_weigh_uniformly() {
        let target = set("tt", &[&[0.0, 0.0]]);
        let sources = vec![
            set("s1", &[&[1.0, 0.0]]),
            set("s2", &[&[0.0, 1.0]]),
            set("s3", &[&[-1.0, 0.0]]),
        ];
        let hw = harmony_weights(&target, &sources).unwrap();
        for w in &hw.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-9);
        }
        let sum: f64 = hw.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn floored_zero_distance_dominates() {
        let target = set("tt", &[&[0.25, 0.25]]);
        let sources = vec![
            set("same", &[&[0.25, 0.25]]),
            set("far", &[&[1.25, 0.25]]),
            set("farther", &[&[0.25, 3.25]]),
        ];
        let hw = harmony_weights(&target, &sources).unwrap();
        assert!((hw.distances[0] - 1e8).abs() < 1.0);
        assert!(hw.weights[0] > 0.99);
    }

    #[test]
    fn hand_softmax_of_inverse_distances() {
        let target = set("tt", &[&[0.0]]);
        let sources = vec![set("near", &[&[1.0]]), set("far", &[&[2.0]])];
        let hw = harmony_weights(&target, &sources).unwrap();
        // inverses [1, 0.5] -> softmax = [0.6225, 0.3775]
        assert!((hw.weights[0] - 0.6225).abs() < 1e-4);
        assert!((hw.weights[1] - 0.3775).abs() < 1e-4);
        assert_eq!(rank_sources(&hw), vec!["near", "far"]);
    }

    #[test]
    fn single_source_fuses_bit_equal() {
        let target = set("tt", &[&[0.0]]);
        let sources = vec![set("only", &[&[1.0]])];
        let hw = harmony_weights(&target, &sources).unwrap();
        let logits: Vec<f64> = vec![0.1, -0.2, 0.3];
        let mut map = BTreeMap::new();
        map.insert("only".to_string(), logits.clone());
        let fused = fuse_logits(&hw, &map).unwrap();
        assert_eq!(fused, logits);
    }

    #[test]
    fn even_weights_average_logits() {
        let hw = HarmonyWeights {
            sources: vec!["a".into(), "b".into()],
            raw_l2: vec![1.0, 1.0],
            distances: vec![1.0, 1.0],
            weights: vec![0.5, 0.5],
        };
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), vec![1.0, 0.0]);
        map.insert("b".to_string(), vec![0.0, 1.0]);
        let fused = fuse_logits(&hw, &map).unwrap();
        assert_eq!(fused, vec![0.5, 0.5]);
    }

    #[test]
    fn identical_logits_are_a_fixed_point() {
        let hw = HarmonyWeights {
            sources: vec!["a".into(), "b".into(), "c".into()],
            raw_l2: vec![1.0, 2.0, 3.0],
            distances: vec![1.0, 0.5, 1.0 / 3.0],
            weights: vec![0.5, 0.3, 0.2],
        };
        let logits = vec![0.25, -1.5, 3.0];
        let mut map = BTreeMap::new();
        for lang in ["a", "b", "c"] {
            map.insert(lang.to_string(), logits.clone());
        }
        let fused = fuse_logits(&hw, &map).unwrap();
        for (f, l) in fused.iter().zip(&logits) {
            assert!((f - l).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_source_names_the_lang() {
        let hw = HarmonyWeights {
            sources: vec!["a".into(), "b".into()],
            raw_l2: vec![1.0, 1.0],
            distances: vec![1.0, 1.0],
            weights: vec![0.5, 0.5],
        };
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), vec![1.0]);
        let err = fuse_logits(&hw, &map).unwrap_err();
        assert!(err.to_string().contains("\"b\""));
    }

    #[test]
    fn uniform_weights_rank_lexicographically() {
        let hw = HarmonyWeights {
            sources: vec!["zh".into(), "ar".into(), "en".into()],
            raw_l2: vec![1.0; 3],
            distances: vec![1.0; 3],
            weights: vec![1.0 / 3.0; 3],
        };
        assert_eq!(rank_sources(&hw), vec!["ar", "en", "zh"]);
    }

    #[test]
    fn common_scaling_preserves_distance_order() {
        let target = set("tt", &[&[0.1, 0.4], &[0.3, -0.2]]);
        let sources = vec![
            set("s1", &[&[1.1, 0.4], &[0.3, 0.8]]),
            set("s2", &[&[0.6, 0.4], &[0.3, 0.3]]),
            set("s3", &[&[3.1, 0.4], &[0.3, -2.2]]),
        ];
        let base = harmony_weights(&target, &sources).unwrap();
        let scale = 7.5f32;
        let scaled_target = scale_set(&target, scale);
        let scaled_sources: Vec<HiddenStateSet> =
            sources.iter().map(|s| scale_set(s, scale)).collect();
        let scaled = harmony_weights(&scaled_target, &scaled_sources).unwrap();
        let order = |hw: &HarmonyWeights| {
            let mut idx: Vec<usize> = (0..hw.raw_l2.len()).collect();
            idx.sort_by(|&a, &b| hw.raw_l2[a].partial_cmp(&hw.raw_l2[b]).unwrap());
            idx
        };
        assert_eq!(order(&base), order(&scaled));
        assert_eq!(rank_sources(&base), rank_sources(&scaled));
        for (raw_scaled, raw) in scaled.raw_l2.iter().zip(&base.raw_l2) {
            assert!((raw_scaled - raw * scale as f64).abs() < 1e-5);
        }
    }

    fn scale_set(set: &HiddenStateSet, scale: f32) -> HiddenStateSet {
        let data: Vec<f32> = (0..set.k())
            .flat_map(|i| set.row(i).iter().map(move |v| v * scale))
            .collect();
        HiddenStateSet::new(set.lang(), set.pooling(), set.k(), set.dim(), data).unwrap()
    }

    #[test]
    fn five_sources_over_ten_parallel_sentences() {
        let dim = 4;
        let k = 10;
        let mk = |lang: &str, offset: f32| {
            let data: Vec<f32> = (0..k * dim)
                .map(|i| offset + (i % dim) as f32 * 0.25)
                .collect();
            HiddenStateSet::new(lang, Pooling::Mean, k, dim, data).unwrap()
        };
        let target = mk("tgt", 0.0);
        let sources: Vec<HiddenStateSet> = ["en", "zh", "ru", "ar", "ja"]
            .iter()
            .enumerate()
            .map(|(i, lang)| mk(lang, 0.5 + i as f32 * 0.5))
            .collect();
        let hw = harmony_weights(&target, &sources).unwrap();
        assert_eq!(hw.weights.len(), 5);
        let sum: f64 = hw.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(rank_sources(&hw)[0], "en");
    }

    #[test]
    fn two_equal_sources_halve_the_weight() {
        let target = set("tt", &[&[0.0, 0.0]]);
        let sources = vec![set("s1", &[&[1.0, 1.0]]), set("s2", &[&[1.0, 1.0]])];
        let hw = harmony_weights(&target, &sources).unwrap();
        assert!((hw.weights[0] - 0.5).abs() < 1e-12);
        assert!((hw.weights[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pooling_helpers() {
        let states = vec![vec![1.0f32, 2.0], vec![3.0, 4.0]];
        assert_eq!(pool_states(&states, Pooling::Mean), vec![2.0, 3.0]);
        assert_eq!(pool_states(&states, Pooling::Cls), vec![1.0, 2.0]);
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.ubhs");
        let states = set("quy", &[&[0.5, -0.5], &[1.5, 2.5]]);
        states.save(&path).unwrap();
        let loaded = HiddenStateSet::load(&path).unwrap();
        assert_eq!(loaded, states);
        assert!(dir.path().join("target.ubhs.json").exists());
    }

    #[test]
    fn report_serializes_with_all_fields() {
        let target = set("tt", &[&[0.0]]);
        let sources = vec![set("near", &[&[1.0]]), set("far", &[&[2.0]])];
        let hw = harmony_weights(&target, &sources).unwrap();
        let report = FusionReport::new("tt", &hw);
        let json = report.to_json();
        for key in ["target", "sources", "raw_l2", "distances", "weights", "ranking"] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
    }
}
