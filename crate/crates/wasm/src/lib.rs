//! Browser bindings for the interactive demo page.
//!
//! Three operations are exposed, each taking and returning JSON strings so
//! the page needs no generated glue beyond the wasm-bindgen loader:
//!
//! - `vocab_search_trace`: run the ALP stopping-rule search on pasted text
//!   and return the trace for plotting
//! - `sparsemax_compare`: sparsemax vs softmax on a score vector
//! - `harmony_playground`: synthesize parallel-sentence states around 2-D
//!   language positions and return harmony weights and fused logits
//!
//! The heavy lifting happens in `unibridge-core`; everything here is
//! argument plumbing, kept as plain functions so the host test suite can
//! call them without a wasm runtime.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use unibridge_core::fusion::{harmony_weights, rank_sources, HiddenStateSet, Pooling};
use unibridge_core::vocab_search::{search_with, CorpusBackend, SearchConfig};
use unibridge_core::{fuse_logits, sparsemax, Corpus};

#[wasm_bindgen(start)]
pub fn start() {
    console_error_panic_hook::set_once();
}

#[wasm_bindgen]
pub fn vocab_search_trace(
    corpus_text: &str,
    initial_size: usize,
    max_size: usize,
    step: usize,
    stop_threshold: f64,
    seed: u64,
) -> Result<String, JsValue> {
    search_trace_json(corpus_text, initial_size, max_size, step, stop_threshold, seed)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sparsemax_compare(scores_json: &str) -> Result<String, JsValue> {
    sparsemax_compare_json(scores_json).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn harmony_playground(request_json: &str) -> Result<String, JsValue> {
    harmony_playground_json(request_json).map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize)]
struct TraceOut {
    steps: Vec<TraceStep>,
    chosen_size: usize,
    stop_reason: String,
    sentences: usize,
}

#[derive(Serialize)]
struct TraceStep {
    requested_size: usize,
    actual_size: usize,
    alp: f64,
    delta: Option<f64>,
}

pub fn search_trace_json(
    corpus_text: &str,
    initial_size: usize,
    max_size: usize,
    step: usize,
    stop_threshold: f64,
    seed: u64,
) -> Result<String, String> {
    let corpus = Corpus::from_sentences(corpus_text.lines(), "pasted")
        .map_err(|e| e.to_string())?;
    let cfg = SearchConfig {
        initial_size,
        max_size,
        step,
        stop_threshold,
    };
    let mut backend = CorpusBackend::new(&corpus, seed);
    let (_, trace) = search_with(&mut backend, &cfg).map_err(|e| e.to_string())?;
    let out = TraceOut {
        steps: trace
            .steps
            .iter()
            .map(|s| TraceStep {
                requested_size: s.requested_size,
                actual_size: s.actual_size,
                alp: s.alp,
                delta: s.delta,
            })
            .collect(),
        chosen_size: trace.chosen_size,
        stop_reason: format!("{:?}", trace.stop_reason),
        sentences: corpus.len(),
    };
    Ok(serde_json::to_string(&out).expect("serializable"))
}

#[derive(Serialize)]
struct SparsemaxOut {
    sparsemax: Vec<f64>,
    softmax: Vec<f64>,
    support: usize,
}

pub fn sparsemax_compare_json(scores_json: &str) -> Result<String, String> {
    let scores: Vec<f64> =
        serde_json::from_str(scores_json).map_err(|e| format!("bad scores: {e}"))?;
    if scores.is_empty() {
        return Err("need at least one score".into());
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err("scores must be finite".into());
    }
    let sparse = sparsemax(&scores);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let soft: Vec<f64> = exp.into_iter().map(|e| e / total).collect();
    let out = SparsemaxOut {
        support: sparse.iter().filter(|&&w| w > 0.0).count(),
        sparsemax: sparse,
        softmax: soft,
    };
    Ok(serde_json::to_string(&out).expect("serializable"))
}

#[derive(Deserialize)]
struct HarmonyRequest {
    /// Parallel sentences per language.
    k: usize,
    /// Spread of the shared per-sentence offsets around each language.
    jitter: f64,
    target: LanguagePoint,
    sources: Vec<LanguagePoint>,
    seed: u64,
}

#[derive(Deserialize)]
struct LanguagePoint {
    lang: String,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct HarmonyOut {
    sources: Vec<String>,
    raw_l2: Vec<f64>,
    distances: Vec<f64>,
    weights: Vec<f64>,
    ranking: Vec<String>,
    fused: Vec<f64>,
}

/// Build K pooled "sentence states" per language: each sentence is a shared
/// random offset (the content) added to the language's position, so
/// languages at nearby positions produce nearby state sets, exactly the
/// structure harmony weights measure.
pub fn harmony_playground_json(request_json: &str) -> Result<String, String> {
    let req: HarmonyRequest =
        serde_json::from_str(request_json).map_err(|e| format!("bad request: {e}"))?;
    if req.k == 0 {
        return Err("k must be at least 1".into());
    }
    if req.sources.is_empty() {
        return Err("need at least one source language".into());
    }

    // deterministic per-sentence offsets shared across languages
    let mut state = req.seed.wrapping_add(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let offsets: Vec<(f64, f64)> = (0..req.k)
        .map(|_| (next() * 2.0 * req.jitter, next() * 2.0 * req.jitter))
        .collect();

    let states = |point: &LanguagePoint| -> Result<HiddenStateSet, String> {
        let data: Vec<f32> = offsets
            .iter()
            .flat_map(|(dx, dy)| [(point.x + dx) as f32, (point.y + dy) as f32])
            .collect();
        HiddenStateSet::new(&point.lang, Pooling::Mean, req.k, 2, data).map_err(|e| e.to_string())
    };

    let target = states(&req.target)?;
    let sources: Vec<HiddenStateSet> =
        req.sources.iter().map(&states).collect::<Result<_, _>>()?;
    let weights = harmony_weights(&target, &sources).map_err(|e| e.to_string())?;

    // one toy logit vector per source so fusion has something to blend:
    // each source votes for itself
    let n = sources.len();
    let per_source: std::collections::BTreeMap<String, Vec<f64>> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut logits = vec![0.0; n];
            logits[i] = 1.0;
            (s.lang().to_string(), logits)
        })
        .collect();
    let fused = fuse_logits(&weights, &per_source).map_err(|e| e.to_string())?;

    let out = HarmonyOut {
        sources: weights.sources.clone(),
        raw_l2: weights.raw_l2.clone(),
        distances: weights.distances.clone(),
        ranking: rank_sources(&weights),
        weights: weights.weights,
        fused,
    };
    Ok(serde_json::to_string(&out).expect("serializable"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_trace_runs_on_pasted_text() {
        let text = "uno dos tres\ndos tres cuatro\ntres cuatro uno\n".repeat(20);
        let json = search_trace_json(&text, 16, 60, 8, 5.0, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["chosen_size"].as_u64().unwrap() >= 16);
        assert!(!v["steps"].as_array().unwrap().is_empty());
        assert_eq!(v["sentences"], 60);
    }

    #[test]
    fn search_trace_rejects_empty_input() {
        assert!(search_trace_json("   \n", 16, 60, 8, 5.0, 1).is_err());
    }

    #[test]
    fn sparsemax_output_is_sparser_than_softmax() {
        let json = sparsemax_compare_json("[2.0, 1.9, 0.0, -1.0]").unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let sparse: Vec<f64> = v["sparsemax"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let soft: Vec<f64> = v["softmax"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        assert!((sparse.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(v["support"], 2);
        assert!(soft.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn harmony_prefers_the_nearest_language() {
        let req = r#"{
            "k": 10, "jitter": 0.5, "seed": 3,
            "target": {"lang": "quy", "x": 0.0, "y": 0.0},
            "sources": [
                {"lang": "near", "x": 0.5, "y": 0.0},
                {"lang": "far", "x": 4.0, "y": 3.0}
            ]
        }"#;
        let json = harmony_playground_json(req).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let weights: Vec<f64> = v["weights"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(weights[0] > weights[1]);
        assert_eq!(v["ranking"][0], "near");
        let fused: Vec<f64> = v["fused"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn harmony_rejects_empty_sources() {
        let req = r#"{"k": 1, "jitter": 0.1, "seed": 0,
            "target": {"lang": "t", "x": 0, "y": 0}, "sources": []}"#;
        assert!(harmony_playground_json(req).is_err());
    }
}
