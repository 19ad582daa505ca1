//! End-to-end toy run on synthetic two-language data.
//!
//! The demo fabricates a source language from random syllables and a target
//! language that shares half its words and transliterates the other half
//! into Greek letters, so every pipeline phase has something to do: the
//! size search sees a real corpus, lexical overlap catches the shared
//! words, semantic alignment and sparsemax synthesis handle the
//! transliterated ones, a small linear masked-LM fit exercises the loss
//! functions and their gradients, and harmony weights fuse three source
//! variants. Everything is a pure function of the seed; rerunning with the
//! same seed reproduces every artifact byte for byte.
//!
//! The model here is a bag-of-embeddings linear predictor, deliberately
//! tiny; it exists to exercise the numerics, not to claim model quality.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use unibridge_core::embed_init::{similarity_report, PhaseCounts};
use unibridge_core::static_embed::all_token_strings;
use unibridge_core::tokenizer::{self, TrainOptions, SPECIAL_COUNT};
use unibridge_core::vocab_search::{search_with, CorpusBackend, SearchConfig, StopReason};
use unibridge_core::{
    build_target_embedding, fuse_logits, harmony_weights, mask_sample, pairwise_distance,
    rank_sources, Corpus, EmbeddingMatrix, FusionReport, HiddenStateSet, InitConfig, Matrix,
    Pooling, StaticTrainConfig, UnigramTokenizer,
};

use crate::commands::hex;
use crate::{stage_err, CliError};

const STAGE: &str = "demo";
const PARALLEL_K: usize = 10;
const MASK_PROB: f64 = 0.15;

pub struct DemoOutcome {
    pub summary_path: PathBuf,
    pub first_total: f64,
    pub last_total: f64,
    pub summary_sha256: String,
}

#[derive(Serialize)]
struct DemoSummary {
    seed: u64,
    beta: f64,
    steps: usize,
    chosen_vocab_size: usize,
    stop_reason: StopReason,
    plan: PhaseCounts,
    loss_first: f64,
    loss_last: f64,
    fusion_sources: Vec<String>,
    fusion_weights: Vec<f64>,
    fusion_ranking: Vec<String>,
    artifact_hashes: BTreeMap<String, String>,
}

pub fn run_demo(
    out_dir: &Path,
    seed: u64,
    beta: f64,
    steps: usize,
) -> Result<DemoOutcome, CliError> {
    if beta.is_nan() || beta < 0.0 {
        return Err(CliError::validation(STAGE, format!("beta must be >= 0, got {beta}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(STAGE, out_dir, e))?;
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();

    // --- synthetic two-language corpora -------------------------------
    let (target_sentences, source_sentences) = synth_corpora(seed);
    let target_corpus =
        Corpus::from_sentences(target_sentences.iter().map(String::as_str), "toy-target")
            .map_err(stage_err(STAGE))?;
    let source_corpus =
        Corpus::from_sentences(source_sentences.iter().map(String::as_str), "toy-source")
            .map_err(stage_err(STAGE))?;
    save(out_dir, &mut hashes, "corpus_target.txt", target_sentences.join("\n").as_bytes())?;
    save(out_dir, &mut hashes, "corpus_source.txt", source_sentences.join("\n").as_bytes())?;

    // --- stage 1: vocabulary size search ------------------------------
    let search_cfg = SearchConfig {
        initial_size: 80,
        max_size: 600,
        step: 40,
        stop_threshold: 5.0,
    };
    let mut backend = CorpusBackend::new(&target_corpus, seed)
        .with_options(TrainOptions { threads: 1 });
    let (target_tok, trace) = search_with(&mut backend, &search_cfg).map_err(stage_err(STAGE))?;
    save(out_dir, &mut hashes, "tokenizer_target.tsv", target_tok.to_tsv().as_bytes())?;
    save(out_dir, &mut hashes, "trace.json", trace.to_json().as_bytes())?;

    // a smaller source vocabulary splits words the target keeps whole,
    // which is what gives the semantic-alignment phase work to do
    let source_tok =
        tokenizer::train(&source_corpus, 150, seed).map_err(stage_err(STAGE))?;
    save(out_dir, &mut hashes, "tokenizer_source.tsv", source_tok.to_tsv().as_bytes())?;

    // --- stage 2: embedding initialization ----------------------------
    // both static spaces are trained on the target-language corpus; the
    // toy corpus is too small for frequency subsampling to help
    let static_cfg = StaticTrainConfig {
        dim: 24,
        epochs: 3,
        subsample_threshold: 1.0,
        ..Default::default()
    };
    let f_t = unibridge_core::train_static(&target_corpus, &target_tok, &static_cfg, seed + 10)
        .map_err(stage_err(STAGE))?;
    let f_s = unibridge_core::train_static(&target_corpus, &source_tok, &static_cfg, seed + 11)
        .map_err(stage_err(STAGE))?;
    // stand-in for a pretrained model's embedding table
    let model_cfg = StaticTrainConfig {
        dim: 32,
        epochs: 3,
        subsample_threshold: 1.0,
        ..Default::default()
    };
    let e_s = unibridge_core::train_static(&source_corpus, &source_tok, &model_cfg, seed + 12)
        .map_err(stage_err(STAGE))?;

    let vt = all_token_strings(&target_tok);
    let vs = all_token_strings(&source_tok);
    let init_cfg = InitConfig {
        special_count: SPECIAL_COUNT,
        block_size: 64,
        seed,
    };
    let (e_t, plan) = build_target_embedding(&vt, &vs, &e_s, &f_t, &f_s, &init_cfg)
        .map_err(stage_err(STAGE))?;
    {
        let path = out_dir.join("target_embedding.ubem");
        e_t.save(&path).map_err(stage_err(STAGE))?;
        hash_existing(&path, "target_embedding.ubem", &mut hashes)?;
    }
    let plan_report = plan.report(&vt, &vs);
    save(out_dir, &mut hashes, "plan.json", serde_json::to_string_pretty(&plan_report).unwrap().as_bytes())?;
    save(out_dir, &mut hashes, "similar_tokens.txt", similarity_report(&plan, &vt, &vs, 30).as_bytes())?;

    // --- stage 3: toy masked-LM fit with the KL regularizer -----------
    let fit = fit_linear_mlm(&target_corpus, &target_tok, &e_t, beta, steps, seed)?;
    save(out_dir, &mut hashes, "losses.csv", fit.csv.as_bytes())?;

    // --- stage 4: harmony weights over three source variants ----------
    let parallel: Vec<(&str, &str)> = target_sentences
        .iter()
        .map(String::as_str)
        .zip(source_sentences.iter().map(String::as_str))
        .take(PARALLEL_K)
        .collect();
    let target_states = pooled_states("toy-target", parallel.iter().map(|(t, _)| *t), &target_tok, &e_t)?;
    let src_states = pooled_states("src", parallel.iter().map(|(_, s)| *s), &source_tok, &e_s)?;
    // three source variants at increasing distance; the raw source states
    // are nearly identical to the target's (the embeddings were copied),
    // which a real encoder would never produce, so all three are offset
    let near = perturbed(&src_states, "src-near", 0.4, seed + 19)?;
    let mid = perturbed(&src_states, "src-mid", 0.8, seed + 20)?;
    let far = perturbed(&src_states, "src-far", 2.0, seed + 21)?;
    for (name, states) in [
        ("hidden_target.ubhs", &target_states),
        ("hidden_src_near.ubhs", &near),
        ("hidden_src_mid.ubhs", &mid),
        ("hidden_src_far.ubhs", &far),
    ] {
        let path = out_dir.join(name);
        states.save(&path).map_err(stage_err(STAGE))?;
        hash_existing(&path, name, &mut hashes)?;
    }
    let sources = vec![near, mid, far];
    // sanity: distances are defined for every pair
    for s in &sources {
        pairwise_distance(&target_states, s).map_err(stage_err(STAGE))?;
    }
    let weights = harmony_weights(&target_states, &sources).map_err(stage_err(STAGE))?;
    let fusion_report = FusionReport::new(target_states.lang(), &weights);
    save(out_dir, &mut hashes, "fusion.json", fusion_report.to_json().as_bytes())?;

    // fuse one logit vector per source, derived from each source's mean state
    let per_source: BTreeMap<String, Vec<f64>> = sources
        .iter()
        .map(|s| {
            let mean = mean_state(s);
            (s.lang().to_string(), fit.project(&mean))
        })
        .collect();
    let fused = fuse_logits(&weights, &per_source).map_err(stage_err(STAGE))?;
    save(out_dir, &mut hashes, "fused_logits.json", serde_json::to_string(&fused).unwrap().as_bytes())?;

    // --- summary -------------------------------------------------------
    let summary = DemoSummary {
        seed,
        beta,
        steps,
        chosen_vocab_size: trace.chosen_size,
        stop_reason: trace.stop_reason,
        plan: plan.counts(),
        loss_first: fit.first_total,
        loss_last: fit.last_total,
        fusion_sources: weights.sources.clone(),
        fusion_weights: weights.weights.clone(),
        fusion_ranking: rank_sources(&weights),
        artifact_hashes: hashes.clone(),
    };
    let summary_bytes = serde_json::to_string_pretty(&summary).unwrap();
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, &summary_bytes)
        .map_err(|e| CliError::io(STAGE, &summary_path, e))?;

    Ok(DemoOutcome {
        summary_path,
        first_total: fit.first_total,
        last_total: fit.last_total,
        summary_sha256: hex(&Sha256::digest(summary_bytes.as_bytes())),
    })
}

fn save(
    out_dir: &Path,
    hashes: &mut BTreeMap<String, String>,
    name: &str,
    contents: &[u8],
) -> Result<PathBuf, CliError> {
    let path = out_dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(STAGE, &path, e))?;
    hashes.insert(name.to_string(), hex(&Sha256::digest(contents)));
    Ok(path)
}

fn hash_existing(
    path: &Path,
    name: &str,
    hashes: &mut BTreeMap<String, String>,
) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(STAGE, path, e))?;
    hashes.insert(name.to_string(), hex(&Sha256::digest(&bytes)));
    Ok(())
}

// --- synthetic language construction ----------------------------------

const SYLLABLES: [&str; 12] = [
    "ba", "de", "ki", "lo", "mu", "na", "po", "ri", "su", "ta", "ve", "zo",
];

fn transliterate(word: &str) -> String {
    word.chars()
        .map(|c| match c {
            'a' => '\u{03b1}',
            'b' => '\u{03b2}',
            'd' => '\u{03b4}',
            'e' => '\u{03b5}',
            'i' => '\u{03b9}',
            'k' => '\u{03ba}',
            'l' => '\u{03bb}',
            'm' => '\u{03bc}',
            'n' => '\u{03bd}',
            'o' => '\u{03bf}',
            'p' => '\u{03c0}',
            'r' => '\u{03c1}',
            's' => '\u{03c3}',
            't' => '\u{03c4}',
            'u' => '\u{03c5}',
            'v' => '\u{03c6}',
            'z' => '\u{03b6}',
            other => other,
        })
        .collect()
}

/// Parallel corpora over a 300-concept lexicon. Concepts fall into three
/// bands, interleaved across the frequency spectrum: half are latin words
/// shared verbatim by both languages (lexical overlap), a quarter are greek
/// in the target but latin in the source (no string or static-row support;
/// these exercise the weighted-sum phase), and a quarter are greek in both
/// (the source tokenizer sees the script but splits the words differently,
/// which is what gives mutual-argmax alignment work to do).
fn synth_corpora(seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEAD_BEEF);
    let concepts = 300usize;
    let mut latin_words = Vec::with_capacity(concepts);
    let mut seen = std::collections::HashSet::new();
    while latin_words.len() < concepts {
        let len = rng.gen_range(2..=4);
        let word: String = (0..len)
            .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
            .collect();
        if seen.insert(word.clone()) {
            latin_words.push(word);
        }
    }
    let mut target_words = Vec::with_capacity(concepts);
    let mut source_words = Vec::with_capacity(concepts);
    for (i, word) in latin_words.iter().enumerate() {
        match i % 4 {
            // shared latin vocabulary
            0 | 1 => {
                target_words.push(word.clone());
                source_words.push(word.clone());
            }
            // target-only script: greek form vs an unrelated latin word
            2 => {
                target_words.push(transliterate(word));
                source_words.push(latin_words[(i + 7) % concepts].clone());
            }
            // greek on both sides
            _ => {
                target_words.push(transliterate(word));
                source_words.push(transliterate(word));
            }
        }
    }

    let mut target = Vec::with_capacity(400);
    let mut source = Vec::with_capacity(400);
    for _ in 0..400 {
        let len = rng.gen_range(5..=10);
        let mut t = Vec::with_capacity(len);
        let mut s = Vec::with_capacity(len);
        for _ in 0..len {
            // power-law skew: a frequent core with a long useful tail
            let u: f64 = rng.gen_range(0.0..1.0);
            let concept = (((u.powf(1.7)) * concepts as f64) as usize).min(concepts - 1);
            t.push(target_words[concept].as_str());
            s.push(source_words[concept].as_str());
        }
        target.push(t.join(" "));
        source.push(s.join(" "));
    }
    (target, source)
}

// --- the toy linear masked-LM ------------------------------------------

struct FitOutcome {
    csv: String,
    first_total: f64,
    last_total: f64,
    /// Final prediction head, for projecting pooled states to logits.
    w: Vec<f64>,
    vocab: usize,
    dim: usize,
}

impl FitOutcome {
    fn project(&self, state: &[f32]) -> Vec<f64> {
        (0..self.vocab)
            .map(|v| {
                let row = &self.w[v * self.dim..(v + 1) * self.dim];
                row.iter()
                    .zip(state)
                    .map(|(w, &x)| w * x as f64)
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Per-position context vector: mean embedding of the other tokens in a
/// +-3 window of the masked sequence.
fn context_vector(
    ids: &[u32],
    pos: usize,
    emb: &EmbeddingMatrix,
) -> Vec<f64> {
    let dim = emb.dim();
    let lo = pos.saturating_sub(3);
    let hi = (pos + 3).min(ids.len() - 1);
    let mut out = vec![0.0f64; dim];
    let mut n = 0.0;
    for (off, &id) in ids[lo..=hi].iter().enumerate() {
        if lo + off == pos {
            continue;
        }
        n += 1.0;
        for (acc, &v) in out.iter_mut().zip(emb.row(id)) {
            *acc += v as f64;
        }
    }
    if n > 0.0 {
        for v in &mut out {
            *v /= n;
        }
    }
    out
}

fn fit_linear_mlm(
    corpus: &Corpus,
    tok: &UnigramTokenizer,
    e_t: &EmbeddingMatrix,
    beta: f64,
    steps: usize,
    seed: u64,
) -> Result<FitOutcome, CliError> {
    let dim = e_t.dim();
    let vocab = e_t.rows();
    let sentences: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| tok.encode(s).ids)
        .filter(|ids| ids.len() >= 2)
        .collect();
    if sentences.is_empty() {
        return Err(CliError::internal(STAGE, "toy corpus has no usable sentences"));
    }

    // trainable parameters: prediction head W and a d x d adapter A,
    // perturbed off the identity so the KL term starts positive
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0F17);
    let mut w = vec![0.0f64; vocab * dim];
    for v in w.iter_mut() {
        *v = rng.gen_range(-0.01..0.01);
    }
    let mut a = vec![0.0f64; dim * dim];
    for (i, v) in a.iter_mut().enumerate() {
        *v = if i % (dim + 1) == 0 { 1.0 } else { 0.0 } + rng.gen_range(-0.05..0.05);
    }

    // fixed evaluation batch: same sentences, same masks, every step;
    // draws that select no position just drop that sentence
    let mut eval: Vec<(Vec<u32>, Vec<Option<u32>>)> = Vec::new();
    for (i, ids) in sentences.iter().enumerate() {
        if eval.len() == 8 {
            break;
        }
        if let Ok(masked) = mask_sample(ids, MASK_PROB, tok.mask_id(), seed + 100 + i as u64) {
            eval.push(masked);
        }
    }
    if eval.is_empty() {
        return Err(CliError::internal(STAGE, "no evaluation batch could be masked"));
    }

    let lr = 0.25;
    let mut csv = String::from("step,mlm,kl,total\n");
    let mut first_total = 0.0;
    let mut last_total = 0.0;

    for step in 0..=steps {
        // evaluate on the fixed batch
        let (mlm, kl) = evaluate(&eval, e_t, &w, &a, vocab, dim)?;
        let weighted_kl = beta * kl;
        let total = mlm + weighted_kl;
        csv.push_str(&format!("{step},{mlm},{weighted_kl},{total}\n"));
        if step == 0 {
            first_total = total;
        }
        last_total = total;
        if step == steps {
            break;
        }

        // one SGD step on a rotating training batch
        let batch: Vec<&Vec<u32>> = (0..4)
            .map(|i| &sentences[(step * 4 + i) % sentences.len()])
            .collect();
        let mut grad_w = vec![0.0f64; vocab * dim];
        let mut grad_a = vec![0.0f64; dim * dim];
        let mut batch_positions = 0usize;
        for (bi, ids) in batch.iter().enumerate() {
            let draw =
                mask_sample(ids, MASK_PROB, tok.mask_id(), seed + 1000 + (step * 16 + bi) as u64);
            let Ok((masked, targets)) = draw else {
                continue; // nothing selected in this sentence this step
            };
            let positions: Vec<usize> = targets
                .iter()
                .enumerate()
                .filter_map(|(p, t)| t.map(|_| p))
                .collect();
            if positions.is_empty() {
                continue;
            }
            batch_positions += positions.len();

            let contexts: Vec<Vec<f64>> =
                positions.iter().map(|&p| context_vector(&masked, p, e_t)).collect();
            let hidden: Vec<Vec<f64>> = contexts.iter().map(|h| mat_vec(&a, h, dim)).collect();
            let logits = Matrix::from_nested(
                &hidden
                    .iter()
                    .map(|h| logits_of(&w, h, vocab, dim))
                    .collect::<Vec<_>>(),
            );
            let batch_targets: Vec<Option<u32>> =
                positions.iter().map(|&p| targets[p]).collect();
            let (_, grad_logits) =
                unibridge_core::objective::mlm_loss_grad(&logits, &batch_targets)
                    .map_err(stage_err(STAGE))?;

            let h_model = Matrix::from_nested(&hidden);
            let h_ref = Matrix::from_nested(&contexts);
            let (_, grad_hidden_kl) =
                unibridge_core::objective::kl_regularizer_grad(&h_model, &h_ref)
                    .map_err(stage_err(STAGE))?;

            for (row, (h_m, h_ctx)) in hidden.iter().zip(&contexts).enumerate() {
                let g_row = grad_logits.row(row);
                // dL/dW = g_logits (x) h_model
                for v in 0..vocab {
                    if g_row[v] == 0.0 {
                        continue;
                    }
                    let w_row = &mut grad_w[v * dim..(v + 1) * dim];
                    for d in 0..dim {
                        w_row[d] += g_row[v] * h_m[d];
                    }
                }
                // dL/dh = W^T g_logits + beta * dKL/dh
                let mut grad_h = vec![0.0f64; dim];
                for v in 0..vocab {
                    if g_row[v] == 0.0 {
                        continue;
                    }
                    let w_row = &w[v * dim..(v + 1) * dim];
                    for d in 0..dim {
                        grad_h[d] += g_row[v] * w_row[d];
                    }
                }
                for (d, g) in grad_h.iter_mut().enumerate() {
                    *g += beta * grad_hidden_kl.row(row)[d];
                }
                // dL/dA = grad_h (x) context
                for i in 0..dim {
                    let a_row = &mut grad_a[i * dim..(i + 1) * dim];
                    for j in 0..dim {
                        a_row[j] += grad_h[i] * h_ctx[j];
                    }
                }
            }
        }
        if batch_positions == 0 {
            continue;
        }
        // gradients were accumulated per sentence; average them
        let scale = lr / batch.len() as f64;
        for (p, g) in w.iter_mut().zip(&grad_w) {
            *p -= scale * g;
        }
        for (p, g) in a.iter_mut().zip(&grad_a) {
            *p -= scale * g;
        }
    }

    Ok(FitOutcome {
        csv,
        first_total,
        last_total,
        w,
        vocab,
        dim,
    })
}

fn evaluate(
    eval: &[(Vec<u32>, Vec<Option<u32>>)],
    e_t: &EmbeddingMatrix,
    w: &[f64],
    a: &[f64],
    vocab: usize,
    dim: usize,
) -> Result<(f64, f64), CliError> {
    let mut contexts = Vec::new();
    let mut hidden = Vec::new();
    let mut logit_rows = Vec::new();
    let mut targets = Vec::new();
    for (masked, row_targets) in eval {
        for (p, t) in row_targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let ctx = context_vector(masked, p, e_t);
            let h = mat_vec(a, &ctx, dim);
            logit_rows.push(logits_of(w, &h, vocab, dim));
            contexts.push(ctx);
            hidden.push(h);
            targets.push(Some(*t));
        }
    }
    let logits = Matrix::from_nested(&logit_rows);
    let mlm = unibridge_core::mlm_loss(&logits, &targets).map_err(stage_err(STAGE))?;
    let kl = unibridge_core::kl_regularizer(
        &Matrix::from_nested(&hidden),
        &Matrix::from_nested(&contexts),
    )
    .map_err(stage_err(STAGE))?;
    Ok((mlm, kl))
}

fn mat_vec(m: &[f64], x: &[f64], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let row = &m[i * dim..(i + 1) * dim];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn logits_of(w: &[f64], h: &[f64], vocab: usize, dim: usize) -> Vec<f64> {
    (0..vocab)
        .map(|v| {
            let row = &w[v * dim..(v + 1) * dim];
            row.iter().zip(h).map(|(a, b)| a * b).sum()
        })
        .collect()
}

// --- fusion inputs -------------------------------------------------------

fn pooled_states<'a>(
    lang: &str,
    sentences: impl Iterator<Item = &'a str>,
    tok: &UnigramTokenizer,
    emb: &EmbeddingMatrix,
) -> Result<HiddenStateSet, CliError> {
    let mut data = Vec::new();
    let mut k = 0usize;
    for sentence in sentences {
        let ids = tok.encode(sentence).ids;
        let rows: Vec<Vec<f32>> = ids.iter().map(|&id| emb.row(id).to_vec()).collect();
        data.extend(unibridge_core::fusion::pool_states(&rows, Pooling::Mean));
        k += 1;
    }
    HiddenStateSet::new(lang, Pooling::Mean, k, emb.dim(), data).map_err(stage_err(STAGE))
}

fn perturbed(
    base: &HiddenStateSet,
    lang: &str,
    scale: f32,
    seed: u64,
) -> Result<HiddenStateSet, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(base.k() * base.dim());
    for i in 0..base.k() {
        for &v in base.row(i) {
            data.push(v + scale * rng.gen_range(-1.0f32..1.0));
        }
    }
    HiddenStateSet::new(lang, base.pooling(), base.k(), base.dim(), data).map_err(stage_err(STAGE))
}

fn mean_state(states: &HiddenStateSet) -> Vec<f32> {
    let rows: Vec<Vec<f32>> = (0..states.k()).map(|i| states.row(i).to_vec()).collect();
    unibridge_core::fusion::pool_states(&rows, Pooling::Mean)
}
