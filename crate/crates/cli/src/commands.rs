//! Subcommand implementations. Each stage tags its errors so failures read
//! as `[stage] message` with the documented exit code.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unibridge_core::embed_init::similarity_report;
use unibridge_core::static_embed::all_token_strings;
use unibridge_core::tokenizer::{TrainOptions, SPECIAL_COUNT};
use unibridge_core::vocab_search::{search_with, threshold_sweep_with, CorpusBackend};
use unibridge_core::{
    build_target_embedding, combined_loss, fuse_logits, harmony_weights, kl_regularizer,
    mlm_loss, rank_sources, Corpus, EmbeddingMatrix, FusionReport, HiddenStateSet, InitConfig,
    LossInputs, Matrix, ParallelCorpus, UnigramTokenizer,
};

use crate::config::{require_path, PipelineConfig, SearchBlock, StaticBlock};
use crate::{stage_err, thread_cap, CliError};

fn write_file(stage: &'static str, path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(stage, path, e))
}

fn load_corpus(stage: &'static str, path: &Path) -> Result<Corpus, CliError> {
    Corpus::ingest(&[path.to_path_buf()], "und", None).map_err(stage_err(stage))
}

fn load_tokenizer(stage: &'static str, path: &Path) -> Result<UnigramTokenizer, CliError> {
    UnigramTokenizer::load(path).map_err(stage_err(stage))
}

#[derive(Serialize)]
struct ParallelManifest {
    target_lang: String,
    source_lang: String,
    pair_count: usize,
    skipped_rows: usize,
    sha256: String,
}

#[allow(clippy::too_many_arguments)]
pub fn ingest(
    cfg: &PipelineConfig,
    files: Vec<PathBuf>,
    lang: Option<String>,
    out: PathBuf,
    manifest: Option<PathBuf>,
    limit: Option<usize>,
    parallel: Option<PathBuf>,
    target_lang: Option<String>,
    source_lang: Option<String>,
    pairs: Option<usize>,
) -> Result<(), CliError> {
    const STAGE: &str = "ingest";
    if let Some(tsv) = parallel {
        let target_lang = target_lang
            .ok_or_else(|| CliError::validation(STAGE, "missing required flag: --target-lang"))?;
        let source_lang = source_lang
            .ok_or_else(|| CliError::validation(STAGE, "missing required flag: --source-lang"))?;
        let k = pairs.unwrap_or(cfg.fusion.k);
        let pc = ParallelCorpus::ingest(&tsv, &target_lang, &source_lang, k)
            .map_err(stage_err(STAGE))?;
        let mut body = String::new();
        let mut hasher = Sha256::new();
        for (t, s) in pc.pairs() {
            let line = format!("{t}\t{s}\n");
            hasher.update(line.as_bytes());
            body.push_str(&line);
        }
        write_file(STAGE, &out, &body)?;
        if let Some(mpath) = manifest {
            let m = ParallelManifest {
                target_lang,
                source_lang,
                pair_count: pc.k(),
                skipped_rows: pc.skipped_rows(),
                sha256: hex(&hasher.finalize()),
            };
            write_file(STAGE, &mpath, &serde_json::to_string_pretty(&m).unwrap())?;
        }
        if pc.skipped_rows() > 0 {
            eprintln!("warning: skipped {} malformed rows", pc.skipped_rows());
        }
        println!("wrote {} pairs to {}", pc.k(), out.display());
        return Ok(());
    }

    if files.is_empty() {
        return Err(CliError::validation(STAGE, "no input files given"));
    }
    let lang = lang.ok_or_else(|| CliError::validation(STAGE, "missing required flag: --lang"))?;
    let corpus = Corpus::ingest(&files, &lang, limit).map_err(stage_err(STAGE))?;
    corpus.write_to(&out).map_err(stage_err(STAGE))?;
    if let Some(mpath) = manifest {
        let m = corpus.manifest();
        write_file(STAGE, &mpath, &serde_json::to_string_pretty(&m).unwrap())?;
    }
    println!("wrote {} sentences to {}", corpus.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn search(
    cfg: &PipelineConfig,
    block: &SearchBlock,
    corpus: Option<PathBuf>,
    out_tokenizer: Option<PathBuf>,
    trace: Option<PathBuf>,
    csv: Option<PathBuf>,
    thresholds: Option<Vec<f64>>,
    seed: u64,
) -> Result<(), CliError> {
    const STAGE: &str = "search";
    let corpus_path = require_path(STAGE, "corpus", corpus.as_ref(), cfg.paths.corpus.as_ref())?;
    let corpus = load_corpus(STAGE, &corpus_path)?;
    let search_cfg = block.to_search_config();
    let mut backend = CorpusBackend::new(&corpus, seed)
        .with_options(TrainOptions {
            threads: thread_cap(),
        })
        .with_recounted_probs(block.recounted_probs);

    let out_dir = cfg
        .paths
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));

    if let Some(thresholds) = thresholds {
        if csv.is_some() {
            return Err(CliError::validation(
                STAGE,
                "--csv applies to a single search; the sweep report is JSON only",
            ));
        }
        let entries = threshold_sweep_with(&mut backend, &search_cfg, &thresholds)
            .map_err(stage_err(STAGE))?;
        let trace_path = trace.unwrap_or_else(|| out_dir.join("sweep.json"));
        write_file(
            STAGE,
            &trace_path,
            &serde_json::to_string_pretty(&entries).unwrap(),
        )?;
        for entry in &entries {
            println!(
                "threshold {:>6.2} -> vocabulary size {}",
                entry.threshold, entry.chosen_size
            );
        }
        println!("sweep report: {}", trace_path.display());
        return Ok(());
    }

    let (tokenizer, trace_data) = search_with(&mut backend, &search_cfg).map_err(stage_err(STAGE))?;
    let tok_path = out_tokenizer.unwrap_or_else(|| out_dir.join("tokenizer.tsv"));
    tokenizer.save(&tok_path).map_err(stage_err(STAGE))?;
    let trace_path = trace.unwrap_or_else(|| out_dir.join("trace.json"));
    write_file(STAGE, &trace_path, &trace_data.to_json())?;
    if let Some(csv_path) = csv {
        write_file(STAGE, &csv_path, &trace_data.to_csv())?;
    }
    println!(
        "chose vocabulary size {} after {} steps ({:?}); tokenizer: {}",
        trace_data.chosen_size,
        trace_data.steps.len(),
        trace_data.stop_reason,
        tok_path.display()
    );
    Ok(())
}

pub fn train_static(
    cfg: &PipelineConfig,
    block: &StaticBlock,
    corpus: Option<PathBuf>,
    tokenizer: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
) -> Result<(), CliError> {
    const STAGE: &str = "train-static";
    let corpus_path = require_path(STAGE, "corpus", corpus.as_ref(), cfg.paths.corpus.as_ref())?;
    let tok_path = require_path(
        STAGE,
        "tokenizer",
        tokenizer.as_ref(),
        cfg.paths.target_tokenizer.as_ref(),
    )?;
    let corpus = load_corpus(STAGE, &corpus_path)?;
    let tok = load_tokenizer(STAGE, &tok_path)?;
    let emb = unibridge_core::train_static(&corpus, &tok, &block.to_train_config(), seed)
        .map_err(stage_err(STAGE))?;
    emb.save(&out).map_err(stage_err(STAGE))?;
    println!(
        "trained {} of {} rows (dim {}) -> {}",
        emb.trained_count(),
        emb.rows(),
        emb.dim(),
        out.display()
    );
    Ok(())
}

fn load_embedding(stage: &'static str, path: &Path) -> Result<EmbeddingMatrix, CliError> {
    let is_text = path
        .extension()
        .is_some_and(|e| e == "txt" || e == "vec");
    let loaded = if is_text {
        EmbeddingMatrix::load_text(path)
    } else {
        EmbeddingMatrix::load(path)
    };
    loaded.map_err(stage_err(stage))
}

pub struct InitEmbeddingArgs<'a> {
    pub cfg: &'a PipelineConfig,
    pub target_tokenizer: Option<PathBuf>,
    pub source_tokenizer: Option<PathBuf>,
    pub source_embedding: Option<PathBuf>,
    pub target_static: Option<PathBuf>,
    pub source_static: Option<PathBuf>,
    pub train_static: bool,
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub plan: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub block_size: Option<usize>,
    pub seed: u64,
}

pub fn init_embedding(args: InitEmbeddingArgs) -> Result<(), CliError> {
    const STAGE: &str = "init-embedding";
    let cfg = args.cfg;
    let target_tok_path = require_path(
        STAGE,
        "target-tokenizer",
        args.target_tokenizer.as_ref(),
        cfg.paths.target_tokenizer.as_ref(),
    )?;
    let source_tok_path = require_path(
        STAGE,
        "source-tokenizer",
        args.source_tokenizer.as_ref(),
        cfg.paths.source_tokenizer.as_ref(),
    )?;
    let source_emb_path = require_path(
        STAGE,
        "source-embedding",
        args.source_embedding.as_ref(),
        cfg.paths.source_embedding.as_ref(),
    )?;

    let target_tok = load_tokenizer(STAGE, &target_tok_path)?;
    let source_tok = load_tokenizer(STAGE, &source_tok_path)?;
    let e_s = load_embedding(STAGE, &source_emb_path)?;

    let (f_t, f_s) = if args.train_static {
        // both static spaces are trained on the same (target-language)
        // corpus, one per tokenizer, so their geometries are comparable
        let corpus_path =
            require_path(STAGE, "corpus", args.corpus.as_ref(), cfg.paths.corpus.as_ref())?;
        let corpus = load_corpus(STAGE, &corpus_path)?;
        let train_cfg = cfg.static_embed.to_train_config();
        let f_t = unibridge_core::train_static(&corpus, &target_tok, &train_cfg, args.seed)
            .map_err(stage_err(STAGE))?;
        let f_s = unibridge_core::train_static(&corpus, &source_tok, &train_cfg, args.seed + 1)
            .map_err(stage_err(STAGE))?;
        (f_t, f_s)
    } else {
        let ft_path = require_path(
            STAGE,
            "target-static",
            args.target_static.as_ref(),
            cfg.paths.target_static.as_ref(),
        )?;
        let fs_path = require_path(
            STAGE,
            "source-static",
            args.source_static.as_ref(),
            cfg.paths.source_static.as_ref(),
        )?;
        (load_embedding(STAGE, &ft_path)?, load_embedding(STAGE, &fs_path)?)
    };

    let vt = all_token_strings(&target_tok);
    let vs = all_token_strings(&source_tok);
    let init_cfg = InitConfig {
        special_count: SPECIAL_COUNT,
        block_size: args.block_size.unwrap_or(cfg.init.block_size),
        seed: args.seed,
    };
    let (target_emb, plan) = build_target_embedding(&vt, &vs, &e_s, &f_t, &f_s, &init_cfg)
        .map_err(stage_err(STAGE))?;
    target_emb.save(&args.out).map_err(stage_err(STAGE))?;

    if let Some(plan_path) = &args.plan {
        let report = plan.report(&vt, &vs);
        write_file(STAGE, plan_path, &serde_json::to_string_pretty(&report).unwrap())?;
    }
    if let Some(report_path) = &args.report {
        write_file(STAGE, report_path, &similarity_report(&plan, &vt, &vs, 40))?;
    }
    let counts = plan.counts();
    println!(
        "initialized {} rows: {} overlap, {} semantic, {} weighted, {} unresolved -> {}",
        vt.len(),
        counts.overlap,
        counts.semantic,
        counts.weighted,
        counts.unresolved,
        args.out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct LossInputsFile {
    logits: Vec<Vec<f64>>,
    targets: Vec<Option<u32>>,
    h_model: Vec<Vec<f64>>,
    h_ref: Vec<Vec<f64>>,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_mask_prob")]
    mask_prob: f64,
}

fn default_beta() -> f64 {
    1.0
}

fn default_mask_prob() -> f64 {
    0.15
}

pub fn losses_check(inputs: Option<PathBuf>, seed: u64) -> Result<(), CliError> {
    const STAGE: &str = "losses-check";
    if let Some(path) = inputs {
        let text =
            std::fs::read_to_string(&path).map_err(|e| CliError::io(STAGE, &path, e))?;
        let file: LossInputsFile = serde_json::from_str(&text)
            .map_err(|e| CliError::data(STAGE, format!("{}: {e}", path.display())))?;
        let inputs = LossInputs {
            mlm_logits: Matrix::from_nested(&file.logits),
            mlm_targets: file.targets,
            h_model: Matrix::from_nested(&file.h_model),
            h_ref: Matrix::from_nested(&file.h_ref),
            beta: file.beta,
            mask_prob: file.mask_prob,
        };
        let out = combined_loss(&inputs).map_err(stage_err(STAGE))?;
        println!("mlm={} kl={} total={}", out.mlm, out.kl, out.total);
        return Ok(());
    }

    // self-checks over the numeric identities the losses must satisfy
    let fail = |msg: String| CliError::internal(STAGE, msg);

    let vocab = 11usize;
    let uniform = Matrix::from_vec(1, vocab, vec![0.0; vocab]);
    let loss = mlm_loss(&uniform, &[Some(3)]).map_err(stage_err(STAGE))?;
    if (loss - (vocab as f64).ln()).abs() > 1e-6 {
        return Err(fail(format!("uniform-logit loss {loss} != ln {vocab}")));
    }
    println!("ok: uniform logits cost ln(V)");

    let h = Matrix::from_vec(2, 3, vec![0.5, -0.5, 1.0, 2.0, 0.0, -1.0]);
    let kl = kl_regularizer(&h, &h.clone()).map_err(stage_err(STAGE))?;
    if kl != 0.0 {
        return Err(fail(format!("KL of identical states is {kl}, not zero")));
    }
    println!("ok: KL(identical) = 0");

    let mut rng_seed = seed;
    for instance in 0..10 {
        rng_seed = rng_seed.wrapping_add(1);
        let mut rng = check_rng(rng_seed);
        let rows = 1 + (rng() as usize % 4);
        let cols = 2 + (rng() as usize % 6);
        let logits = Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| centered(rng())).collect(),
        );
        let targets: Vec<Option<u32>> = (0..rows).map(|_| Some((rng() % cols as u64) as u32)).collect();
        let (_, grad) =
            unibridge_core::objective::mlm_loss_grad(&logits, &targets).map_err(stage_err(STAGE))?;
        let numeric = central_diff(&logits, |m| mlm_loss(m, &targets).unwrap());
        for (a, n) in grad.data().iter().zip(&numeric) {
            if (a - n).abs() > 1e-4 * a.abs().max(n.abs()).max(1e-3) {
                return Err(fail(format!(
                    "instance {instance}: mlm gradient {a} vs numeric {n}"
                )));
            }
        }
    }
    println!("ok: mlm gradients match central differences (10 instances)");
    println!("all checks passed");
    Ok(())
}

// tiny LCG for the self-check instances; nothing rides on its quality
fn check_rng(seed: u64) -> impl FnMut() -> u64 {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        state >> 11
    }
}

fn centered(raw: u64) -> f64 {
    (raw % 2000) as f64 / 500.0 - 2.0
}

fn central_diff(m: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut out = Vec::with_capacity(m.data().len());
    for i in 0..m.data().len() {
        let mut up = m.data().to_vec();
        up[i] += h;
        let mut down = m.data().to_vec();
        down[i] -= h;
        let up = Matrix::from_vec(m.rows(), m.cols(), up);
        let down = Matrix::from_vec(m.rows(), m.cols(), down);
        out.push((f(&up) - f(&down)) / (2.0 * h));
    }
    out
}

pub fn fuse(
    target: PathBuf,
    sources: Vec<PathBuf>,
    out: PathBuf,
    logits: Option<PathBuf>,
    fused_out: Option<PathBuf>,
) -> Result<(), CliError> {
    const STAGE: &str = "fuse";
    if sources.is_empty() {
        return Err(CliError::validation(STAGE, "at least one --sources file is required"));
    }
    if fused_out.is_some() && logits.is_none() {
        return Err(CliError::validation(STAGE, "--fused-out requires --logits"));
    }
    let target_states = HiddenStateSet::load(&target).map_err(stage_err(STAGE))?;
    let source_states: Vec<HiddenStateSet> = sources
        .iter()
        .map(|p| HiddenStateSet::load(p).map_err(stage_err(STAGE)))
        .collect::<Result<_, _>>()?;
    let weights = harmony_weights(&target_states, &source_states).map_err(stage_err(STAGE))?;
    let report = FusionReport::new(target_states.lang(), &weights);
    write_file(STAGE, &out, &report.to_json())?;
    println!("harmony ranking: {}", rank_sources(&weights).join(" > "));

    if let Some(logits_path) = logits {
        let text = std::fs::read_to_string(&logits_path)
            .map_err(|e| CliError::io(STAGE, &logits_path, e))?;
        let per_source: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| CliError::data(STAGE, format!("{}: {e}", logits_path.display())))?;
        let fused = fuse_logits(&weights, &per_source).map_err(stage_err(STAGE))?;
        if let Some(fused_path) = fused_out {
            write_file(STAGE, &fused_path, &serde_json::to_string_pretty(&fused).unwrap())?;
            println!("fused logits: {}", fused_path.display());
        } else {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", serde_json::to_string(&fused).unwrap());
        }
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
