// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sublab_core::analysis::{
    collect_trace, covariance_similarity, median_rotation, overlap_test, structure_report,
    RotationTarget,
};
use sublab_core::bigram::{bigram_surprisals, count_bigrams, BigramTable};
use sublab_core::corpus::{build_vocab, tokenize_corpus};
use sublab_core::eval::{
    ablation_eval, experiment_recipes, pearson_r, powerlaw_fit, select_subnetwork,
    CorrelationPair, PowerLawFit, RecipeInputs, RecipeKind, SweepPoint,
};
use sublab_core::mask::{
    apply_binary, random_matched_mask, train_mask, MaskHyper, MaskMode, MaskProvenance, MaskRun,
    MaskTarget, StepRecord,
};
use sublab_core::model::{generate, surprisals, train_lm_with, GenerateOptions};
use sublab_core::report::{self, CorrelationRow, RotationRow};
use sublab_core::{BinaryMask, Checkpoint, Error, ParamSet, Result, TokenStream, Vocab};

use crate::artifacts::Run;
use crate::{Command, Inputs, PairArg, TargetArg};

const CHECKPOINT_DIR: &str = "checkpoints";
const MASK_DIR: &str = "masks";
const REPORT_DIR: &str = "reports";

pub(crate) fn dispatch(run: &mut Run, cmd: Command) -> Result<Value> {
    match cmd {
        Command::BuildVocab { corpus, out } => build_vocab_cmd(run, corpus, out),
        Command::Tokenize { corpus, vocab, out } => tokenize_cmd(run, corpus, vocab, out),
        Command::TrainLm { tokens } => train_lm_cmd(run, tokens),
        Command::CountBigrams { tokens, out } => count_bigrams_cmd(run, tokens, out),
        Command::TrainMask {
            target,
            lambda,
            retry_max,
            inputs,
            out,
        } => train_mask_cmd(run, target, lambda, retry_max, inputs, out),
        Command::SweepLambdas {
            target,
            lambdas,
            retry_max,
            inputs,
            out,
        } => sweep_lambdas_cmd(run, target, lambdas, retry_max, inputs, out),
        Command::SweepCheckpoints {
            checkpoints_dir,
            lambdas,
            retry_max,
            tokens,
            bigrams,
            out,
        } => sweep_checkpoints_cmd(run, checkpoints_dir, lambdas, retry_max, tokens, bigrams, out),
        Command::EvalCorrelation {
            pair,
            mask,
            inputs,
            out,
        } => eval_correlation_cmd(run, pair, mask, inputs, out),
        Command::FitPowerlaw { input, out } => fit_powerlaw_cmd(run, input, out),
        Command::SelectSubnetwork { correlations, out } => select_cmd(run, correlations, out),
        Command::AnalyzeRotations { mask, inputs, out } => rotations_cmd(run, mask, inputs, out),
        Command::AnalyzeCovariance {
            mask,
            random_near_empty,
            inputs,
            out,
        } => covariance_cmd(run, mask, random_near_empty, inputs, out),
        Command::StructureReport { mask, out } => structure_cmd(run, mask, out),
        Command::OverlapTest {
            mask_a,
            mask_b,
            samples,
            out,
        } => overlap_cmd(run, mask_a, mask_b, samples, out),
        Command::Ablate { mask, inputs, out } => ablate_cmd(run, mask, inputs, out),
        Command::Recipes {
            mask,
            lambda,
            kinds,
            inputs,
            out,
        } => recipes_cmd(run, mask, lambda, kinds, inputs, out),
        Command::Generate {
            prompt,
            temperature,
            n_tokens,
            ablate_mask,
            checkpoint,
            vocab,
        } => generate_cmd(run, prompt, temperature, n_tokens, ablate_mask, checkpoint, vocab),
    }
}

// ---- paths and loading ----------------------------------------------------

fn or_default(run: &Run, p: Option<PathBuf>, rel: &str) -> PathBuf {
    p.unwrap_or_else(|| run.default_path(rel))
}

fn report_path(run: &Run, p: Option<PathBuf>, name: &str) -> PathBuf {
    p.unwrap_or_else(|| run.default_path(&format!("{REPORT_DIR}/{name}")))
}

/// `0`, `10`, `0.5`, ...
pub(crate) fn lambda_tag(lambda: f64) -> String {
    format!("{lambda}")
}

fn mask_name(target: &str, lambda: f64) -> String {
    format!("{target}_l{}.mask", lambda_tag(lambda))
}

fn checkpoint_step(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("step")?.strip_suffix(".ckpt")?.parse().ok()
}

fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if let Some(step) = checkpoint_step(&p) {
            out.push((step, p));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no step*.ckpt files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn load_checkpoint(run: &mut Run, p: Option<PathBuf>) -> Result<Checkpoint> {
    let path = match p {
        Some(p) => p,
        None => {
            let dir = run.default_path(CHECKPOINT_DIR);
            list_checkpoints(&dir)?.pop().expect("non-empty").1
        }
    };
    run.input(&path)?;
    Checkpoint::load(&path)
}

fn load_stream(run: &mut Run, p: Option<PathBuf>) -> Result<TokenStream> {
    let path = or_default(run, p, "tokens.bin");
    run.input(&path)?;
    TokenStream::load(&path)
}

/// The bigram table describes the whole corpus, so it must have been
/// counted on exactly `stream`.
fn load_table(run: &mut Run, p: Option<PathBuf>, stream: &TokenStream) -> Result<BigramTable> {
    let path = or_default(run, p, "bigrams.jsonl");
    run.input(&path)?;
    let table = BigramTable::load(&path)?;
    let want = stream.content_hash();
    if table.corpus_hash != want {
        return Err(Error::Provenance(format!(
            "{} was counted on corpus {}, the token stream is {want}",
            path.display(),
            table.corpus_hash
        )));
    }
    Ok(table)
}

fn load_mask(run: &mut Run, path: &Path, ckpt: Option<&Checkpoint>) -> Result<BinaryMask> {
    run.input(path)?;
    let mask = BinaryMask::load(path)?;
    if let Some(c) = ckpt {
        check_mask_source(&mask, c, path)?;
        mask.check(&c.params)?;
    }
    Ok(mask)
}

fn check_mask_source(mask: &BinaryMask, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let h = ckpt.hash();
    if mask.provenance.source_checkpoint_hash != h {
        return Err(Error::Provenance(format!(
            "{} was trained on checkpoint {}, not {h}",
            path.display(),
            mask.provenance.source_checkpoint_hash
        )));
    }
    Ok(())
}

/// Training split and the capped held-out evaluation split.
struct Splits {
    train: TokenStream,
    heldout: TokenStream,
    eval: TokenStream,
}

fn splits(run: &Run, stream: &TokenStream) -> Result<Splits> {
    let (train, heldout) = stream.split_tail(run.cfg.lm.heldout_frac);
    if heldout.len() < 2 {
        return Err(Error::InvalidInput(
            "held-out split is empty; set lm.heldout_frac > 0".into(),
        ));
    }
    let cap = run.cfg.corpus.eval_tokens;
    let eval = if cap > 0 && heldout.len() > cap {
        TokenStream {
            ids: heldout.ids[..cap].to_vec(),
            ..heldout.clone()
        }
    } else {
        heldout.clone()
    };
    Ok(Splits {
        train,
        heldout,
        eval,
    })
}

fn write_json(run: &mut Run, path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json") + "\n";
    run.output(path, |p| fs::write(p, text).map_err(|e| Error::io(p, e)))?;
    Ok(())
}

fn write_csv<T: Serialize>(run: &mut Run, path: &Path, rows: &[T]) -> Result<()> {
    run.output(path, |p| {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::format("csv", e))?;
        for r in rows {
            w.serialize(r).map_err(|e| Error::format("csv", e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("csv", e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::format(path.display().to_string(), e))
}

// ---- corpus ---------------------------------------------------------------

fn corpus_paths(run: &mut Run, given: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let paths = if given.is_empty() {
        run.cfg.corpus.paths.clone()
    } else {
        given
    };
    for p in &paths {
        run.input(p)?;
    }
    Ok(paths)
}

fn build_vocab_cmd(run: &mut Run, corpus: Vec<PathBuf>, out: Option<PathBuf>) -> Result<Value> {
    let paths = corpus_paths(run, corpus)?;
    let vocab = build_vocab(&paths, run.cfg.corpus.max_vocab)?;
    let out = or_default(run, out, "vocab.json");
    run.output(&out, |p| vocab.save(p))?;
    Ok(json!({ "vocab": out, "size": vocab.len(), "hash": vocab.hash_hex() }))
}

fn tokenize_cmd(
    run: &mut Run,
    corpus: Vec<PathBuf>,
    vocab: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<Value> {
    let vpath = or_default(run, vocab, "vocab.json");
    run.input(&vpath)?;
    let vocab = Vocab::load(&vpath)?;
    let paths = corpus_paths(run, corpus)?;
    let stream = tokenize_corpus(&paths, &vocab)?;
    let out = or_default(run, out, "tokens.bin");
    run.output(&out, |p| stream.save(p))?;
    Ok(json!({ "tokens": out, "n_tokens": stream.len(), "hash": stream.content_hash() }))
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    loss: f64,
}

fn train_lm_cmd(run: &mut Run, tokens: Option<PathBuf>) -> Result<Value> {
    let stream = load_stream(run, tokens)?;
    let cfg = run.cfg.clone();
    let dir = run.default_path(CHECKPOINT_DIR);
    let mut written = Vec::new();
    let log = train_lm_with(&cfg.model, &stream, &cfg.lm, |cp| {
        let path = dir.join(format!("step{:06}.ckpt", cp.step));
        run.output(&path, |p| cp.save(p))?;
        written.push(path);
        Ok(())
    })?;
    let rows = |v: &[(u64, f64)]| -> Vec<LossRow> {
        v.iter().map(|&(step, loss)| LossRow { step, loss }).collect()
    };
    write_csv(run, &report_path(run, None, "lm_train.csv"), &rows(&log.train))?;
    write_csv(run, &report_path(run, None, "lm_heldout.csv"), &rows(&log.heldout))?;
    Ok(json!({
        "checkpoints": written,
        "final_train_loss": log.train.last().map(|x| x.1),
        "heldout": log.heldout,
    }))
}

fn count_bigrams_cmd(run: &mut Run, tokens: Option<PathBuf>, out: Option<PathBuf>) -> Result<Value> {
    let stream = load_stream(run, tokens)?;
    let table = count_bigrams(&stream, run.cfg.model.vocab_size, run.cfg.corpus.bigram_epsilon)?;
    let out = or_default(run, out, "bigrams.jsonl");
    run.output(&out, |p| table.save(p))?;
    Ok(json!({ "bigrams": out, "pairs": table.n_pairs(), "corpus_hash": table.corpus_hash }))
}

// ---- masks ----------------------------------------------------------------

/// Trains a mask, retrying with seed `seed + attempt` after each unrecovered
/// loss spike. Returns the run and the seed that produced it.
pub fn train_mask_retrying(
    params: &ParamSet<f32>,
    target: MaskTarget<'_>,
    lambda: f64,
    hyper: &MaskHyper,
    stream: &TokenStream,
    retry_max: u32,
) -> Result<(MaskRun, u64)> {
    let mut last_step = 0;
    for attempt in 0..=retry_max {
        let h = MaskHyper {
            seed: hyper.seed.wrapping_add(attempt as u64),
            ..hyper.clone()
        };
        match train_mask(params, target, lambda, &h, stream) {
            Ok(r) => return Ok((r, h.seed)),
            Err(Error::RetrainSignal { step, .. }) => last_step = step,
            Err(e) => return Err(e),
        }
    }
    Err(Error::TrainingFailure {
        step: last_step,
        last_good_step: 0,
        detail: format!(
            "mask loss spike not recovered in {} attempts",
            retry_max as u64 + 1
        ),
    })
}

struct TrainedMask {
    mask: BinaryMask,
    log: Vec<StepRecord>,
    converged: bool,
}

fn train_binary_mask(
    run: &Run,
    params: &ParamSet<f32>,
    source_hash: &str,
    target: MaskTarget<'_>,
    lambda: f64,
    train: &TokenStream,
    retry_max: Option<u32>,
) -> Result<TrainedMask> {
    let retry = retry_max.unwrap_or(run.cfg.sweep.retry_max);
    let (r, seed) = train_mask_retrying(params, target, lambda, &run.cfg.mask, train, retry)?;
    let mut mask = r.mask.binarize(params, run.cfg.sweep.threshold, source_hash)?;
    mask.provenance.seed = Some(seed);
    Ok(TrainedMask {
        mask,
        log: r.log,
        converged: r.converged,
    })
}

fn save_trained(run: &mut Run, path: &Path, t: &TrainedMask) -> Result<()> {
    run.output(path, |p| t.mask.save(p))?;
    let mut log = path.as_os_str().to_owned();
    log.push(".log.csv");
    write_csv(run, Path::new(&log), &t.log)
}

fn train_mask_cmd(
    run: &mut Run,
    target: TargetArg,
    lambda: f64,
    retry_max: Option<u32>,
    inputs: Inputs,
    out: Option<PathBuf>,
) -> Result<Value> {
    let ckpt = load_checkpoint(run, inputs.checkpoint)?;
    let stream = load_stream(run, inputs.tokens)?;
    let s = splits(run, &stream)?;
    let table;
    let mt = match target {
        TargetArg::Bigram => {
            table = load_table(run, inputs.bigrams, &stream)?;
            MaskTarget::Bigram(&table)
        }
        TargetArg::Model => MaskTarget::Teacher(&ckpt.params),
    };
    let t = train_binary_mask(run, &ckpt.params, &ckpt.hash(), mt, lambda, &s.train, retry_max)?;
    let out = out.unwrap_or_else(|| {
        run.default_path(&format!("{MASK_DIR}/{}", mask_name(target.label(), lambda)))
    });
    save_trained(run, &out, &t)?;
    Ok(json!({
        "mask": out,
        "lambda": lambda,
        "active": t.mask.active(),
        "total": t.mask.total(),
        "converged": t.converged,
        "steps": t.log.len(),
        "undecided_fraction": t.mask.undecided_fraction,
        "seed": t.mask.provenance.seed,
    }))
}

/// Held-out surprisal series shared by correlation evaluations.
struct SurprisalCache {
    bigram: Vec<f64>,
    full: Vec<f64>,
}

impl SurprisalCache {
    fn new(ckpt: &Checkpoint, table: &BigramTable, eval: &TokenStream) -> Result<Self> {
        Ok(SurprisalCache {
            bigram: bigram_surprisals(table, eval, ckpt.config().max_seq_len)?,
            full: surprisals(&ckpt.params, eval, None)?,
        })
    }
}

fn subnetwork_surprisals(ckpt: &Checkpoint, mask: &BinaryMask, eval: &TokenStream) -> Result<Vec<f64>> {
    surprisals(&apply_binary(&ckpt.params, mask, MaskMode::Keep)?, eval, None)
}

fn sweep_lambdas_cmd(
    run: &mut Run,
    target: TargetArg,
    lambdas: Option<Vec<f64>>,
    retry_max: Option<u32>,
    inputs: Inputs,
    out: Option<PathBuf>,
) -> Result<Value> {
    let ckpt = load_checkpoint(run, inputs.checkpoint)?;
    let stream = load_stream(run, inputs.tokens)?;
    let s = splits(run, &stream)?;
    let table = load_table(run, inputs.bigrams, &stream)?;
    let grid = lambdas.unwrap_or_else(|| match target {
        TargetArg::Bigram => run.cfg.sweep.lambdas.clone(),
        TargetArg::Model => run.cfg.sweep.optimal_lambdas.clone(),
    });
    let cache = SurprisalCache::new(&ckpt, &table, &s.eval)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &lambda in &grid {
        let mt = match target {
            TargetArg::Bigram => MaskTarget::Bigram(&table),
            TargetArg::Model => MaskTarget::Teacher(&ckpt.params),
        };
        let t = train_binary_mask(run, &ckpt.params, &ckpt.hash(), mt, lambda, &s.train, retry_max)?;
        let path = run.default_path(&format!("{MASK_DIR}/{}", mask_name(target.label(), lambda)));
        save_trained(run, &path, &t)?;
        let sub = subnetwork_surprisals(&ckpt, &t.mask, &s.eval)?;
        let active = t.mask.active();
        let rb = pearson_r(&sub, &cache.bigram)?;
        rows.push(CorrelationRow {
            pair: CorrelationPair::SubnetworkBigram,
            lambda,
            active_params: active,
            r: rb,
        });
        let mut entry = json!({
            "lambda": lambda, "mask": path, "active": active,
            "converged": t.converged, "steps": t.log.len(), "r_bigram": rb,
        });
        if target == TargetArg::Model {
            let rm = pearson_r(&sub, &cache.full)?;
            rows.push(CorrelationRow {
                pair: CorrelationPair::SubnetworkModel,
                lambda,
                active_params: active,
                r: rm,
            });
            entry["r_model"] = json!(rm);
        }
        runs.push(entry);
    }
    let out = report_path(run, out, &format!("correlations_{}.csv", target.label()));
    run.output(&out, |p| report::write_correlations(p, &rows))?;
    Ok(json!({ "correlations": out, "runs": runs }))
}

#[derive(Serialize, Deserialize)]
struct CheckpointSweepRow {
    checkpoint: u64,
    lambda: f64,
    active_params: u64,
    r: f64,
}

fn sweep_checkpoints_cmd(
    run: &mut Run,
    dir: Option<PathBuf>,
    lambdas: Option<Vec<f64>>,
    retry_max: Option<u32>,
    tokens: Option<PathBuf>,
    bigrams: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<Value> {
    let dir = or_default(run, dir, CHECKPOINT_DIR);
    let stream = load_stream(run, tokens)?;
    let s = splits(run, &stream)?;
    let table = load_table(run, bigrams, &stream)?;
    let grid = lambdas.unwrap_or_else(|| run.cfg.sweep.checkpoint_lambdas.clone());
    let mut rows = Vec::new();
    let mut bigram: Option<Vec<f64>> = None;
    for (step, path) in list_checkpoints(&dir)? {
        run.input(&path)?;
        let ckpt = Checkpoint::load(&path)?;
        let bigram = match &bigram {
            Some(b) => b,
            None => bigram.insert(bigram_surprisals(&table, &s.eval, ckpt.config().max_seq_len)?),
        };
        for &lambda in &grid {
            let t = train_binary_mask(
                run,
                &ckpt.params,
                &ckpt.hash(),
                MaskTarget::Bigram(&table),
                lambda,
                &s.train,
                retry_max,
            )?;
            let mpath = run.default_path(&format!(
                "{MASK_DIR}/step{step:06}/{}",
                mask_name("bigram", lambda)
            ));
            save_trained(run, &mpath, &t)?;
            let r = pearson_r(&subnetwork_surprisals(&ckpt, &t.mask, &s.eval)?, bigram)?;
            rows.push(CheckpointSweepRow {
                checkpoint: step,
                lambda,
                active_params: t.mask.active(),
                r,
            });
        }
    }
    let out = report_path(run, out, "sweep_checkpoints.csv");
    write_csv(run, &out, &rows)?;
    Ok(json!({ "sweep": out, "rows": rows.len() }))
}

fn eval_correlation_cmd(
    run: &mut Run,
    pair: PairArg,
    masks: Vec<PathBuf>,
    inputs: Inputs,
    out: Option<PathBuf>,
) -> Result<Value> {
    let ckpt = load_checkpoint(run, inputs.checkpoint)?;
    let stream = load_stream(run, inputs.tokens)?;
    let s = splits(run, &stream)?;
    let table = load_table(run, inputs.bigrams, &stream)?;
    let cache = SurprisalCache::new(&ckpt, &table, &s.eval)?;
    let mut rows = Vec::new();
    if pair == PairArg::ModelBigram {
        rows.push(CorrelationRow {
            pair: CorrelationPair::ModelBigram,
            lambda: 0.0,
            active_params: ckpt.params.maskable_count() as u64,
            r: pearson_r(&cache.full, &cache.bigram)?,
        });
    } else {
        if masks.is_empty() {
            return Err(Error::InvalidArgument(
                "--mask is required for subnetwork pairs".into(),
            ));
        }
        for path in &masks {
            let mask = load_mask(run, path, Some(&ckpt))?;
            let sub = subnetwork_surprisals(&ckpt, &mask, &s.eval)?;
            let (p, other) = match pair {
                PairArg::SubnetworkBigram => (CorrelationPair::SubnetworkBigram, &cache.bigram),
                _ => (CorrelationPair::SubnetworkModel, &cache.full),
            };
            rows.push(CorrelationRow {
                pair: p,
                lambda: mask.provenance.lambda.unwrap_or(0.0),
                active_params: mask.active(),
                r: pearson_r(&sub, other)?,
            });
        }
    }
    let out = report_path(run, out, "correlations.csv");
    run.output(&out, |p| report::write_correlations(p, &rows))?;
    Ok(json!({
        "correlations": out,
        "n": cache.bigram.len(),
        "rows": rows.iter().map(|r| json!({
            "pair": r.pair.label(), "lambda": r.lambda, "active": r.active_params, "r": r.r,
        })).collect::<Vec<_>>(),
    }))
}

fn fit_powerlaw_cmd(run: &mut Run, input: Option<PathBuf>, out: Option<PathBuf>) -> Result<Value> {
    let input = report_path(run, input, "sweep_checkpoints.csv");
    run.input(&input)?;
    let rows: Vec<CheckpointSweepRow> = read_csv(&input)?;
    let mut groups: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.active_params > 0) {
        groups
            .entry(r.checkpoint)
            .or_default()
            .push((r.active_params as f64, r.r));
    }
    let mut fits: Vec<(String, PowerLawFit)> = Vec::new();
    let mut skipped = Vec::new();
    for (step, pts) in groups {
        match powerlaw_fit(&pts) {
            Ok(fit) => fits.push((format!("step{step:06}"), fit)),
            // Too few non-empty subnetworks or a degenerate spread.
            Err(Error::InvalidInput(m)) => skipped.push(json!({ "checkpoint": step, "reason": m })),
            Err(e) => return Err(e),
        }
    }
    if fits.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no checkpoint in {} has enough points for a power-law fit",
            input.display()
        )));
    }
    let out = report_path(run, out, "powerlaw.csv");
    let at = run.cfg.analysis.powerlaw_at.clone();
    run.output(&out, |p| report::write_powerlaw(p, &fits, &at))?;
    Ok(json!({
        "powerlaw": out,
        "fits": fits.iter().map(|(l, f)| json!({
            "checkpoint": l, "c": f.c, "gamma": f.gamma, "monotone": f.is_monotone(),
        })).collect::<Vec<_>>(),
        "skipped": skipped,
    }))
}

#[derive(Deserialize)]
struct CorrelationCsvRow {
    pair: String,
    lambda: f64,
    active_params: u64,
    r: f64,
}

fn select_cmd(run: &mut Run, correlations: Option<PathBuf>, out: Option<PathBuf>) -> Result<Value> {
    let input = report_path(run, correlations, "correlations_bigram.csv");
    run.input(&input)?;
    let points: Vec<SweepPoint> = read_csv::<CorrelationCsvRow>(&input)?
        .into_iter()
        .filter(|r| r.pair == CorrelationPair::SubnetworkBigram.label())
        .map(|r| SweepPoint {
            lambda: r.lambda,
            active: r.active_params,
            r: r.r,
        })
        .collect();
    let chosen = &points[select_subnetwork(&points)?];
    let mask = run.default_path(&format!("{MASK_DIR}/{}", mask_name("bigram", chosen.lambda)));
    let v = json!({
        "lambda": chosen.lambda,
        "active_params": chosen.active,
        "r": chosen.r,
        "mask": mask,
    });
    let out = report_path(run, out, "selection.json");
    write_json(run, &out, &v)?;
    Ok(v)
}

// ---- analyses -------------------------------------------------------------

fn trace_for(
    run: &mut Run,
    ckpt: &Checkpoint,
    mask: Option<(&BinaryMask, String)>,
    heldout: &TokenStream,
) -> Result<sublab_core::analysis::ActivationTrace> {
    let n = run.cfg.analysis.trace_tokens;
    match mask {
        Some((m, hash)) => {
            let sub = apply_binary(&ckpt.params, m, MaskMode::Keep)?;
            collect_trace(&sub, None, Some(&hash), heldout, n)
        }
        None => collect_trace(&ckpt.params, None, None, heldout, n),
    }
}

fn rotations_cmd(
    run: &mut Run,
    mask: Option<PathBuf>,
    inputs: Inputs,
    out: Option<PathBuf>,
) -> Result<Value> {
    let ckpt = load_checkpoint(run, inputs.checkpoint)?;
    let stream = load_stream(run, inputs.tokens)?;
    let s = splits(run, &stream)?;
    let mask = match &mask {
        Some(p) => {
            let h = run.input(p)?;
            Some((load_mask(run, p, Some(&ckpt))?, h))
        }
        None => None,
    };
    let trace = trace_for(run, &ckpt, mask.as_ref().map(|(m, h)| (m, h.clone())), &s.heldout)?;
    let (alpha, centered) = (run.cfg.analysis.ridge_alpha, run.cfg.analysis.centered);
    let mut rows = Vec::new();
    for layer in 0..=trace.n_layers() {
        for target in [RotationTarget::Input, RotationTarget::Output] {
            rows.push(RotationRow {
                layer,
                target,
                median_degrees: median_rotation(&trace, layer, target, alpha, centered)?,
            });
        }
    }
    let out = report_path(run, out, "rotations.csv");
    run.output(&out, |p| report::write_rotations(p, &rows))?;
    Ok(json!({
        "rotations": out,
        "rows": rows.iter().map(|r| json!({
            "layer": r.layer, "target": r.target.label(), "median_degrees": r.median_degrees,
        })).collect::<Vec<_>>(),
    }))
}

/// Random subnetwork with `round(fraction · n)` active entries in every
/// maskable tensor.
pub(crate) fn near_empty_mask(params: &ParamSet<f32>, fraction: f64, seed: u64) -> BinaryMask {
    let mut template = BinaryMask::constant(params, false, MaskProvenance::manual(&params.content_hash()));
    for bits in &mut template.bits {
        let k = (fraction * bits.len() as f64).round() as usize;
        bits[..k].iter_mut().for_each(|b| *b = true);
    }
    random_matched_mask(&template, seed)
}

fn covariance_cmd(
    run: &mut Run,
    mask: Option<PathBuf>,
    random_near_empty: bool,
    inputs: Inputs,
    out: Option<PathBuf>,
) -> Result<Value> {
    let ckpt = load_checkpoint(run, inputs.checkpoint)?;
    let stream = load_stream(run, inputs.tokens)?;
    let s = splits(run, &stream)?;
    let mask = if random_near_empty {
        let m = near_empty_mask(&ckpt.params, run.cfg.analysis.near_empty_fraction, run.cfg.seed);
        Some((m, format!("random-near-empty:{}", run.cfg.seed)))
    } else {
        match &mask {
            Some(p) => {
                let h = run.input(p)?;
                Some((load_mask(run, p, Some(&ckpt))?, h))
            }
            None => None,
        }
    };
    let active = mask.as_ref().map(|(m, _)| m.active());
    let trace = trace_for(run, &ckpt, mask.as_ref().map(|(m, h)| (m, h.clone())), &s.heldout)?;
    let sim = covariance_similarity(&trace)?;
    let out = report_path(run, out, "covsim.csv");
    run.output(&out, |p| report::write_covsim(p, &sim))?;
    Ok(json!({ "covsim": out, "active": active, "similarity": sim }))
}

fn structure_cmd(run: &mut Run, mask: PathBuf, out: Option<PathBuf>) -> Result<Value> {
    let m = load_mask(run, &mask, None)?;
    let r = structure_report(&m)?;
    let out = report_path(run, out, "structure.csv");
    run.output(&out, |p| report::write_structure(p, &r))?;
    Ok(json!({
        "structure": out,
        "total_active": r.total_active,
        "mlp": r.mlp,
        "attention": r.attention,
        "qk": r.qk,
        "vo": r.vo,
        "mlp_by_layer": r.mlp_by_layer(),
    }))
}

fn overlap_cmd(
    run: &mut Run,
    mask_a: PathBuf,
    mask_b: Vec<PathBuf>,
    samples: Option<usize>,
    out: Option<PathBuf>,
) -> Result<Value> {
    let a = load_mask(run, &mask_a, None)?;
    let mut candidates = Vec::new();
    for p in &mask_b {
        let m = load_mask(run, p, None)?;
        if m.provenance.source_checkpoint_hash != a.provenance.source_checkpoint_hash {
            return Err(Error::Provenance(format!(
                "{} and {} come from different checkpoints",
                mask_a.display(),
                p.display()
            )));
        }
        candidates.push((p.clone(), m));
    }
    let (b_path, b) = if candidates.len() == 1 {
        candidates.pop().expect("one")
    } else {
        candidates
            .into_iter()
            .filter(|(_, m)| m.active() > a.active())
            .min_by_key(|(_, m)| m.active())
            .ok_or_else(|| {
                Error::SelectionFailure(format!(
                    "no --mask-b has more than the {} active parameters of --mask-a",
                    a.active()
                ))
            })?
    };
    let n = samples.unwrap_or(run.cfg.analysis.overlap_samples);
    let stats = overlap_test(&a, &b, n, run.cfg.seed)?;
    let out = report_path(run, out, "overlap.csv");
    run.output(&out, |p| report::write_overlap(p, &stats))?;
    Ok(json!({ "overlap": out, "mask_b": b_path, "stats": stats }))
}

fn ablate_cmd(run: &mut Run, mask: PathBuf, inputs: Inputs, out: Option<PathBuf>) -> Result<Value> {
    let ckpt = load_checkpoint(run, inputs.checkpoint)?;
    let stream = load_stream(run, inputs.tokens)?;
    let s = splits(run, &stream)?;
    let m = load_mask(run, &mask, Some(&ckpt))?;
    let seeds: Vec<u64> = run
        .cfg
        .analysis
        .ablation_seeds
        .iter()
        .map(|&x| run.cfg.seed.wrapping_add(x))
        .collect();
    let r = ablation_eval(&ckpt.params, &m, &s.eval, &s.train, &seeds)?;
    let out = report_path(run, out, "ablation.csv");
    run.output(&out, |p| report::write_ablation(p, &r))?;
    Ok(json!({
        "ablation": out,
        "report": r,
        "bigram_delta": r.bigram_delta(),
        "random_deltas": r.random_deltas(),
    }))
}

fn recipes_cmd(
    run: &mut Run,
    mask: PathBuf,
    lambda: Option<f64>,
    kinds: Option<Vec<String>>,
    inputs: Inputs,
    out: Option<PathBuf>,
) -> Result<Value> {
    let ckpt = load_checkpoint(run, inputs.checkpoint)?;
    let stream = load_stream(run, inputs.tokens)?;
    let s = splits(run, &stream)?;
    let table = load_table(run, inputs.bigrams, &stream)?;
    let m = load_mask(run, &mask, Some(&ckpt))?;
    let kinds = match kinds {
        None => RecipeKind::ALL.to_vec(),
        Some(ks) => ks
            .iter()
            .map(|k| {
                RecipeKind::from_label(k)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown recipe `{k}`")))
            })
            .collect::<Result<_>>()?,
    };
    let lambda = lambda.or(m.provenance.lambda).unwrap_or(0.0);
    let inputs = RecipeInputs {
        reference: &ckpt.params,
        table: &table,
        bigram_mask: &m,
        fit_stream: &s.train,
        heldout: &s.eval,
        trace_tokens: run.cfg.analysis.trace_tokens,
        ridge_alpha: run.cfg.analysis.ridge_alpha,
    };
    let retry = run.cfg.sweep.retry_max;
    let (hyper, threshold) = (run.cfg.mask.clone(), run.cfg.sweep.threshold);
    let mut train = |p: &ParamSet<f32>| -> Result<BinaryMask> {
        let (r, _) = train_mask_retrying(p, MaskTarget::Bigram(&table), lambda, &hyper, &s.train, retry)?;
        r.mask.binarize(p, threshold, &p.content_hash())
    };
    let rows = experiment_recipes(&kinds, &inputs, &mut train)?;
    let out = report_path(run, out, "experiments.csv");
    run.output(&out, |p| report::write_experiments(p, &rows))?;
    Ok(json!({
        "experiments": out,
        "lambda": lambda,
        "rows": rows.iter().map(|r| json!({ "kind": r.kind.label(), "r": r.r })).collect::<Vec<_>>(),
    }))
}

fn generate_cmd(
    run: &mut Run,
    prompt: String,
    temperature: Option<f64>,
    n_tokens: Option<usize>,
    ablate_mask: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
) -> Result<Value> {
    let ckpt = load_checkpoint(run, checkpoint)?;
    let vpath = or_default(run, vocab, "vocab.json");
    run.input(&vpath)?;
    let vocab = Vocab::load(&vpath)?;
    let params = match &ablate_mask {
        Some(p) => {
            let m = load_mask(run, p, Some(&ckpt))?;
            apply_binary(&ckpt.params, &m, MaskMode::Ablate)?
        }
        None => ckpt.params.clone(),
    };
    let opts = GenerateOptions {
        n_tokens: n_tokens.unwrap_or(run.cfg.generate.n_tokens),
        temperature: temperature.unwrap_or(run.cfg.generate.temperature),
        seed: run.cfg.seed,
    };
    let text = generate(&params, &vocab, &prompt, &opts, None)?;
    Ok(json!({
        "prompt": prompt,
        "continuation": text,
        "temperature": opts.temperature,
        "ablated": ablate_mask,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        assert_eq!(lambda_tag(0.0), "0");
        assert_eq!(lambda_tag(0.5), "0.5");
        assert_eq!(mask_name("bigram", 100.0), "bigram_l100.mask");
        assert_eq!(checkpoint_step(Path::new("x/step000250.ckpt")), Some(250));
        assert_eq!(checkpoint_step(Path::new("x/step.ckpt")), None);
    }
}
