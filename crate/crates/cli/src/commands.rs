//! Subcommand bodies. Each one is a function of the run config, its input
//! files and the seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use sdlm_core::checkpoint::Checkpoint;
use sdlm_core::classifier::{train_classifier as fit_classifier, ClassifierConfig, ClassifierHandle, ClassifierTrainConfig};
use sdlm_core::corpus::{build_vocab, pack_sequences, parse_labeled, TokenId, TokenizerMode, Vocabulary};
use sdlm_core::decoder::{decode_sequence, DecodeConfig, GenerationRecord, Guidance};
use sdlm_core::metrics::MetricReport;
use sdlm_core::model::ModelParameters;
use sdlm_core::reference::{
    conditional_perplexity, train_ar_reference, ARReferenceModel, ReferenceConfig, ReferenceTrainConfig,
};
use sdlm_core::schedule::NoiseSchedule;
use sdlm_core::synthetic::{attribute_corpus, memorization_corpus, AttributeCorpusConfig};
use sdlm_core::trainer::Trainer;
use sdlm_core::Error;

use crate::config::RunConfig;
use crate::output::{data_lines, load_vocab, read_prompts, read_text, RunDir};
use crate::{CliError, SynthKind};

fn vocab_mismatch(expected: &str, found: &str) -> CliError {
    Error::VocabMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
    .into()
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus_path = cfg.existing("corpus", &cfg.corpus)?;
    let vocab_path = cfg.existing_opt("vocab", &cfg.vocab)?;
    let resume = cfg.existing_opt("resume", &cfg.resume)?;
    let tcfg = cfg.train_config()?;
    let mode = cfg.tokenizer()?;
    let run = RunDir::prepare(cfg)?;

    let text = read_text("corpus", &corpus_path)?;
    let vocab = match vocab_path {
        Some(p) => load_vocab(&p, mode)?,
        None => build_vocab(&text, mode, cfg.vocab_size)?,
    };
    run.write("vocab.txt", vocab.to_file_string().as_bytes())?;
    let corpus = pack_sequences(&vocab.encode(&text), tcfg.seq_len, cfg.holdout_fraction, run.seed)?;

    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(&p)?;
            if ckpt.vocab_hash != vocab.hash() {
                return Err(vocab_mismatch(&ckpt.vocab_hash, &vocab.hash()));
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.set_total_steps(tcfg.total_steps);
            t
        }
        None => Trainer::new(tcfg.clone(), cfg.model_config(vocab.len())?, vocab.hash())?,
    };

    let start = Instant::now();
    let interval = trainer.config().checkpoint_interval;
    let mut csv = run.comment_header();
    csv.push_str("step,per_token_nll,wall_time\n");
    let mut last = None;
    let result = trainer.run(&corpus, |t, rec| {
        let wall = if cfg.wall_time {
            format!("{:.3}", start.elapsed().as_secs_f64())
        } else {
            String::new()
        };
        let _ = writeln!(csv, "{},{},{}", rec.step, rec.per_token_nll, wall);
        if interval > 0 && rec.step % interval == 0 {
            t.checkpoint().save(&run.path(&format!("checkpoint_step{}.ckpt", rec.step)))?;
        }
        last = Some(rec.per_token_nll);
        Ok(())
    });
    run.write("loss.csv", csv.as_bytes())?;
    if let Err(e) = result {
        if matches!(e, Error::Divergence { .. }) {
            trainer.checkpoint().save(&run.path("diverged.ckpt"))?;
        }
        return Err(e.into());
    }
    let path = run.path("checkpoint.ckpt");
    trainer.checkpoint().save(&path)?;
    match last {
        Some(l) => println!("step {} per-token NLL {l:.4}", trainer.step()),
        None => println!("step {} (no updates)", trainer.step()),
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Denoiser checkpoint and the vocabulary it was trained with. The
/// vocabulary defaults to `vocab.txt` beside the checkpoint.
fn load_denoiser(cfg: &RunConfig) -> Result<(Checkpoint, Vocabulary), CliError> {
    let ckpt_path = cfg.existing("checkpoint", &cfg.checkpoint)?;
    let vocab_path = match &cfg.vocab {
        Some(_) => cfg.existing("vocab", &cfg.vocab)?,
        None => {
            let p = ckpt_path.parent().unwrap_or(Path::new(".")).join("vocab.txt");
            cfg.existing("vocab", &Some(p))?
        }
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let vocab = load_vocab(&vocab_path, cfg.tokenizer()?)?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(vocab_mismatch(&ckpt.vocab_hash, &vocab.hash()));
    }
    Ok((ckpt, vocab))
}

fn decode_config(cfg: &RunConfig, ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<DecodeConfig, CliError> {
    let eos = match &cfg.eos {
        Some(tok) => Some(
            vocab
                .id(tok)
                .ok_or_else(|| CliError::config(format!("`eos`: token {tok:?} not in vocabulary")))?,
        ),
        None => None,
    };
    let d = DecodeConfig {
        block_len: cfg.decode_block_len.unwrap_or(ckpt.train_config.block_len),
        steps: cfg.decode_steps.unwrap_or(ckpt.train_config.diffusion_steps),
        projection: cfg.projection()?,
        guidance: 0.0,
        objective: cfg.objective()?,
        iterations: cfg.iterations,
        seed: cfg.seed()?,
        max_len: cfg.max_total_len,
        eos,
        record_trajectory: cfg.trajectory,
    };
    d.validate()?;
    if cfg.samples == 0 {
        return Err(CliError::config("`samples` must be at least 1"));
    }
    Ok(d)
}

struct Generated {
    prompt_index: usize,
    sample: usize,
    record: GenerationRecord,
}

/// Every prompt × sample, decoded in parallel; record `(p, s)` uses
/// stream `p·samples + s` so the output does not depend on scheduling.
fn decode_all(
    params: &ModelParameters,
    schedule: &NoiseSchedule,
    prompts: &[Vec<TokenId>],
    dcfg: &DecodeConfig,
    samples: usize,
    guidance: Option<&Guidance<'_>>,
) -> Result<Vec<Generated>, CliError> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..samples).map(move |s| (p, s)))
        .collect();
    let out = jobs
        .par_iter()
        .map(|&(p, s)| {
            let stream = (p * samples + s) as u64;
            decode_sequence(params, &prompts[p], dcfg, schedule, guidance, stream).map(|record| Generated {
                prompt_index: p,
                sample: s,
                record,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

fn record_json(vocab: &Vocabulary, g: &Generated) -> Result<String, CliError> {
    let ids = g.record.output();
    let v = json!({
        "prompt_index": g.prompt_index,
        "sample": g.sample,
        "prompt": vocab.decode(&g.record.prompt)?,
        "output": vocab.decode(&ids)?,
        "prompt_ids": g.record.prompt,
        "ids": ids,
        "seed": g.record.seed,
        "stream": g.record.stream,
        "config": g.record.config,
    });
    Ok(v.to_string())
}

fn write_generations(run: &RunDir, name: &str, vocab: &Vocabulary, gens: &[Generated]) -> Result<PathBuf, CliError> {
    let mut out = run.jsonl_header("generations");
    for g in gens {
        out.push_str(&record_json(vocab, g)?);
        out.push('\n');
    }
    run.write(name, out.as_bytes())
}

fn encode_prompts(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>, CliError> {
    let path = cfg.existing_opt("prompts", &cfg.prompts)?;
    Ok(read_prompts(path.as_deref())?.iter().map(|p| vocab.encode(p)).collect())
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let (ckpt, vocab) = load_denoiser(cfg)?;
    let prompts = encode_prompts(cfg, &vocab)?;
    let dcfg = decode_config(cfg, &ckpt, &vocab)?;
    let run = RunDir::prepare(cfg)?;
    let schedule = ckpt.train_config.schedule()?;

    let gens = decode_all(&ckpt.params, &schedule, &prompts, &dcfg, cfg.samples, None)?;
    let path = write_generations(&run, "generations.jsonl", &vocab, &gens)?;
    if dcfg.record_trajectory {
        let mut out = run.jsonl_header("trajectory");
        for g in &gens {
            let v = json!({
                "prompt_index": g.prompt_index,
                "sample": g.sample,
                "steps": g.record.trajectory,
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        run.write("trajectory.jsonl", out.as_bytes())?;
    }
    println!("wrote {} records to {}", gens.len(), path.display());
    Ok(())
}

fn load_classifier(cfg: &RunConfig, field: &'static str, path: &Option<PathBuf>, vocab: &Vocabulary) -> Result<ClassifierHandle, CliError> {
    let p = cfg.existing(field, path)?;
    let h = ClassifierHandle::load(&p)?;
    h.check_vocab(&vocab.hash())?;
    Ok(h)
}

fn label_of(h: &ClassifierHandle, field: &str, label: &str) -> Result<usize, CliError> {
    h.label_index(label).ok_or_else(|| {
        CliError::config(format!(
            "`label`: {label:?} unknown to the {field} (labels {:?})",
            h.labels()
        ))
    })
}

fn lambda_name(l: f64) -> String {
    format!("control_lambda{l}.jsonl")
}

pub fn control(cfg: &RunConfig) -> Result<(), CliError> {
    let (ckpt, vocab) = load_denoiser(cfg)?;
    let internal = load_classifier(cfg, "classifier", &cfg.classifier, &vocab)?;
    let external = match &cfg.external_classifier {
        Some(_) => Some(load_classifier(cfg, "external_classifier", &cfg.external_classifier, &vocab)?),
        None => None,
    };
    let label = cfg.label.as_deref().ok_or_else(|| CliError::config("missing required field `label`"))?;
    let label_idx = label_of(&internal, "classifier", label)?;
    let ext_idx = match &external {
        Some(h) => Some(label_of(h, "external classifier", label)?),
        None => None,
    };
    if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(CliError::config("`lambdas` must be a non-empty list of finite non-negative weights"));
    }
    let prompts = encode_prompts(cfg, &vocab)?;
    let base = decode_config(cfg, &ckpt, &vocab)?;
    let run = RunDir::prepare(cfg)?;
    let schedule = ckpt.train_config.schedule()?;
    let guidance = Guidance {
        classifier: &internal,
        label: label_idx,
    };

    let mut scores = run.comment_header();
    scores.push_str("lambda,prompt_index,sample,internal_score,external_score,external_correct\n");
    let mut summary = run.comment_header();
    summary.push_str("lambda,samples,mean_internal,median_internal,external_accuracy\n");
    let mut table = format!("{:>10} {:>10} {:>10} {:>10}\n", "lambda", "mean_int", "median_int", "ext_acc");

    for &lambda in &cfg.lambdas {
        let dcfg = DecodeConfig {
            guidance: lambda,
            ..base.clone()
        };
        let gens = decode_all(&ckpt.params, &schedule, &prompts, &dcfg, cfg.samples, Some(&guidance))?;
        write_generations(&run, &lambda_name(lambda), &vocab, &gens)?;

        let rows = gens
            .par_iter()
            .map(|g| {
                let mut tokens = g.record.prompt.clone();
                tokens.extend(g.record.output());
                let int = internal.classify_tokens(&tokens)?[label_idx].exp();
                let ext = match (&external, ext_idx) {
                    (Some(h), Some(y)) => {
                        let lp = h.classify_tokens(&tokens)?;
                        let best = argmax(&lp);
                        Some((lp[y].exp(), best == y))
                    }
                    _ => None,
                };
                Ok((int, ext))
            })
            .collect::<Result<Vec<_>, Error>>()?;

        for (g, (int, ext)) in gens.iter().zip(&rows) {
            let (es, ec) = match ext {
                Some((s, c)) => (s.to_string(), (*c as u8).to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(scores, "{lambda},{},{},{int},{es},{ec}", g.prompt_index, g.sample);
        }
        let mut ints: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mean = ints.iter().sum::<f64>() / ints.len().max(1) as f64;
        let median = median(&mut ints);
        let acc = if external.is_some() {
            let hits = rows.iter().filter(|r| r.1.is_some_and(|e| e.1)).count();
            Some(100.0 * hits as f64 / rows.len().max(1) as f64)
        } else {
            None
        };
        let acc_s = acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(summary, "{lambda},{},{mean},{median},{acc_s}", rows.len());
        let acc_t = acc.map(|a| format!("{a:.1}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(table, "{lambda:>10} {mean:>10.4} {median:>10.4} {acc_t:>10}");
    }
    run.write("control_scores.csv", scores.as_bytes())?;
    run.write("control_summary.csv", summary.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

type Pair = (Vec<TokenId>, Vec<TokenId>);

fn ids_field(v: &Value, key: &str) -> Option<Result<Vec<TokenId>, ()>> {
    v.get(key).map(|a| {
        a.as_array()
            .ok_or(())?
            .iter()
            .map(|x| x.as_u64().and_then(|n| TokenId::try_from(n).ok()).ok_or(()))
            .collect()
    })
}

/// `(prompt, continuation)` pairs from JSONL records or `prompt<TAB>text`
/// lines. Header objects (those carrying `config_hash`) are skipped.
fn read_pairs(field: &str, path: &Path, vocab: &Vocabulary) -> Result<Vec<Pair>, CliError> {
    let text = read_text(field, path)?;
    let bad = |line: usize, why: &str| CliError::data(format!("{}:{line}: {why}", path.display()));
    let mut pairs = Vec::new();
    for (line, l) in data_lines(&text) {
        let pair = if l.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(l).map_err(|e| bad(line, &e.to_string()))?;
            if v.get("config_hash").is_some() && v.get("output").is_none() {
                continue;
            }
            let text_of = |key: &str| v.get(key).and_then(Value::as_str).map(|s| vocab.encode(s));
            let prompt = match ids_field(&v, "prompt_ids") {
                Some(r) => r.map_err(|_| bad(line, "`prompt_ids` is not a list of token ids"))?,
                None => text_of("prompt").unwrap_or_default(),
            };
            let out = match ids_field(&v, "ids") {
                Some(r) => r.map_err(|_| bad(line, "`ids` is not a list of token ids"))?,
                None => text_of("output").ok_or_else(|| bad(line, "record has neither `ids` nor `output`"))?,
            };
            (prompt, out)
        } else {
            let (p, c) = l.split_once('\t').ok_or_else(|| bad(line, "expected `prompt<TAB>continuation`"))?;
            (vocab.encode(p), vocab.encode(c))
        };
        if let Some(&t) = pair.0.iter().chain(&pair.1).find(|&&t| t as usize >= vocab.len()) {
            return Err(bad(line, &format!("token id {t} outside vocabulary of {}", vocab.len())));
        }
        if pair.1.is_empty() {
            return Err(bad(line, "empty continuation"));
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(CliError::data(format!("{}: no records", path.display())));
    }
    Ok(pairs)
}

fn perplexity(model: &ARReferenceModel, pairs: &[Pair], cfg: &RunConfig) -> Result<f64, CliError> {
    let refs: Vec<(&[TokenId], &[TokenId])> = pairs.iter().map(|(p, c)| (p.as_slice(), c.as_slice())).collect();
    Ok(conditional_perplexity(model, &refs, cfg.averaging()?)?)
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let gens_path = cfg.existing("generations", &cfg.generations)?;
    let vocab_path = cfg.existing("vocab", &cfg.vocab)?;
    let gold_path = cfg.existing_opt("gold", &cfg.gold)?;
    let ref_path = cfg.existing_opt("reference", &cfg.reference)?;
    if gold_path.is_some() && ref_path.is_none() {
        return Err(CliError::config("`gold` needs a `reference` model to score perplexity"));
    }
    cfg.averaging()?;
    let vocab = load_vocab(&vocab_path, cfg.tokenizer()?)?;
    let run = RunDir::prepare(cfg)?;

    let gens = read_pairs("generations", &gens_path, &vocab)?;
    let samples: Vec<Vec<TokenId>> = gens.iter().map(|p| p.1.clone()).collect();
    let mut report = MetricReport::from_samples(&samples)?;
    if let Some(rp) = ref_path {
        let model = ARReferenceModel::load(&rp)?;
        model.check_vocab(&vocab.hash())?;
        let gen_ppl = perplexity(&model, &gens, cfg)?;
        let gold_ppl = match gold_path {
            Some(g) => Some(perplexity(&model, &read_pairs("gold", &g, &vocab)?, cfg)?),
            None => None,
        };
        report = report.with_perplexity(gen_ppl, gold_ppl)?;
    }
    let csv = format!("{}{}", run.comment_header(), report.to_csv());
    let path = run.write("metrics.csv", csv.as_bytes())?;
    print!("{}", report.to_table());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn schedule_dump(cfg: &RunConfig) -> Result<(), CliError> {
    let schedule = NoiseSchedule::cosine(cfg.diffusion_steps, cfg.schedule_offset)?;
    let run = RunDir::prepare(cfg)?;
    let mut csv = run.comment_header();
    csv.push_str("t,alpha_bar,alpha,coefficient\n");
    let mut above = 0usize;
    for t in 1..=schedule.len() {
        let c = schedule.compensation_coefficient(t)?;
        if c > 0.98 {
            above += 1;
        }
        let _ = writeln!(csv, "{t},{},{},{c}", schedule.alpha_bar(t), schedule.alpha(t)?);
    }
    let path = run.write("schedule.csv", csv.as_bytes())?;
    println!(
        "coefficient > 0.98 at {above}/{} timesteps ({:.2}%)",
        schedule.len(),
        100.0 * above as f64 / schedule.len() as f64
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train_classifier(cfg: &RunConfig) -> Result<(), CliError> {
    let labeled = cfg.existing("labeled_corpus", &cfg.labeled_corpus)?;
    let vocab_path = cfg.existing("vocab", &cfg.vocab)?;
    let seed = cfg.seed()?;
    let vocab = load_vocab(&vocab_path, cfg.tokenizer()?)?;
    let run = RunDir::prepare(cfg)?;

    let rows = parse_labeled(&read_text("labeled_corpus", &labeled)?)
        .map_err(|e| CliError::data(format!("{}: {e}", labeled.display())))?;
    let labels: Vec<String> = rows.iter().map(|r| r.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let examples: Vec<(Vec<TokenId>, String)> = rows.iter().map(|(l, t)| (vocab.encode(t), l.clone())).collect();
    let ccfg = ClassifierConfig {
        vocab_size: vocab.len(),
        max_len: cfg.aux_max_len,
        d_model: cfg.aux_d_model,
        n_layers: cfg.aux_n_layers,
        n_heads: cfg.aux_n_heads,
        d_ff: cfg.aux_d_ff,
        labels,
    };
    let train = ClassifierTrainConfig {
        steps: cfg.aux_steps,
        batch_size: cfg.aux_batch_size,
        learning_rate: cfg.aux_learning_rate,
        weight_decay: cfg.weight_decay,
        holdout_fraction: cfg.holdout_fraction,
        seed,
    };
    let (handle, report) = fit_classifier(&examples, ccfg, &train, cfg.one_hot_k, &vocab.hash())?;
    let path = run.path("classifier.ckpt");
    handle.save(&path)?;
    let held = report.heldout_accuracy.map(|a| a.to_string()).unwrap_or_default();
    let csv = format!(
        "{}train_examples,heldout_examples,train_accuracy,heldout_accuracy,final_loss\n{},{},{},{held},{}\n",
        run.comment_header(),
        report.train_examples,
        report.heldout_examples,
        report.train_accuracy,
        report.final_loss
    );
    run.write("classifier_report.csv", csv.as_bytes())?;
    println!(
        "train accuracy {:.3}, held-out accuracy {}",
        report.train_accuracy,
        report.heldout_accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into())
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train_reference(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus_path = cfg.existing("corpus", &cfg.corpus)?;
    let vocab_path = cfg.existing("vocab", &cfg.vocab)?;
    let seed = cfg.seed()?;
    let vocab = load_vocab(&vocab_path, cfg.tokenizer()?)?;
    let run = RunDir::prepare(cfg)?;

    let text = read_text("corpus", &corpus_path)?;
    let corpus = pack_sequences(&vocab.encode(&text), cfg.seq_len, cfg.holdout_fraction, seed)?;
    let rcfg = ReferenceConfig {
        vocab_size: vocab.len(),
        max_len: cfg.aux_max_len,
        d_model: cfg.aux_d_model,
        n_layers: cfg.aux_n_layers,
        n_heads: cfg.aux_n_heads,
        d_ff: cfg.aux_d_ff,
    };
    let train = ReferenceTrainConfig {
        steps: cfg.aux_steps,
        batch_size: cfg.aux_batch_size,
        learning_rate: cfg.aux_learning_rate,
        weight_decay: cfg.weight_decay,
        seed,
    };
    let (model, curve) = train_ar_reference(&corpus, rcfg, &train, &vocab.hash())?;
    let path = run.path("reference.ckpt");
    model.save(&path)?;
    let mut csv = run.comment_header();
    csv.push_str("step,per_token_nll\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    run.write("reference_loss.csv", csv.as_bytes())?;
    let held: Vec<Vec<TokenId>> = corpus.heldout().map(<[TokenId]>::to_vec).collect();
    if !held.is_empty() {
        let ppl = sdlm_core::reference::reference_perplexity(&model, &held)?;
        println!("held-out perplexity {ppl:.3} over {} sequences", held.len());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn lines_of(vocab: &Vocabulary, seqs: &[Vec<TokenId>]) -> Result<String, CliError> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&vocab.decode(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Prompt file of prefixes and `prefix<TAB>rest` gold pairs.
fn prefix_files(vocab: &Vocabulary, seqs: &[Vec<TokenId>], prefix: usize) -> Result<(String, String), CliError> {
    let mut prompts = String::new();
    let mut gold = String::new();
    for s in seqs {
        let cut = prefix.min(s.len());
        let p = vocab.decode(&s[..cut])?;
        let _ = writeln!(prompts, "{p}");
        let _ = writeln!(gold, "{p}\t{}", vocab.decode(&s[cut..])?);
    }
    Ok((prompts, gold))
}

pub fn synth(kind: SynthKind, cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.tokenizer()? != TokenizerMode::Word {
        return Err(CliError::config("synthetic corpora use the word tokenizer"));
    }
    let seed = cfg.seed()?;
    let run = RunDir::prepare(cfg)?;
    let (vocab, seqs) = match kind {
        SynthKind::Memorization => {
            let (vocab, corpus) = memorization_corpus(cfg.synth_sequences, cfg.seq_len, cfg.vocab_size, seed)?;
            (vocab, corpus.sequences().to_vec())
        }
        SynthKind::Attribute => {
            let acfg = AttributeCorpusConfig {
                sequences: cfg.synth_sequences,
                seq_len: cfg.seq_len,
                prefix_len: cfg.synth_prefix_len,
                seed,
                ..Default::default()
            };
            let a = attribute_corpus(&acfg)?;
            run.write("labeled.tsv", a.labeled_lines()?.as_bytes())?;
            let ext = attribute_corpus(&AttributeCorpusConfig {
                seed: seed.wrapping_add(1),
                ..acfg
            })?;
            run.write("external.tsv", ext.labeled_lines()?.as_bytes())?;
            (a.vocab.clone(), a.sequences())
        }
    };
    run.write("vocab.txt", vocab.to_file_string().as_bytes())?;
    run.write("corpus.txt", lines_of(&vocab, &seqs)?.as_bytes())?;
    let (prompts, gold) = prefix_files(&vocab, &seqs, cfg.synth_prefix_len)?;
    run.write("prompts.txt", prompts.as_bytes())?;
    run.write("gold.tsv", gold.as_bytes())?;
    println!("wrote {} sequences to {}", seqs.len(), run.dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_argmax() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
        assert_eq!(argmax(&[-1.0, 0.5, 0.5]), 1);
    }

    #[test]
    fn pairs_from_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(
            TokenizerMode::Word,
            ["<pad>", "<unk>", "a", "b"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let p = dir.path().join("g.jsonl");
        std::fs::write(
            &p,
            "{\"config_hash\":\"x\",\"seed\":1}\n{\"prompt_ids\":[2],\"ids\":[3,3]}\n{\"prompt\":\"b\",\"output\":\"a b\"}\n",
        )
        .unwrap();
        let pairs = read_pairs("generations", &p, &vocab).unwrap();
        assert_eq!(pairs, vec![(vec![2], vec![3, 3]), (vec![3], vec![2, 3])]);

        std::fs::write(&p, "# c\na\tb a\n\tb\n").unwrap();
        let pairs = read_pairs("generations", &p, &vocab).unwrap();
        assert_eq!(pairs, vec![(vec![2], vec![3, 2]), (vec![], vec![3])]);

        std::fs::write(&p, "a b\n").unwrap();
        let e = read_pairs("generations", &p, &vocab).unwrap_err();
        assert_eq!(e.code, 3);
        assert!(e.message.contains(":1:"));
        std::fs::write(&p, "{\"ids\":[9]}\n").unwrap();
        assert!(read_pairs("generations", &p, &vocab).is_err());
    }
}
