//! The six pipeline commands. Each one locks the run directory, produces
//! its artifacts deterministically from (config, seed), and writes a
//! manifest beside them.

use crate::config::ExperimentConfig;
use crate::manifest::{write_manifest, RunLock};
use crate::report::{loss_curve_svg, read_metrics_log, summary_csv};
use crate::CliError;
use anyhow::{anyhow, Context};
use enndola_core::data::{
    build_training_pairs, load_documents, read_pairs, ByteTokenizer, ReadMode, StreamingPairs,
};
use enndola_core::epinet::{
    load_epinet_checkpoint, save_epinet_checkpoint, train_epinet, InMemoryPairs, PairSource,
};
use enndola_core::error::Error as CoreError;
use enndola_core::eval::{
    eval_suite, load_mc_dataset, DecoderVariant, ScoreOptions, VariantTag,
};
use enndola_core::lm::{
    held_out_cross_entropy, load_checkpoint, save_checkpoint, split_held_out, train_base_lm,
    unigram_baseline_ce, TokenSequence, TransformerWeights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

impl ExperimentConfig {
    pub fn base_checkpoint(&self) -> PathBuf {
        self.paths.run_dir.join("base.ckpt")
    }
    pub fn base_train_log(&self) -> PathBuf {
        self.paths.run_dir.join("base_train_log.jsonl")
    }
    pub fn cache_path(&self) -> PathBuf {
        self.paths.run_dir.join("pairs.cache")
    }
    pub fn epinet_checkpoint(&self) -> PathBuf {
        self.paths.run_dir.join("epinet.ckpt")
    }
    pub fn epinet_metrics(&self) -> PathBuf {
        self.paths.run_dir.join("epinet_metrics.jsonl")
    }
    pub fn results_csv(&self) -> PathBuf {
        self.paths.run_dir.join("results.csv")
    }
    pub fn per_item_jsonl(&self) -> PathBuf {
        self.paths.run_dir.join("per_item.jsonl")
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn require_artifact(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!(
            "missing {}; run `enndola {producer}` first",
            path.display()
        )))
    }
}

fn load_base(config: &ExperimentConfig) -> Result<TransformerWeights, CliError> {
    require_artifact(&config.base_checkpoint(), "train-base")?;
    let weights = load_checkpoint(&config.base_checkpoint()).map_err(runtime)?;
    if weights.config != config.model {
        return Err(CliError::Runtime(anyhow!(
            "checkpoint {} was trained with a different model config; \
             re-run `enndola train-base`",
            config.base_checkpoint().display()
        )));
    }
    Ok(weights)
}

pub fn cmd_train_base(config: &ExperimentConfig, config_path: &Path) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&config.paths.run_dir).map_err(CliError::Runtime)?;
    let corpus_text = std::fs::read_to_string(&config.paths.corpus)
        .with_context(|| format!("reading corpus {}", config.paths.corpus.display()))
        .map_err(CliError::Runtime)?;
    let tokenizer = ByteTokenizer;
    let tokens = tokenizer.tokenize(&corpus_text);
    log::info!(
        "training base LM: {} corpus tokens, {} steps",
        tokens.len(),
        config.base_train.steps
    );
    let (weights, steps) =
        train_base_lm(&config.model, tokens.as_slice(), &config.base_train).map_err(runtime)?;

    let ckpt = config.base_checkpoint();
    save_checkpoint(&weights, &ckpt).map_err(runtime)?;
    let log_path = config.base_train_log();
    let mut log_file = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(runtime)?,
    );
    for record in &steps {
        serde_json::to_writer(&mut log_file, record).map_err(runtime)?;
        log_file.write_all(b"\n").map_err(runtime)?;
    }
    log_file.flush().map_err(runtime)?;

    let (train, held_out) = split_held_out(tokens.as_slice(), &config.model, &config.base_train);
    let ce = held_out_cross_entropy(&weights, held_out, config.base_train.window)
        .map_err(runtime)?;
    let unigram = unigram_baseline_ce(
        train,
        held_out,
        config.base_train.window,
        config.model.vocab_size,
    );
    println!(
        "held-out cross-entropy {ce:.4} nats/token (unigram baseline {unigram:.4}, {})",
        if ce <= unigram { "beaten" } else { "NOT beaten" }
    );

    write_manifest(
        &config.paths.run_dir,
        "train-base",
        config.seed,
        config_path,
        &[config.paths.corpus.as_path()],
        &[ckpt.as_path(), log_path.as_path()],
    )
    .map_err(CliError::Runtime)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

pub fn cmd_gen_pairs(config: &ExperimentConfig, config_path: &Path) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&config.paths.run_dir).map_err(CliError::Runtime)?;
    let weights = load_base(config)?;
    let docs = load_documents(&config.paths.docs).map_err(runtime)?;
    let cache = build_training_pairs(&weights, &config.dola, &docs, config.pairs.prefix_drop)
        .map_err(runtime)?;
    let path = config.cache_path();
    cache.write(&path).map_err(runtime)?;
    write_manifest(
        &config.paths.run_dir,
        "gen-pairs",
        config.seed,
        config_path,
        &[config.paths.docs.as_path(), config.base_checkpoint().as_path()],
        &[path.as_path()],
    )
    .map_err(CliError::Runtime)?;
    println!(
        "wrote {} ({} pairs from {} docs)",
        path.display(),
        cache.header.pair_count,
        docs.len()
    );
    Ok(())
}

pub fn cmd_train_epinet(config: &ExperimentConfig, config_path: &Path) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&config.paths.run_dir).map_err(CliError::Runtime)?;
    let weights = load_base(config)?;
    require_artifact(&config.cache_path(), "gen-pairs")?;
    let hash = weights.content_hash();

    let metrics_path = config.epinet_metrics();
    let metrics_file = std::fs::File::create(&metrics_path).map_err(runtime)?;
    let mut metrics = std::io::BufWriter::new(metrics_file);
    let ckpt_dir = config.paths.run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(runtime)?;
    let every = config.epinet.checkpoint_every;

    let mut on_epoch = |params: &enndola_core::epinet::EpinetParams,
                        record: &enndola_core::epinet::EpochRecord|
     -> enndola_core::Result<()> {
        serde_json::to_writer(&mut metrics, record)
            .map_err(|e| CoreError::Data(e.to_string()))?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        let milestone = matches!(record.epoch, 1 | 50 | 100);
        if milestone || (every > 0 && record.epoch % every == 0) {
            let path = ckpt_dir.join(format!("epinet_epoch_{:05}.ckpt", record.epoch));
            save_epinet_checkpoint(params, &path)?;
        }
        Ok(())
    };

    let head = weights.vocab_head();
    let d_model = weights.config.d_model;
    let outcome = match config.pairs.read_mode {
        ReadMode::InMemory => {
            let pairs: enndola_core::Result<Vec<_>> =
                read_pairs(&config.cache_path(), &hash, ReadMode::InMemory)
                    .map_err(runtime)?
                    .collect();
            let mut source = InMemoryPairs(pairs.map_err(runtime)?);
            log::info!("training epinet on {} pairs (in memory)", source.len());
            train_epinet(&mut source, head, d_model, &config.epinet, &mut on_epoch)
        }
        ReadMode::Streaming => {
            let mut source =
                StreamingPairs::open(&config.cache_path(), &hash).map_err(runtime)?;
            log::info!("training epinet on {} pairs (streaming)", source.len());
            train_epinet(&mut source, head, d_model, &config.epinet, &mut on_epoch)
        }
    };
    let (params, records) = match outcome {
        Ok(v) => v,
        Err(e @ CoreError::TrainingDiverged { .. }) => {
            return Err(CliError::Runtime(anyhow!(
                "{e}; metrics and periodic checkpoints up to the failure are retained under {}",
                config.paths.run_dir.display()
            )));
        }
        Err(e) => return Err(runtime(e)),
    };
    drop(metrics);

    let ckpt = config.epinet_checkpoint();
    save_epinet_checkpoint(&params, &ckpt).map_err(runtime)?;
    if let Some(last) = records.last() {
        println!(
            "epinet trained: {} epochs, final loss {:.4}, {} parameters ({} learnable)",
            last.epoch,
            last.loss,
            params.param_count(),
            params.learnable.params.len()
        );
    }
    write_manifest(
        &config.paths.run_dir,
        "train-epinet",
        config.seed,
        config_path,
        &[config.base_checkpoint().as_path(), config.cache_path().as_path()],
        &[ckpt.as_path(), metrics_path.as_path()],
    )
    .map_err(CliError::Runtime)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

pub fn parse_variants(tags: &[String]) -> Result<Vec<VariantTag>, CliError> {
    if tags.is_empty() {
        return Ok(vec![VariantTag::Baseline, VariantTag::Dola, VariantTag::DolaEnn]);
    }
    tags.iter()
        .map(|t| {
            VariantTag::parse(t).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown variant {t:?} (expected baseline, dola, or dola_enn)"
                ))
            })
        })
        .collect()
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    config_path: &Path,
    variant_tags: &[String],
    dataset_flag: Option<&Path>,
) -> Result<(), CliError> {
    let tags = parse_variants(variant_tags)?;
    let dataset_path = dataset_flag
        .map(Path::to_path_buf)
        .or_else(|| config.eval.dataset.clone())
        .ok_or_else(|| {
            CliError::Usage("no MC dataset: pass --dataset or set eval.dataset".into())
        })?;

    let _lock = RunLock::acquire(&config.paths.run_dir).map_err(CliError::Runtime)?;
    let weights = load_base(config)?;
    let epinet = if tags.contains(&VariantTag::DolaEnn) {
        require_artifact(&config.epinet_checkpoint(), "train-epinet")?;
        Some(load_epinet_checkpoint(&config.epinet_checkpoint()).map_err(runtime)?)
    } else {
        None
    };
    let items = load_mc_dataset(&dataset_path).map_err(runtime)?;

    let variants: Vec<DecoderVariant<'_>> = tags
        .iter()
        .map(|&tag| {
            DecoderVariant::new(
                tag,
                &weights,
                Some(&config.dola),
                epinet.as_ref().map(|p| (p, &config.epinet)),
            )
        })
        .collect::<enndola_core::Result<_>>()
        .map_err(runtime)?;

    let options = ScoreOptions {
        length_normalize: config.eval.length_normalize,
    };
    let results = eval_suite(
        &variants,
        &items,
        &config.model_label(),
        &config.eval.template,
        options,
        config.seed,
    )
    .map_err(runtime)?;

    let csv_path = config.results_csv();
    std::fs::write(&csv_path, results.to_csv()).map_err(runtime)?;
    let per_item_path = config.per_item_jsonl();
    std::fs::write(&per_item_path, results.per_item_jsonl()).map_err(runtime)?;
    print!("{}", results.to_csv());

    write_manifest(
        &config.paths.run_dir,
        "eval",
        config.seed,
        config_path,
        &[dataset_path.as_path(), config.base_checkpoint().as_path()],
        &[csv_path.as_path(), per_item_path.as_path()],
    )
    .map_err(CliError::Runtime)?;
    Ok(())
}

pub fn cmd_generate(
    config: &ExperimentConfig,
    variant_tag: &str,
    prompt: &str,
    max_tokens: usize,
    sample: bool,
) -> Result<(), CliError> {
    let tag = VariantTag::parse(variant_tag).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variant {variant_tag:?} (expected baseline, dola, or dola_enn)"
        ))
    })?;
    let weights = load_base(config)?;
    let epinet = if tag == VariantTag::DolaEnn {
        require_artifact(&config.epinet_checkpoint(), "train-epinet")?;
        Some(load_epinet_checkpoint(&config.epinet_checkpoint()).map_err(runtime)?)
    } else {
        None
    };
    let variant = DecoderVariant::new(
        tag,
        &weights,
        Some(&config.dola),
        epinet.as_ref().map(|p| (p, &config.epinet)),
    )
    .map_err(runtime)?;

    let tokenizer = ByteTokenizer;
    let mut ids: Vec<u32> = vec![ByteTokenizer::BOS];
    ids.extend(tokenizer.encode_raw(prompt));
    let prompt_len = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // stream reserved for generation so eval streams stay untouched
    rng.set_stream(u64::MAX);
    for _ in 0..max_tokens {
        let window_start = ids.len().saturating_sub(config.model.max_seq_len);
        let window = &ids[window_start..];
        let seq = TokenSequence::new_checked(window.to_vec(), config.model.vocab_size)
            .map_err(runtime)?;
        let taps = weights.forward_with_taps(&seq).map_err(runtime)?;
        let dist = variant
            .step_distribution(&taps, window.len() - 1, &mut rng)
            .map_err(runtime)?;
        let next = if sample {
            categorical(dist.as_slice(), &mut rng)
        } else {
            argmax(dist.as_slice())
        } as u32;
        if next == ByteTokenizer::EOS {
            break;
        }
        ids.push(next);
    }
    let generated = TokenSequence::new_checked(ids[prompt_len..].to_vec(), config.model.vocab_size)
        .map_err(runtime)?;
    println!("{}", tokenizer.detokenize(&generated));
    Ok(())
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

pub fn cmd_report(
    config: &ExperimentConfig,
    config_path: &Path,
    metrics_flags: &[PathBuf],
) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&config.paths.run_dir).map_err(CliError::Runtime)?;
    let metric_paths: Vec<PathBuf> = if metrics_flags.is_empty() {
        let default = config.epinet_metrics();
        require_artifact(&default, "train-epinet")?;
        vec![default]
    } else {
        metrics_flags.to_vec()
    };
    let logs = metric_paths
        .iter()
        .map(|p| read_metrics_log(p))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(CliError::Runtime)?;

    let svg_path = config.paths.run_dir.join("report.svg");
    let csv_path = config.paths.run_dir.join("report.csv");
    std::fs::write(&svg_path, loss_curve_svg(&logs)).map_err(runtime)?;
    std::fs::write(&csv_path, summary_csv(&logs)).map_err(runtime)?;

    let input_refs: Vec<&Path> = metric_paths.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &config.paths.run_dir,
        "report",
        config.seed,
        config_path,
        &input_refs,
        &[svg_path.as_path(), csv_path.as_path()],
    )
    .map_err(CliError::Runtime)?;
    println!("wrote {} and {}", svg_path.display(), csv_path.display());
    Ok(())
}
