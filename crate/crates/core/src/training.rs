//! Epoch loop, validation and best-checkpoint selection.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use zeronorm_tensor::{Adam, AdamConfig, Graph, LrSchedule};

use crate::corpus::{encode_pairs, make_batches, Batch, EncodedPair, ParallelCorpus};
use crate::model::{ModelConfig, TokenBatch, Transformer};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Padded token budget per batch.
    pub max_tokens: usize,
    pub lr: f64,
    pub warmup: i64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            max_tokens: 512,
            lr: 5e-4,
            warmup: 400,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(LrSchedule::inverse_sqrt(self.lr, self.warmup)?)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub steps: u64,
    pub improved: bool,
    pub seconds: f64,
}

pub struct TrainState {
    /// The parameters with the lowest validation loss seen so far.
    pub model: Transformer,
    pub epoch: usize,
    pub best_valid_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
    /// Checkpoint file written on every improvement.
    pub checkpoint: Option<PathBuf>,
    /// `(epoch, valid loss)` of every checkpoint write; losses never increase.
    pub checkpoint_history: Vec<(usize, f64)>,
    /// Set when the deadline cut training short. The last logged epoch may
    /// then be partial.
    pub out_of_time: bool,
}

/// Where training writes its artifacts. Both are optional.
#[derive(Clone, Copy, Default)]
pub struct TrainOutputs<'a> {
    pub dir: Option<&'a Path>,
    /// Receives every log line as it is produced.
    pub echo: Option<&'a (dyn Fn(&EpochRecord) + Sync)>,
    /// Training stops after the first batch that ends past this instant.
    pub deadline: Option<Instant>,
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

fn batch_tensors(b: &Batch) -> Result<(TokenBatch, TokenBatch)> {
    let src = TokenBatch::new(b.src.clone(), b.size(), b.src_len, b.src_lens.clone())?;
    let tgt = TokenBatch::new(b.tgt_in.clone(), b.size(), b.tgt_len, b.tgt_lens.clone())?;
    Ok((src, tgt))
}

/// Mean cross-entropy over all non-pad target tokens, with dropout off.
pub fn validate(model: &Transformer, examples: &[EncodedPair], max_tokens: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for b in make_batches(examples, max_tokens, 0)? {
        let (src, tgt) = batch_tensors(&b)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let logits = model.decode_teacher_forced(&mut g, &bound, &src, &tgt)?;
        let loss = g.cross_entropy(logits, &b.tgt_out)?;
        let n = b.tgt_out.iter().filter(|t| t.is_some()).count();
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn validate_corpus(
    model: &Transformer,
    corpus: &ParallelCorpus,
    max_tokens: usize,
) -> Result<f64> {
    let vocab = corpus.vocabulary();
    let ex = encode_pairs(
        &corpus.valid,
        &vocab,
        model.config().tag_scheme,
        &corpus.languages,
    )?;
    validate(model, &ex, max_tokens)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over a simple combination.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains a fresh model built from `model_config` (its `vocab_size` is taken
/// from the corpus) and returns the best-validation parameters.
pub fn train(
    model_config: &ModelConfig,
    corpus: &ParallelCorpus,
    config: &TrainConfig,
    out: &TrainOutputs<'_>,
) -> Result<TrainState> {
    let vocab = corpus.vocabulary();
    let mut mc = model_config.clone();
    mc.vocab_size = vocab.len();
    let schedule = config.schedule()?;
    let mut model = Transformer::new(mc)?;
    if corpus.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let scheme = model.config().tag_scheme;
    let train_ex = encode_pairs(&corpus.train, &vocab, scheme, &corpus.languages)?;
    let valid_ex = encode_pairs(&corpus.valid, &vocab, scheme, &corpus.languages)?;
    if valid_ex.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut log_file = match out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join(LOG_FILE),
            )?))
        }
        None => None,
    };

    let mut state = TrainState {
        model: model.clone(),
        epoch: 0,
        best_valid_loss: None,
        best_epoch: None,
        log: Vec::new(),
        checkpoint: None,
        checkpoint_history: Vec::new(),
        out_of_time: false,
    };
    let mut adam = Adam::new(AdamConfig::new(schedule), model.params());
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let batches = make_batches(
            &train_ex,
            config.max_tokens,
            mix(config.seed, epoch as u64, 0),
        )?;
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        let mut lr = 0.0;
        for (bi, b) in batches.iter().enumerate() {
            let (src, tgt) = batch_tensors(b)?;
            let mut g = Graph::training(mix(config.seed, epoch as u64, bi as u64 + 1));
            let bound = model.bind(&mut g, true);
            let logits = model.decode_teacher_forced(&mut g, &bound, &src, &tgt)?;
            let loss = g.cross_entropy(logits, &b.tgt_out)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    lr: schedule.lr_at(adam.step_count() + 1),
                });
            }
            let n = b.tgt_out.iter().filter(|t| t.is_some()).count();
            loss_sum += value * n as f64;
            token_sum += n;
            let grads = g.backward(loss)?;
            let gs: Vec<Option<&[f64]>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
            lr = adam.step(model.params_mut(), &gs)?;
            if out.deadline.is_some_and(|d| Instant::now() >= d) {
                state.out_of_time = true;
                break;
            }
        }
        let valid_loss = validate(&model, &valid_ex, config.max_tokens)?;
        let improved = state.best_valid_loss.is_none_or(|best| valid_loss < best);
        if improved {
            state.best_valid_loss = Some(valid_loss);
            state.best_epoch = Some(epoch);
            state.model = model.clone();
            state.checkpoint_history.push((epoch, valid_loss));
            if let Some(dir) = out.dir {
                let path = dir.join(CHECKPOINT_FILE);
                model.save(&path)?;
                state.checkpoint = Some(path);
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / token_sum as f64,
            valid_loss,
            lr,
            steps: adam.step_count(),
            improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        if let Some(echo) = out.echo {
            echo(&record);
        }
        state.log.push(record);
        state.epoch = epoch;
        if state.out_of_time {
            break;
        }
    }
    Ok(state)
}
