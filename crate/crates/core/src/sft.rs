//! Supervised stage: teacher-forced cross-entropy over all token positions.
//!
//! Batch order and augmentation are pure functions of `(seed, epoch,
//! index)`, so any step can be recomputed after a restart. Per-sample
//! gradients are summed in sample order before the `1/B` scaling, which
//! makes `N` micro-batches of size `B/N` identical to one batch of `B`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, AugmentConfig, Split, Triplet};
use crate::error::{Error, Result};
use crate::model::{is_base, Model, PolicyMode};
use crate::pipeline::{build_model, build_tokenizer, model_dims, Example};
use crate::sampler::log_softmax_row;
use crate::seed::derive_seed;
use crate::tensor::optim::{adamw_step, clip_global_norm, AdamWConfig, AdamWState};
use crate::tensor::params::{accumulate_grads, scale_grads};
use crate::tensor::{Graph, Grads, Tensor};
use crate::tokenizer::Tokenizer;

const STEP_KEY: &str = "sft/step";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSegment {
    pub from_epoch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr_schedule: Vec<LrSegment>,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    pub shuffle: bool,
    pub seed: u64,
    pub max_steps: Option<u64>,
    pub target_accuracy: Option<f64>,
    pub val_every_epochs: usize,
    pub checkpoint_every: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 10,
            lr_schedule: vec![
                LrSegment { from_epoch: 0, lr: 5e-4 },
                LrSegment { from_epoch: 6, lr: 1e-4 },
            ],
            batch_size: 8,
            grad_accum: 1,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            shuffle: true,
            seed: 0,
            max_steps: None,
            target_accuracy: None,
            val_every_epochs: 1,
            checkpoint_every: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sft: {m}")));
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.val_every_epochs == 0 {
            return bad("epochs, batch_size, grad_accum and val_every_epochs must be at least 1".into());
        }
        match self.lr_schedule.first() {
            Some(s) if s.from_epoch == 0 => {}
            _ => return bad("lr_schedule must start at epoch 0".into()),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].from_epoch <= w[0].from_epoch) {
            return bad("lr_schedule epochs must increase".into());
        }
        if let Some(s) = self.lr_schedule.iter().find(|s| !(s.lr > 0.0 && s.lr.is_finite())) {
            return bad(format!("learning rate {} is not positive", s.lr));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} is not positive", self.clip_norm));
        }
        if let Some(a) = self.target_accuracy.filter(|a| !(0.0..=1.0).contains(a)) {
            return bad(format!("target_accuracy {a} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Piecewise-constant rate; epochs past the schedule keep the last value.
    pub fn lr_schedule(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|s| s.from_epoch <= epoch)
            .last()
            .map_or(self.lr_schedule[0].lr, |s| s.lr)
    }
}

/// Mean cross-entropy, argmax hits and parameter gradients of one example.
fn example_pass(model: &Model, ex: &Example) -> Result<(f64, usize, Grads)> {
    let targets = ex.targets.flatten();
    let k = model.schedule().num_scales();
    let mut g = Graph::new();
    let mut b = model.binder(PolicyMode::Current, &is_base)?;
    let logits = model.forward(&mut g, &mut b, PolicyMode::Current, &ex.cond, &ex.inputs, k)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let correct = count_correct(g.value(logits), &targets);
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, correct, b.grads(&g)))
}

fn count_correct(logits: &Tensor, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|(r, &t)| {
            let row = logits.row(*r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == t
        })
        .count()
}

/// Teacher-forced loss and accuracy without gradients.
pub fn evaluate_examples(model: &Model, examples: &[Example]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let k = model.schedule().num_scales();
    let per: Vec<(f64, usize, usize)> = examples
        .par_iter()
        .map(|ex| {
            let logits = model.logits(PolicyMode::Current, &ex.cond, &ex.inputs, k)?;
            let targets = ex.targets.flatten();
            let nll: f64 = targets
                .iter()
                .enumerate()
                .map(|(r, &t)| -log_softmax_row(logits.row(r))[t])
                .sum();
            Ok((nll / targets.len() as f64, count_correct(&logits, &targets), targets.len()))
        })
        .collect::<Result<_>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let acc = per.iter().map(|p| p.1).sum::<usize>() as f64 / per.iter().map(|p| p.2).sum::<usize>() as f64;
    Ok((loss, acc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Grads,
}

/// Mean loss, accuracy and mean gradient over `micro_batches`, taken in
/// order. In deterministic mode per-sample gradients are summed in sample
/// order; otherwise each micro-batch is reduced in parallel first.
pub fn batch_grads(model: &Model, micro_batches: &[Vec<Example>], deterministic: bool) -> Result<BatchGrads> {
    let mut acc = Grads::new();
    let (mut loss, mut correct, mut count) = (0.0, 0usize, 0usize);
    for mb in micro_batches {
        let passes = mb.par_iter().map(|ex| example_pass(model, ex));
        let parts: Vec<(f64, usize, Grads)> = if deterministic {
            passes.collect::<Result<_>>()?
        } else {
            passes
                .try_reduce_with(|(la, ca, mut ga), (lb, cb, gb)| {
                    accumulate_grads(&mut ga, &gb, 1.0);
                    Ok((la + lb, ca + cb, ga))
                })
                .transpose()?
                .into_iter()
                .collect()
        };
        for (l, c, g) in parts {
            loss += l;
            correct += c;
            accumulate_grads(&mut acc, &g, 1.0);
        }
        count += mb.len();
    }
    let tokens = count * model.schedule().token_count();
    if count == 0 {
        return Err(Error::Training("empty batch".into()));
    }
    scale_grads(&mut acc, 1.0 / count as f64);
    Ok(BatchGrads {
        loss: loss / count as f64,
        accuracy: correct as f64 / tokens as f64,
        grads: acc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub batch_hash: u32,
}

/// Training state for the supervised stage.
pub struct SftTrainer {
    pub config: SftConfig,
    pub deterministic: bool,
    pub tokenizer: Tokenizer,
    pub model: Model,
    pub optimizer: AdamWState,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    /// Optimizer steps taken so far.
    pub step: u64,
    seed: u64,
}

impl SftTrainer {
    pub fn new(run: &RunConfig, triplets: Vec<Triplet>) -> Result<Self> {
        let tokenizer = build_tokenizer(&run.tokenizer, &run.schedule)?;
        let model = build_model(&run.model, &tokenizer)?;
        Self::with_parts(run, triplets, tokenizer, model)
    }

    pub fn with_parts(run: &RunConfig, triplets: Vec<Triplet>, tokenizer: Tokenizer, model: Model) -> Result<Self> {
        run.sft.validate()?;
        let (train, val): (Vec<_>, Vec<_>) = triplets.into_iter().partition(|t| t.split == Split::Train);
        if train.is_empty() {
            return Err(Error::Training("no training triplets".into()));
        }
        Ok(SftTrainer {
            optimizer: AdamWState::new(run.sft.optimizer),
            config: run.sft.clone(),
            deterministic: run.deterministic,
            tokenizer,
            model,
            train,
            val,
            step: 0,
            seed: run.stage_seed(run.sft.seed),
        })
    }

    /// Restores model, optimizer and step counter; the tokenizer comes from
    /// the checkpoint.
    pub fn resume(run: &RunConfig, triplets: Vec<Triplet>, ckpt: &Checkpoint) -> Result<Self> {
        let tokenizer = ckpt.tokenizer()?;
        let model = ckpt.model(run.model.clone(), model_dims(&tokenizer), true)?;
        let mut t = Self::with_parts(run, triplets, tokenizer, model)?;
        t.optimizer = ckpt.optimizer(run.sft.optimizer)?;
        t.step = ckpt.u64(STEP_KEY)?;
        Ok(t)
    }

    pub fn to_checkpoint(&self, config_json: &str) -> Checkpoint {
        let mut c = Checkpoint::new(config_json.to_string());
        c.put_model(&self.model);
        c.put_tokenizer(&self.tokenizer);
        c.put_optimizer(&self.optimizer);
        c.put_u64s(STEP_KEY, vec![self.step]);
        c.put_u64s("sft/seed", vec![self.seed]);
        c
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.effective_batch()) as u64
    }

    pub fn epoch_of(&self, step: u64) -> usize {
        (step / self.steps_per_epoch()) as usize
    }

    pub fn total_steps(&self) -> u64 {
        let by_epochs = self.steps_per_epoch() * self.config.epochs as u64;
        self.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        if self.config.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, epoch as u64])));
        }
        order
    }

    /// Examples of optimizer step `step`, split into micro-batches.
    pub fn batch(&self, step: u64) -> Result<Vec<Vec<Example>>> {
        let epoch = self.epoch_of(step);
        let within = (step % self.steps_per_epoch()) as usize;
        let eff = self.config.effective_batch();
        let order = self.epoch_order(epoch);
        let idx = &order[within * eff..((within + 1) * eff).min(order.len())];
        let examples = idx
            .par_iter()
            .map(|&i| {
                let t = &self.train[i];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, epoch as u64, i as u64, 1]));
                let (content, style) = augment(t, &self.config.augment, &mut rng);
                Example::new(&self.tokenizer, &content, &style, &t.target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(examples.chunks(self.config.batch_size).map(<[Example]>::to_vec).collect())
    }

    pub fn batch_hash(batch: &[Vec<Example>]) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for ex in batch.iter().flatten() {
            h.update(&ex.hash().to_le_bytes());
        }
        h.finalize()
    }

    /// One optimizer step.
    pub fn sft_step(&mut self) -> Result<StepMetrics> {
        let epoch = self.epoch_of(self.step);
        let lr = self.config.lr_schedule(epoch);
        let batch = self.batch(self.step)?;
        let mut bg = batch_grads(&self.model, &batch, self.deterministic)?;
        if !bg.loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} at step {} (epoch {epoch})",
                bg.loss, self.step
            )));
        }
        let grad_norm = clip_global_norm(&mut bg.grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Training(format!("non-finite gradient norm at step {}", self.step)));
        }
        let trainable: Vec<String> = self.model.params().names().filter(|n| is_base(n)).map(String::from).collect();
        adamw_step(self.model.params_mut(), &bg.grads, &trainable, &mut self.optimizer, lr)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            epoch,
            lr,
            loss: bg.loss,
            accuracy: bg.accuracy,
            grad_norm,
            batch_hash: Self::batch_hash(&batch),
        })
    }

    pub fn val_examples(&self) -> Result<Vec<Example>> {
        self.val
            .par_iter()
            .map(|t| Example::from_triplet(&self.tokenizer, t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SftSummary {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub best_val_loss: Option<f64>,
    pub final_val: Option<(f64, f64)>,
    pub reached_target: bool,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

/// Trains until the epoch budget, `max_steps` or `target_accuracy`,
/// writing `sft_metrics.csv`, `best.ckpt` and `final.ckpt` into `out_dir`.
pub fn run_sft(run: &RunConfig, triplets: Vec<Triplet>, out_dir: &Path, resume: Option<&Path>) -> Result<SftSummary> {
    let mut trainer = match resume {
        Some(p) => SftTrainer::resume(run, triplets, &Checkpoint::load(p)?)?,
        None => SftTrainer::new(run, triplets)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_json = run.to_json();
    let csv_path = out_dir.join("sft_metrics.csv");
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let append = resume.is_some() && csv_path.exists();
    let mut csv = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    if !append {
        writeln!(csv, "step,epoch,lr,loss,acc,val_loss,val_acc").map_err(|e| Error::io(&csv_path, e))?;
    }
    let val_examples = trainer.val_examples()?;
    let mut best: Option<f64> = None;
    let mut summary = SftSummary {
        steps: 0,
        losses: Vec::new(),
        accuracies: Vec::new(),
        best_val_loss: None,
        final_val: None,
        reached_target: false,
        best_checkpoint: best_path.clone(),
        final_checkpoint: final_path.clone(),
        metrics_csv: csv_path.clone(),
    };
    let total = trainer.total_steps();
    let spe = trainer.steps_per_epoch();
    while trainer.step < total {
        let m = trainer.sft_step()?;
        summary.losses.push(m.loss);
        summary.accuracies.push(m.accuracy);
        let reached = trainer.config.target_accuracy.is_some_and(|a| m.accuracy >= a);
        let epoch_done = m.step % spe == 0 && (m.epoch + 1) % trainer.config.val_every_epochs == 0;
        let last = reached || m.step == total;
        let mut val = None;
        if !val_examples.is_empty() && (epoch_done || last) {
            let (vl, va) = evaluate_examples(&trainer.model, &val_examples)?;
            if best.is_none_or(|b| vl < b) {
                best = Some(vl);
                trainer.to_checkpoint(&config_json).save(&best_path)?;
            }
            val = Some((vl, va));
        }
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            m.step,
            m.epoch,
            m.lr,
            m.loss,
            m.accuracy,
            fmt_opt(val.map(|v| v.0)),
            fmt_opt(val.map(|v| v.1))
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        if trainer.config.checkpoint_every > 0 && m.step % trainer.config.checkpoint_every == 0 {
            trainer.to_checkpoint(&config_json).save(&out_dir.join("last.ckpt"))?;
        }
        summary.final_val = val.or(summary.final_val);
        if reached {
            summary.reached_target = true;
            break;
        }
    }
    summary.steps = trainer.step;
    summary.best_val_loss = best;
    let final_ckpt = trainer.to_checkpoint(&config_json);
    final_ckpt.save(&final_path)?;
    if best.is_none() {
        final_ckpt.save(&best_path)?;
    }
    Ok(summary)
}
