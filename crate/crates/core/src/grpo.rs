//! Group-relative policy optimization over low-rank adapters.
//!
//! Per step: `G` rollouts for one pair, rewards, z-scored advantages, a
//! per-token weighted clipped surrogate plus k3 KL against the adapter-free
//! reference, one AdamW update, and the EMA-driven reference merge.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Split, Triplet};
use crate::error::{Error, Result};
use crate::metrics::{reward, ProxyFeatureNet};
use crate::model::{is_adapter, Conditioning, Model, PolicyMode};
use crate::pipeline::{condition, load_trained};
use crate::sampler::{generate_group, log_softmax_row, teacher_forced_logprobs, SamplerConfig, Trajectory};
use crate::seed::derive_seed;
use crate::tensor::optim::{adamw_step, clip_global_norm, AdamWConfig, AdamWState};
use crate::tensor::params::accumulate_grads;
use crate::tensor::{Graph, Grads, Tensor, Var};
use crate::tokenizer::{ScaleSchedule, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `-lambda * d(x_hat, x)` on the proxy feature network.
    Perceptual,
    /// 1 when the single scale-1 token equals the given index, else 0.
    Scale1Token(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta: f64,
    pub panw_alpha: f64,
    pub eps_std: f64,
    pub ema_decay: f64,
    pub tau_gain: f64,
    pub patience: u64,
    pub cooldown: u64,
    pub emergency_kl: f64,
    pub emergency_cooldown: u64,
    pub lr: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    pub steps: u64,
    pub pairs: Option<usize>,
    pub reward_mode: RewardMode,
    pub target_probability: Option<f64>,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 16,
            clip_eps: 0.2,
            beta: 0.1,
            panw_alpha: 0.7,
            eps_std: 1e-4,
            ema_decay: 0.9,
            tau_gain: 0.05,
            patience: 50,
            cooldown: 300,
            emergency_kl: 2.0,
            emergency_cooldown: 50,
            lr: 1e-5,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            steps: 500,
            pairs: None,
            reward_mode: RewardMode::Perceptual,
            target_probability: None,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("grpo: {m}")));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.panw_alpha >= 0.0) || !(self.beta >= 0.0) || !(self.eps_std >= 0.0) {
            return bad("panw_alpha, beta and eps_std must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive");
        }
        if self.pairs == Some(0) {
            return bad("pairs must be at least 1");
        }
        Ok(())
    }
}

/// `(R_i - mean) / (std + eps_std)` with the population standard deviation.
/// A zero denominator yields zeros.
///
/// Deviations are formed as `(n R_i - sum) / n` with a compensated sum and
/// an exact product, so they are correctly rounded whenever the sum is
/// representable; shifted or power-of-two-scaled rewards then give
/// identical advantages.
pub fn advantage(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let (mut sum, mut err) = (0.0f64, 0.0f64);
    for &r in rewards {
        let t = sum + r;
        err += if sum.abs() >= r.abs() { (sum - t) + r } else { (r - t) + sum };
        sum = t;
    }
    let dev: Vec<f64> = rewards
        .iter()
        .map(|&r| {
            let hi = n * r;
            let lo = n.mul_add(r, -hi);
            ((hi - sum) + (lo - err)) / n
        })
        .collect();
    let var = dev.iter().map(|d| d * d).sum::<f64>() / n;
    let denom = var.sqrt() + eps_std;
    if denom == 0.0 {
        return vec![0.0; rewards.len()];
    }
    dev.iter().map(|d| d / denom).collect()
}

/// Per-token weight of each scale, `(h_k w_k)^-alpha / Z`, with `Z` making
/// the weights of one trajectory sum to 1.
pub fn panw_scale_weights(schedule: &ScaleSchedule, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..schedule.num_scales())
        .map(|k| (schedule.tokens_at(k) as f64).powf(-alpha))
        .collect();
    let z: f64 = raw
        .iter()
        .enumerate()
        .map(|(k, w)| w * schedule.tokens_at(k) as f64)
        .sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// [`panw_scale_weights`] expanded to every token position.
pub fn panw_weights(schedule: &ScaleSchedule, alpha: f64) -> Vec<f64> {
    let per = panw_scale_weights(schedule, alpha);
    schedule.scale_of_tokens().into_iter().map(|k| per[k]).collect()
}

/// `exp(d) - d - 1` with `d = logp_ref - logp_theta`.
pub fn k3_kl(logp_ref: f64, logp_theta: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

/// `-min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
pub fn clipped_pg(rho: f64, a: f64, eps: f64) -> f64 {
    -(rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a)
}

/// Everything the objective needs, one row per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct GrpoBatch {
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
    pub logp_theta: Vec<Vec<f64>>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    /// `(1/G) sum_i sum_t w_t L_pg`.
    pub pg: f64,
    /// `(1/G) sum_i sum_t w_t k3`, before the `beta` factor.
    pub kl_raw: f64,
    pub loss: f64,
    /// Fraction of tokens whose ratio lies outside the clip range.
    pub clip_fraction: f64,
}

/// Scalar evaluation of the objective.
pub fn grpo_loss(batch: &GrpoBatch, config: &GrpoConfig) -> Result<LossParts> {
    let g = batch.advantages.len();
    let t = batch.weights.len();
    if g == 0 || [&batch.logp_theta, &batch.logp_old, &batch.logp_ref].iter().any(|m| m.len() != g || m.iter().any(|r| r.len() != t)) {
        return Err(Error::Training(format!("inconsistent batch: {g} advantages, {t} weights")));
    }
    let (mut pg, mut kl, mut clipped) = (0.0, 0.0, 0usize);
    for i in 0..g {
        for j in 0..t {
            let rho = (batch.logp_theta[i][j] - batch.logp_old[i][j]).exp();
            if (rho - 1.0).abs() > config.clip_eps {
                clipped += 1;
            }
            pg += batch.weights[j] * clipped_pg(rho, batch.advantages[i], config.clip_eps);
            kl += batch.weights[j] * k3_kl(batch.logp_ref[i][j], batch.logp_theta[i][j]);
        }
    }
    let parts = LossParts {
        pg: pg / g as f64,
        kl_raw: kl / g as f64,
        loss: (pg + config.beta * kl) / g as f64,
        clip_fraction: clipped as f64 / (g * t) as f64,
    };
    check_parts(&parts)?;
    Ok(parts)
}

fn check_parts(p: &LossParts) -> Result<()> {
    if p.pg.is_finite() && p.kl_raw.is_finite() && p.loss.is_finite() {
        return Ok(());
    }
    Err(Error::Training(format!(
        "non-finite objective: pg {} kl {} loss {}",
        p.pg, p.kl_raw, p.loss
    )))
}

/// Builds `sum_t w_t (L_pg + beta k3)` for one trajectory from its
/// `log pi_theta` node `[T]`; returns the node and the plain pg/kl sums.
pub fn trajectory_objective(
    g: &mut Graph,
    logp_theta: Var,
    logp_old: &[f64],
    logp_ref: &[f64],
    weights: &[f64],
    advantage: f64,
    config: &GrpoConfig,
) -> Result<(Var, f64, f64)> {
    let t = logp_old.len();
    let col = |v: &[f64]| Tensor::new(vec![t], v.to_vec());
    let old = g.constant(col(logp_old)?)?;
    let rf = g.constant(col(logp_ref)?)?;
    let w = g.constant(col(weights)?)?;
    let log_ratio = g.sub(logp_theta, old)?;
    let rho = g.exp(log_ratio)?;
    let unclipped = g.scale(rho, advantage)?;
    let clipped = g.clamp(rho, 1.0 - config.clip_eps, 1.0 + config.clip_eps)?;
    let clipped = g.scale(clipped, advantage)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let pg = g.scale(surrogate, -1.0)?;
    let delta = g.sub(rf, logp_theta)?;
    let e = g.exp(delta)?;
    let k3 = g.sub(e, delta)?;
    let k3 = g.add_scalar(k3, -1.0)?;
    let pg_w = g.mul(pg, w)?;
    let kl_w = g.mul(k3, w)?;
    let pg_sum = g.sum(pg_w)?;
    let kl_sum = g.sum(kl_w)?;
    let kl_scaled = g.scale(kl_sum, config.beta)?;
    let total = g.add(pg_sum, kl_scaled)?;
    let (p, k) = (g.value(pg_sum).item(), g.value(kl_sum).item());
    Ok((total, p, k))
}

/// `log pi(a_t)` node `[T]` gathered from `[T, V]` logits.
pub fn token_logprobs(g: &mut Graph, logits: Var, tokens: &[usize]) -> Result<Var> {
    let v = g.shape(logits)[1];
    let logp = g.log_softmax(logits)?;
    let index = tokens.iter().enumerate().map(|(r, &t)| Some(r * v + t)).collect();
    g.gather(logp, Arc::new(index), vec![tokens.len()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Normal,
    Emergency,
}

/// Reward EMA and the counters behind the reference merge.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeState {
    pub ema: Option<f64>,
    /// EMA at the last merge; the first EMA value before any merge.
    pub baseline: Option<f64>,
    pub steps_since_merge: u64,
    /// Consecutive post-cool-down steps with `ema > baseline + tau_gain`.
    pub steps_above: u64,
    pub kl_raw: f64,
    pub merges: u64,
}

impl MergeState {
    /// Folds in this step's group-mean reward and raw KL and decides whether
    /// the reference moves. A merge rebases the baseline and zeroes the
    /// counters; the caller performs the weight merge.
    pub fn maybe_merge_reference(&mut self, mean_reward: f64, kl_raw: f64, config: &GrpoConfig) -> Option<MergeKind> {
        let ema = match self.ema {
            None => mean_reward,
            Some(e) => config.ema_decay * e + (1.0 - config.ema_decay) * mean_reward,
        };
        self.ema = Some(ema);
        let baseline = *self.baseline.get_or_insert(ema);
        self.kl_raw = kl_raw;
        self.steps_since_merge += 1;
        let cooled = self.steps_since_merge >= config.cooldown;
        if cooled && ema > baseline + config.tau_gain {
            self.steps_above += 1;
        } else {
            self.steps_above = 0;
        }
        let decision = if kl_raw > config.emergency_kl && self.steps_since_merge >= config.emergency_cooldown {
            Some(MergeKind::Emergency)
        } else if cooled && self.steps_above >= config.patience {
            Some(MergeKind::Normal)
        } else {
            None
        };
        if decision.is_some() {
            self.baseline = Some(ema);
            self.steps_since_merge = 0;
            self.steps_above = 0;
            self.merges += 1;
        }
        decision
    }

    fn to_checkpoint(&self, c: &mut Checkpoint) {
        let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
        c.put_tensor("grpo/merge_reals", Tensor::from_vec(vec![opt(self.ema), opt(self.baseline), self.kl_raw]));
        c.put_u64s("grpo/merge_counts", vec![self.steps_since_merge, self.steps_above, self.merges]);
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let reals = c.tensor("grpo/merge_reals")?.data();
        let counts = c.u64s("grpo/merge_counts")?;
        if reals.len() != 3 || counts.len() != 3 {
            return Err(Error::Checkpoint("malformed merge state".into()));
        }
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        Ok(MergeState {
            ema: opt(reals[0]),
            baseline: opt(reals[1]),
            kl_raw: reals[2],
            steps_since_merge: counts[0],
            steps_above: counts[1],
            merges: counts[2],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrpoMetrics {
    pub step: u64,
    pub pair: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub ema: f64,
    pub kl_raw: f64,
    pub pg_loss: f64,
    pub kl_loss: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub merges: u64,
    pub merge: Option<MergeKind>,
    /// Probability of the designated scale-1 token after the update
    /// (scale-1 token reward only).
    pub token_probability: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct MergeEvent {
    step: u64,
    kind: MergeKind,
    ema: f64,
    kl_raw: f64,
    merges: u64,
    pair: usize,
}

pub struct GrpoTrainer {
    pub config: GrpoConfig,
    pub sampler: SamplerConfig,
    pub lambda: f64,
    pub deterministic: bool,
    pub tokenizer: Tokenizer,
    pub model: Model,
    pub optimizer: AdamWState,
    pub merge: MergeState,
    pub pairs: Vec<Triplet>,
    pub step: u64,
    net: ProxyFeatureNet,
    seed: u64,
}

impl GrpoTrainer {
    /// Starts from a supervised checkpoint: base weights only, fresh adapters.
    pub fn new(run: &RunConfig, sft: &Checkpoint, triplets: Vec<Triplet>) -> Result<Self> {
        let (_, tokenizer, mut model) = load_trained(sft, true)?;
        model.attach_adapters()?;
        Self::with_parts(run, tokenizer, model, triplets)
    }

    pub fn with_parts(run: &RunConfig, tokenizer: Tokenizer, model: Model, triplets: Vec<Triplet>) -> Result<Self> {
        run.grpo.validate()?;
        run.sampler.validate()?;
        if !model.has_adapters() {
            return Err(Error::Training("GRPO needs adapters attached".into()));
        }
        let mut pairs: Vec<Triplet> = triplets.into_iter().filter(|t| t.split == Split::Train).collect();
        if let Some(n) = run.grpo.pairs {
            pairs.truncate(n);
        }
        if pairs.is_empty() {
            return Err(Error::Training("no training pairs".into()));
        }
        if let RewardMode::Scale1Token(t) = run.grpo.reward_mode {
            if t >= tokenizer.vocab() {
                return Err(Error::Config(format!("scale1_token {t} outside vocabulary {}", tokenizer.vocab())));
            }
        }
        Ok(GrpoTrainer {
            config: run.grpo.clone(),
            sampler: run.sampler.clone(),
            lambda: run.reward.lambda,
            deterministic: run.deterministic,
            tokenizer,
            model,
            optimizer: AdamWState::new(run.grpo.optimizer),
            merge: MergeState::default(),
            pairs,
            step: 0,
            net: ProxyFeatureNet::new(run.reward.proxy_seed),
            seed: run.stage_seed(run.grpo.seed),
        })
    }

    pub fn resume(run: &RunConfig, ckpt: &Checkpoint, triplets: Vec<Triplet>) -> Result<Self> {
        let (_, tokenizer, model) = load_trained(ckpt, false)?;
        let mut t = Self::with_parts(run, tokenizer, model, triplets)?;
        t.optimizer = ckpt.optimizer(run.grpo.optimizer)?;
        t.merge = MergeState::from_checkpoint(ckpt)?;
        t.step = ckpt.u64("grpo/step")?;
        Ok(t)
    }

    pub fn to_checkpoint(&self, config_json: &str) -> Checkpoint {
        let mut c = Checkpoint::new(config_json.to_string());
        c.put_model(&self.model);
        c.put_tokenizer(&self.tokenizer);
        c.put_optimizer(&self.optimizer);
        self.merge.to_checkpoint(&mut c);
        c.put_u64s("grpo/step", vec![self.step]);
        c
    }

    /// Pair used at `step`: a seeded pass-wise permutation.
    pub fn pair_index(&self, step: u64) -> usize {
        let n = self.pairs.len() as u64;
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, step / n])));
        order[(step % n) as usize]
    }

    pub fn rollout_seeds(&self, step: u64) -> Vec<u64> {
        (0..self.config.group_size as u64)
            .map(|i| derive_seed(&[self.seed, step, i, 2]))
            .collect()
    }

    fn rewards(&self, rollouts: &[Trajectory], target: &crate::image::Image) -> Result<Vec<f64>> {
        let rewards: Vec<f64> = match self.config.reward_mode {
            RewardMode::Perceptual => rollouts
                .par_iter()
                .map(|r| reward(&self.net, &r.image, target, self.lambda))
                .collect::<Result<_>>()?,
            RewardMode::Scale1Token(t) => rollouts
                .iter()
                .map(|r| if r.tokens.maps[0][0] == t { 1.0 } else { 0.0 })
                .collect(),
        };
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::Training(format!("reward of rollout {i} is not finite")));
        }
        Ok(rewards)
    }

    /// Probability of `token` at the scale-1 position under the current
    /// policy.
    pub fn scale1_probability(&self, cond: &Conditioning, token: usize) -> Result<f64> {
        let empty = Tensor::matrix(0, self.tokenizer.dim(), vec![])?;
        let logits = self.model.logits(PolicyMode::Current, cond, &empty, 1)?;
        Ok(log_softmax_row(logits.row(0))[token].exp())
    }

    /// Loss parts and adapter gradients for a scored group.
    pub fn group_objective(
        &self,
        cond: &Conditioning,
        rollouts: &[Trajectory],
        advantages: &[f64],
        ref_logp: &[Vec<f64>],
    ) -> Result<(LossParts, Grads)> {
        let weights = panw_weights(self.tokenizer.schedule(), self.config.panw_alpha);
        let k = self.tokenizer.schedule().num_scales();
        let g_size = rollouts.len() as f64;
        let per = rollouts.par_iter().zip(advantages).zip(ref_logp).map(|((r, &a), rl)| {
            let tokens = r.tokens.flatten();
            let inputs = self.tokenizer.teacher_inputs(&r.tokens)?;
            let mut g = Graph::new();
            let mut b = self.model.binder(PolicyMode::Current, &is_adapter)?;
            let logits = self.model.forward(&mut g, &mut b, PolicyMode::Current, cond, &inputs, k)?;
            let lp = token_logprobs(&mut g, logits, &tokens)?;
            let clipped = g
                .value(lp)
                .data()
                .iter()
                .zip(&r.logprobs)
                .filter(|(t, o)| ((*t - *o).exp() - 1.0).abs() > self.config.clip_eps)
                .count();
            let (obj, pg, kl) = trajectory_objective(&mut g, lp, &r.logprobs, rl, &weights, a, &self.config)?;
            g.backward(obj)?;
            Ok((pg, kl, clipped, b.grads(&g)))
        });
        let parts: Vec<(f64, f64, usize, Grads)> = if self.deterministic {
            per.collect::<Result<_>>()?
        } else {
            per.try_reduce_with(|(pa, ka, ca, mut ga), (pb, kb, cb, gb)| {
                accumulate_grads(&mut ga, &gb, 1.0);
                Ok((pa + pb, ka + kb, ca + cb, ga))
            })
            .transpose()?
            .into_iter()
            .collect()
        };
        let mut grads = Grads::new();
        let (mut pg, mut kl, mut clipped) = (0.0, 0.0, 0usize);
        for (p, k, c, g) in parts {
            pg += p;
            kl += k;
            clipped += c;
            accumulate_grads(&mut grads, &g, 1.0 / g_size);
        }
        let lp = LossParts {
            pg: pg / g_size,
            kl_raw: kl / g_size,
            loss: (pg + self.config.beta * kl) / g_size,
            clip_fraction: clipped as f64 / (rollouts.len() * weights.len()) as f64,
        };
        check_parts(&lp)?;
        Ok((lp, grads))
    }

    /// One on-policy update.
    pub fn grpo_step(&mut self) -> Result<GrpoMetrics> {
        let pair = self.pair_index(self.step);
        let t = &self.pairs[pair];
        let cond = condition(&self.tokenizer, &t.content, &t.style)?;
        let seeds = self.rollout_seeds(self.step);
        let rollouts = generate_group(&self.model, &self.tokenizer, &cond, &self.sampler, PolicyMode::Current, &seeds)?;
        let rewards = self.rewards(&rollouts, &t.target)?;
        let advantages = advantage(&rewards, self.config.eps_std);
        let ref_logp: Vec<Vec<f64>> = rollouts
            .par_iter()
            .map(|r| teacher_forced_logprobs(&self.model, &self.tokenizer, &r.tokens, &cond, PolicyMode::Reference))
            .collect::<Result<_>>()?;
        let (parts, mut grads) = self.group_objective(&cond, &rollouts, &advantages, &ref_logp)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let trainable: Vec<String> = self.model.params().names().filter(|n| is_adapter(n)).map(String::from).collect();
        adamw_step(self.model.params_mut(), &grads, &trainable, &mut self.optimizer, self.config.lr)?;

        let n = rewards.len() as f64;
        let reward_mean = rewards.iter().sum::<f64>() / n;
        let reward_std = (rewards.iter().map(|r| (r - reward_mean).powi(2)).sum::<f64>() / n).sqrt();
        let merge = self.merge.maybe_merge_reference(reward_mean, parts.kl_raw, &self.config);
        if merge.is_some() {
            self.model.lora_merge()?;
            self.optimizer = AdamWState::new(self.config.optimizer);
        }
        let token_probability = match self.config.reward_mode {
            RewardMode::Scale1Token(tok) => Some(self.scale1_probability(&cond, tok)?),
            RewardMode::Perceptual => None,
        };
        self.step += 1;
        Ok(GrpoMetrics {
            step: self.step,
            pair,
            reward_mean,
            reward_std,
            ema: self.merge.ema.unwrap_or(reward_mean),
            kl_raw: parts.kl_raw,
            pg_loss: parts.pg,
            kl_loss: self.config.beta * parts.kl_raw,
            loss: parts.loss,
            clip_fraction: parts.clip_fraction,
            grad_norm,
            merges: self.model.merges(),
            merge,
            token_probability,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GrpoSummary {
    pub steps: u64,
    pub history: Vec<GrpoMetrics>,
    pub reached_target: bool,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub merge_log: PathBuf,
}

const CSV_HEADER: &str =
    "step,pair,reward_mean,reward_std,ema,kl_raw,pg_loss,kl_loss,loss,clip_fraction,grad_norm,merges,merge,token_probability";

fn csv_row(m: &GrpoMetrics) -> String {
    let merge = match m.merge {
        Some(MergeKind::Normal) => "normal",
        Some(MergeKind::Emergency) => "emergency",
        None => "",
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.step,
        m.pair,
        m.reward_mean,
        m.reward_std,
        m.ema,
        m.kl_raw,
        m.pg_loss,
        m.kl_loss,
        m.loss,
        m.clip_fraction,
        m.grad_norm,
        m.merges,
        merge,
        m.token_probability.map_or(String::new(), |p| p.to_string())
    )
}

/// Runs `grpo.steps` updates from `sft_checkpoint`, writing
/// `grpo_metrics.csv`, `merges.jsonl` and `final.ckpt` into `out_dir`.
pub fn run_grpo(run: &RunConfig, sft_checkpoint: &Path, triplets: Vec<Triplet>, out_dir: &Path) -> Result<GrpoSummary> {
    let mut trainer = GrpoTrainer::new(run, &Checkpoint::load(sft_checkpoint)?, triplets)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("grpo_metrics.csv");
    let log_path = out_dir.join("merges.jsonl");
    let final_path = out_dir.join("final.ckpt");
    let mut csv = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let mut history = Vec::new();
    let mut reached_target = false;
    while trainer.step < trainer.config.steps {
        let m = trainer.grpo_step()?;
        writeln!(csv, "{}", csv_row(&m)).map_err(|e| Error::io(&csv_path, e))?;
        if let Some(kind) = m.merge {
            let ev = MergeEvent {
                step: m.step,
                kind,
                ema: m.ema,
                kl_raw: m.kl_raw,
                merges: m.merges,
                pair: m.pair,
            };
            writeln!(log, "{}", serde_json::to_string(&ev).expect("event serializes")).map_err(|e| Error::io(&log_path, e))?;
        }
        let hit = matches!((trainer.config.target_probability, m.token_probability), (Some(t), Some(p)) if p >= t);
        history.push(m);
        if hit {
            reached_target = true;
            break;
        }
    }
    trainer.to_checkpoint(&run.to_json()).save(&final_path)?;
    Ok(GrpoSummary {
        steps: trainer.step,
        history,
        reached_target,
        final_checkpoint: final_path,
        metrics_csv: csv_path,
        merge_log: log_path,
    })
}
