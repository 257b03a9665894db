//! Scale-wise autoregressive sampling with top-k / top-p filtering.
//!
//! Every trajectory draws from its own ChaCha8 stream seeded from the
//! trajectory seed, so a group of rollouts gives the same result whatever
//! order or thread runs it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Conditioning, Model, PolicyMode};
use crate::tensor::Tensor;
use crate::tokenizer::{add_scale, FeatureMap, TokenHierarchy, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Clamped to the vocabulary size.
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    /// Argmax decoding (the zero-temperature limit).
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 900,
            top_p: 0.96,
            temperature: 1.0,
            greedy: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || !(self.top_p > 0.0 && self.top_p <= 1.0) || !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "sampler needs top_k >= 1, 0 < top_p <= 1, temperature > 0 (got {}, {}, {})",
                self.top_k, self.top_p, self.temperature
            )));
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub tokens: TokenHierarchy,
    /// `log pi(a_t)` under the full temperature-1 distribution.
    pub logprobs: Vec<f64>,
    /// `log` of the filtered, renormalized probability actually sampled from.
    pub sample_logprobs: Vec<f64>,
    pub seed: u64,
    pub reward: Option<f64>,
    #[serde(skip)]
    pub fhat: FeatureMap,
    #[serde(skip)]
    pub image: Image,
}

impl Trajectory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }
}

/// Keeps the `top_k` most likely entries, renormalizes, then keeps the
/// shortest prefix (by descending probability, lower index first on ties)
/// whose cumulative mass reaches `top_p`, and renormalizes again.
pub fn filter_top_k_top_p(probs: &[f64], top_k: usize, top_p: f64) -> Result<Vec<f64>> {
    if top_k == 0 || !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Sampler(format!("need top_k >= 1 and 0 < top_p <= 1, got {top_k}, {top_p}")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Sampler("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::Sampler("all-zero distribution".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(probs.len()));
    let kept: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut cum = 0.0;
    let mut end = order.len();
    for (n, &i) in order.iter().enumerate() {
        cum += probs[i] / kept;
        if cum >= top_p {
            end = n + 1;
            break;
        }
    }
    order.truncate(end);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; the last supported index absorbs rounding.
fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// Generates one trajectory: per scale, logits for the current prefix,
/// filtered sampling, codeword lookup, accumulation into `f_hat`, and the
/// downsampled accumulation as the next scale's input.
pub fn generate(
    model: &Model,
    tokenizer: &Tokenizer,
    cond: &Conditioning,
    config: &SamplerConfig,
    mode: PolicyMode,
    seed: u64,
) -> Result<Trajectory> {
    config.validate()?;
    let schedule = tokenizer.schedule();
    if schedule != model.schedule() || tokenizer.vocab() != model.dims().vocab {
        return Err(Error::Sampler("model and tokenizer disagree on schedule or vocabulary".into()));
    }
    let d = tokenizer.dim();
    let side = schedule.final_side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fhat = FeatureMap::zeros(side, side, d);
    let mut inputs: Vec<f64> = Vec::new();
    let mut maps = Vec::with_capacity(schedule.num_scales());
    let mut logprobs = Vec::with_capacity(schedule.token_count());
    let mut sample_logprobs = Vec::with_capacity(schedule.token_count());
    for k in 0..schedule.num_scales() {
        let rows = inputs.len() / d;
        let inp = Tensor::matrix(rows, d, inputs.clone())?;
        let logits = model.logits(mode, cond, &inp, k + 1)?;
        let start = schedule.prefix_tokens(k);
        let mut tokens = Vec::with_capacity(schedule.tokens_at(k));
        for r in start..start + schedule.tokens_at(k) {
            let row = logits.row(r);
            let full = log_softmax_row(row);
            let (t, lp) = if config.greedy {
                (argmax(row), 0.0)
            } else {
                let probs = filter_top_k_top_p(&softmax_row(row, config.temperature), config.top_k, config.top_p)?;
                let t = draw(&probs, &mut rng);
                (t, probs[t].ln())
            };
            tokens.push(t);
            logprobs.push(full[t]);
            sample_logprobs.push(lp);
        }
        add_scale(&mut fhat, schedule, k, &tokens, tokenizer.codebook())?;
        if k + 1 < schedule.num_scales() {
            inputs.extend(tokenizer.next_scale_input(&fhat, k + 1).data);
        }
        maps.push(tokens);
    }
    let image = tokenizer.decode_features(&fhat)?;
    Ok(Trajectory {
        tokens: TokenHierarchy { maps },
        logprobs,
        sample_logprobs,
        seed,
        reward: None,
        fhat,
        image,
    })
}

/// Rollouts for every seed, run in parallel; output order follows `seeds`.
pub fn generate_group(
    model: &Model,
    tokenizer: &Tokenizer,
    cond: &Conditioning,
    config: &SamplerConfig,
    mode: PolicyMode,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    seeds
        .par_iter()
        .map(|&s| generate(model, tokenizer, cond, config, mode, s))
        .collect()
}

/// `log pi_mode(a_t)` for every token of `tokens`, scored in one
/// teacher-forced pass whose inputs are the accumulations of `tokens`.
pub fn teacher_forced_logprobs(
    model: &Model,
    tokenizer: &Tokenizer,
    tokens: &TokenHierarchy,
    cond: &Conditioning,
    mode: PolicyMode,
) -> Result<Vec<f64>> {
    let inputs = tokenizer.teacher_inputs(tokens)?;
    let k = tokenizer.schedule().num_scales();
    let logits = model.logits(mode, cond, &inputs, k)?;
    Ok(tokens
        .flatten()
        .iter()
        .enumerate()
        .map(|(r, &t)| log_softmax_row(logits.row(r))[t])
        .collect())
}
