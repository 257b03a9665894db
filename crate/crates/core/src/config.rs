//! Run configuration: one JSON document, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::seed::derive_seed;
use crate::sft::SftConfig;
use crate::tokenizer::{ScaleSchedule, TokenizerConfig};

pub const DATA_DIR_ENV: &str = "STYLEVAR_DATA_DIR";
pub const CKPT_DIR_ENV: &str = "STYLEVAR_CKPT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda: f64,
    /// Seed of the frozen feature network shared by reward and metrics.
    pub proxy_seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { lambda: 5.0, proxy_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Triplets generated when no dataset directory is given.
    pub n: usize,
    pub seed: u64,
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: 1000, seed: 0, dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScaleSchedule,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub sampler: SamplerConfig,
    pub reward: RewardConfig,
    pub data: DataConfig,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: ScaleSchedule::toy(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            sampler: SamplerConfig::default(),
            reward: RewardConfig::default(),
            data: DataConfig::default(),
            deterministic: true,
            seed: 0,
        }
    }
}

/// Every key with its meaning; `--help` prints these next to the defaults.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("schedule", "side length of each scale's square token map, coarse to fine"),
    ("tokenizer.dim", "feature dimension of codewords"),
    ("tokenizer.vocab", "codebook size, index 0 is the zero codeword"),
    ("tokenizer.image_size", "square image side in pixels"),
    ("tokenizer.seed", "seed of projection, codebook fit and fitting set"),
    ("tokenizer.fit_triplets", "synthetic triplets used to fit the tokenizer"),
    ("model.embed_dim", "transformer width"),
    ("model.heads", "attention heads"),
    ("model.layers", "transformer blocks"),
    ("model.ffn_mult", "feed-forward hidden width as a multiple of embed_dim"),
    ("model.adapter_rank", "low-rank adapter rank"),
    ("model.adapter_scaling", "multiplier on the adapter product"),
    ("model.blend_alpha", "style/content blend per scale: number, list, or {from, to} ramp"),
    ("model.init_std", "std of weight initialization"),
    ("model.seed", "seed of weight and adapter initialization"),
    ("sft.epochs", "training epochs"),
    ("sft.lr_schedule", "piecewise-constant learning rate as [{from_epoch, lr}], first at epoch 0"),
    ("sft.batch_size", "physical micro-batch size"),
    ("sft.grad_accum", "micro-batches per optimizer step"),
    ("sft.clip_norm", "global gradient-norm clip"),
    ("sft.optimizer.beta1", "AdamW first-moment decay"),
    ("sft.optimizer.beta2", "AdamW second-moment decay"),
    ("sft.optimizer.eps", "AdamW denominator stabilizer"),
    ("sft.optimizer.weight_decay", "AdamW decoupled weight decay"),
    ("sft.augment.enabled", "apply training augmentation"),
    ("sft.augment.rotation_deg", "content rotation magnitude; one of 0, +d, -d per sample"),
    ("sft.augment.brightness", "content brightness factor range [lo, hi]"),
    ("sft.augment.crop_area", "style random-crop area fraction before resize"),
    ("sft.shuffle", "reshuffle the training split every epoch"),
    ("sft.seed", "seed of data order and augmentation (mixed with the run seed)"),
    ("sft.max_steps", "stop after this many optimizer steps (null: no limit)"),
    ("sft.target_accuracy", "stop once a training batch reaches this token accuracy (null: never)"),
    ("sft.val_every_epochs", "validate every this many epochs"),
    ("sft.checkpoint_every", "write last.ckpt every this many steps (0: never)"),
    ("grpo.group_size", "rollouts per pair (G)"),
    ("grpo.clip_eps", "importance-ratio clip range"),
    ("grpo.beta", "KL penalty coefficient"),
    ("grpo.panw_alpha", "per-token weight exponent on scale size"),
    ("grpo.eps_std", "stabilizer added to the group reward std"),
    ("grpo.ema_decay", "decay of the group-mean reward EMA"),
    ("grpo.tau_gain", "EMA gain over the merge baseline that counts toward a merge"),
    ("grpo.patience", "consecutive steps above the gain needed for a merge"),
    ("grpo.cooldown", "steps after a merge before another normal merge"),
    ("grpo.emergency_kl", "raw KL that forces a merge"),
    ("grpo.emergency_cooldown", "steps after a merge before an emergency merge"),
    ("grpo.lr", "adapter learning rate"),
    ("grpo.clip_norm", "global gradient-norm clip"),
    ("grpo.optimizer.beta1", "AdamW first-moment decay"),
    ("grpo.optimizer.beta2", "AdamW second-moment decay"),
    ("grpo.optimizer.eps", "AdamW denominator stabilizer"),
    ("grpo.optimizer.weight_decay", "AdamW decoupled weight decay"),
    ("grpo.steps", "GRPO steps"),
    ("grpo.pairs", "train on only the first n training pairs (null: all)"),
    ("grpo.reward_mode", "\"perceptual\", or {\"scale1_token\": t} for the +1-if-first-token-is-t task"),
    ("grpo.target_probability", "stop once the scale-1 token probability reaches this (scale1_token mode only)"),
    ("grpo.seed", "seed of pair order and rollouts (mixed with the run seed)"),
    ("sampler.top_k", "keep the k most likely tokens"),
    ("sampler.top_p", "then keep the smallest prefix with this mass"),
    ("sampler.temperature", "softmax temperature"),
    ("sampler.greedy", "argmax decoding"),
    ("sampler.seed", "sampling seed (mixed with the run seed)"),
    ("reward.lambda", "reward scale"),
    ("reward.proxy_seed", "seed of the frozen perceptual feature network"),
    ("data.n", "triplets generated when no dataset directory is given"),
    ("data.seed", "dataset seed (mixed with the run seed)"),
    ("data.dir", "dataset directory (env STYLEVAR_DATA_DIR overrides)"),
    ("deterministic", "fixed-order gradient reduction"),
    ("seed", "run seed, mixed into the data, sft, grpo and sampler seeds"),
];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let documented = KEY_DOCS.iter().any(|(k, _)| *k == prefix);
    match v {
        Value::Object(map) if !documented => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.to_string())),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.schedule.final_side();
        if self.tokenizer.image_size % side != 0 {
            return Err(Error::Config(format!(
                "tokenizer.image_size {} is not a multiple of the final scale {side}",
                self.tokenizer.image_size
            )));
        }
        if self.tokenizer.fit_triplets == 0 {
            return Err(Error::Config("tokenizer.fit_triplets must be at least 1".into()));
        }
        if !(self.reward.lambda > 0.0 && self.reward.lambda.is_finite()) {
            return Err(Error::Config(format!("reward.lambda must be positive, got {}", self.reward.lambda)));
        }
        if self.data.n == 0 {
            return Err(Error::Config("data.n must be at least 1".into()));
        }
        self.model.validate(self.schedule.num_scales())?;
        self.sampler.validate()?;
        self.sft.validate()?;
        self.grpo.validate()
    }

    /// A stage seed mixed with the run seed.
    pub fn stage_seed(&self, stage_seed: u64) -> u64 {
        derive_seed(&[self.seed, stage_seed])
    }

    /// `(key, default)` for every leaf key.
    pub fn default_keys() -> Vec<(String, String)> {
        let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out
    }

    /// Key, default and meaning of every configuration entry.
    pub fn help() -> String {
        let mut s = String::from("Config keys (JSON, dotted paths are nested objects):\n");
        for (key, default) in Self::default_keys() {
            let doc = KEY_DOCS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| *d);
            s.push_str(&format!("  {key} = {default}\n      {doc}\n"));
        }
        s.push_str(&format!(
            "Environment: {DATA_DIR_ENV} overrides data.dir; {CKPT_DIR_ENV} sets the default output directory.\n"
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented() {
        for (key, _) in RunConfig::default_keys() {
            assert!(KEY_DOCS.iter().any(|(k, _)| *k == key), "undocumented key {key}");
        }
        for (k, _) in KEY_DOCS {
            assert!(RunConfig::default_keys().iter().any(|(key, _)| key == k), "stale doc {k}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"grpo": {"gamma": 0.7}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let c = RunConfig::from_json(r#"{"grpo": {"panw_alpha": 0.5}}"#).unwrap();
        assert_eq!(c.grpo.panw_alpha, 0.5);
        assert_eq!(c.grpo.group_size, 16);
    }

    #[test]
    fn roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::load(Path::new("/nonexistent/missing.json")).unwrap_err();
        assert!(err.to_string().contains("missing.json"));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"reward": {"lambda": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule": [1, 2, 3]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"grpo": {"group_size": 1}}"#).is_err());
    }
}
