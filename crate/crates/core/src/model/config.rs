use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-scale blend coefficient between the style and content branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlendAlpha {
    Constant(f64),
    PerScale(Vec<f64>),
    /// Linear from `from` at the coarsest scale to `to` at the finest.
    Ramp { from: f64, to: f64 },
}

impl Default for BlendAlpha {
    fn default() -> Self {
        BlendAlpha::Ramp { from: 0.2, to: 0.8 }
    }
}

impl BlendAlpha {
    /// Coefficient of scale index `k` out of `num_scales`.
    pub fn at(&self, k: usize, num_scales: usize) -> f64 {
        match self {
            BlendAlpha::Constant(a) => *a,
            BlendAlpha::PerScale(v) => v[k],
            BlendAlpha::Ramp { from, to } => {
                if num_scales <= 1 {
                    *from
                } else {
                    from + (to - from) * k as f64 / (num_scales - 1) as f64
                }
            }
        }
    }

    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if let BlendAlpha::PerScale(v) = self {
            if v.len() != num_scales {
                return Err(Error::Config(format!(
                    "blend_alpha lists {} values for {num_scales} scales",
                    v.len()
                )));
            }
        }
        for k in 0..num_scales {
            let a = self.at(k, num_scales);
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("blend_alpha {a} at scale {k} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the MLP as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub adapter_rank: usize,
    /// Multiplier on the adapter product `B A`.
    pub adapter_scaling: f64,
    pub blend_alpha: BlendAlpha,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            heads: 4,
            layers: 4,
            ffn_mult: 4,
            adapter_rank: 8,
            adapter_scaling: 2.0,
            blend_alpha: BlendAlpha::default(),
            init_std: 0.02,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("layers and ffn_mult must be positive".into()));
        }
        if !(self.init_std > 0.0) || !self.adapter_scaling.is_finite() {
            return Err(Error::Config("init_std must be positive and adapter_scaling finite".into()));
        }
        self.blend_alpha.validate(num_scales)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_monotone() {
        let r = BlendAlpha::default();
        assert_eq!(r.at(0, 10), 0.2);
        assert!((r.at(9, 10) - 0.8).abs() < 1e-15);
        assert!((0..9).all(|k| r.at(k, 10) <= r.at(k + 1, 10)));
    }

    #[test]
    fn constant_schedule() {
        assert!((0..4).all(|k| BlendAlpha::Constant(0.5).at(k, 4) == 0.5));
    }

    #[test]
    fn serde_forms() {
        let c: BlendAlpha = serde_json::from_str("0.3").unwrap();
        assert_eq!(c, BlendAlpha::Constant(0.3));
        let v: BlendAlpha = serde_json::from_str("[0.1, 0.9]").unwrap();
        assert_eq!(v.at(1, 2), 0.9);
        let r: BlendAlpha = serde_json::from_str(r#"{"from": 0.0, "to": 1.0}"#).unwrap();
        assert_eq!(r.at(1, 3), 0.5);
        assert!(BlendAlpha::PerScale(vec![0.1]).validate(2).is_err());
        assert!(BlendAlpha::Constant(1.5).validate(2).is_err());
    }

    #[test]
    fn heads_must_divide_embed() {
        let c = ModelConfig { embed_dim: 10, heads: 4, ..Default::default() };
        assert!(c.validate(4).is_err());
    }
}
