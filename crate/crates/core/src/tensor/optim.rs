//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            ..Default::default()
        }
    }

    /// Drops the moments of every parameter matching `pred`.
    pub fn reset_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.first.retain(|k, _| !pred(k));
        self.second.retain(|k, _| !pred(k));
    }
}

/// One AdamW update over the parameters named in `trainable`.
///
/// Weight decay is applied multiplicatively before the adaptive step and is
/// not folded into the moments.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Grads,
    trainable: &[String],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    for name in trainable {
        if !grads.contains_key(name) {
            return Err(Error::MissingGrad(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for name in trainable {
        let g = &grads[name];
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{name}: param {:?} grad {:?}", p.shape(), g.shape()),
            ));
        }
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * weight_decay * *w;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients when their joint L2 norm exceeds `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> (ParamStore, Grads, Vec<String>) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![w]));
        let mut gr = Grads::new();
        gr.insert("w".into(), Tensor::from_vec(vec![g]));
        (p, gr, vec!["w".to_string()])
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr.
        let (mut p, g, names) = single(1.0, 1.0);
        let mut st = AdamWState::new(cfg(0.0));
        adamw_step(&mut p, &g, &names, &mut st, 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay() {
        let (mut p, g, names) = single(1.0, 1.0);
        let mut st = AdamWState::new(cfg(0.01));
        adamw_step(&mut p, &g, &names, &mut st, 0.1).unwrap();
        // 1 - 0.1*0.01*1 = 0.999, then - 0.1
        assert!((p.get("w").unwrap().item() - 0.899).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut p, g, names) = single(0.37, 0.0);
        let mut st = AdamWState::new(cfg(0.0));
        adamw_step(&mut p, &g, &names, &mut st, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.37);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut p, g, names) = single(0.37, 2.5);
        let mut st = AdamWState::new(cfg(0.01));
        adamw_step(&mut p, &g, &names, &mut st, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.37);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn missing_grad_is_error() {
        let (mut p, _, names) = single(1.0, 1.0);
        let mut st = AdamWState::new(cfg(0.0));
        let err = adamw_step(&mut p, &Grads::new(), &names, &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "w"));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = Grads::new();
        g.insert("a".into(), Tensor::from_vec(vec![3.0, 4.0]));
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g["a"].data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_and_zero_grads() {
        let mut g = Grads::new();
        g.insert("a".into(), Tensor::from_vec(vec![0.1]));
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g["a"].data(), &[0.1]);
        let mut z = Grads::new();
        z.insert("a".into(), Tensor::zeros(&[3]));
        assert_eq!(clip_global_norm(&mut z, 1.0), 0.0);
        assert_eq!(z["a"].data(), &[0.0; 3]);
    }
}
