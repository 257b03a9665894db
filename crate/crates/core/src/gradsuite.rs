//! Finite-difference checks of every differentiable op and of the full
//! training objectives on a tiny model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::gen_triplet;
use crate::data::Split;
use crate::error::Result;
use crate::grpo::{token_logprobs, trajectory_objective, GrpoConfig};
use crate::model::{is_adapter, is_base, Model, ModelConfig, PolicyMode};
use crate::pipeline::{build_tokenizer, model_dims, Example};
use crate::tensor::conv::{conv2d, ConvGeometry};
use crate::tensor::gradcheck::{check_gradient, grad_check};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{ScaleSchedule, TokenizerConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// Ten matrix shapes covering degenerate rows and columns.
pub const SHAPES: [(usize, usize); 10] = [(1, 1), (1, 5), (3, 1), (2, 3), (4, 4), (5, 2), (3, 7), (6, 5), (8, 3), (7, 9)];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Build = Arc<dyn Fn(&mut Graph, Var) -> Result<Var> + Send + Sync>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Wraps `build` in a random linear read-out so every output entry gets a
/// distinct upstream gradient.
fn check(name: &str, x: Tensor, build: Build, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut probe = Graph::new();
    let xv = probe.leaf(x.clone(), false)?;
    let out = build(&mut probe, xv)?;
    let readout = randn(probe.shape(out), rng);
    let f = move |g: &mut Graph, v: Var| -> Result<Var> {
        let y = build(g, v)?;
        let r = g.constant(readout.clone())?;
        let p = g.mul(y, r)?;
        g.sum(p)
    };
    let rep = grad_check(f, &x, STEP, TOLERANCE)?;
    Ok(CheckResult {
        name: name.to_string(),
        shape: x.shape().to_vec(),
        checked: rep.indices.len(),
        max_rel_error: rep.max_rel_error,
        passed: rep.passed,
    })
}

/// Entries at least `gap` away from `bound`.
fn away_from(mut t: Tensor, bounds: &[f64], gap: f64) -> Tensor {
    for v in t.data_mut() {
        for &b in bounds {
            if (*v - b).abs() < gap {
                *v = b + gap.copysign(*v - b);
            }
        }
    }
    t
}

fn konst(g: &mut Graph, t: &Tensor) -> Result<Var> {
    g.constant(t.clone())
}

/// Every primitive at every shape in [`SHAPES`].
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &(r, c) in &SHAPES {
        let sh = [r, c];
        let x = randn(&sh, &mut rng);
        let mut cases: Vec<(&str, Tensor, Build)> = Vec::new();

        let b = randn(&[c, 3], &mut rng);
        cases.push(("matmul.lhs", x.clone(), Arc::new(move |g, v| { let b = konst(g, &b)?; g.matmul(v, b) })));
        let a = randn(&[3, r], &mut rng);
        cases.push(("matmul.rhs", x.clone(), Arc::new(move |g, v| { let a = konst(g, &a)?; g.matmul(a, v) })));
        let b = randn(&[4, c], &mut rng);
        cases.push(("matmul_bt.lhs", x.clone(), Arc::new(move |g, v| { let b = konst(g, &b)?; g.matmul_bt(v, b) })));
        let a = randn(&[3, c], &mut rng);
        cases.push(("matmul_bt.rhs", x.clone(), Arc::new(move |g, v| { let a = konst(g, &a)?; g.matmul_bt(a, v) })));

        let y = randn(&sh, &mut rng);
        let y2 = y.clone();
        cases.push(("add", x.clone(), Arc::new(move |g, v| { let y = konst(g, &y2)?; g.add(v, y) })));
        let y2 = y.clone();
        cases.push(("sub.lhs", x.clone(), Arc::new(move |g, v| { let y = konst(g, &y2)?; g.sub(v, y) })));
        let y2 = y.clone();
        cases.push(("sub.rhs", x.clone(), Arc::new(move |g, v| { let y = konst(g, &y2)?; g.sub(y, v) })));
        let y2 = y.clone();
        cases.push(("mul", x.clone(), Arc::new(move |g, v| { let y = konst(g, &y2)?; g.mul(v, y) })));
        cases.push(("mul.self", x.clone(), Arc::new(|g, v| g.mul(v, v))));

        let mut other = x.clone();
        for v in other.data_mut() {
            let off = 0.1 + rng.random::<f64>();
            *v += if rng.random::<bool>() { off } else { -off };
        }
        let o2 = other.clone();
        cases.push(("minimum.lhs", x.clone(), Arc::new(move |g, v| { let o = konst(g, &o2)?; g.minimum(v, o) })));
        cases.push(("minimum.rhs", x.clone(), Arc::new(move |g, v| { let o = konst(g, &other)?; g.minimum(o, v) })));

        let row = randn(&[c], &mut rng);
        cases.push(("add_row.matrix", x.clone(), Arc::new(move |g, v| { let rw = konst(g, &row)?; g.add_row(v, rw) })));
        let m = randn(&sh, &mut rng);
        cases.push(("add_row.row", randn(&[c], &mut rng), Arc::new(move |g, v| { let m = konst(g, &m)?; g.add_row(m, v) })));
        cases.push(("scale", x.clone(), Arc::new(|g, v| g.scale(v, -1.7))));
        cases.push(("add_scalar", x.clone(), Arc::new(|g, v| g.add_scalar(v, 0.3))));
        let factors = Arc::new((0..r).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
        cases.push(("scale_rows", x.clone(), Arc::new(move |g, v| g.scale_rows(v, factors.clone()))));
        cases.push(("exp", x.clone(), Arc::new(|g, v| g.exp(v))));
        cases.push(("clamp", away_from(x.clone(), &[-0.5, 0.5], 1e-3), Arc::new(|g, v| g.clamp(v, -0.5, 0.5))));
        cases.push(("gelu", x.clone(), Arc::new(|g, v| g.gelu(v))));
        cases.push(("softmax", x.clone(), Arc::new(|g, v| g.softmax(v))));
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.6)).collect();
        for i in 0..r {
            mask[i * c + rng.random_range(0..c)] = true;
        }
        cases.push(("masked_softmax", x.clone(), Arc::new(move |g, v| g.masked_softmax(v, &mask))));
        cases.push(("log_softmax", x.clone(), Arc::new(|g, v| g.log_softmax(v))));

        let (gamma, beta) = (randn(&[c], &mut rng), randn(&[c], &mut rng));
        let (g2, b2) = (gamma.clone(), beta.clone());
        cases.push(("layer_norm.x", x.clone(), Arc::new(move |g, v| {
            let (ga, be) = (konst(g, &g2)?, konst(g, &b2)?);
            g.layer_norm(v, ga, be, 1e-5)
        })));
        let (x2, b2) = (x.clone(), beta.clone());
        cases.push(("layer_norm.gamma", gamma.clone(), Arc::new(move |g, v| {
            let (xx, be) = (konst(g, &x2)?, konst(g, &b2)?);
            g.layer_norm(xx, v, be, 1e-5)
        })));
        let x2 = x.clone();
        cases.push(("layer_norm.beta", beta, Arc::new(move |g, v| {
            let (xx, ga) = (konst(g, &x2)?, konst(g, &gamma)?);
            g.layer_norm(xx, ga, v, 1e-5)
        })));

        let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..r)).collect();
        cases.push(("embedding", x.clone(), Arc::new(move |g, v| g.embedding(v, &ids))));
        let idx: Arc<Vec<Option<usize>>> = Arc::new(
            (0..7)
                .map(|_| rng.random_bool(0.85).then(|| rng.random_range(0..r * c)))
                .collect(),
        );
        cases.push(("gather", x.clone(), Arc::new(move |g, v| g.gather(v, idx.clone(), vec![7]))));
        let extra_r = randn(&[2, c], &mut rng);
        cases.push(("concat_rows", x.clone(), Arc::new(move |g, v| { let e = konst(g, &extra_r)?; g.concat_rows(&[e, v, e]) })));
        let extra_c = randn(&[r, 2], &mut rng);
        cases.push(("concat_cols", x.clone(), Arc::new(move |g, v| { let e = konst(g, &extra_c)?; g.concat_cols(&[v, e]) })));
        cases.push(("slice_rows", x.clone(), Arc::new(move |g, v| g.slice_rows(v, r / 2, r - r / 2))));
        cases.push(("slice_cols", x.clone(), Arc::new(move |g, v| g.slice_cols(v, c / 2, c - c / 2))));
        cases.push(("reshape", x.clone(), Arc::new(move |g, v| g.reshape(v, vec![c, r]))));
        cases.push(("sum", x.clone(), Arc::new(|g, v| g.sum(v))));
        cases.push(("mean", x.clone(), Arc::new(|g, v| g.mean(v))));
        cases.push(("mean_rows", x.clone(), Arc::new(|g, v| g.mean_rows(v))));
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        cases.push(("cross_entropy", x.clone(), Arc::new(move |g, v| g.cross_entropy(v, &targets))));

        let geom = ConvGeometry { height: 2 + r % 4, width: 2 + c % 4, channels: 2, kernel: 3, stride: 1 + r % 2, pad: 1 };
        let cout = 3;
        let img = randn(&[geom.height * geom.width, geom.channels], &mut rng);
        let w = randn(&[cout, geom.patch_len()], &mut rng);
        let bias = randn(&[cout], &mut rng);
        let (gm, w2, b2) = (geom.clone(), w.clone(), bias.clone());
        cases.push(("conv2d.input", img.clone(), Arc::new(move |g, v| {
            let (w, b) = (konst(g, &w2)?, konst(g, &b2)?);
            conv2d(g, v, &gm, w, b)
        })));
        let (gm, i2, b2) = (geom.clone(), img.clone(), bias.clone());
        cases.push(("conv2d.weight", w.clone(), Arc::new(move |g, v| {
            let (x, b) = (konst(g, &i2)?, konst(g, &b2)?);
            conv2d(g, x, &gm, v, b)
        })));
        cases.push(("conv2d.bias", bias, Arc::new(move |g, v| {
            let (x, w) = (konst(g, &img)?, konst(g, &w)?);
            conv2d(g, x, &geom, w, v)
        })));

        for (name, input, build) in cases {
            out.push(check(name, input, build, &mut rng)?);
        }
    }
    Ok(out)
}

/// Tiny tokenizer, model and example for objective-level checks.
pub fn tiny_setup(seed: u64) -> Result<(Model, Example, crate::tokenizer::Tokenizer)> {
    let schedule = ScaleSchedule::new(vec![1, 2])?;
    let tok_cfg = TokenizerConfig { dim: 4, vocab: 8, image_size: 8, seed, fit_triplets: 4 };
    let tokenizer = build_tokenizer(&tok_cfg, &schedule)?;
    let config = ModelConfig {
        embed_dim: 8,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
        adapter_rank: 2,
        init_std: 0.3,
        seed,
        ..ModelConfig::default()
    };
    let model = Model::new(config, model_dims(&tokenizer))?;
    let t = gen_triplet(seed, 8, Split::Train);
    let ex = Example::from_triplet(&tokenizer, &t)?;
    Ok((model, ex, tokenizer))
}

/// Up to `per_param` entries of every parameter selected by `select`,
/// checked against central differences of `loss`.
fn param_checks(
    prefix: &str,
    model: &Model,
    select: &dyn Fn(&str) -> bool,
    per_param: usize,
    loss: &(dyn Fn(&Model, &mut Graph, &mut crate::tensor::ParamBinder) -> Result<Var> + Sync),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CheckResult>> {
    let mut g = Graph::new();
    let mut b = model.binder(PolicyMode::Current, select)?;
    let l = loss(model, &mut g, &mut b)?;
    g.backward(l)?;
    let grads = b.grads(&g);
    let mut out = Vec::new();
    for (name, grad) in &grads {
        let x = model.params().get(name)?.clone();
        let subset: Vec<usize> = (0..per_param.min(x.numel())).map(|_| rng.random_range(0..x.numel())).collect();
        let value = |t: &Tensor| -> Result<f64> {
            let mut m = model.clone();
            m.params_mut().insert(name.clone(), t.clone());
            let mut g = Graph::new();
            let mut b = m.binder(PolicyMode::Current, &|_: &str| false)?;
            let l = loss(&m, &mut g, &mut b)?;
            Ok(g.value(l).item())
        };
        let rep = check_gradient(value, grad.data(), &x, STEP, TOLERANCE, Some(&subset))?;
        out.push(CheckResult {
            name: format!("{prefix}:{name}"),
            shape: x.shape().to_vec(),
            checked: subset.len(),
            max_rel_error: rep.max_rel_error,
            passed: rep.passed,
        });
    }
    Ok(out)
}

/// Cross-entropy of the tiny model with respect to every base parameter.
pub fn sft_loss_checks(seed: u64, per_param: usize) -> Result<Vec<CheckResult>> {
    let (model, ex, _) = tiny_setup(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f7);
    let targets = ex.targets.flatten();
    let k = model.schedule().num_scales();
    let loss = |m: &Model, g: &mut Graph, b: &mut crate::tensor::ParamBinder| -> Result<Var> {
        let logits = m.forward(g, b, PolicyMode::Current, &ex.cond, &ex.inputs, k)?;
        g.cross_entropy(logits, &targets)
    };
    param_checks("sft", &model, &is_base, per_param, &loss, &mut rng)
}

/// Clipped-surrogate plus KL objective of the tiny model with respect to
/// every adapter parameter, at adapters moved off their zero start.
pub fn grpo_objective_checks(seed: u64, per_param: usize) -> Result<Vec<CheckResult>> {
    let (mut model, ex, _) = tiny_setup(seed)?;
    model.attach_adapters()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a0);
    let names: Vec<String> = model.params().names().filter(|n| is_adapter(n)).map(String::from).collect();
    for n in names {
        let p = model.params_mut().get_mut(&n)?;
        for v in p.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    let tokens = ex.targets.flatten();
    let t = tokens.len();
    let old: Vec<f64> = (0..t).map(|_| -rng.random_range(1.0..3.0)).collect();
    let reference: Vec<f64> = (0..t).map(|_| -rng.random_range(1.0..3.0)).collect();
    let weights: Vec<f64> = (0..t).map(|_| rng.random_range(0.1..1.0)).collect();
    let config = GrpoConfig { clip_eps: 0.9, beta: 0.4, ..GrpoConfig::default() };
    let k = model.schedule().num_scales();
    let loss = |m: &Model, g: &mut Graph, b: &mut crate::tensor::ParamBinder| -> Result<Var> {
        let logits = m.forward(g, b, PolicyMode::Current, &ex.cond, &ex.inputs, k)?;
        let lp = token_logprobs(g, logits, &tokens)?;
        Ok(trajectory_objective(g, lp, &old, &reference, &weights, 0.7, &config)?.0)
    };
    param_checks("grpo", &model, &is_adapter, per_param, &loss, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_objectives_pass() {
        for r in sft_loss_checks(3, 2).unwrap().into_iter().chain(grpo_objective_checks(3, 2).unwrap()) {
            assert!(r.passed, "{} {:e}", r.name, r.max_rel_error);
        }
    }
}
