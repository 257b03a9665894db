//! Scale-wise autoregressive transformer with blended cross-attention.
//!
//! The target stream holds one row per token of the schedule: row 0 is the
//! start token produced from the content image, rows of scale `k >= 2` embed
//! the accumulated features of scales `< k`. Each block applies block-causal
//! self-attention, then lets style and content condition rows query the
//! target history and blends the two results with the per-scale `alpha_k`,
//! then an MLP. Every block linear and the output head may carry a low-rank
//! adapter; the reference policy is the same model with adapters switched off.

mod attention;
mod config;

pub use attention::block_causal_mask;
pub use config::{BlendAlpha, ModelConfig};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::conv::{conv2d, ConvGeometry};
use crate::tensor::{gemm, Graph, ParamBinder, ParamStore, Tensor, Var};
use crate::tokenizer::ScaleSchedule;

/// Namespace of every adapter tensor.
pub const ADAPTER_PREFIX: &str = "adapter.";
const LN_EPS: f64 = 1e-5;
const START_CHANNELS: [usize; 2] = [8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Base weights plus adapters.
    Current,
    /// Base weights only.
    Reference,
    /// Base plus adapters as captured by [`Model::take_snapshot`].
    Snapshot,
}

/// Per-sample conditioning: the content image for the start token and the
/// `[L, d]` condition rows of the style and content hierarchies.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub content_image: Image,
    pub style: Tensor,
    pub content: Tensor,
}

/// Sizes fixed by the tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub schedule: ScaleSchedule,
    pub vocab: usize,
    pub feature_dim: usize,
    pub image_size: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    dims: ModelDims,
    params: ParamStore,
    snapshot: Option<ParamStore>,
    merges: u64,
}

pub fn is_adapter(name: &str) -> bool {
    name.starts_with(ADAPTER_PREFIX)
}

pub fn is_base(name: &str) -> bool {
    !is_adapter(name)
}

impl Model {
    pub fn new(config: ModelConfig, dims: ModelDims) -> Result<Self> {
        config.validate(dims.schedule.num_scales())?;
        if dims.schedule.side(0) != 1 {
            return Err(Error::Model("the first scale must be 1x1 to hold the start token".into()));
        }
        if dims.image_size % 4 != 0 {
            return Err(Error::Model(format!("image size {} is not divisible by 4", dims.image_size)));
        }
        let mut model = Model {
            config,
            dims,
            params: ParamStore::new(),
            snapshot: None,
            merges: 0,
        };
        model.init_params();
        Ok(model)
    }

    /// Rebuilds a model around stored parameters.
    pub fn from_params(config: ModelConfig, dims: ModelDims, params: ParamStore, merges: u64) -> Result<Self> {
        let mut model = Model::new(config, dims)?;
        for (name, t) in model.params.iter() {
            let got = params.get(name).map_err(|_| Error::Model(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Model(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| is_base(n) && !model.params.contains(n)) {
            return Err(Error::Model(format!("unexpected parameter `{extra}`")));
        }
        model.params = params;
        model.merges = merges;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.dims.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn merges(&self) -> u64 {
        self.merges
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.config.blend_alpha.at(k, self.dims.schedule.num_scales())
    }

    fn embed(&self) -> usize {
        self.config.embed_dim
    }

    /// Every linear that can carry an adapter.
    pub fn adapted_linears(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.config.layers {
            for l in ["attn.qkv", "attn.proj", "cross.kv", "cross.q_style", "cross.q_content", "cross.proj", "ffn.up", "ffn.down"] {
                out.push(format!("blocks.{i}.{l}"));
            }
        }
        out.push("head.out".into());
        out
    }

    fn init_params(&mut self) {
        let e = self.embed();
        let d = self.dims.feature_dim;
        let v = self.dims.vocab;
        let std = self.config.init_std;
        let resid_std = std / (2.0 * self.config.layers as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let p = &mut self.params;
        let linear = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, std: f64| {
            p.insert(format!("{name}.weight"), Tensor::randn(&[out, inp], std, rng));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        };
        let norm = |p: &mut ParamStore, name: &str| {
            p.insert(format!("{name}.gamma"), Tensor::full(&[e], 1.0));
            p.insert(format!("{name}.beta"), Tensor::zeros(&[e]));
        };

        let [c1, c2] = START_CHANNELS;
        linear(p, &mut rng, "start.conv1", c1, 9 * 3, (2.0 / 27.0f64).sqrt());
        linear(p, &mut rng, "start.conv2", c2, 9 * c1, (2.0 / (9 * c1) as f64).sqrt());
        linear(p, &mut rng, "start.mlp1", e, c2, (1.0 / c2 as f64).sqrt());
        linear(p, &mut rng, "start.mlp2", e, e, std);

        linear(p, &mut rng, "embed.in", e, d, (1.0 / d as f64).sqrt());
        p.insert("embed.stream", Tensor::randn(&[3, e], std, &mut rng));
        p.insert("embed.level", Tensor::randn(&[self.dims.schedule.num_scales(), e], std, &mut rng));
        p.insert("embed.pos", Tensor::randn(&[self.dims.schedule.token_count(), e], std, &mut rng));

        let ffn = e * self.config.ffn_mult;
        for i in 0..self.config.layers {
            let b = format!("blocks.{i}");
            norm(p, &format!("{b}.ln1"));
            linear(p, &mut rng, &format!("{b}.attn.qkv"), 3 * e, e, std);
            linear(p, &mut rng, &format!("{b}.attn.proj"), e, e, resid_std);
            norm(p, &format!("{b}.ln2"));
            norm(p, &format!("{b}.lnc"));
            linear(p, &mut rng, &format!("{b}.cross.kv"), 2 * e, e, std);
            // Both condition query projections start as copies of the target
            // stream's query projection.
            let q: Vec<f64> = p.get(&format!("{b}.attn.qkv.weight")).expect("just inserted").data()[..e * e].to_vec();
            for name in ["q_style", "q_content"] {
                p.insert(format!("{b}.cross.{name}.weight"), Tensor::matrix(e, e, q.clone()).expect("dims"));
                p.insert(format!("{b}.cross.{name}.bias"), Tensor::zeros(&[e]));
            }
            linear(p, &mut rng, &format!("{b}.cross.proj"), e, e, resid_std);
            norm(p, &format!("{b}.ln3"));
            linear(p, &mut rng, &format!("{b}.ffn.up"), ffn, e, std);
            linear(p, &mut rng, &format!("{b}.ffn.down"), e, ffn, resid_std);
        }
        norm(p, "head.ln");
        linear(p, &mut rng, "head.out", v, e, std);
    }

    pub fn has_adapters(&self) -> bool {
        self.params.names().any(is_adapter)
    }

    /// Attaches rank-`r` adapters to every adapted linear: `A` random, `B`
    /// zero, so the adapted output is unchanged.
    pub fn attach_adapters(&mut self) -> Result<()> {
        if self.config.adapter_rank == 0 {
            return Err(Error::Model("adapter rank is 0".into()));
        }
        for name in self.adapted_linears() {
            self.reset_adapter(&name)?;
        }
        Ok(())
    }

    fn reset_adapter(&mut self, name: &str) -> Result<()> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let (out, inp) = (w.rows(), w.cols());
        let r = self.config.adapter_rank;
        let seed = self.config.seed ^ u64::from(crc32fast::hash(name.as_bytes())) ^ (self.merges << 32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params.insert(
            format!("{ADAPTER_PREFIX}{name}.a"),
            Tensor::randn(&[r, inp], (1.0 / inp as f64).sqrt(), &mut rng),
        );
        self.params.insert(format!("{ADAPTER_PREFIX}{name}.b"), Tensor::zeros(&[out, r]));
        Ok(())
    }

    pub fn detach_adapters(&mut self) {
        let names: Vec<String> = self.params.names().filter(|n| is_adapter(n)).map(str::to_string).collect();
        for n in names {
            self.params.remove(&n);
        }
    }

    /// Bakes `scaling * B A` into every adapted weight and attaches fresh
    /// adapters.
    pub fn lora_merge(&mut self) -> Result<()> {
        if !self.has_adapters() {
            return Err(Error::Model("merge requested without adapters".into()));
        }
        let scaling = self.config.adapter_scaling;
        for name in self.adapted_linears() {
            let a = self.params.get(&format!("{ADAPTER_PREFIX}{name}.a"))?.clone();
            let b = self.params.get(&format!("{ADAPTER_PREFIX}{name}.b"))?.clone();
            let w = self.params.get_mut(&format!("{name}.weight"))?;
            let (out, inp, r) = (w.rows(), w.cols(), a.rows());
            let mut delta = vec![0.0; out * inp];
            gemm(out, r, inp, b.data(), false, a.data(), false, &mut delta, 0.0);
            for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
                *wv += scaling * dv;
            }
        }
        self.merges += 1;
        for name in self.adapted_linears() {
            self.reset_adapter(&name)?;
        }
        Ok(())
    }

    /// Freezes the current parameters for [`PolicyMode::Snapshot`].
    pub fn take_snapshot(&mut self) {
        self.snapshot = Some(self.params.clone());
    }

    pub fn store(&self, mode: PolicyMode) -> Result<&ParamStore> {
        match mode {
            PolicyMode::Current | PolicyMode::Reference => Ok(&self.params),
            PolicyMode::Snapshot => self
                .snapshot
                .as_ref()
                .ok_or_else(|| Error::Model("no snapshot taken".into())),
        }
    }

    /// Binder over the store used by `mode`.
    pub fn binder<'a>(&'a self, mode: PolicyMode, trainable: &'a dyn Fn(&str) -> bool) -> Result<ParamBinder<'a>> {
        Ok(ParamBinder::new(self.store(mode)?, trainable))
    }

    fn linear(&self, g: &mut Graph, b: &mut ParamBinder, mode: PolicyMode, x: Var, name: &str) -> Result<Var> {
        let w = b.bind(g, &format!("{name}.weight"))?;
        let bias = b.bind(g, &format!("{name}.bias"))?;
        let y = g.matmul_bt(x, w)?;
        let y = g.add_row(y, bias)?;
        let a_name = format!("{ADAPTER_PREFIX}{name}.a");
        if mode == PolicyMode::Reference || !b.store().contains(&a_name) {
            return Ok(y);
        }
        let a = b.bind(g, &a_name)?;
        let bb = b.bind(g, &format!("{ADAPTER_PREFIX}{name}.b"))?;
        let low = g.matmul_bt(x, a)?;
        let delta = g.matmul_bt(low, bb)?;
        let delta = g.scale(delta, self.config.adapter_scaling)?;
        g.add(y, delta)
    }

    fn norm(&self, g: &mut Graph, b: &mut ParamBinder, x: Var, name: &str) -> Result<Var> {
        let gamma = b.bind(g, &format!("{name}.gamma"))?;
        let beta = b.bind(g, &format!("{name}.beta"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Start-token row `[1, E]` from the content image.
    pub fn start_token(&self, g: &mut Graph, b: &mut ParamBinder, img: &Image) -> Result<Var> {
        let s = self.dims.image_size;
        if img.height != s || img.width != s {
            return Err(Error::Model(format!(
                "content image is {}x{}, model expects {s}x{s}",
                img.height, img.width
            )));
        }
        let [c1, c2] = START_CHANNELS;
        let x = g.constant(Tensor::matrix(s * s, 3, img.data.clone())?)?;
        let geom1 = ConvGeometry { height: s, width: s, channels: 3, kernel: 3, stride: 2, pad: 1 };
        let (h1, w1) = geom1.out_size();
        let (w, bias) = (b.bind(g, "start.conv1.weight")?, b.bind(g, "start.conv1.bias")?);
        let y = conv2d(g, x, &geom1, w, bias)?;
        let y = g.gelu(y)?;
        let geom2 = ConvGeometry { height: h1, width: w1, channels: c1, kernel: 3, stride: 2, pad: 1 };
        let (w, bias) = (b.bind(g, "start.conv2.weight")?, b.bind(g, "start.conv2.bias")?);
        let y = conv2d(g, y, &geom2, w, bias)?;
        let y = g.gelu(y)?;
        debug_assert_eq!(g.value(y).cols(), c2);
        let pooled = g.mean_rows(y)?;
        let h = self.linear(g, b, PolicyMode::Reference, pooled, "start.mlp1")?;
        let h = g.gelu(h)?;
        self.linear(g, b, PolicyMode::Reference, h, "start.mlp2")
    }

    /// Adds the stream, level and position embeddings to `n` embedded rows.
    fn position(&self, g: &mut Graph, b: &mut ParamBinder, x: Var, stream: usize, n: usize) -> Result<Var> {
        let table = b.bind(g, "embed.stream")?;
        let s = g.embedding(table, &[stream])?;
        let x = g.add_row(x, s)?;
        let levels = b.bind(g, "embed.level")?;
        let ids = &self.dims.schedule.scale_of_tokens()[..n];
        let lv = g.embedding(levels, ids)?;
        let x = g.add(x, lv)?;
        let pos = b.bind(g, "embed.pos")?;
        let p = g.slice_rows(pos, 0, n)?;
        g.add(x, p)
    }

    fn embed_condition(&self, g: &mut Graph, b: &mut ParamBinder, rows: &Tensor, stream: usize, n: usize) -> Result<Var> {
        self.check_rows("condition", rows, n)?;
        let c = g.constant(rows.clone())?;
        let c = g.slice_rows(c, 0, n)?;
        let e = self.linear(g, b, PolicyMode::Reference, c, "embed.in")?;
        self.position(g, b, e, stream, n)
    }

    fn check_rows(&self, what: &str, t: &Tensor, n: usize) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != self.dims.feature_dim || t.rows() < n {
            return Err(Error::Model(format!(
                "{what} rows {:?} cannot cover {n} tokens of dim {}",
                t.shape(),
                self.dims.feature_dim
            )));
        }
        Ok(())
    }

    /// Logits `[n, V]` for the first `n_scales` scales, `n = sum_{k<n_scales}
    /// h_k w_k`. `inputs` holds at least `n - 1` next-scale input rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut ParamBinder,
        mode: PolicyMode,
        cond: &Conditioning,
        inputs: &Tensor,
        n_scales: usize,
    ) -> Result<Var> {
        let k_max = self.dims.schedule.num_scales();
        if n_scales == 0 || n_scales > k_max {
            return Err(Error::Model(format!("{n_scales} scales requested of {k_max}")));
        }
        let n = self.dims.schedule.prefix_tokens(n_scales);
        let start = self.start_token(g, b, &cond.content_image)?;
        let x = if n > 1 {
            self.check_rows("target input", inputs, n - 1)?;
            let t = g.constant(inputs.clone())?;
            let t = g.slice_rows(t, 0, n - 1)?;
            let e = self.linear(g, b, PolicyMode::Reference, t, "embed.in")?;
            g.concat_rows(&[start, e])?
        } else {
            start
        };
        let mut x = self.position(g, b, x, 0, n)?;
        let s = self.embed_condition(g, b, &cond.style, 1, n)?;
        let c = self.embed_condition(g, b, &cond.content, 2, n)?;
        let mask = block_causal_mask(&self.dims.schedule, n);
        let alphas = self.row_alphas(n);
        for i in 0..self.config.layers {
            x = self.block(g, b, mode, i, x, s, c, &mask, &alphas)?;
        }
        let x = self.norm(g, b, x, "head.ln")?;
        self.linear(g, b, mode, x, "head.out")
    }

    fn row_alphas(&self, n: usize) -> Vec<f64> {
        self.dims.schedule.scale_of_tokens()[..n].iter().map(|&k| self.alpha(k)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        b: &mut ParamBinder,
        mode: PolicyMode,
        i: usize,
        x: Var,
        s: Var,
        c: Var,
        mask: &[bool],
        alphas: &[f64],
    ) -> Result<Var> {
        let p = format!("blocks.{i}");
        let heads = self.config.heads;
        let e = self.embed();

        let h = self.norm(g, b, x, &format!("{p}.ln1"))?;
        let qkv = self.linear(g, b, mode, h, &format!("{p}.attn.qkv"))?;
        let q = g.slice_cols(qkv, 0, e)?;
        let k = g.slice_cols(qkv, e, e)?;
        let v = g.slice_cols(qkv, 2 * e, e)?;
        let a = attention::multi_head(g, q, k, v, heads, mask)?;
        let a = self.linear(g, b, mode, a, &format!("{p}.attn.proj"))?;
        let x = g.add(x, a)?;

        let u = self.cross_update(g, b, mode, i, x, s, c, mask, alphas)?;
        let x = g.add(x, u)?;

        let h = self.norm(g, b, x, &format!("{p}.ln3"))?;
        let h = self.linear(g, b, mode, h, &format!("{p}.ffn.up"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, b, mode, h, &format!("{p}.ffn.down"))?;
        g.add(x, h)
    }

    /// `alpha * Attn(Q=s, K=h, V=h) + (1 - alpha) * Attn(Q=c, K=h, V=h)`
    /// through the shared output projection.
    #[allow(clippy::too_many_arguments)]
    fn cross_update(
        &self,
        g: &mut Graph,
        b: &mut ParamBinder,
        mode: PolicyMode,
        i: usize,
        x: Var,
        s: Var,
        c: Var,
        mask: &[bool],
        alphas: &[f64],
    ) -> Result<Var> {
        let (n, sn, cn) = (g.value(x).rows(), g.value(s).rows(), g.value(c).rows());
        if sn != n || cn != n || alphas.len() != n {
            return Err(Error::Model(format!(
                "cross-attention over {n} target rows got {sn} style, {cn} content rows and {} blend factors",
                alphas.len()
            )));
        }
        let p = format!("blocks.{i}");
        let e = self.embed();
        let heads = self.config.heads;
        let h = self.norm(g, b, x, &format!("{p}.ln2"))?;
        let kv = self.linear(g, b, mode, h, &format!("{p}.cross.kv"))?;
        let k = g.slice_cols(kv, 0, e)?;
        let v = g.slice_cols(kv, e, e)?;
        let sn = self.norm(g, b, s, &format!("{p}.lnc"))?;
        let qs = self.linear(g, b, mode, sn, &format!("{p}.cross.q_style"))?;
        let cn = self.norm(g, b, c, &format!("{p}.lnc"))?;
        let qc = self.linear(g, b, mode, cn, &format!("{p}.cross.q_content"))?;
        let as_ = attention::multi_head(g, qs, k, v, heads, mask)?;
        let ac = attention::multi_head(g, qc, k, v, heads, mask)?;
        let as_ = g.scale_rows(as_, Arc::new(alphas.to_vec()))?;
        let ac = g.scale_rows(ac, Arc::new(alphas.iter().map(|a| 1.0 - a).collect()))?;
        let blended = g.add(as_, ac)?;
        self.linear(g, b, mode, blended, &format!("{p}.cross.proj"))
    }

    /// Blended cross-attention update of layer `layer` for embedded target
    /// rows `h` and condition rows `s`, `c` (all `[n, E]`) with explicit
    /// per-row blend factors.
    pub fn cross_attention_update(
        &self,
        layer: usize,
        mode: PolicyMode,
        h: &Tensor,
        s: &Tensor,
        c: &Tensor,
        alphas: &[f64],
    ) -> Result<Tensor> {
        if layer >= self.config.layers {
            return Err(Error::Model(format!("layer {layer} of {}", self.config.layers)));
        }
        let n = h.rows();
        if n > self.dims.schedule.token_count() {
            return Err(Error::Model(format!("{n} target rows exceed the schedule")));
        }
        let mut g = Graph::new();
        let mut b = ParamBinder::frozen(self.store(mode)?);
        let (x, s, c) = (g.constant(h.clone())?, g.constant(s.clone())?, g.constant(c.clone())?);
        let mask = block_causal_mask(&self.dims.schedule, n);
        let u = self.cross_update(&mut g, &mut b, mode, layer, x, s, c, &mask, alphas)?;
        Ok(g.value(u).clone())
    }

    /// Inference-only logits for the first `n_scales` scales.
    pub fn logits(&self, mode: PolicyMode, cond: &Conditioning, inputs: &Tensor, n_scales: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = ParamBinder::frozen(self.store(mode)?);
        let out = self.forward(&mut g, &mut b, mode, cond, inputs, n_scales)?;
        Ok(g.value(out).clone())
    }

    /// Start-token embedding `[1, E]` without gradients.
    pub fn start_embedding(&self, img: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = ParamBinder::frozen(&self.params);
        let v = self.start_token(&mut g, &mut b, img)?;
        Ok(g.value(v).clone())
    }
}

#[cfg(test)]
mod tests;
