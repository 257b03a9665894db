//! Frozen multi-scale residual vector quantizer.
//!
//! Images are cut into `h_K x w_K` patches and projected to `d`-dim features
//! by a fixed seeded linear map. Scale `k` quantizes the area-downsampled
//! residual `f - f_hat` against the codebook and adds the bilinear upsample of
//! the chosen codewords back into `f_hat`. A least-squares linear readout maps
//! the accumulated `f_hat` back to pixels.

mod codebook;
mod interp;

pub use codebook::{build_codebook, Codebook};
pub use interp::interpolate;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Cap on vectors fed to k-means while building the codebook.
const MAX_CODEBOOK_SAMPLES: usize = 20_000;
const DECODER_RIDGE: f64 = 1e-6;

/// Ascending side lengths `h_k = w_k` of the token maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSchedule {
    sides: Vec<usize>,
}

impl TryFrom<Vec<usize>> for ScaleSchedule {
    type Error = Error;

    fn try_from(sides: Vec<usize>) -> Result<Self> {
        ScaleSchedule::new(sides)
    }
}

impl From<ScaleSchedule> for Vec<usize> {
    fn from(s: ScaleSchedule) -> Self {
        s.sides
    }
}

impl ScaleSchedule {
    pub fn new(sides: Vec<usize>) -> Result<Self> {
        if sides.is_empty() || sides[0] == 0 || sides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "scale schedule must be non-empty, positive and strictly ascending: {sides:?}"
            )));
        }
        Ok(ScaleSchedule { sides })
    }

    /// The ten-scale schedule `1, 2, 3, 4, 5, 6, 8, 10, 13, 16`.
    pub fn full() -> Self {
        ScaleSchedule {
            sides: vec![1, 2, 3, 4, 5, 6, 8, 10, 13, 16],
        }
    }

    pub fn toy() -> Self {
        ScaleSchedule {
            sides: vec![1, 2, 3, 4],
        }
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn num_scales(&self) -> usize {
        self.sides.len()
    }

    pub fn side(&self, k: usize) -> usize {
        self.sides[k]
    }

    pub fn final_side(&self) -> usize {
        *self.sides.last().expect("non-empty schedule")
    }

    pub fn tokens_at(&self, k: usize) -> usize {
        self.sides[k] * self.sides[k]
    }

    /// Total token count `L = sum_k h_k * w_k`.
    pub fn token_count(&self) -> usize {
        self.sides.iter().map(|s| s * s).sum()
    }

    /// Tokens in scales `0..n`.
    pub fn prefix_tokens(&self, n: usize) -> usize {
        self.sides[..n].iter().map(|s| s * s).sum()
    }

    /// Scale index of every flat token position.
    pub fn scale_of_tokens(&self) -> Vec<usize> {
        self.sides
            .iter()
            .enumerate()
            .flat_map(|(k, s)| std::iter::repeat_n(k, s * s))
            .collect()
    }
}

/// `h x w x d` grid of real features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::Tokenizer(format!(
                "{height}x{width}x{dim} feature map with {} values",
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        FeatureMap {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn sub(&self, other: &FeatureMap) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            ..*self
        }
    }

    /// Rows of a `[h*w, d]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.height * self.width, self.dim, self.data.clone())
            .expect("feature map dims are consistent")
    }
}

/// One integer token map per scale, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenHierarchy {
    pub maps: Vec<Vec<usize>>,
}

impl TokenHierarchy {
    pub fn from_flat(schedule: &ScaleSchedule, flat: &[usize]) -> Result<Self> {
        if flat.len() != schedule.token_count() {
            return Err(Error::Tokenizer(format!(
                "{} tokens for a schedule of {}",
                flat.len(),
                schedule.token_count()
            )));
        }
        let mut maps = Vec::with_capacity(schedule.num_scales());
        let mut off = 0;
        for k in 0..schedule.num_scales() {
            let n = schedule.tokens_at(k);
            maps.push(flat[off..off + n].to_vec());
            off += n;
        }
        Ok(TokenHierarchy { maps })
    }

    pub fn flatten(&self) -> Vec<usize> {
        self.maps.concat()
    }

    pub fn token_count(&self) -> usize {
        self.maps.iter().map(Vec::len).sum()
    }

    pub fn check(&self, schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
        if self.maps.len() != schedule.num_scales() {
            return Err(Error::Tokenizer(format!(
                "{} token maps for {} scales",
                self.maps.len(),
                schedule.num_scales()
            )));
        }
        for (k, m) in self.maps.iter().enumerate() {
            if m.len() != schedule.tokens_at(k) {
                return Err(Error::Tokenizer(format!(
                    "scale {k} has {} tokens, expected {}",
                    m.len(),
                    schedule.tokens_at(k)
                )));
            }
            if let Some(t) = m.iter().find(|&&t| t >= vocab) {
                return Err(Error::Tokenizer(format!(
                    "token {t} at scale {k} out of range for vocabulary {vocab}"
                )));
            }
        }
        Ok(())
    }
}

/// Result of residual quantization.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub tokens: TokenHierarchy,
    pub fhat: FeatureMap,
    /// `||f - f_hat||^2` after each scale.
    pub residual_energy: Vec<f64>,
}

/// Adds the upsampled codewords of scale `k` into `fhat`.
pub fn add_scale(
    fhat: &mut FeatureMap,
    schedule: &ScaleSchedule,
    k: usize,
    tokens: &[usize],
    codebook: &Codebook,
) -> Result<()> {
    let side = schedule.side(k);
    if tokens.len() != side * side {
        return Err(Error::Tokenizer(format!(
            "scale {k} expects {} tokens, got {}",
            side * side,
            tokens.len()
        )));
    }
    let mut z = Vec::with_capacity(tokens.len() * codebook.dim());
    for &t in tokens {
        z.extend_from_slice(codebook.lookup(t)?);
    }
    let z = FeatureMap::new(side, side, codebook.dim(), z)?;
    accumulate_into(fhat, &z);
    Ok(())
}

fn accumulate_into(fhat: &mut FeatureMap, z: &FeatureMap) {
    let up = interpolate(z, fhat.height, fhat.width);
    fhat.data.iter_mut().zip(&up.data).for_each(|(a, b)| *a += b);
}

fn check_final(f: &FeatureMap, schedule: &ScaleSchedule) -> Result<()> {
    let s = schedule.final_side();
    if f.height != s || f.width != s {
        return Err(Error::Tokenizer(format!(
            "feature map {}x{} does not match final scale {s}",
            f.height, f.width
        )));
    }
    Ok(())
}

/// Multi-scale residual quantization of `f` against `codebook`.
pub fn ms_quantize(f: &FeatureMap, schedule: &ScaleSchedule, codebook: &Codebook) -> Result<Quantized> {
    if codebook.is_empty() {
        return Err(Error::Tokenizer("empty codebook".into()));
    }
    if codebook.dim() != f.dim {
        return Err(Error::Tokenizer(format!(
            "codebook dim {} vs feature dim {}",
            codebook.dim(),
            f.dim
        )));
    }
    check_final(f, schedule)?;
    let mut fhat = FeatureMap::zeros(f.height, f.width, f.dim);
    let mut maps = Vec::with_capacity(schedule.num_scales());
    let mut energy = Vec::with_capacity(schedule.num_scales());
    for (k, &side) in schedule.sides().iter().enumerate() {
        let residual = interpolate(&f.sub(&fhat), side, side);
        let tokens: Vec<usize> = residual.cells().map(|c| codebook.nearest(c)).collect();
        add_scale(&mut fhat, schedule, k, &tokens, codebook)?;
        energy.push(f.sub(&fhat).energy());
        maps.push(tokens);
    }
    Ok(Quantized {
        tokens: TokenHierarchy { maps },
        fhat,
        residual_energy: energy,
    })
}

/// Continuous variant: every scale adds the downsampled residual itself,
/// so the final full-resolution scale closes the residual.
pub fn ms_quantize_identity(f: &FeatureMap, schedule: &ScaleSchedule) -> Result<FeatureMap> {
    check_final(f, schedule)?;
    let mut fhat = FeatureMap::zeros(f.height, f.width, f.dim);
    for &side in schedule.sides() {
        let residual = interpolate(&f.sub(&fhat), side, side);
        accumulate_into(&mut fhat, &residual);
    }
    Ok(fhat)
}

/// `f_hat = sum_k upsample(lookup(r_k))`.
pub fn accumulate_decode(
    tokens: &TokenHierarchy,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
) -> Result<FeatureMap> {
    tokens.check(schedule, codebook.len())?;
    let s = schedule.final_side();
    let mut fhat = FeatureMap::zeros(s, s, codebook.dim());
    for (k, m) in tokens.maps.iter().enumerate() {
        add_scale(&mut fhat, schedule, k, m, codebook)?;
    }
    Ok(fhat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Feature dimension `d`.
    pub dim: usize,
    /// Codebook size `V`, including the zero codeword at index 0.
    pub vocab: usize,
    /// Square image side in pixels; must be a multiple of the final scale.
    pub image_size: usize,
    pub seed: u64,
    /// Synthetic triplets whose images fit the codebook and decoder.
    pub fit_triplets: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            dim: 16,
            vocab: 64,
            image_size: 16,
            seed: 7,
            fit_triplets: 64,
        }
    }
}

/// Encoder projection, codebook and decoder readout. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    schedule: ScaleSchedule,
    image_size: usize,
    projection: Tensor,
    codebook: Codebook,
    decoder_weight: Tensor,
    decoder_bias: Tensor,
}

impl Tokenizer {
    /// Draws the projection, fits the decoder readout and the codebook on
    /// `fit_images`.
    pub fn build(config: &TokenizerConfig, schedule: &ScaleSchedule, fit_images: &[Image]) -> Result<Self> {
        let side = schedule.final_side();
        if config.image_size % side != 0 {
            return Err(Error::Tokenizer(format!(
                "image size {} is not a multiple of the final scale {side}",
                config.image_size
            )));
        }
        if config.vocab < 2 {
            return Err(Error::Tokenizer("vocabulary must hold the zero codeword and at least one more".into()));
        }
        let patch = config.image_size / side;
        let patch_dim = patch * patch * 3;
        if config.dim > patch_dim {
            return Err(Error::Tokenizer(format!(
                "feature dim {} exceeds patch size {patch_dim}",
                config.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let projection = orthonormal_rows(config.dim, patch_dim, &mut rng);
        let mut tok = Tokenizer {
            schedule: schedule.clone(),
            image_size: config.image_size,
            projection,
            codebook: Codebook::new(config.dim, vec![0.0; config.dim])?,
            decoder_weight: Tensor::zeros(&[config.dim, patch_dim]),
            decoder_bias: Tensor::zeros(&[patch_dim]),
        };
        let features = fit_images
            .iter()
            .map(|img| tok.encode_features(img))
            .collect::<Result<Vec<_>>>()?;
        tok.fit_decoder(fit_images, &features)?;

        // Round one: downsampled features at every scale.
        let mut samples = Vec::new();
        for f in &features {
            for &s in schedule.sides() {
                samples.extend(interpolate(f, s, s).data);
            }
        }
        let first = tok.codebook_with_zero(&samples, config)?;
        // Round two: the residuals actually seen while quantizing.
        let mut samples = Vec::new();
        for f in &features {
            let mut fhat = FeatureMap::zeros(f.height, f.width, f.dim);
            for (k, &s) in schedule.sides().iter().enumerate() {
                let residual = interpolate(&f.sub(&fhat), s, s);
                let tokens: Vec<usize> = residual.cells().map(|c| first.nearest(c)).collect();
                samples.extend(residual.data);
                add_scale(&mut fhat, schedule, k, &tokens, &first)?;
            }
        }
        tok.codebook = tok.codebook_with_zero(&samples, config)?;
        Ok(tok)
    }

    fn codebook_with_zero(&self, samples: &[f64], config: &TokenizerConfig) -> Result<Codebook> {
        let d = config.dim;
        let n = samples.len() / d;
        let stride = n.div_ceil(MAX_CODEBOOK_SAMPLES).max(1);
        let picked: Vec<f64> = samples
            .chunks(d)
            .step_by(stride)
            .filter(|c| c.iter().any(|v| *v != 0.0))
            .flatten()
            .copied()
            .collect();
        let learned = build_codebook(&picked, d, config.vocab - 1, config.seed ^ 0x9e37_79b9)?;
        let mut entries = vec![0.0; d];
        entries.extend_from_slice(learned.entries());
        Codebook::new(d, entries)
    }

    fn fit_decoder(&mut self, images: &[Image], features: &[FeatureMap]) -> Result<()> {
        let d = self.projection.rows();
        let p = self.projection.cols();
        let mut xtx = DMatrix::<f64>::zeros(d + 1, d + 1);
        let mut xty = DMatrix::<f64>::zeros(d + 1, p);
        let mut x = vec![0.0; d + 1];
        for (img, f) in images.iter().zip(features) {
            let patches = self.patches(img)?;
            for (cell, pix) in f.cells().zip(patches.chunks(p)) {
                x[..d].copy_from_slice(cell);
                x[d] = 1.0;
                for i in 0..=d {
                    for j in 0..=d {
                        xtx[(i, j)] += x[i] * x[j];
                    }
                    for j in 0..p {
                        xty[(i, j)] += x[i] * pix[j];
                    }
                }
            }
        }
        for i in 0..=d {
            xtx[(i, i)] += DECODER_RIDGE;
        }
        let chol = xtx
            .cholesky()
            .ok_or_else(|| Error::Tokenizer("decoder normal equations are singular".into()))?;
        let w = chol.solve(&xty);
        let mut weight = Vec::with_capacity(d * p);
        for i in 0..d {
            weight.extend((0..p).map(|j| w[(i, j)]));
        }
        self.decoder_weight = Tensor::matrix(d, p, weight)?;
        self.decoder_bias = Tensor::from_vec((0..p).map(|j| w[(d, j)]).collect());
        Ok(())
    }

    pub fn from_parts(
        schedule: ScaleSchedule,
        image_size: usize,
        projection: Tensor,
        codebook: Codebook,
        decoder_weight: Tensor,
        decoder_bias: Tensor,
    ) -> Result<Self> {
        let side = schedule.final_side();
        let patch = image_size / side.max(1);
        let p = patch * patch * 3;
        let d = codebook.dim();
        if image_size % side != 0
            || projection.shape() != [d, p]
            || decoder_weight.shape() != [d, p]
            || decoder_bias.shape() != [p]
        {
            return Err(Error::Tokenizer("inconsistent tokenizer parts".into()));
        }
        Ok(Tokenizer {
            schedule,
            image_size,
            projection,
            codebook,
            decoder_weight,
            decoder_bias,
        })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn vocab(&self) -> usize {
        self.codebook.len()
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn decoder_weight(&self) -> &Tensor {
        &self.decoder_weight
    }

    pub fn decoder_bias(&self) -> &Tensor {
        &self.decoder_bias
    }

    fn patch(&self) -> usize {
        self.image_size / self.schedule.final_side()
    }

    /// Flattened `(py, px, c)` patches in row-major patch order.
    fn patches(&self, img: &Image) -> Result<Vec<f64>> {
        if img.height != self.image_size || img.width != self.image_size {
            return Err(Error::Tokenizer(format!(
                "image is {}x{}, tokenizer expects {}x{}",
                img.height, img.width, self.image_size, self.image_size
            )));
        }
        let side = self.schedule.final_side();
        let p = self.patch();
        let mut out = Vec::with_capacity(img.data.len());
        for by in 0..side {
            for bx in 0..side {
                for py in 0..p {
                    for px in 0..p {
                        out.extend(img.pixel(by * p + py, bx * p + px));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn encode_features(&self, img: &Image) -> Result<FeatureMap> {
        let patches = self.patches(img)?;
        let side = self.schedule.final_side();
        let d = self.dim();
        let p = self.projection.cols();
        let proj = self.projection.data();
        let mut data = Vec::with_capacity(side * side * d);
        for patch in patches.chunks(p) {
            for row in proj.chunks(p) {
                data.push(row.iter().zip(patch).map(|(a, b)| a * b).sum());
            }
        }
        FeatureMap::new(side, side, d, data)
    }

    pub fn tokenize(&self, img: &Image) -> Result<TokenHierarchy> {
        let f = self.encode_features(img)?;
        Ok(ms_quantize(&f, &self.schedule, &self.codebook)?.tokens)
    }

    /// Linear readout of `f_hat` to pixels, clamped to `[0, 1]`.
    pub fn decode_features(&self, fhat: &FeatureMap) -> Result<Image> {
        let side = self.schedule.final_side();
        if fhat.height != side || fhat.width != side || fhat.dim != self.dim() {
            return Err(Error::Tokenizer("feature map does not match tokenizer".into()));
        }
        let p = self.patch();
        let pd = p * p * 3;
        let w = self.decoder_weight.data();
        let b = self.decoder_bias.data();
        let mut img = Image::filled(self.image_size, self.image_size, [0.0; 3]);
        for by in 0..side {
            for bx in 0..side {
                let cell = fhat.cell(by, bx);
                let mut pix = b.to_vec();
                for (f, row) in cell.iter().zip(w.chunks(pd)) {
                    pix.iter_mut().zip(row).for_each(|(o, wv)| *o += f * wv);
                }
                for py in 0..p {
                    for px in 0..p {
                        let i = (py * p + px) * 3;
                        img.set_pixel(by * p + py, bx * p + px, [pix[i], pix[i + 1], pix[i + 2]]);
                    }
                }
            }
        }
        Ok(img.clamp01())
    }

    pub fn decode(&self, tokens: &TokenHierarchy) -> Result<(FeatureMap, Image)> {
        let fhat = accumulate_decode(tokens, &self.schedule, &self.codebook)?;
        let img = self.decode_features(&fhat)?;
        Ok((fhat, img))
    }

    /// Next-scale inputs for teacher forcing: for scales `2..=K`, the
    /// accumulation of scales `< k` downsampled to `h_k`. Shape
    /// `[L - h_1*w_1, d]`.
    pub fn teacher_inputs(&self, tokens: &TokenHierarchy) -> Result<Tensor> {
        tokens.check(&self.schedule, self.vocab())?;
        let s = self.schedule.final_side();
        let mut fhat = FeatureMap::zeros(s, s, self.dim());
        let mut rows = Vec::new();
        for k in 0..self.schedule.num_scales() - 1 {
            add_scale(&mut fhat, &self.schedule, k, &tokens.maps[k], &self.codebook)?;
            rows.extend(self.next_scale_input(&fhat, k + 1).data);
        }
        let n = self.schedule.token_count() - self.schedule.tokens_at(0);
        Tensor::matrix(n, self.dim(), rows)
    }

    /// `interpolate(f_hat, h_k, w_k)` for scale index `k`.
    pub fn next_scale_input(&self, fhat: &FeatureMap, k: usize) -> FeatureMap {
        let s = self.schedule.side(k);
        interpolate(fhat, s, s)
    }

    /// Condition rows for every scale: the accumulation through scale `k`
    /// downsampled to `h_k`. Shape `[L, d]`.
    pub fn condition_inputs(&self, tokens: &TokenHierarchy) -> Result<Tensor> {
        tokens.check(&self.schedule, self.vocab())?;
        let s = self.schedule.final_side();
        let mut fhat = FeatureMap::zeros(s, s, self.dim());
        let mut rows = Vec::new();
        for k in 0..self.schedule.num_scales() {
            add_scale(&mut fhat, &self.schedule, k, &tokens.maps[k], &self.codebook)?;
            rows.extend(self.next_scale_input(&fhat, k).data);
        }
        Tensor::matrix(self.schedule.token_count(), self.dim(), rows)
    }

    /// CRC-32 over every frozen array.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for &s in self.schedule.sides() {
            h.update(&(s as u64).to_le_bytes());
        }
        h.update(&(self.image_size as u64).to_le_bytes());
        for arr in [
            self.projection.data(),
            self.codebook.entries(),
            self.decoder_weight.data(),
            self.decoder_bias.data(),
        ] {
            for v in arr {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Gaussian rows orthonormalized by Gram-Schmidt.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut m = Tensor::randn(&[rows, cols], 1.0, rng).into_data();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..cols).map(|c| m[i * cols + c] * m[j * cols + c]).sum();
            for c in 0..cols {
                m[i * cols + c] -= dot * m[j * cols + c];
            }
        }
        let norm = (0..cols).map(|c| m[i * cols + c].powi(2)).sum::<f64>().sqrt();
        for c in 0..cols {
            m[i * cols + c] /= norm;
        }
    }
    Tensor::matrix(rows, cols, m).expect("dims")
}
