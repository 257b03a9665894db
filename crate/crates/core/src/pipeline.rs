//! Glue between images, the frozen tokenizer and the model.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_triplets, Triplet};
use rayon::prelude::*;

use crate::error::Result;
use crate::image::Image;
use crate::metrics::{adain_baseline, evaluate, MetricReport, ProxyFeatureNet};
use crate::model::{Conditioning, Model, ModelConfig, ModelDims, PolicyMode};
use crate::sampler::{generate, SamplerConfig, Trajectory};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::tokenizer::{ScaleSchedule, TokenHierarchy, Tokenizer, TokenizerConfig};

/// Tag mixed into the tokenizer seed so its fitting set never coincides
/// with a training dataset drawn from the same number.
const TOKENIZER_FIT_TAG: u64 = 0x746f6b;

/// Content and style condition rows for one pair.
pub fn condition(tokenizer: &Tokenizer, content: &Image, style: &Image) -> Result<Conditioning> {
    Ok(Conditioning {
        content_image: content.clone(),
        style: tokenizer.condition_inputs(&tokenizer.tokenize(style)?)?,
        content: tokenizer.condition_inputs(&tokenizer.tokenize(content)?)?,
    })
}

/// One teacher-forced training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub cond: Conditioning,
    pub inputs: Tensor,
    pub targets: TokenHierarchy,
}

impl Example {
    pub fn new(tokenizer: &Tokenizer, content: &Image, style: &Image, target: &Image) -> Result<Self> {
        let targets = tokenizer.tokenize(target)?;
        Ok(Example {
            cond: condition(tokenizer, content, style)?,
            inputs: tokenizer.teacher_inputs(&targets)?,
            targets,
        })
    }

    pub fn from_triplet(tokenizer: &Tokenizer, t: &Triplet) -> Result<Self> {
        Self::new(tokenizer, &t.content, &t.style, &t.target)
    }

    /// CRC-32 over everything the model sees.
    pub fn hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.cond.content_image.to_bytes());
        for t in [&self.cond.style, &self.cond.content, &self.inputs] {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        for v in self.targets.flatten() {
            h.update(&(v as u64).to_le_bytes());
        }
        h.finalize()
    }
}

/// Fits the tokenizer on synthetic triplets drawn from its own seed, so
/// it is a pure function of its configuration.
pub fn build_tokenizer(config: &TokenizerConfig, schedule: &ScaleSchedule) -> Result<Tokenizer> {
    let fit = gen_triplets(
        config.fit_triplets,
        derive_seed(&[config.seed, TOKENIZER_FIT_TAG]),
        config.image_size,
    )?;
    let images: Vec<Image> = fit
        .into_iter()
        .flat_map(|t| [t.content, t.style, t.target])
        .collect();
    Tokenizer::build(config, schedule, &images)
}

pub fn model_dims(tokenizer: &Tokenizer) -> ModelDims {
    ModelDims {
        schedule: tokenizer.schedule().clone(),
        vocab: tokenizer.vocab(),
        feature_dim: tokenizer.dim(),
        image_size: tokenizer.image_size(),
    }
}

pub fn build_model(config: &ModelConfig, tokenizer: &Tokenizer) -> Result<Model> {
    Model::new(config.clone(), model_dims(tokenizer))
}

/// Run configuration, tokenizer and model stored in a checkpoint;
/// `reference` drops any adapters.
pub fn load_trained(ckpt: &Checkpoint, reference: bool) -> Result<(RunConfig, Tokenizer, Model)> {
    let run = RunConfig::from_json(&ckpt.config)?;
    let tokenizer = ckpt.tokenizer()?;
    let model = ckpt.model(run.model.clone(), model_dims(&tokenizer), reference)?;
    Ok((run, tokenizer, model))
}

/// One stylized sample for a content/style pair.
pub fn stylize_pair(
    model: &Model,
    tokenizer: &Tokenizer,
    content: &Image,
    style: &Image,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    let cond = condition(tokenizer, content, style)?;
    generate(model, tokenizer, &cond, sampler, PolicyMode::Current, seed)
}

/// Metrics of the model's samples; item `i` is drawn with seed
/// `derive_seed([seed, i])`.
pub fn evaluate_model(
    net: &ProxyFeatureNet,
    method: &str,
    model: &Model,
    tokenizer: &Tokenizer,
    sampler: &SamplerConfig,
    seed: u64,
    items: &[(usize, &Triplet)],
) -> Result<MetricReport> {
    let images = items
        .par_iter()
        .map(|&(i, t)| {
            let s = derive_seed(&[seed, i as u64]);
            Ok(stylize_pair(model, tokenizer, &t.content, &t.style, sampler, s)?.image)
        })
        .collect::<Result<Vec<Image>>>()?;
    let mut it = images.into_iter();
    evaluate(net, method, items, |_, _| Ok(it.next().expect("one image per item")))
}

pub fn evaluate_adain(net: &ProxyFeatureNet, items: &[(usize, &Triplet)]) -> Result<MetricReport> {
    evaluate(net, "adain_pixel", items, |_, t| adain_baseline(&t.content, &t.style))
}
