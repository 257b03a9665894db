//! Reward and evaluation metrics over a frozen, seeded convolutional
//! feature extractor, plus SSIM and the pixel-space AdaIN baseline.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::conv::ConvGeometry;
use crate::tensor::{gemm, Tensor};

const NORM_EPS: f64 = 1e-10;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `(out_channels, stride)` of each layer; kernel 3, padding 1.
const LAYERS: [(usize, usize); 3] = [(8, 1), (16, 2), (16, 2)];

/// One layer's activations, `[h*w, c]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Frozen three-layer ReLU conv net; every layer output is a tap.
#[derive(Clone, Debug)]
pub struct ProxyFeatureNet {
    weights: Vec<(Tensor, Vec<f64>)>,
}

impl ProxyFeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = LAYERS
            .iter()
            .map(|&(cout, _)| {
                let fan_in = 9 * cin;
                let w = Tensor::randn(&[cout, fan_in], (2.0 / fan_in as f64).sqrt(), &mut rng);
                let b: Vec<f64> = Tensor::randn(&[cout], 0.1, &mut rng).into_data();
                cin = cout;
                (w, b)
            })
            .collect();
        ProxyFeatureNet { weights }
    }

    pub fn features(&self, img: &Image) -> Vec<FeatureTap> {
        let mut x = FeatureTap { height: img.height, width: img.width, channels: 3, data: img.data.clone() };
        let mut taps = Vec::with_capacity(LAYERS.len());
        for ((w, b), &(cout, stride)) in self.weights.iter().zip(&LAYERS) {
            let geom = ConvGeometry { height: x.height, width: x.width, channels: x.channels, kernel: 3, stride, pad: 1 };
            let (ho, wo) = geom.out_size();
            let cols: Vec<f64> = geom.im2col_index().iter().map(|i| i.map_or(0.0, |i| x.data[i])).collect();
            let mut out = vec![0.0; ho * wo * cout];
            gemm(ho * wo, geom.patch_len(), cout, &cols, false, w.data(), true, &mut out, 0.0);
            for row in out.chunks_mut(cout) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v = (*v + bb).max(0.0);
                }
            }
            x = FeatureTap { height: ho, width: wo, channels: cout, data: out };
            taps.push(x.clone());
        }
        taps
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Image(format!(
            "metric over {}x{} and {}x{} images",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn unit_rows(t: &FeatureTap) -> Vec<f64> {
    let mut out = t.data.clone();
    for row in out.chunks_mut(t.channels) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Perceptual distance on precomputed taps.
pub fn tap_distance(fa: &[FeatureTap], fb: &[FeatureTap]) -> f64 {
    let per: f64 = fa
        .iter()
        .zip(fb)
        .map(|(a, b)| {
            let (ua, ub) = (unit_rows(a), unit_rows(b));
            // Sum over channels, mean over positions.
            mean_sq_diff(&ua, &ub) * a.channels as f64
        })
        .sum();
    per / fa.len() as f64
}

/// Mean over taps and positions of the squared distance between
/// channel-normalized feature vectors.
pub fn proxy_perceptual_distance(net: &ProxyFeatureNet, a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    Ok(tap_distance(&net.features(a), &net.features(b)))
}

/// `-lambda * d(x_hat, x)`.
pub fn reward(net: &ProxyFeatureNet, x_hat: &Image, target: &Image, lambda: f64) -> Result<f64> {
    Ok(-lambda * proxy_perceptual_distance(net, x_hat, target)?)
}

/// `F^T F / (h w)` per tap.
pub fn gram(t: &FeatureTap) -> Vec<f64> {
    let c = t.channels;
    let n = t.height * t.width;
    let mut g = vec![0.0; c * c];
    gemm(c, n, c, &t.data, true, &t.data, false, &mut g, 0.0);
    g.iter_mut().for_each(|v| *v /= n as f64);
    g
}

pub fn style_loss(net: &ProxyFeatureNet, generated: &Image, style: &Image) -> Result<f64> {
    check_dims(generated, style)?;
    let (fa, fb) = (net.features(generated), net.features(style));
    Ok(fa.iter().zip(&fb).map(|(a, b)| mean_sq_diff(&gram(a), &gram(b))).sum::<f64>() / fa.len() as f64)
}

pub fn content_loss(net: &ProxyFeatureNet, generated: &Image, content: &Image) -> Result<f64> {
    check_dims(generated, content)?;
    let (fa, fb) = (net.features(generated), net.features(content));
    Ok(fa.iter().zip(&fb).map(|(a, b)| mean_sq_diff(&a.data, &b.data)).sum::<f64>() / fa.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population covariance; symmetric in its arguments bit for bit.
fn covariance(a: &[f64], b: &[f64], ma: f64, mb: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

/// Single-scale SSIM with uniform 8x8 windows at stride 1, averaged over
/// windows and channels. Images smaller than a window use one window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let wy = SSIM_WINDOW.min(a.height);
    let wx = SSIM_WINDOW.min(a.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let (ca, cb) = (a.channel(c), b.channel(c));
        for y0 in 0..=a.height - wy {
            for x0 in 0..=a.width - wx {
                let win = |ch: &[f64]| -> Vec<f64> {
                    (y0..y0 + wy).flat_map(|y| ch[y * a.width + x0..y * a.width + x0 + wx].to_vec()).collect()
                };
                let (pa, pb) = (win(&ca), win(&cb));
                let (ma, mb) = (mean(&pa), mean(&pb));
                let va = covariance(&pa, &pa, ma, ma);
                let vb = covariance(&pb, &pb, mb, mb);
                let cab = covariance(&pa, &pb, ma, mb);
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Channel statistics transfer in pixel space, before clamping.
pub fn adain_unclamped(content: &Image, style: &Image) -> Image {
    let mut out = content.clone();
    for c in 0..3 {
        let (xc, xs) = (content.channel(c), style.channel(c));
        let (mc, ms) = (mean(&xc), mean(&xs));
        let sc = covariance(&xc, &xc, mc, mc).sqrt();
        let ss = covariance(&xs, &xs, ms, ms).sqrt();
        for (i, v) in xc.iter().enumerate() {
            out.data[i * 3 + c] = ss * (v - mc) / (sc + 1e-8) + ms;
        }
    }
    out
}

/// Pixel-space AdaIN, clamped to `[0, 1]`.
pub fn adain_baseline(content: &Image, style: &Image) -> Result<Image> {
    check_dims(content, style)?;
    Ok(adain_unclamped(content, style).clamp01())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub seed: u64,
    pub style_loss: f64,
    pub content_loss: f64,
    pub ssim: f64,
    pub proxy_perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub style_loss: f64,
    pub content_loss: f64,
    pub ssim: f64,
    pub proxy_perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

/// Scores `generate` on every triplet: style loss against the style image,
/// content loss against the content image, SSIM and proxy distance against
/// the target.
pub fn evaluate<F>(net: &ProxyFeatureNet, method: &str, triplets: &[(usize, &Triplet)], mut generate: F) -> Result<MetricReport>
where
    F: FnMut(usize, &Triplet) -> Result<Image>,
{
    if triplets.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut samples = Vec::with_capacity(triplets.len());
    for &(index, t) in triplets {
        let out = generate(index, t)?;
        samples.push(SampleMetrics {
            index,
            seed: t.seed,
            style_loss: style_loss(net, &out, &t.style)?,
            content_loss: content_loss(net, &out, &t.content)?,
            ssim: ssim(&out, &t.target)?,
            proxy_perceptual: proxy_perceptual_distance(net, &out, &t.target)?,
        });
    }
    let n = samples.len() as f64;
    let avg = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let aggregate = Aggregate {
        count: samples.len(),
        style_loss: avg(|s| s.style_loss),
        content_loss: avg(|s| s.content_loss),
        ssim: avg(|s| s.ssim),
        proxy_perceptual: avg(|s| s.proxy_perceptual),
    };
    Ok(MetricReport { method: method.to_string(), samples, aggregate })
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,seed,style_loss,content_loss,ssim,proxy_perceptual\n");
        for m in &self.samples {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e}\n",
                m.index, m.seed, m.style_loss, m.content_loss, m.ssim, m.proxy_perceptual
            ));
        }
        s
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(json, text + "\n").map_err(|e| Error::io(json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_triplet, Split};

    fn net() -> ProxyFeatureNet {
        ProxyFeatureNet::new(3)
    }

    #[test]
    fn distance_zero_on_self_and_symmetric() {
        let t = gen_triplet(1, 16, Split::Train);
        let n = net();
        assert_eq!(proxy_perceptual_distance(&n, &t.content, &t.content).unwrap(), 0.0);
        let ab = proxy_perceptual_distance(&n, &t.content, &t.style).unwrap();
        let ba = proxy_perceptual_distance(&n, &t.style, &t.content).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn reward_scales_linearly() {
        let t = gen_triplet(2, 16, Split::Train);
        let n = net();
        let r1 = reward(&n, &t.content, &t.target, 1.0).unwrap();
        let r5 = reward(&n, &t.content, &t.target, 5.0).unwrap();
        assert!(r1 < 0.0);
        assert!((r5 - 5.0 * r1).abs() < 1e-12);
        assert_eq!(reward(&n, &t.target, &t.target, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn dim_mismatch_errors() {
        let n = net();
        assert!(proxy_perceptual_distance(&n, &Image::filled(16, 16, [0.0; 3]), &Image::filled(8, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let t = gen_triplet(3, 16, Split::Train);
        assert_eq!(ssim(&t.content, &t.content).unwrap(), 1.0);
        let ab = ssim(&t.content, &t.style).unwrap();
        let ba = ssim(&t.style, &t.content).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn gram_ignores_spatial_order() {
        let t = gen_triplet(4, 16, Split::Train);
        let tap = &net().features(&t.style)[1];
        let c = tap.channels;
        let mut shuffled = tap.clone();
        let rows: Vec<&[f64]> = tap.data.chunks(c).rev().collect();
        shuffled.data = rows.concat();
        let (g1, g2) = (gram(tap), gram(&shuffled));
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn style_loss_of_self_is_zero() {
        let t = gen_triplet(5, 16, Split::Train);
        assert_eq!(style_loss(&net(), &t.style, &t.style).unwrap(), 0.0);
        assert!(style_loss(&net(), &t.content, &t.style).unwrap() > 0.0);
    }

    #[test]
    fn adain_matches_style_statistics() {
        let t = gen_triplet(6, 16, Split::Train);
        let out = adain_unclamped(&t.content, &t.style);
        for c in 0..3 {
            let (o, s) = (out.channel(c), t.style.channel(c));
            let (mo, ms) = (mean(&o), mean(&s));
            assert!((mo - ms).abs() < 1e-5);
            let (so, ss) = (covariance(&o, &o, mo, mo).sqrt(), covariance(&s, &s, ms, ms).sqrt());
            assert!((so - ss).abs() < 1e-5, "channel {c}: {so} vs {ss}");
        }
    }

    #[test]
    fn adain_identity_and_constant_style() {
        let t = gen_triplet(7, 16, Split::Train);
        let same = adain_baseline(&t.content, &t.content).unwrap();
        assert!(same.data.iter().zip(&t.content.data).all(|(a, b)| (a - b).abs() < 1e-6));
        let flat = Image::filled(16, 16, [0.2, 0.4, 0.6]);
        let out = adain_baseline(&t.content, &flat).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let p = out.pixel(y, x);
                assert!((p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12 && (p[2] - 0.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_target_identity() {
        let ts: Vec<_> = (0..3).map(|s| gen_triplet(s, 16, Split::Val)).collect();
        let refs: Vec<(usize, &Triplet)> = ts.iter().enumerate().collect();
        let r = evaluate(&net(), "target", &refs, |_, t| Ok(t.target.clone())).unwrap();
        assert_eq!(r.aggregate.proxy_perceptual, 0.0);
        assert_eq!(r.aggregate.ssim, 1.0);
        assert!(evaluate(&net(), "x", &[], |_, t| Ok(t.target.clone())).is_err());
    }

    #[test]
    fn content_closer_than_noise() {
        use rand::Rng;
        let n = net();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut dc, mut dn) = (0.0, 0.0);
        for s in 0..100 {
            let t = gen_triplet(s, 16, Split::Train);
            let noise = Image::new(16, 16, (0..768).map(|_| rng.random()).collect()).unwrap();
            dc += proxy_perceptual_distance(&n, &t.content, &t.target).unwrap();
            dn += proxy_perceptual_distance(&n, &noise, &t.target).unwrap();
        }
        assert!(dc < dn, "content {dc} vs noise {dn}");
    }
}
