use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn dims() -> ModelDims {
    ModelDims {
        schedule: ScaleSchedule::toy(),
        vocab: 64,
        feature_dim: 16,
        image_size: 16,
    }
}

fn small() -> Model {
    let config = ModelConfig { embed_dim: 32, heads: 4, layers: 2, ..Default::default() };
    Model::new(config, dims()).unwrap()
}

fn random_cond(seed: u64) -> (Conditioning, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Image::new(16, 16, (0..16 * 16 * 3).map(|_| rng.random()).collect()).unwrap();
    let cond = Conditioning {
        content_image: img,
        style: Tensor::randn(&[30, 16], 1.0, &mut rng),
        content: Tensor::randn(&[30, 16], 1.0, &mut rng),
    };
    (cond, Tensor::randn(&[29, 16], 1.0, &mut rng))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn perturb_rows(t: &mut Tensor, rows: std::ops::Range<usize>) {
    let c = t.cols();
    for r in rows {
        for v in &mut t.data_mut()[r * c..(r + 1) * c] {
            *v += 0.5;
        }
    }
}

#[test]
fn toy_logits_have_thirty_rows() {
    let m = small();
    let (cond, inp) = random_cond(1);
    let l = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    assert_eq!(l.shape(), &[30, 64]);
}

#[test]
fn later_scale_inputs_do_not_affect_earlier_logits() {
    let m = small();
    let (cond, inp) = random_cond(2);
    let base = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    // Scale 3 occupies tokens 5..14, fed by input rows 4..13.
    let mut inp2 = inp.clone();
    perturb_rows(&mut inp2, 4..13);
    let after = m.logits(PolicyMode::Current, &cond, &inp2, 4).unwrap();
    assert_eq!(bits(&base)[..5 * 64], bits(&after)[..5 * 64]);
    assert_ne!(bits(&base)[5 * 64..], bits(&after)[5 * 64..]);
}

#[test]
fn later_scale_conditions_do_not_affect_earlier_logits() {
    let m = small();
    let (cond, inp) = random_cond(3);
    let base = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    let mut c2 = cond.clone();
    perturb_rows(&mut c2.style, 14..30);
    perturb_rows(&mut c2.content, 14..30);
    let after = m.logits(PolicyMode::Current, &c2, &inp, 4).unwrap();
    assert_eq!(bits(&base)[..14 * 64], bits(&after)[..14 * 64]);
}

#[test]
fn prefix_forward_matches_full_forward() {
    let m = small();
    let (cond, inp) = random_cond(4);
    let full = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    let pre = m.logits(PolicyMode::Current, &cond, &inp, 2).unwrap();
    assert_eq!(pre.shape(), &[5, 64]);
    let diff = pre.data().iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn conditions_change_their_scale() {
    let m = small();
    let (cond, inp) = random_cond(5);
    let base = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    for which in 0..2 {
        let mut c2 = cond.clone();
        let t = if which == 0 { &mut c2.style } else { &mut c2.content };
        perturb_rows(t, 5..14);
        let after = m.logits(PolicyMode::Current, &c2, &inp, 4).unwrap();
        assert_ne!(bits(&base)[5 * 64..14 * 64], bits(&after)[5 * 64..14 * 64]);
    }
}

#[test]
fn repeated_forward_is_bit_identical() {
    let m = small();
    let (cond, inp) = random_cond(6);
    let a = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    let b = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn fresh_adapters_are_neutral() {
    let mut m = small();
    m.attach_adapters().unwrap();
    let (cond, inp) = random_cond(7);
    let cur = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    let refr = m.logits(PolicyMode::Reference, &cond, &inp, 4).unwrap();
    assert_eq!(cur, refr);
}

fn train_adapters_randomly(m: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.params().names().filter(|n| n.ends_with(".b") && is_adapter(n)).map(String::from).collect();
    for n in names {
        let t = m.params_mut().get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v = 0.05 * rng.random::<f64>() - 0.025;
        }
    }
}

#[test]
fn merge_moves_current_into_reference() {
    let mut m = small();
    m.attach_adapters().unwrap();
    train_adapters_randomly(&mut m, 11);
    let (cond, inp) = random_cond(8);
    let before = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    let old_ref = m.logits(PolicyMode::Reference, &cond, &inp, 4).unwrap();
    assert!(before.max_abs_diff(&old_ref) > 1e-6);
    m.lora_merge().unwrap();
    let after_ref = m.logits(PolicyMode::Reference, &cond, &inp, 4).unwrap();
    let after_cur = m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap();
    assert!(after_ref.max_abs_diff(&before) <= 1e-9);
    assert_eq!(after_cur, after_ref);
    assert_eq!(m.merges(), 1);
}

#[test]
fn second_merge_without_training_keeps_base() {
    let mut m = small();
    m.attach_adapters().unwrap();
    train_adapters_randomly(&mut m, 12);
    m.lora_merge().unwrap();
    let base: Vec<(String, Tensor)> =
        m.params().iter().filter(|(n, _)| is_base(n)).map(|(n, t)| (n.to_string(), t.clone())).collect();
    m.lora_merge().unwrap();
    for (n, t) in base {
        assert_eq!(bits(m.params().get(&n).unwrap()), bits(&t), "{n}");
    }
}

#[test]
fn merge_without_adapters_errors() {
    assert!(small().lora_merge().is_err());
}

#[test]
fn snapshot_mode_needs_snapshot() {
    let mut m = small();
    let (cond, inp) = random_cond(9);
    assert!(m.logits(PolicyMode::Snapshot, &cond, &inp, 4).is_err());
    m.attach_adapters().unwrap();
    m.take_snapshot();
    let snap = m.logits(PolicyMode::Snapshot, &cond, &inp, 4).unwrap();
    train_adapters_randomly(&mut m, 13);
    assert_eq!(snap, m.logits(PolicyMode::Snapshot, &cond, &inp, 4).unwrap());
    assert_ne!(snap, m.logits(PolicyMode::Current, &cond, &inp, 4).unwrap());
}

fn embedded(seed: u64, n: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[n, 32], 1.0, &mut rng),
        Tensor::randn(&[n, 32], 1.0, &mut rng),
        Tensor::randn(&[n, 32], 1.0, &mut rng),
    )
}

#[test]
fn alpha_one_ignores_content_branch() {
    let m = small();
    let (h, s, c) = embedded(20, 14);
    let (_, _, c2) = embedded(21, 14);
    let ones = vec![1.0; 14];
    let a = m.cross_attention_update(0, PolicyMode::Current, &h, &s, &c, &ones).unwrap();
    let b = m.cross_attention_update(0, PolicyMode::Current, &h, &s, &c2, &ones).unwrap();
    assert_eq!(a, b);
}

#[test]
fn equal_conditions_make_alpha_irrelevant() {
    let m = small();
    let (h, s, _) = embedded(22, 14);
    let a = m.cross_attention_update(1, PolicyMode::Current, &h, &s, &s, &[0.1; 14]).unwrap();
    let b = m.cross_attention_update(1, PolicyMode::Current, &h, &s, &s, &[0.9; 14]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn update_is_affine_in_alpha() {
    let m = small();
    let (h, s, c) = embedded(23, 30);
    let u = |a: f64| m.cross_attention_update(0, PolicyMode::Current, &h, &s, &c, &[a; 30]).unwrap();
    let (u0, u5, u1) = (u(0.0), u(0.5), u(1.0));
    let mid: Vec<f64> = u0.data().iter().zip(u1.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    let diff = u5.data().iter().zip(&mid).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor, rows: std::ops::Range<usize>) -> Vec<f64> {
    rows.map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.data()[r]).collect()
}

#[test]
fn single_visible_key_returns_its_value() {
    let m = small();
    let p = m.params();
    let (h, s, c) = embedded(24, 1);
    let (_, s2, c2) = embedded(25, 1);
    let u = m.cross_attention_update(0, PolicyMode::Current, &h, &s, &c, &[0.3]).unwrap();
    let u2 = m.cross_attention_update(0, PolicyMode::Current, &h, &s2, &c2, &[0.7]).unwrap();
    let hn = layer_norm_row(h.row(0), p.get("blocks.0.ln2.gamma").unwrap().data(), p.get("blocks.0.ln2.beta").unwrap().data());
    let v = affine(&hn, p.get("blocks.0.cross.kv.weight").unwrap(), p.get("blocks.0.cross.kv.bias").unwrap(), 32..64);
    let want = affine(&v, p.get("blocks.0.cross.proj.weight").unwrap(), p.get("blocks.0.cross.proj.bias").unwrap(), 0..32);
    for got in [u.data(), u2.data()] {
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn mismatched_condition_rows_error() {
    let m = small();
    let (h, s, _) = embedded(26, 5);
    let (_, c, _) = embedded(27, 4);
    let err = m.cross_attention_update(0, PolicyMode::Current, &h, &s, &c, &[0.5; 5]).unwrap_err();
    assert!(err.to_string().contains("cross-attention"));
}

#[test]
fn zero_image_start_token_uses_biases_only() {
    let mut m = small();
    let zero = Image::filled(16, 16, [0.0; 3]);
    let before = m.start_embedding(&zero).unwrap();
    let (cond, _) = random_cond(30);
    let other = m.start_embedding(&cond.content_image).unwrap();
    for v in m.params_mut().get_mut("start.conv1.weight").unwrap().data_mut() {
        *v *= -3.0;
    }
    assert_eq!(m.start_embedding(&zero).unwrap(), before);
    assert_ne!(m.start_embedding(&cond.content_image).unwrap(), other);
}

#[test]
fn start_encoder_receives_gradient() {
    let m = small();
    let (cond, inp) = random_cond(31);
    let mut g = Graph::new();
    let mut b = m.binder(PolicyMode::Current, &is_base).unwrap();
    let logits = m.forward(&mut g, &mut b, PolicyMode::Current, &cond, &inp, 4).unwrap();
    let targets: Vec<usize> = (0..30).map(|i| (i * 7) % 64).collect();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    g.backward(loss).unwrap();
    let grads = b.grads(&g);
    for name in ["start.conv1.weight", "start.conv2.weight", "start.mlp1.weight"] {
        assert!(grads[name].data().iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn initial_loss_near_uniform() {
    let m = Model::new(ModelConfig::default(), dims()).unwrap();
    let (cond, inp) = random_cond(32);
    let mut g = Graph::new();
    let mut b = ParamBinder::frozen(m.params());
    let logits = m.forward(&mut g, &mut b, PolicyMode::Current, &cond, &inp, 4).unwrap();
    let targets: Vec<usize> = (0..30).map(|i| (i * 13) % 64).collect();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    assert!((g.value(loss).item() - 64f64.ln()).abs() < 0.3);
}

#[test]
fn from_params_rejects_wrong_shapes() {
    let m = small();
    let mut p = m.params().clone();
    p.insert("head.out.bias", Tensor::zeros(&[3]));
    assert!(Model::from_params(m.config().clone(), dims(), p, 0).is_err());
    assert!(Model::from_params(m.config().clone(), dims(), m.params().clone(), 0).is_ok());
}
