use stylevar::checkpoint::Checkpoint;
use stylevar::config::RunConfig;
use stylevar::data::{gen_triplets, Triplet};
use stylevar::grpo::{GrpoConfig, GrpoTrainer, MergeKind, MergeState};
use stylevar::model::{is_adapter, Model, PolicyMode};
use stylevar::pipeline::{build_model, build_tokenizer, condition, load_trained, Example};
use stylevar::sft::{batch_grads, SftTrainer};
use stylevar::tensor::Tensor;
use stylevar::tokenizer::Tokenizer;

const TINY: &str = r#"{
  "schedule": [1, 2],
  "tokenizer": {"dim": 4, "vocab": 8, "image_size": 8, "fit_triplets": 4},
  "model": {"embed_dim": 8, "heads": 2, "layers": 1, "ffn_mult": 2, "adapter_rank": 2, "init_std": 0.2},
  "sft": {"batch_size": 4, "lr_schedule": [{"from_epoch": 0, "lr": 0.003}]},
  "grpo": {"group_size": 4, "lr": 0.001},
  "data": {"n": 24}
}"#;

fn tiny(patch: &str) -> RunConfig {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    merge_json(&mut v, serde_json::from_str(patch).unwrap());
    RunConfig::from_json(&v.to_string()).unwrap()
}

fn merge_json(a: &mut serde_json::Value, b: serde_json::Value) {
    match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                merge_json(a.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn data(run: &RunConfig) -> Vec<Triplet> {
    gen_triplets(run.data.n, run.stage_seed(run.data.seed), run.tokenizer.image_size).unwrap()
}

fn bits(m: &Model) -> Vec<(String, Vec<u64>)> {
    m.params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn parts(run: &RunConfig) -> (Tokenizer, Model) {
    let tok = build_tokenizer(&run.tokenizer, &run.schedule).unwrap();
    let model = build_model(&run.model, &tok).unwrap();
    (tok, model)
}

#[test]
fn gradient_accumulation_is_bit_exact() {
    let mut results = Vec::new();
    for (bs, accum) in [(4, 1), (2, 2), (1, 4)] {
        let run = tiny(&format!(r#"{{"sft": {{"batch_size": {bs}, "grad_accum": {accum}}}}}"#));
        let mut t = SftTrainer::new(&run, data(&run)).unwrap();
        let losses: Vec<u64> = (0..3).map(|_| t.sft_step().unwrap().loss.to_bits()).collect();
        results.push((losses, bits(&t.model)));
    }
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0], results[2]);
}

#[test]
fn parallel_and_ordered_reduction_agree_closely() {
    let run = tiny("{}");
    let t = SftTrainer::new(&run, data(&run)).unwrap();
    let batch = t.batch(0).unwrap();
    let a = batch_grads(&t.model, &batch, true).unwrap();
    let b = batch_grads(&t.model, &batch, false).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for (name, g) in &a.grads {
        assert!(g.max_abs_diff(&b.grads[name]) < 1e-12, "{name}");
    }
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let run = tiny("{}");
    let mut straight = SftTrainer::new(&run, data(&run)).unwrap();
    let mut losses = Vec::new();
    for _ in 0..6 {
        losses.push(straight.sft_step().unwrap().loss.to_bits());
    }
    let mut first = SftTrainer::new(&run, data(&run)).unwrap();
    let mut resumed_losses = Vec::new();
    for _ in 0..3 {
        resumed_losses.push(first.sft_step().unwrap().loss.to_bits());
    }
    let bytes = first.to_checkpoint(&run.to_json()).encode();
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    let mut second = SftTrainer::resume(&run, data(&run), &ckpt).unwrap();
    assert_eq!(second.step, 3);
    for _ in 0..3 {
        resumed_losses.push(second.sft_step().unwrap().loss.to_bits());
    }
    assert_eq!(losses, resumed_losses);
    assert_eq!(bits(&straight.model), bits(&second.model));
    assert_eq!(
        straight.to_checkpoint(&run.to_json()).encode(),
        second.to_checkpoint(&run.to_json()).encode()
    );
}

#[test]
fn run_sft_resume_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = tiny(r#"{"sft": {"epochs": 2}}"#);
    let s = stylevar::sft::run_sft(&full, data(&full), &dir.path().join("a"), None).unwrap();
    assert!(s.steps > 5);
    let half = tiny(r#"{"sft": {"epochs": 2, "max_steps": 4}}"#);
    stylevar::sft::run_sft(&half, data(&half), &dir.path().join("b"), None).unwrap();
    let resumed = stylevar::sft::run_sft(&full, data(&full), &dir.path().join("b"), Some(&dir.path().join("b/final.ckpt"))).unwrap();
    assert_eq!(resumed.steps, s.steps);
    let a = Checkpoint::load(&dir.path().join("a/final.ckpt")).unwrap();
    let b = Checkpoint::load(&dir.path().join("b/final.ckpt")).unwrap();
    assert_eq!(a.tensor("model/head.out.weight").unwrap(), b.tensor("model/head.out.weight").unwrap());
    let csv = std::fs::read_to_string(dir.path().join("b/sft_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, s.steps + 1);
}

#[test]
fn batch_hashes_follow_shuffle_and_augmentation() {
    let fixed = tiny(r#"{"sft": {"shuffle": false, "augment": {"enabled": false}}}"#);
    let t = SftTrainer::new(&fixed, data(&fixed)).unwrap();
    let spe = t.steps_per_epoch();
    for s in 0..spe {
        let a = SftTrainer::batch_hash(&t.batch(s).unwrap());
        let b = SftTrainer::batch_hash(&t.batch(s + spe).unwrap());
        assert_eq!(a, b, "step {s}");
    }
    let shuffled = tiny(r#"{"sft": {"augment": {"enabled": false}}}"#);
    let t = SftTrainer::new(&shuffled, data(&shuffled)).unwrap();
    let epoch = |e: u64| (0..spe).map(|s| SftTrainer::batch_hash(&t.batch(e * spe + s).unwrap())).collect::<Vec<_>>();
    assert_ne!(epoch(0), epoch(1));
    let again = SftTrainer::new(&shuffled, data(&shuffled)).unwrap();
    assert_eq!(SftTrainer::batch_hash(&again.batch(3).unwrap()), SftTrainer::batch_hash(&t.batch(3).unwrap()));
    let augmented = tiny(r#"{"sft": {"shuffle": false}}"#);
    let t = SftTrainer::new(&augmented, data(&augmented)).unwrap();
    assert_ne!(SftTrainer::batch_hash(&t.batch(0).unwrap()), SftTrainer::batch_hash(&t.batch(spe).unwrap()));
}

#[test]
fn seeds_change_data_order() {
    let a = tiny(r#"{"seed": 1}"#);
    let b = tiny(r#"{"seed": 2}"#);
    let ta = SftTrainer::new(&a, data(&a)).unwrap();
    let tb = SftTrainer::new(&b, data(&b)).unwrap();
    assert_ne!(SftTrainer::batch_hash(&ta.batch(0).unwrap()), SftTrainer::batch_hash(&tb.batch(0).unwrap()));
}

#[test]
fn trained_checkpoint_roundtrips() {
    let run = tiny("{}");
    let mut t = SftTrainer::new(&run, data(&run)).unwrap();
    for _ in 0..4 {
        t.sft_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = t.to_checkpoint(&run.to_json());
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.encode(), ckpt.encode());
    assert_eq!(std::fs::read(&path).unwrap(), ckpt.encode());
    let (cfg, tok, model) = load_trained(&loaded, false).unwrap();
    assert_eq!(cfg, run);
    assert_eq!(tok, t.tokenizer);
    assert_eq!(bits(&model), bits(&t.model));
    let ex = Example::from_triplet(&tok, &t.train[0]).unwrap();
    let k = run.schedule.num_scales();
    let a = model.logits(PolicyMode::Current, &ex.cond, &ex.inputs, k).unwrap();
    let b = t.model.logits(PolicyMode::Current, &ex.cond, &ex.inputs, k).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupted_checkpoint_names_the_entry() {
    let run = tiny("{}");
    let (tok, model) = parts(&run);
    let mut c = Checkpoint::new(run.to_json());
    c.put_model(&model);
    c.put_tokenizer(&tok);
    let mut bytes = c.encode();
    let n = bytes.len();
    bytes[n - 12] ^= 0x40;
    let err = Checkpoint::decode(&bytes).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    assert!(err.contains("tokenizer/"), "{err}");
}

fn grpo_trainer(run: &RunConfig) -> GrpoTrainer {
    let (tok, mut model) = parts(run);
    model.attach_adapters().unwrap();
    GrpoTrainer::with_parts(run, tok, model, data(run)).unwrap()
}

#[test]
fn first_grpo_step_has_zero_kl_and_pg() {
    for g in [2, 4, 7] {
        let run = tiny(&format!(r#"{{"grpo": {{"group_size": {g}}}}}"#));
        let mut t = grpo_trainer(&run);
        let m = t.grpo_step().unwrap();
        assert_eq!(m.kl_raw, 0.0);
        assert!(m.pg_loss.abs() <= 1e-9, "{}", m.pg_loss);
        assert_eq!(m.clip_fraction, 0.0);
        let second = t.grpo_step().unwrap();
        assert!(second.kl_raw >= 0.0);
    }
}

#[test]
fn grpo_updates_only_adapters() {
    let run = tiny("{}");
    let mut t = grpo_trainer(&run);
    let before = bits(&t.model);
    for _ in 0..3 {
        t.grpo_step().unwrap();
    }
    let after = bits(&t.model);
    let mut adapters_moved = false;
    for ((n, a), (_, b)) in before.iter().zip(&after) {
        if is_adapter(n) {
            adapters_moved |= a != b;
        } else {
            assert_eq!(a, b, "{n} changed");
        }
    }
    assert!(adapters_moved);
}

#[test]
fn grpo_is_thread_count_invariant() {
    let run = tiny("{}");
    let go = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut t = grpo_trainer(&run);
            let m: Vec<u64> = (0..3).map(|_| t.grpo_step().unwrap().loss.to_bits()).collect();
            (m, bits(&t.model))
        })
    };
    assert_eq!(go(1), go(4));
}

#[test]
fn grpo_resume_matches_straight_run() {
    let run = tiny("{}");
    let mut straight = grpo_trainer(&run);
    for _ in 0..4 {
        straight.grpo_step().unwrap();
    }
    let mut first = grpo_trainer(&run);
    for _ in 0..2 {
        first.grpo_step().unwrap();
    }
    let ckpt = Checkpoint::decode(&first.to_checkpoint(&run.to_json()).encode()).unwrap();
    let mut second = GrpoTrainer::resume(&run, &ckpt, data(&run)).unwrap();
    for _ in 0..2 {
        second.grpo_step().unwrap();
    }
    assert_eq!(bits(&straight.model), bits(&second.model));
    assert_eq!(straight.merge, second.merge);
}

fn merge_config() -> GrpoConfig {
    GrpoConfig {
        ema_decay: 0.0,
        tau_gain: 0.05,
        cooldown: 3,
        patience: 2,
        emergency_kl: 1.0,
        emergency_cooldown: 2,
        ..GrpoConfig::default()
    }
}

fn trace(rewards: &[f64], kls: &[f64]) -> (Vec<Option<MergeKind>>, MergeState) {
    let cfg = merge_config();
    let mut s = MergeState::default();
    let d = rewards.iter().zip(kls).map(|(&r, &k)| s.maybe_merge_reference(r, k, &cfg)).collect();
    (d, s)
}

use MergeKind::{Emergency, Normal};

#[test]
fn merge_after_patience() {
    let (d, s) = trace(&[0.0, 1.0, 1.0, 1.0, 1.0], &[0.0; 5]);
    assert_eq!(d, vec![None, None, None, Some(Normal), None]);
    assert_eq!(s.merges, 1);
    assert_eq!(s.baseline, Some(1.0));
    assert_eq!(s.steps_since_merge, 1);
}

#[test]
fn interrupted_gain_resets_patience() {
    let (d, s) = trace(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[0.0; 8]);
    assert!(d.iter().all(Option::is_none), "{d:?}");
    assert_eq!(s.merges, 0);
    let (d, _) = trace(&[0.0, 0.04, 0.04, 0.04, 0.04, 0.04], &[0.0; 6]);
    assert!(d.iter().all(Option::is_none));
}

#[test]
fn cooldown_suppresses_early_merges() {
    let r = [0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0];
    let (d, s) = trace(&r, &[0.0; 8]);
    assert_eq!(d, vec![None, None, None, Some(Normal), None, None, None, Some(Normal)]);
    assert_eq!(s.merges, 2);
    assert_eq!(s.baseline, Some(2.0));
}

#[test]
fn emergency_merge_on_kl() {
    let (d, s) = trace(&[0.0; 5], &[5.0; 5]);
    assert_eq!(d, vec![None, Some(Emergency), None, Some(Emergency), None]);
    assert_eq!(s.merges, 2);
    let (d, _) = trace(&[0.0, 1.0, 1.0, 1.0], &[0.0, 0.0, 0.0, 1.5]);
    assert_eq!(d[3], Some(Emergency));
}

#[test]
fn ema_follows_decay() {
    let cfg = GrpoConfig { ema_decay: 0.9, ..GrpoConfig::default() };
    let mut s = MergeState::default();
    s.maybe_merge_reference(1.0, 0.0, &cfg);
    s.maybe_merge_reference(2.0, 0.0, &cfg);
    assert!((s.ema.unwrap() - 1.1).abs() < 1e-15);
    assert_eq!(s.baseline, Some(1.0));
}

#[test]
fn merge_moves_current_policy_into_reference() {
    let run = tiny("{}");
    let (tok, mut model) = parts(&run);
    model.attach_adapters().unwrap();
    let names: Vec<String> = model.params().names().filter(|n| is_adapter(n)).map(String::from).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    for n in names {
        let shape = model.params().get(&n).unwrap().shape().to_vec();
        *model.params_mut().get_mut(&n).unwrap() = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let t = &data(&run)[0];
    let ex = Example::from_triplet(&tok, t).unwrap();
    let cond = condition(&tok, &t.content, &t.style).unwrap();
    let k = run.schedule.num_scales();
    let current = model.logits(PolicyMode::Current, &cond, &ex.inputs, k).unwrap();
    let reference = model.logits(PolicyMode::Reference, &cond, &ex.inputs, k).unwrap();
    assert!(current.max_abs_diff(&reference) > 1e-3);
    model.lora_merge().unwrap();
    let merged_ref = model.logits(PolicyMode::Reference, &cond, &ex.inputs, k).unwrap();
    let merged_cur = model.logits(PolicyMode::Current, &cond, &ex.inputs, k).unwrap();
    assert!(merged_ref.max_abs_diff(&current) <= 1e-9);
    assert!(merged_cur.max_abs_diff(&current) <= 1e-9);
}
