//! Command-line surface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, CKPT_DIR_ENV, DATA_DIR_ENV};
use crate::data::{gen_triplet, gen_triplets, read_dataset, write_dataset, Split, Triplet};
use crate::error::{Error, Result};
use crate::gradsuite::{grpo_objective_checks, primitive_checks, sft_loss_checks};
use crate::grpo::{panw_scale_weights, run_grpo};
use crate::image::Image;
use crate::metrics::ProxyFeatureNet;
use crate::model::Model;
use crate::pipeline::{build_model, build_tokenizer, evaluate_adain, evaluate_model, load_trained, stylize_pair};
use crate::seed::derive_seed;
use crate::sft::run_sft;
use crate::tokenizer::{ScaleSchedule, Tokenizer};

#[derive(Debug, Parser)]
#[command(name = "stylevar", version, about = "Scale-wise autoregressive style transfer: data, SFT, GRPO, sampling, evaluation", after_help = RunConfig::help())]
pub struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed, mixed into the data, sft, grpo and sampler seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fixed-order gradient reduction [default: the config's `deterministic`].
    #[arg(long, global = true, value_name = "BOOL")]
    pub deterministic: Option<bool>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Stylevar,
    Adain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic triplet dataset.
    GenData {
        /// Output directory [default: $STYLEVAR_DATA_DIR, data.dir, or ./data].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of triplets [default: data.n].
        #[arg(long)]
        n: Option<usize>,
    },
    /// Supervised fine-tuning.
    Sft {
        /// Dataset directory; without one the dataset is generated from `data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: $STYLEVAR_CKPT_DIR/sft or ./runs/sft].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by this command.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reinforcement fine-tuning of adapters from an SFT checkpoint.
    Grpo {
        /// SFT checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: $STYLEVAR_CKPT_DIR/grpo or ./runs/grpo].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stylize one content/style pair.
    Sample {
        /// Trained checkpoint; without one an untrained model is built from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Content image (PPM); defaults to triplet `index` of the dataset.
        #[arg(long, requires = "style")]
        content: Option<PathBuf>,
        /// Style image (PPM).
        #[arg(long, requires = "content")]
        style: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output image, .png or .ppm.
        #[arg(long, default_value = "sample.png")]
        out: PathBuf,
        /// Also write the sampled tokens and log-probabilities as JSON.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Score a checkpoint or the AdaIN baseline on a split.
    Eval {
        #[arg(long, value_enum, default_value_t = Method::Stylevar)]
        method: Method,
        /// Required for --method stylevar.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Output directory for <method>_metrics.csv and .json [default: $STYLEVAR_CKPT_DIR/eval or ./runs/eval].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token scale weights for a schedule and exponent.
    PanwTable {
        /// Exponent [default: grpo.panw_alpha].
        #[arg(long)]
        alpha: Option<f64>,
        /// Comma-separated scale sides [default: the 10-scale schedule].
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
    },
    /// Finite-difference checks of every op and both objectives.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        check_seed: u64,
        /// Parameter entries sampled per tensor in the objective checks.
        #[arg(long, default_value_t = 3)]
        per_param: usize,
        /// Print every check rather than failures and a summary.
        #[arg(long)]
        verbose: bool,
    },
}

fn env_dir(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn out_dir(flag: Option<PathBuf>, sub: &str) -> PathBuf {
    flag.unwrap_or_else(|| env_dir(CKPT_DIR_ENV).unwrap_or_else(|| PathBuf::from("runs")).join(sub))
}

fn data_dir(flag: Option<PathBuf>, run: &RunConfig) -> Option<PathBuf> {
    flag.or_else(|| env_dir(DATA_DIR_ENV)).or_else(|| run.data.dir.clone())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    if let Some(d) = cli.deterministic {
        run.deterministic = d;
    }
    Ok(run)
}

/// Triplets from a dataset directory, or generated from the `data` section.
pub fn dataset(run: &RunConfig, dir: Option<&Path>) -> Result<Vec<Triplet>> {
    match dir {
        Some(d) => read_dataset(d),
        None => gen_triplets(run.data.n, run.stage_seed(run.data.seed), run.tokenizer.image_size),
    }
}

fn trained_or_fresh(run: &RunConfig, ckpt: Option<&Path>) -> Result<(RunConfig, Tokenizer, Model)> {
    match ckpt {
        Some(p) => {
            let (mut stored, tok, model) = load_trained(&Checkpoint::load(p)?, false)?;
            stored.sampler = run.sampler.clone();
            stored.reward = run.reward.clone();
            stored.seed = run.seed;
            Ok((stored, tok, model))
        }
        None => {
            let tok = build_tokenizer(&run.tokenizer, &run.schedule)?;
            let model = build_model(&run.model, &tok)?;
            Ok((run.clone(), tok, model))
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let run = load_config(&cli)?;
    match cli.command {
        Command::GenData { out, n } => {
            let dir = out
                .or_else(|| env_dir(DATA_DIR_ENV))
                .or_else(|| run.data.dir.clone())
                .unwrap_or_else(|| PathBuf::from("data"));
            let n = n.unwrap_or(run.data.n);
            let seed = run.stage_seed(run.data.seed);
            let triplets = gen_triplets(n, seed, run.tokenizer.image_size)?;
            write_dataset(&dir, &triplets, seed, run.tokenizer.image_size)?;
            let val = triplets.iter().filter(|t| t.split == Split::Val).count();
            println!("gen-data n={n} train={} val={val} dir={}", n - val, dir.display());
        }
        Command::Sft { data, out, resume } => {
            let triplets = dataset(&run, data_dir(data, &run).as_deref())?;
            let out = out_dir(out, "sft");
            let s = run_sft(&run, triplets, &out, resume.as_deref())?;
            let (vl, va) = s.final_val.unwrap_or((f64::NAN, f64::NAN));
            println!(
                "sft steps={} loss={:.6} acc={:.6} val_loss={vl:.6} val_acc={va:.6} best={} final={}",
                s.steps,
                s.losses.last().copied().unwrap_or(f64::NAN),
                s.accuracies.last().copied().unwrap_or(f64::NAN),
                s.best_checkpoint.display(),
                s.final_checkpoint.display()
            );
        }
        Command::Grpo { init, data, out } => {
            let triplets = dataset(&run, data_dir(data, &run).as_deref())?;
            let out = out_dir(out, "grpo");
            let s = run_grpo(&run, &init, triplets, &out)?;
            let last = s.history.last();
            println!(
                "grpo steps={} reward_mean={:.6} ema={:.6} merges={} final={}",
                s.steps,
                last.map_or(f64::NAN, |m| m.reward_mean),
                last.map_or(f64::NAN, |m| m.ema),
                last.map_or(0, |m| m.merges),
                s.final_checkpoint.display()
            );
        }
        Command::Sample { checkpoint, content, style, data, index, out, trajectory } => {
            let (run, tok, model) = trained_or_fresh(&run, checkpoint.as_deref())?;
            let (c, s) = match (content, style) {
                (Some(c), Some(s)) => (Image::read_ppm(&c)?, Image::read_ppm(&s)?),
                _ => {
                    let t = match data_dir(data, &run) {
                        Some(d) => read_dataset(&d)?
                            .into_iter()
                            .nth(index)
                            .ok_or_else(|| Error::Config(format!("dataset {} has no triplet {index}", d.display())))?,
                        None => gen_triplet(
                            derive_seed(&[run.stage_seed(run.data.seed), index as u64]),
                            run.tokenizer.image_size,
                            Split::Train,
                        ),
                    };
                    (t.content, t.style)
                }
            };
            let seed = run.stage_seed(run.sampler.seed);
            let traj = stylize_pair(&model, &tok, &c, &s, &run.sampler, seed)?;
            traj.image.save(&out)?;
            if let Some(p) = trajectory {
                std::fs::write(&p, traj.to_json() + "\n").map_err(|e| Error::io(&p, e))?;
            }
            println!("sample seed={seed} tokens={} out={}", traj.tokens.token_count(), out.display());
        }
        Command::Eval { method, checkpoint, data, split, out } => {
            let triplets = dataset(&run, data_dir(data, &run).as_deref())?;
            let items: Vec<(usize, &Triplet)> = triplets
                .iter()
                .enumerate()
                .filter(|(_, t)| match split {
                    SplitArg::All => true,
                    SplitArg::Train => t.split == Split::Train,
                    SplitArg::Val => t.split == Split::Val,
                })
                .collect();
            let net = ProxyFeatureNet::new(run.reward.proxy_seed);
            let report = match method {
                Method::Adain => evaluate_adain(&net, &items)?,
                Method::Stylevar => {
                    let ckpt = checkpoint.ok_or_else(|| Error::Config("--method stylevar needs --checkpoint".into()))?;
                    let (run, tok, model) = trained_or_fresh(&run, Some(&ckpt))?;
                    evaluate_model(&net, "stylevar", &model, &tok, &run.sampler, run.stage_seed(run.sampler.seed), &items)?
                }
            };
            let out = out_dir(out, "eval");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let stem = report.method.clone();
            report.write(&out.join(format!("{stem}_metrics.csv")), &out.join(format!("{stem}_metrics.json")))?;
            let a = &report.aggregate;
            println!(
                "eval method={stem} n={} proxy_perceptual={:.6} ssim={:.6} style_loss={:.6e} content_loss={:.6e}",
                a.count, a.proxy_perceptual, a.ssim, a.style_loss, a.content_loss
            );
        }
        Command::PanwTable { alpha, schedule } => {
            let alpha = alpha.unwrap_or(run.grpo.panw_alpha);
            let schedule = match schedule {
                Some(s) => ScaleSchedule::new(s)?,
                None => ScaleSchedule::full(),
            };
            print!("{}", panw_table(&schedule, alpha));
        }
        Command::Gradcheck { check_seed, per_param, verbose } => {
            let mut results = primitive_checks(check_seed)?;
            results.extend(sft_loss_checks(check_seed, per_param)?);
            results.extend(grpo_objective_checks(check_seed, per_param)?);
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
            for r in results.iter().filter(|r| verbose || !r.passed) {
                println!(
                    "{} {} shape={:?} checked={} max_rel_error={:.3e}",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.shape,
                    r.checked,
                    r.max_rel_error
                );
            }
            let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            println!("gradcheck checks={} failed={} worst={worst:.3e}", results.len(), failed.len());
            if !failed.is_empty() {
                return Err(Error::Training(format!("{} gradient checks failed", failed.len())));
            }
        }
    }
    Ok(())
}

/// One row per scale: side, tokens, per-token weight in units of 1e-2,
/// and the weight share of the whole scale.
pub fn panw_table(schedule: &ScaleSchedule, alpha: f64) -> String {
    let w = panw_scale_weights(schedule, alpha);
    let mut s = format!("scale\tside\ttokens\tweight_x1e-2\tscale_total\n");
    let mut total = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let n = schedule.tokens_at(k) as f64;
        total += wk * n;
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.6}\n",
            k + 1,
            schedule.side(k),
            schedule.tokens_at(k),
            wk * 100.0,
            wk * n
        ));
    }
    s.push_str(&format!("sum\t\t{}\t\t{total:.15}\n", schedule.token_count()));
    s
}

fn escape(msg: &str) -> String {
    msg.replace('\\', "\\\\").replace('\n', "\\n").replace('"', "\\\"")
}

/// Parses `args`, runs the command and returns the exit code: 0 on success,
/// 2 on usage errors, 1 on failures (reported as one `error` line).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error kind={} msg=\"{}\"", e.kind(), escape(&e.to_string()));
            1
        }
    }
}
