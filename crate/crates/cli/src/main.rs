mod config;
mod failure;
mod report;
mod run;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand};
use dpmae::accountant::{calibrate_sigma, default_alpha_grid, default_delta, dp_guarantee_with_order, MechanismParams, PrivacyBudget};
use dpmae::data::{generate_synthetic, labeled_images, load_dataset, ImageSet, Role};
use dpmae::dp::{BatchPlan, OptimState, TrainerState};
use dpmae::evaluate::{eval_log_line, few_shot_finetune, linear_probe, FewShotSpec, ProbeResult, EVAL_LOG_HEADER};
use dpmae::mae::{init_params, MaeConfig, MaeParams};
use dpmae::numfmt::precise;
use dpmae::seed;
use rand::seq::SliceRandom;

use config::RunConfig;
use failure::{config_error, runtime_error, Failure, Kind};
use run::{Ending, PrivacyPlan, RunDir, RunRequest};

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "dpmae", version, about = "Differentially private masked-autoencoder training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural image dataset.
    GenSynth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        resolution: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic-pretrain")]
        role: Role,
        /// Render a labeled dataset with this many classes.
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..=10))]
        classes: Option<u64>,
    },
    /// Non-private pre-training on synthetic images.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        control: RunControl,
    },
    /// Noise multiplier meeting an (epsilon, delta) budget.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
    },
    /// Epsilon of a subsampled Gaussian run.
    Account {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
    },
    /// Differentially private training.
    TrainDp {
        #[arg(long)]
        config: PathBuf,
        /// Warm-start checkpoint; random initialization when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        control: RunControl,
    },
    /// Linear probe of a frozen encoder.
    Probe {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// K-shot fine-tuning of the whole encoder.
    Finetune {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 20)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Consolidated metrics of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunControl {
    /// Continue the run in `run.out` from its latest checkpoint.
    #[arg(long)]
    resume: bool,
    /// Checkpoint and stop once this many steps are done.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled training images; also the eval source when `--eval` is absent.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation log to append to.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    run_id: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let _ = ctrlc::set_handler(|| INTERRUPTED.store(true, Ordering::SeqCst));
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let label = match f.kind {
                Kind::Config => "config error",
                Kind::Runtime => "error",
                Kind::Infeasible => "infeasible privacy budget",
            };
            eprintln!("dpmae: {label}: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenSynth {
            count,
            resolution,
            seed,
            out,
            role,
            classes,
        } => gen_synth(count as usize, resolution as usize, seed, &out, role, classes.map(|c| c as usize)),
        Command::Pretrain { config, control } => pretrain(&config, &control),
        Command::Calibrate {
            epsilon,
            delta,
            q,
            steps,
        } => {
            let budget = PrivacyBudget::new(epsilon, delta)?;
            println!("{}", precise(calibrate_sigma(&budget, q, steps)?));
            Ok(())
        }
        Command::Account { sigma, q, steps, delta } => {
            let m = MechanismParams::new(q, sigma, steps)?;
            let (b, alpha) = dp_guarantee_with_order(&m, delta, &default_alpha_grid())?;
            println!("{}", precise(b.epsilon));
            println!("alpha {}", precise(alpha));
            Ok(())
        }
        Command::TrainDp { config, init, control } => train_dp(&config, init, &control),
        Command::Probe { eval } => probe(&eval),
        Command::Finetune {
            eval,
            shots,
            epochs,
            batch_size,
            lr,
        } => {
            let spec = FewShotSpec {
                shots,
                epochs,
                batch_size,
                lr,
                ..FewShotSpec::default()
            };
            finetune(&eval, &spec)
        }
        Command::Report { run } => report::report(&run),
    }
}

fn gen_synth(count: usize, res: usize, seed: u64, out: &Path, role: Role, classes: Option<usize>) -> Result<(), Failure> {
    if out.join("manifest").exists() {
        return Err(config_error(format!("--out {} already holds a dataset", out.display())));
    }
    let manifest = match classes {
        Some(k) => labeled_images(count, res, seed, k)?.write(out, role)?,
        None => generate_synthetic(out, count, res, seed, role)?,
    };
    println!("n = {}", manifest.n);
    println!("resolution = {}", manifest.resolution);
    println!("digest = {}", manifest.digest);
    Ok(())
}

fn load_matching(path: &Path, model: &MaeConfig) -> Result<ImageSet, Failure> {
    let (m, set) = load_dataset(path).map_err(|e| Failure::new(Kind::Runtime, e).context(path.display()))?;
    if m.resolution != model.image_size || m.channels != model.channels {
        return Err(config_error(format!(
            "{} holds {}x{}x{} images but the model expects {}x{}x{}",
            path.display(),
            m.channels,
            m.resolution,
            m.resolution,
            model.channels,
            model.image_size,
            model.image_size
        )));
    }
    Ok(set)
}

fn finish(ending: Ending, steps: u64) -> Result<(), Failure> {
    match ending {
        Ending::Interrupted => Err(runtime_error(format!("interrupted after {steps} steps; state checkpointed"))),
        Ending::Finished | Ending::Stopped => Ok(()),
    }
}

fn pretrain(path: &Path, control: &RunControl) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(path)?;
    let model = cfg.resolve_model()?;
    cfg.check_common()?;
    let batch = cfg
        .sampling
        .batch_size
        .ok_or_else(|| config_error("pretrain needs sampling.batch_size"))?;
    if cfg.sampling.q.is_some() || cfg.sampling.expected_batch.is_some() {
        return Err(config_error("pretrain draws shuffled batches; drop sampling.q / sampling.expected_batch"));
    }
    if cfg.privacy.sigma.is_some() || cfg.privacy.epsilon.is_some() || cfg.privacy.delta.is_some() {
        return Err(config_error("pretrain is non-private; drop the privacy budget keys"));
    }
    if cfg.run.init.is_some() {
        return Err(config_error("pretrain always starts from random initialization; drop run.init"));
    }
    let data = load_matching(&cfg.data.train, &model)?;
    if batch == 0 || batch > data.len() {
        return Err(config_error(format!("sampling.batch_size must lie in 1..={}", data.len())));
    }
    let optim = cfg.optim_config(cfg.privacy.clip_norm, 0.0, batch as f64);
    optim.validate()?;
    let dir = RunDir::acquire(&cfg.run.out)?;
    let params = init_params(&model, cfg.run.seed)?;
    let state = TrainerState {
        optim: OptimState::new(params.num_params()),
        params,
    };
    let result = run::train(
        RunRequest {
            dir: &dir,
            effective_config: cfg.to_toml(),
            optim,
            plan: BatchPlan::Shuffled { batch_size: batch },
            privacy: None,
            seed: cfg.run.seed,
            checkpoint_every: cfg.run.checkpoint_every,
            resume: control.resume,
            stop_after: control.stop_after,
        },
        state,
        &data,
        &INTERRUPTED,
    )?;
    let per_epoch = (data.len() / batch) as u64;
    let losses = run::epoch_losses(&dir.path(run::METRICS_FILE), per_epoch)?;
    let mut text = String::from("epoch,loss_mean\n");
    for (e, l) in losses.iter().enumerate() {
        text += &format!("{},{}\n", e + 1, precise(*l));
    }
    std::fs::write(dir.path(run::EPOCHS_FILE), text).map_err(|e| runtime_error(e.to_string()))?;
    println!("steps = {}", result.steps_done);
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("epoch_1_loss = {}", precise(*first));
        println!("final_epoch_loss = {}", precise(*last));
    }
    finish(result.ending, result.steps_done)
}

fn train_dp(path: &Path, init_flag: Option<PathBuf>, control: &RunControl) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(p) = init_flag {
        cfg.run.init = Some(std::path::absolute(&p).unwrap_or(p));
    }
    let model = cfg.resolve_model()?;
    cfg.check_common()?;
    if cfg.sampling.batch_size.is_some() {
        return Err(config_error("train-dp uses Poisson sampling; set sampling.q or sampling.expected_batch"));
    }
    if let Some(p) = &cfg.run.init {
        if !p.is_file() {
            return Err(config_error(format!("init checkpoint {} does not exist", p.display())));
        }
    }
    let data = load_matching(&cfg.data.train, &model)?;
    let n = data.len();
    let q = match (cfg.sampling.q, cfg.sampling.expected_batch) {
        (Some(q), None) => q,
        (None, Some(b)) => b / n as f64,
        _ => return Err(config_error("set exactly one of sampling.q and sampling.expected_batch")),
    };
    if !(q > 0.0 && q <= 1.0) {
        return Err(config_error(format!("sampling ratio q = {q} must lie in (0, 1]")));
    }
    let delta = cfg.privacy.delta.unwrap_or_else(|| default_delta(n as u64));
    let sigma = match (cfg.privacy.sigma, cfg.privacy.epsilon) {
        (Some(s), _) => s,
        (None, Some(eps)) => {
            let budget = PrivacyBudget::new(eps, delta)?;
            let s = calibrate_sigma(&budget, q, cfg.optim.steps)?;
            eprintln!("calibrated sigma = {} for epsilon = {}", precise(s), precise(eps));
            s
        }
        (None, None) => return Err(config_error("set privacy.sigma or privacy.epsilon")),
    };
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(config_error(format!("privacy.sigma = {sigma} must be finite and >= 0")));
    }
    cfg.sampling.q = Some(q);
    cfg.sampling.expected_batch = None;
    cfg.privacy.sigma = Some(sigma);
    cfg.privacy.delta = Some(delta);
    let optim = cfg.optim_config(cfg.privacy.clip_norm, sigma, n as f64 * q);
    optim.validate()?;

    let params = match &cfg.run.init {
        Some(p) => {
            let params = MaeParams::load(p).map_err(|e| Failure::new(Kind::Runtime, e).context(p.display()))?;
            if params.config() != &model {
                return Err(config_error(format!(
                    "init checkpoint {} was trained with a different model config",
                    p.display()
                )));
            }
            params
        }
        None => init_params(&model, cfg.run.seed)?,
    };
    let state = TrainerState {
        optim: OptimState::new(params.num_params()),
        params,
    };
    let dir = RunDir::acquire(&cfg.run.out)?;
    let result = run::train(
        RunRequest {
            dir: &dir,
            effective_config: cfg.to_toml(),
            optim,
            plan: BatchPlan::Poisson { q },
            privacy: Some(PrivacyPlan { sigma, q, delta }),
            seed: cfg.run.seed,
            checkpoint_every: cfg.run.checkpoint_every,
            resume: control.resume,
            stop_after: control.stop_after,
        },
        state,
        &data,
        &INTERRUPTED,
    )?;
    if let Some(s) = &result.statement {
        print!("{}", s.to_toml());
    }
    if let Some(l) = result.last_loss {
        println!("last_loss = {}", precise(l));
    }
    finish(result.ending, result.steps_done)
}

/// Train and eval sets: `--eval` when given, otherwise a seeded 80/20 split
/// of `--data`.
fn eval_sets(args: &EvalArgs, model: &MaeConfig) -> Result<(ImageSet, ImageSet), Failure> {
    let train = load_matching(&args.data, model)?;
    if train.labels().is_none() {
        return Err(config_error(format!("{} has no labels", args.data.display())));
    }
    match &args.eval {
        Some(p) => Ok((train, load_matching(p, model)?)),
        None => {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut seed::stream(args.seed, "split", &[]));
            let cut = idx.len() / 5;
            if cut == 0 {
                return Err(config_error("need at least 5 images to split off an eval set"));
            }
            let (mut ev, mut tr) = (idx[..cut].to_vec(), idx[cut..].to_vec());
            ev.sort_unstable();
            tr.sort_unstable();
            Ok((train.subset(&tr)?, train.subset(&ev)?))
        }
    }
}

fn load_params(path: &Path) -> Result<MaeParams, Failure> {
    if !path.is_file() {
        return Err(config_error(format!("--checkpoint {} does not exist", path.display())));
    }
    MaeParams::load(path).map_err(|e| Failure::new(Kind::Runtime, e).context(path.display()))
}

fn log_result(args: &EvalArgs, task: &str, shots: Option<usize>, r: &ProbeResult) -> Result<(), Failure> {
    let line = eval_log_line(&args.run_id, task, shots, r.accuracy, r.seed);
    println!("{line}");
    if let Some(p) = &args.log {
        let fresh = !p.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| runtime_error(format!("cannot open {}: {e}", p.display())))?;
        if fresh {
            writeln!(f, "{EVAL_LOG_HEADER}").map_err(|e| runtime_error(e.to_string()))?;
        }
        writeln!(f, "{line}").map_err(|e| runtime_error(e.to_string()))?;
    }
    Ok(())
}

fn probe(args: &EvalArgs) -> Result<(), Failure> {
    let params = load_params(&args.checkpoint)?;
    let (train, eval) = eval_sets(args, params.config())?;
    let before = params.digest();
    let r = linear_probe(&params, &train, &eval, args.seed)?;
    let after = params.digest();
    println!("encoder_digest_before = {before}");
    println!("encoder_digest_after = {after}");
    if before != after {
        return Err(runtime_error("probing changed the encoder"));
    }
    println!(
        "accuracy = {} classes = {} train = {} eval = {} dim = {}",
        precise(r.accuracy),
        r.classes,
        r.train_count,
        r.eval_count,
        r.feature_dim
    );
    log_result(args, "probe", None, &r)
}

fn finetune(args: &EvalArgs, spec: &FewShotSpec) -> Result<(), Failure> {
    let params = load_params(&args.checkpoint)?;
    let (train, eval) = eval_sets(args, params.config())?;
    let (r, _) = few_shot_finetune(&params, spec, &train, &eval, args.seed)?;
    println!(
        "accuracy = {} classes = {} train = {} eval = {}",
        precise(r.accuracy),
        r.classes,
        r.train_count,
        r.eval_count
    );
    log_result(args, "finetune", Some(spec.shots), &r)
}
