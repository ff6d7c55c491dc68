//! Command-line driver: dataset generation, training, attacks and gradient checks.
//!
//! Every subcommand that writes artifacts also writes `run.json` into its
//! output directory, holding the tool version and the fully resolved settings.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use capattack::baselines::{untargeted_attack, BaselineConfig, BaselineMethod};
use capattack::gradcheck::{gradcheck, GradcheckConfig};
use capattack::harness::{
    make_experiment_targets, run_attack, run_experiment, run_untargeted, save_adversarial,
    AttackConfig, AttackMethod, TargetSpec,
};
use capattack::inference::PartialCaption;
use capattack::model::{
    exact_match_rate, gen_synthetic, load_checkpoint, load_dataset, read_pgm, save_checkpoint,
    save_dataset, train_toy, write_pgm, FeedMode, Model, ModelConfig, ReparamMode, TrainConfig,
    EOS,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Word that marks a latent position in a `--target` caption.
const LATENT_MARK: &str = "_";

#[derive(Parser)]
#[command(
    name = "capattack",
    version,
    about = "Targeted partial-caption attacks on a toy captioner"
)]
struct Cli {
    /// Global seed; falls back to CAPATTACK_SEED, then 0.
    #[arg(long, global = true, env = "CAPATTACK_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic captioned shape dataset.
    GenData {
        #[arg(long, short)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a captioner on a generated dataset.
    Train(TrainArgs),
    /// Attack one image or a batch of dataset images.
    Attack(AttackArgs),
    /// Compare every attack gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with optional `model` and `train` blocks.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    feed_mode: Option<FeedArg>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    out: PathBuf,
    /// Single benign image (PGM). Mutually exclusive with `--data`.
    #[arg(long, conflicts_with = "data")]
    image: Option<PathBuf>,
    /// Target caption for `--image`; `_` marks a latent word.
    #[arg(long, requires = "image")]
    target: Option<String>,
    /// Dataset directory for a batch run.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of dataset images to attack in a batch run.
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Batch target protocol: `complete`, `latent:K` or `observed:K`.
    #[arg(long, default_value = "complete")]
    target_mode: String,
    /// Keep the end-of-sentence token as an observed position.
    #[arg(long)]
    pin_eos: bool,
    /// JSON attack config with optional `gem`, `lssvm` and `baseline` blocks.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    /// GEM iterations, LSSVM outer iterations, or baseline step budget.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    reparam: Option<ReparamArg>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Checkpoint to check; a fresh random model is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeedArg {
    Init,
    Step,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Gem,
    Lssvm,
    MaxLogits,
    LogitMargin,
    Untargeted,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReparamArg {
    Clip,
    Arctanh,
}

impl From<ReparamArg> for ReparamMode {
    fn from(r: ReparamArg) -> Self {
        match r {
            ReparamArg::Clip => ReparamMode::Clip,
            ReparamArg::Arctanh => ReparamMode::Arctanh,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    version: &'static str,
    command: &'a str,
    seed: u64,
    settings: T,
}

fn write_run<T: Serialize>(dir: &Path, command: &str, seed: u64, settings: T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let record = RunRecord {
        version: VERSION,
        command,
        seed,
        settings,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_gen_data(n: usize, out: &Path, seed: u64) -> Result<()> {
    let samples = gen_synthetic(n, seed)?;
    save_dataset(out, &samples).with_context(|| format!("writing dataset to {}", out.display()))?;
    write_run(out, "gen-data", seed, serde_json::json!({ "n": n }))?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

/// Config file values first, then flags.
fn resolve_train(args: &TrainArgs, seed: u64) -> Result<TrainFile> {
    let mut file = match &args.config {
        Some(path) => read_json::<TrainFile>(path)?,
        None => TrainFile::default(),
    };
    if let Some(e) = args.epochs {
        file.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        file.train.learning_rate = lr;
    }
    if let Some(f) = args.feed_mode {
        file.model.feed_mode = match f {
            FeedArg::Init => FeedMode::InitFeed,
            FeedArg::Step => FeedMode::StepFeed,
        };
    }
    file.train.seed = seed;
    Ok(file)
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let resolved = resolve_train(args, seed)?;
    let data =
        load_dataset(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let (model, report) = train_toy(&data, &resolved.model, &resolved.train)?;
    save_checkpoint(&args.out, &model)?;
    let exact = exact_match_rate(&model, &data)?;
    fs::write(
        args.out.join("train_report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "epoch_losses": report.epoch_losses,
            "train_exact_match": exact,
        }))?,
    )?;
    write_run(&args.out, "train", seed, &resolved)?;
    println!(
        "trained {} epochs, exact match on training data {exact:.3}",
        resolved.train.epochs
    );
    Ok(())
}

/// Config file values first, then `--lambda`, `--zeta`, `--iters`, `--reparam`.
fn resolve_attack(args: &AttackArgs) -> Result<AttackConfig> {
    let mut config = match &args.config {
        Some(path) => read_json::<AttackConfig>(path)?,
        None => AttackConfig::default(),
    };
    if let Some(lambda) = args.lambda {
        config = config.with_lambda(lambda);
    }
    if let Some(zeta) = args.zeta {
        config.lssvm.zeta = zeta;
    }
    if let Some(iters) = args.iters {
        config.gem.iterations = iters;
        config.lssvm.outer_iterations = iters;
        config.baseline.budget = iters;
    }
    if let Some(r) = args.reparam {
        let mode = ReparamMode::from(r);
        config.gem.reparam = mode;
        config.lssvm.reparam = mode;
        config.baseline.reparam = mode;
    }
    Ok(config)
}

fn parse_target_mode(text: &str, pin_eos: bool) -> Result<TargetSpec> {
    let mut spec = match text.split_once(':') {
        None if text == "complete" => TargetSpec::complete(),
        Some(("latent", k)) => TargetSpec::n_latent(k.parse().context("latent count")?),
        Some(("observed", k)) => TargetSpec::n_observed(k.parse().context("observed count")?),
        _ => bail!("target mode {text:?} is not complete, latent:K or observed:K"),
    };
    spec.pin_eos |= pin_eos;
    Ok(spec)
}

fn parse_target(model: &Model, text: &str, pin_eos: bool) -> Result<PartialCaption> {
    let mut observed = Vec::new();
    let mut len = 0;
    for (p, word) in text.split_whitespace().enumerate() {
        if word != LATENT_MARK {
            let token = model
                .vocab
                .id(word)
                .with_context(|| format!("unknown word {word:?}"))?;
            observed.push((p, token));
        }
        len = p + 1;
    }
    if pin_eos && observed.last().map(|o| o.1) != Some(EOS) {
        observed.push((len, EOS));
        len += 1;
    }
    Ok(PartialCaption::new(len, &observed)?)
}

fn method(arg: MethodArg) -> Option<AttackMethod> {
    match arg {
        MethodArg::Gem => Some(AttackMethod::Gem),
        MethodArg::Lssvm => Some(AttackMethod::Lssvm),
        MethodArg::MaxLogits => Some(AttackMethod::MaxLogits),
        MethodArg::LogitMargin => Some(AttackMethod::LogitMargin),
        MethodArg::Untargeted => None,
    }
}

fn load_image(path: &Path) -> Result<capattack::numerics::Tensor> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_pgm(file)?)
}

fn untargeted_config(config: &AttackConfig) -> BaselineConfig {
    BaselineConfig {
        method: BaselineMethod::Untargeted,
        ..config.baseline.clone()
    }
}

fn cmd_attack(args: &AttackArgs, seed: u64) -> Result<()> {
    let config = resolve_attack(args)?;
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    fs::create_dir_all(&args.out)?;
    let settings = serde_json::json!({
        "method": args.method.to_possible_value().map(|v| v.get_name().to_string()),
        "checkpoint": args.checkpoint,
        "image": args.image,
        "target": args.target,
        "data": args.data,
        "count": args.count,
        "target_mode": args.target_mode,
        "pin_eos": args.pin_eos,
        "jobs": args.jobs,
        "config": config,
    });
    write_run(&args.out, "attack", seed, settings)?;

    match (&args.image, &args.data) {
        (Some(image_path), _) => attack_single(args, &model, &config, &load_image(image_path)?),
        (None, Some(data)) => attack_batch(args, &model, &config, data, seed),
        (None, None) => bail!("attack needs --image or --data"),
    }
}

fn attack_single(
    args: &AttackArgs,
    model: &Model,
    config: &AttackConfig,
    image: &capattack::numerics::Tensor,
) -> Result<()> {
    let Some(m) = method(args.method) else {
        let outcome = untargeted_attack(model, image, &untargeted_config(config))?;
        let mut w = fs::File::create(args.out.join("adv.pgm"))?;
        write_pgm(&mut w, &image.add(&outcome.noise)?)?;
        fs::write(
            args.out.join("outcome.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "changed": outcome.changed,
                "clean": model.vocab.decode(outcome.clean.tokens()),
                "predicted": model.vocab.decode(outcome.predicted.tokens()),
                "clean_logprob": outcome.clean_logprob,
                "final_logprob": outcome.final_logprob,
                "eps_norm": outcome.eps_norm,
            }))?,
        )?;
        println!(
            "changed {} eps_norm {:.4}",
            outcome.changed, outcome.eps_norm
        );
        return Ok(());
    };
    let text = args
        .target
        .as_deref()
        .context("targeted attacks on --image need --target")?;
    let partial = parse_target(model, text, args.pin_eos)?;
    let outcome = run_attack(model, image, &partial, m, config)?;
    save_adversarial(&args.out, "adv", image, &outcome, &partial, &model.vocab)?;
    fs::write(args.out.join("trace.jsonl"), outcome.trace_jsonl()?)?;
    fs::write(
        args.out.join("outcome.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "method": m.name(),
            "success": outcome.success(),
            "predicted": model.vocab.decode(outcome.predicted.tokens()),
            "metrics": outcome.metrics,
            "wall_time_secs": outcome.wall_time.as_secs_f64(),
        }))?,
    )?;
    println!(
        "success {} predicted {:?} eps_norm {:.4}",
        outcome.success(),
        model.vocab.decode(outcome.predicted.tokens()),
        outcome.metrics.eps_norm
    );
    Ok(())
}

fn attack_batch(
    args: &AttackArgs,
    model: &Model,
    config: &AttackConfig,
    data: &Path,
    seed: u64,
) -> Result<()> {
    let samples = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let count = args.count.min(samples.len());
    let Some(m) = method(args.method) else {
        let report = run_untargeted(
            model,
            &images[..count],
            &untargeted_config(config),
            seed,
            args.jobs,
        )?;
        fs::write(
            args.out.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        let a = report.aggregates;
        println!(
            "untargeted: change rate {:.3} eps_norm {:.4} logprob drop {:.3} ({} failures)",
            a.change_rate, a.eps_norm, a.logprob_drop, a.failures
        );
        return Ok(());
    };
    let spec = parse_target_mode(&args.target_mode, args.pin_eos)?;
    let targets = make_experiment_targets(&samples, count, spec, seed, &model.vocab)?;
    let report = run_experiment(model, &images, &targets, m, config, seed, args.jobs)?;
    report.save(&args.out.join("report.json"))?;
    let a = report.aggregates;
    println!(
        "{}: sr {:.3} precision {:.3} recall {:.3} eps_norm {:.4} ({} targets, {} failures)",
        m.name(),
        a.sr,
        a.precision,
        a.recall,
        a.eps_norm,
        a.count,
        a.failures
    );
    Ok(())
}

/// Returns whether every objective passed.
fn cmd_gradcheck(args: &GradcheckArgs, seed: u64) -> Result<bool> {
    let model = match &args.checkpoint {
        Some(dir) => {
            load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?
        }
        None => Model::random(ModelConfig::default(), seed)?,
    };
    let mut config = GradcheckConfig {
        seed,
        inject_fault: args.inject_fault,
        ..GradcheckConfig::default()
    };
    if let Some(p) = args.probes {
        config.probes = p;
    }
    let report = gradcheck(&model, &config)?;
    for c in &report.checks {
        println!(
            "{} {}: worst rel err {:.3e} over {} probes",
            if c.passed { "PASS" } else { "FAIL" },
            c.objective,
            c.worst_rel_err,
            c.probes
        );
    }
    if let Some(out) = &args.out {
        write_run(out, "gradcheck", seed, &config)?;
        fs::write(
            out.join("gradcheck.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenData { n, out } => cmd_gen_data(n, &out, seed).map(|_| true),
        Command::Train(args) => cmd_train(&args, seed).map(|_| true),
        Command::Attack(args) => cmd_attack(&args, seed).map(|_| true),
        Command::Gradcheck(args) => cmd_gradcheck(&args, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
