use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use veristeer::pipeline::{self, label_for, Run};
use veristeer::{ExperimentConfig, HarnessError};
use veristeer_core::{CoreError, DiffusionPolicy, RolloutDataset, SteeringMode, VerifierKind, VerifierNet};

#[derive(Parser)]
#[command(name = "veristeer", version, about = "Steer a frozen diffusion policy with learned verifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the root `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `rollouts.eval`.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Overrides `steering.best_of_n`.
    #[arg(long, global = true)]
    best_of_n: Option<usize>,
    /// Any config key, e.g. `--set policy.train.epochs=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenDemos,
    /// Train the diffusion policy on the run's demonstrations.
    TrainPolicy {
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Roll out the policy to build the verifier dataset.
    Collect {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Train one verifier on collected rollouts.
    TrainVerifier {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        rollouts: Option<PathBuf>,
    },
    /// Evaluate the policy, optionally steered.
    Eval(EvalArgs),
    /// Steer a policy with a verifier trained on another policy's rollouts.
    CrossSteer {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long, value_enum, default_value = "bon")]
        mode: Mode,
        /// Guidance strength; defaults to the config value for the verifier kind.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value = "cross")]
        label: String,
    },
    /// Trajectory plots for saved evaluations and landscapes for saved verifiers.
    Plot,
    /// Every stage in order.
    Run,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "base")]
    mode: Mode,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Guidance at every strength in the config's sweep list.
    #[arg(long)]
    sweep: bool,
    /// Write per-chunk candidate scores or perturbation norms.
    #[arg(long)]
    diagnostics: bool,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    verifier: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Classifier,
    #[value(alias = "q")]
    TimeToSuccess,
}

impl From<Kind> for VerifierKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Classifier => VerifierKind::Classifier,
            Kind::TimeToSuccess => VerifierKind::TimeToSuccess,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Base,
    Bon,
    Cg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match (err.downcast_ref::<HarnessError>(), err.downcast_ref::<CoreError>()) {
                (Some(e), _) => e.stage().map_or(2, |s| s.exit_code()),
                (None, Some(_)) => 2,
                (None, None) => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(g: &Global) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(out) = &g.out {
        overrides.push(format!("output_dir={:?}", out.display().to_string()));
    }
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(n) = g.episodes {
        overrides.push(format!("rollouts.eval={n}"));
    }
    if let Some(n) = g.best_of_n {
        overrides.push(format!("steering.best_of_n={n}"));
    }
    let config = match &g.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml_with("", &overrides)?,
    };
    Ok(config)
}

fn policy_at(run: &Run, path: &Option<PathBuf>) -> anyhow::Result<DiffusionPolicy> {
    Ok(match path {
        Some(p) => DiffusionPolicy::load(p).with_context(|| format!("loading policy {}", p.display()))?,
        None => run.load_policy().context("loading the run's policy; run train-policy first")?,
    })
}

fn steering_mode(run: &Run, mode: Mode, kind: VerifierKind, lambda: Option<f64>) -> SteeringMode {
    let s = &run.config.steering;
    match (mode, lambda) {
        (Mode::Base, _) => SteeringMode::None,
        (Mode::Bon, _) => s.best_of_n(),
        (Mode::Cg, Some(l)) => s.guidance_with(l),
        (Mode::Cg, None) => s.guidance(kind),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run = Run::open(load_config(&cli.global)?)?;
    match cli.command {
        Command::GenDemos => {
            let demos = pipeline::gen_demos(&run)?;
            println!("{} demonstrations -> {}", demos.len(), run.path(pipeline::DEMOS).display());
        }
        Command::TrainPolicy { demos } => {
            let demos = match demos {
                Some(p) => RolloutDataset::load(&p).with_context(|| format!("loading demos {}", p.display()))?,
                None => run.load_demos().context("loading the run's demos; run gen-demos first")?,
            };
            let (policy, report) = pipeline::train_policy_stage(&run, &demos)?;
            println!(
                "policy {} after {} steps, final loss {:.4}",
                &policy.digest()[..12],
                report.steps,
                report.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Collect { policy } => {
            let policy = policy_at(&run, &policy)?;
            let data = pipeline::collect_stage(&run, &policy)?;
            println!("{}/{} successful rollouts", data.successes(), data.len());
        }
        Command::TrainVerifier { kind, rollouts } => {
            let data = match rollouts {
                Some(p) => RolloutDataset::load(&p).with_context(|| format!("loading rollouts {}", p.display()))?,
                None => run.load_rollouts().context("loading the run's rollouts; run collect first")?,
            };
            let (net, report) = pipeline::train_verifier_stage(&run, &data, kind.into())?;
            print!("{} verifier, best epoch {}", net.kind().name(), report.best_epoch);
            match report.val_accuracy {
                Some(acc) => println!(", validation accuracy {:.1}%", 100.0 * acc),
                None => println!(),
            }
        }
        Command::Eval(args) => eval(&run, args)?,
        Command::CrossSteer {
            policy,
            verifier,
            mode,
            lambda,
            label,
        } => {
            if mode == Mode::Base {
                bail!("cross-steer needs --mode bon or cg");
            }
            let policy = DiffusionPolicy::load(&policy).with_context(|| format!("loading {}", policy.display()))?;
            let verifier = VerifierNet::load(&verifier).with_context(|| format!("loading {}", verifier.display()))?;
            let mode = steering_mode(&run, mode, verifier.kind(), lambda);
            let report = pipeline::cross_steer(&run, &policy, &verifier, mode, &label)?;
            println!("{}", report.summary());
        }
        Command::Plot => plot(&run)?,
        Command::Run => {
            let out = veristeer::run_pipeline(run.config.clone())?;
            for r in &out.reports {
                println!("{}", r.summary());
            }
        }
    }
    Ok(())
}

fn eval(run: &Run, args: EvalArgs) -> anyhow::Result<()> {
    let policy = policy_at(run, &args.policy)?;
    let needs_verifier = args.sweep || args.mode != Mode::Base;
    let verifier = if needs_verifier {
        Some(match (&args.verifier, args.kind) {
            (Some(p), _) => VerifierNet::load(p).with_context(|| format!("loading verifier {}", p.display()))?,
            (None, Some(k)) => run
                .load_verifier(k.into())
                .context("loading the run's verifier; run train-verifier first")?,
            (None, None) => bail!("steered evaluation needs --kind or --verifier"),
        })
    } else {
        None
    };
    if args.sweep {
        let v = verifier.as_ref().expect("checked above");
        let lambdas = match args.lambda {
            Some(l) => vec![l],
            None => run.config.sweep.lambdas(v.kind()).to_vec(),
        };
        let base = pipeline::eval_stage(run, &policy, None, SteeringMode::None, "base", false)?.report;
        println!("{}", base.summary());
        for r in pipeline::sweep_stage(run, &policy, v, &lambdas)? {
            println!("{}  ({:+.1} points)", r.summary(), r.success_rate - base.success_rate);
        }
        return Ok(());
    }
    let kind = verifier.as_ref().map(VerifierNet::kind);
    let mode = steering_mode(run, args.mode, kind.unwrap_or(VerifierKind::Classifier), args.lambda);
    let label = args.label.unwrap_or_else(|| label_for(kind, mode));
    let eval = pipeline::eval_stage(run, &policy, verifier.as_ref(), mode, &label, args.diagnostics)?;
    println!("{}", eval.report.summary());
    Ok(())
}

fn plot(run: &Run) -> anyhow::Result<()> {
    let policy = run.load_policy().context("loading the run's policy")?;
    let mut evals = Vec::new();
    for path in pipeline::list_reports(&run.dir)? {
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let rollouts = run.path(&format!("evals/{label}.jsonl"));
        if rollouts.exists() {
            evals.push((label, RolloutDataset::load(&rollouts)?));
        }
    }
    let verifiers: Vec<VerifierNet> = [VerifierKind::Classifier, VerifierKind::TimeToSuccess]
        .into_iter()
        .filter(|k| run.path(&pipeline::verifier_file(*k)).exists())
        .map(|k| run.load_verifier(k))
        .collect::<Result<_, _>>()?;
    let refs: Vec<(&str, &RolloutDataset)> = evals.iter().map(|(l, d)| (l.as_str(), d)).collect();
    let nets: Vec<&VerifierNet> = verifiers.iter().collect();
    let landscapes = pipeline::plot_stage(run, &policy, &refs, &nets)?;
    println!("{} trajectory plots, {} landscapes in {}", refs.len(), landscapes.len(), run.path("plots").display());
    Ok(())
}
