#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, bail};
use clap::{Args, Parser, Subcommand, ValueEnum};
use slb_core::checkpoint::write_atomic;
use slb_core::gradcheck::{self, DEFAULT_TOLERANCE, GradCheck};
use slb_core::train::{count_correct, evaluate};
use slb_core::{
    Arch, Checkpoint, Dataset, DatasetName, DatasetSpec, InferenceModel, RunConfig, ScheduleKind, Split,
    TemperatureSchedule, Trainer, WeightState, build,
};

#[derive(Parser)]
#[command(name = "slb", version, about = "Train, evaluate and export searchable low-bit networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a config file or resume from a checkpoint.
    Train(TrainArgs),
    /// Report top-1 accuracy of a model file or checkpoint.
    Eval(EvalArgs),
    /// Write the frozen model of a checkpoint to a model file.
    Export(ExportArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print a temperature schedule as CSV (i,T,tau).
    Schedule(ScheduleArgs),
    /// Print a config in canonical form (defaults when no file is given).
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StateArg {
    Continuous,
    Discrete,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    model: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the dataset the architecture was built for.
    #[arg(long)]
    dataset: Option<DatasetName>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "discrete")]
    state: StateArg,
    /// Evaluate on the first `n` test images only (0: all).
    #[arg(long, default_value_t = 0)]
    subset: usize,
    #[arg(long, default_value_t = 500)]
    batch: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    Ops,
    SlbSearch,
    Sbn,
    Network,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run only the corrupted-adjoint fixture, which must fail.
    #[arg(long)]
    negative_control: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "exp")]
    kind: ScheduleKind,
    #[arg(long, default_value_t = 0.01)]
    t_start: f64,
    #[arg(long, default_value_t = 10.0)]
    t_end: f64,
    #[arg(long)]
    iterations: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Export(a) => export(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Schedule(a) => schedule(a).map(|_| true),
        Command::Config { config } => show_config(config).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_split(cfg: &RunConfig, split: Split, subset: usize) -> anyhow::Result<Dataset> {
    let spec = cfg.dataset_spec(split);
    let ds = Dataset::load(&spec).with_context(|| format!("loading {} {split:?} from {}", cfg.dataset, spec.root.display()))?;
    Ok(if subset > 0 { ds.truncated(subset) } else { ds })
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch{epoch:04}.slbc")
}

/// Deletes periodic checkpoints beyond the `keep` most recent.
fn prune_checkpoints(dir: &Path, keep: usize) -> std::io::Result<()> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint-epoch") && n.ends_with(".slbc"))
        })
        .collect();
    found.sort();
    let excess = found.len().saturating_sub(keep);
    for p in &found[..excess] {
        fs::remove_file(p)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, resumed) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            (ck.config.clone(), Some(ck))
        }
        None => {
            let path = a.config.as_ref().expect("clap requires --config");
            (RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?, None)
        }
    };
    if let Some(seed) = a.seed {
        if resumed.is_some() && seed != cfg.train.seed {
            bail!("--seed {seed} differs from the checkpoint seed {}", cfg.train.seed);
        }
        cfg.train.seed = seed;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let train_ds = load_split(&cfg, Split::Train, cfg.train_subset)?;
    let test_ds = load_split(&cfg, Split::Test, cfg.eval_subset)?;
    let mut trainer = match &resumed {
        Some(ck) => ck.trainer(train_ds.len())?,
        None => {
            let net = build(cfg.arch, cfg.q_w, cfg.q_a, cfg.weight_mode, cfg.train.seed)?;
            Trainer::new(net, cfg.train.clone(), train_ds.len())?
        }
    };
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.cfg"), cfg.to_text())?;
    let mut best = trainer.report.rows.iter().map(|r| r.discrete_acc).filter(|a| !a.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    let total = cfg.train.epochs;
    let quiet = a.quiet;
    trainer.run(&train_ds, &test_ds, |t| {
        write_atomic(&out.join("report.csv"), t.report.to_csv().as_bytes())?;
        let row = t.report.last().filter(|r| r.epoch == t.epoch);
        if !quiet {
            match row {
                Some(r) => eprintln!(
                    "epoch {}/{total} loss {:.4} tau {:.4} continuous {:.4} discrete {:.4} frozen {:.4}",
                    r.epoch, r.train_loss, r.tau, r.continuous_acc, r.discrete_acc, r.fraction_frozen
                ),
                None => eprintln!("epoch {}/{total} loss {:.4}", t.epoch, t.last_loss.unwrap_or(f64::NAN)),
            }
        }
        let periodic = cfg.checkpoint_every > 0 && (t.epoch % cfg.checkpoint_every == 0 || t.epoch == total);
        let improved = row.is_some_and(|r| r.discrete_acc > best);
        if periodic || improved {
            let ck = Checkpoint::capture(&cfg, t);
            if periodic {
                ck.save(out.join(checkpoint_name(t.epoch)))?;
                prune_checkpoints(&out, cfg.keep_checkpoints.max(1))
                    .map_err(|e| slb_core::Error::Io { path: out.clone(), source: e })?;
            }
            if improved {
                best = row.map_or(best, |r| r.discrete_acc);
                ck.save(out.join("checkpoint-best.slbc"))?;
            }
        }
        Ok(())
    })?;
    let model = slb_core::deploy::export(&trainer.net, out.join("model.slbm"))?;
    if let Some(r) = trainer.report.last() {
        println!(
            "continuous_acc={:.4} discrete_acc={:.4} fraction_frozen={:.4} packed_bytes={} output={}",
            r.continuous_acc,
            r.discrete_acc,
            r.fraction_frozen,
            model.packed_bytes(),
            out.display()
        );
    }
    Ok(())
}

fn default_dataset(arch: &str) -> anyhow::Result<DatasetName> {
    Ok(match arch.parse::<Arch>()? {
        Arch::MnistCnn => DatasetName::Mnist,
        Arch::VggSmall | Arch::Resnet20 => DatasetName::Cifar10,
    })
}

fn test_set(name: DatasetName, root: Option<PathBuf>, subset: usize) -> anyhow::Result<Dataset> {
    let root = root.unwrap_or_else(|| slb_core::data::data_root("data"));
    let ds = Dataset::load(&DatasetSpec::new(name, &root, Split::Test))
        .with_context(|| format!("loading {name} test split from {}", root.display()))?;
    Ok(if subset > 0 { ds.truncated(subset) } else { ds })
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    if let Some(path) = &a.model {
        if a.state != StateArg::Discrete {
            bail!("a model file holds the discrete state only; evaluate a checkpoint for --state continuous or both");
        }
        let model = InferenceModel::load(path).with_context(|| format!("loading {}", path.display()))?;
        let name = match a.dataset {
            Some(d) => d,
            None => default_dataset(&model.arch)?,
        };
        let ds = test_set(name, a.data_root, a.subset)?;
        let mut correct = 0;
        for (x, labels) in ds.batches(a.batch, 0, 0, false) {
            correct += count_correct(model.infer(&x)?.data(), &labels);
        }
        println!("discrete_acc={:.4} n={}", correct as f64 / ds.len() as f64, ds.len());
        return Ok(());
    }
    let path = a.checkpoint.as_ref().expect("clap requires --model or --checkpoint");
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = &ck.config;
    let (canonical_train, _) = cfg.dataset.canonical_counts();
    let train_len = if cfg.train_subset > 0 { cfg.train_subset.min(canonical_train) } else { canonical_train };
    let mut trainer = ck.trainer(train_len)?;
    let tau = trainer.current_temperature()?.tau;
    let ds = test_set(a.dataset.unwrap_or(cfg.dataset), a.data_root.or(cfg.data_root.clone()), a.subset)?;
    let states: &[WeightState] = match a.state {
        StateArg::Continuous => &[WeightState::Continuous],
        StateArg::Discrete => &[WeightState::Discrete],
        StateArg::Both => &[WeightState::Continuous, WeightState::Discrete],
    };
    let mut accs = Vec::new();
    for &s in states {
        let acc = evaluate(&mut trainer.net, &ds, s, tau, a.batch)?;
        println!("{s}_acc={acc:.4} n={}", ds.len());
        accs.push(acc);
    }
    if let [c, d] = accs[..] {
        println!("gap_points={:.2}", (c - d) * 100.0);
    }
    Ok(())
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let net = ck.network()?;
    let model = slb_core::deploy::export(&net, &a.output)?;
    println!("wrote {} ({} packed weight bytes)", a.output.display(), model.packed_bytes());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> anyhow::Result<bool> {
    let mut checks: Vec<GradCheck> = Vec::new();
    if a.negative_control {
        checks.extend(gradcheck::negative_control(a.seed)?);
    } else {
        let want = |s: Scope| a.scope == s || a.scope == Scope::All;
        if want(Scope::Ops) {
            checks.extend(gradcheck::tensor_ops(a.seed)?);
        }
        if want(Scope::SlbSearch) {
            checks.extend(gradcheck::slb_search(a.seed)?);
        }
        if want(Scope::Sbn) {
            checks.extend(gradcheck::sbn(a.seed)?);
        }
        if want(Scope::Network) {
            checks.extend(gradcheck::mnist_network(a.seed, 3, 6)?);
        }
    }
    let mut ok = true;
    println!("check,max_rel_error,coordinates,status");
    for c in &checks {
        let pass = c.passed(DEFAULT_TOLERANCE);
        ok &= pass;
        println!("{},{:e},{},{}", c.name, c.max_rel_error, c.coordinates, if pass { "PASS" } else { "FAIL" });
    }
    Ok(ok)
}

fn schedule(a: ScheduleArgs) -> anyhow::Result<()> {
    let s = TemperatureSchedule::new(a.kind, a.t_start, a.t_end, a.iterations)?;
    print!("{}", s.to_csv());
    Ok(())
}

fn show_config(path: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = match path {
        Some(p) => RunConfig::load(&p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    print!("{}", cfg.to_text());
    Ok(())
}
