//! The `treenet` command line: `train`, `eval`, and `bench-comm`.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::{DatasetConfig, MclAlgorithm, RunConfig, PRESETS};
pub use run::{base_spec, compile_plan, eval, plan, train, Plan, TrainSummary};

use crate::data::SamplingMode;
use crate::dist::{bench_broadcast, TransportKind};
use crate::error::Error;
use crate::losses::LossMode;
use crate::netspec::parse_spec;
use crate::trainer::LrSchedule;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "treenet", version, about = "Train and evaluate diverse neural-network ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an ensemble and write a run directory.
    Train(TrainArgs),
    /// Re-evaluate a finished run.
    Eval(EvalArgs),
    /// Measure broadcast cost against payload size.
    BenchComm(BenchArgs),
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Start from a recipe: cifar10-quick, synth-mcl, synth-treenet, bagging-study.
    #[arg(long)]
    pub preset: Option<String>,
    /// Replay a resolved config.json (flags given alongside override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Network spec file; single networks are expanded into ensembles.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// synth, cifar10:<dir>, or csv:<train>,<test>.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub synth_classes: Option<usize>,
    #[arg(long)]
    pub synth_per_class: Option<usize>,
    #[arg(long)]
    pub synth_test_per_class: Option<usize>,
    #[arg(long)]
    pub synth_dim: Option<usize>,
    #[arg(long)]
    pub synth_spread: Option<f64>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
    /// Use only the first N training examples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Hidden widths of the default network, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub members: Option<usize>,
    /// Last shared layer, `none`, or `all`.
    #[arg(long)]
    pub split: Option<String>,
    /// independent-ce, score-averaged, prob-averaged, mcl, mcl-plus-ce.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub mix: Option<f64>,
    #[arg(long)]
    pub normalize_by_k: bool,
    /// shared, bagged, combined, unique.
    #[arg(long)]
    pub sampling: Option<String>,
    #[arg(long)]
    pub unique_fraction: Option<f64>,
    /// Run classical (non-SGD) MCL for this many rounds.
    #[arg(long)]
    pub classical_rounds: Option<usize>,
    #[arg(long)]
    pub he_init: bool,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub tiebreak_seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    /// fixed, step:<factor>:<every>, milestones:<factor>:<t1>,<t2>..., plateau:<factor>:<pct>:<window>.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Do not multiply the rate by the ensemble size under averaged losses.
    #[arg(long)]
    pub no_lr_scale: bool,
    /// Stop MCL training once the windowed set-loss stops improving.
    #[arg(long)]
    pub stop_rule: bool,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Initialize from a checkpoint (a single network is copied to every member).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub world_size: Option<usize>,
    /// Run only this rank (multi-process jobs over TCP).
    #[arg(long)]
    pub rank: Option<usize>,
    /// inproc or tcp.
    #[arg(long)]
    pub transport: Option<String>,
    /// Listen address of this rank, if different from its --connect entry.
    #[arg(long)]
    pub bind: Option<String>,
    /// Addresses of all ranks in rank order, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub connect: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Evaluate only these members, in this order (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub members: Option<Vec<usize>>,
    /// Where to write the metrics (default <run>/eval.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    pub world_size: usize,
    /// Payload sizes in elements, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 100_000, 1_000_000, 10_000_000])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value = "inproc")]
    pub transport: String,
    /// Network spec whose comm layers set the world size.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// CSV destination (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_schedule(s: &str) -> Result<LrSchedule, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let f = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number `{v}` in schedule `{s}`"));
    let u = |v: &str| v.parse::<usize>().map_err(|_| format!("bad integer `{v}` in schedule `{s}`"));
    match parts.as_slice() {
        ["fixed"] => Ok(LrSchedule::Fixed),
        ["step", factor, every] => Ok(LrSchedule::Step { factor: f(factor)?, every: u(every)? }),
        ["milestones", factor, at] => Ok(LrSchedule::Milestones {
            factor: f(factor)?,
            at: at.split(',').map(u).collect::<Result<_, _>>()?,
        }),
        ["plateau", factor, pct, window] => {
            Ok(LrSchedule::Plateau { factor: f(factor)?, min_drop_pct: f(pct)?, window: u(window)? })
        }
        _ => Err(format!("unknown schedule `{s}`")),
    }
}

/// Folds the flags over the preset (or replayed config). Returns every
/// problem found rather than stopping at the first.
pub fn resolve(args: &TrainArgs) -> Result<RunConfig, Vec<String>> {
    let mut errs = Vec::new();
    let out = args.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(args.preset.as_deref().unwrap_or("run"))
    });
    let mut c = match (&args.config, &args.preset) {
        (Some(path), _) => match RunConfig::read(path) {
            Ok(mut c) => {
                if args.out.is_some() {
                    c.out = out.clone();
                }
                c
            }
            Err(e) => return Err(vec![format!("{}: {e}", path.display())]),
        },
        (None, Some(p)) => match RunConfig::preset(p, out.clone()) {
            Ok(c) => c,
            Err(e) => return Err(vec![e.to_string()]),
        },
        (None, None) => RunConfig::base(out.clone()),
    };
    if let Some(d) = &args.data {
        match DatasetConfig::parse(d) {
            Ok(d) => c.dataset = d,
            Err(e) => errs.push(e.to_string()),
        }
    }
    match &mut c.dataset {
        DatasetConfig::Synth { classes, train_per_class, test_per_class, dim, spread, seed } => {
            args.synth_classes.map(|v| *classes = v);
            args.synth_per_class.map(|v| *train_per_class = v);
            args.synth_test_per_class.map(|v| *test_per_class = v);
            args.synth_dim.map(|v| *dim = v);
            args.synth_spread.map(|v| *spread = v);
            args.synth_seed.map(|v| *seed = v);
        }
        DatasetConfig::Cifar10 { train_limit, .. } => {
            if args.train_limit.is_some() {
                *train_limit = args.train_limit;
            }
        }
        DatasetConfig::Csv { .. } => {}
    }
    if let Some(path) = &args.spec {
        c.spec = Some(path.clone());
        match std::fs::read_to_string(path).map_err(Error::from).and_then(|t| parse_spec(&t).map_err(Error::from)) {
            Ok(spec) => {
                if args.loss.is_none() {
                    if let Ok(mode) = spec.loss_mode() {
                        c.loss = mode;
                    }
                }
                if spec.world_size > 1 && args.world_size.is_none() {
                    c.world_size = spec.world_size;
                    c.members = spec.ensemble_size();
                }
            }
            Err(e) => errs.push(format!("{}: {e}", path.display())),
        }
    }
    if let Some(h) = &args.hidden {
        c.hidden = h.clone();
    }
    if let Some(m) = args.members {
        c.members = m;
    }
    if let Some(s) = &args.split {
        c.split = s.clone();
    }
    if let Some(l) = &args.loss {
        match l.parse::<LossMode>() {
            Ok(m) => c.loss = m,
            Err(e) => errs.push(e.to_string()),
        }
    }
    if args.k.is_some() {
        c.k = args.k;
    }
    if !c.loss.uses_assignment() && args.k.is_none() {
        c.k = None;
    }
    if let Some(m) = args.mix {
        c.mix = m;
    }
    c.normalize_by_k |= args.normalize_by_k;
    if let Some(s) = &args.sampling {
        match SamplingMode::parse(s, args.unique_fraction.unwrap_or(0.632)) {
            Ok(m) => c.sampling = m,
            Err(e) => errs.push(e.to_string()),
        }
    } else if let (Some(f), SamplingMode::UniqueSubset { fraction }) = (args.unique_fraction, &mut c.sampling) {
        *fraction = f;
    }
    if let Some(r) = args.classical_rounds {
        c.mcl_algorithm = MclAlgorithm::Classical { rounds: r };
    }
    c.he_init |= args.he_init;
    if let Some(s) = args.init_std {
        c.init_std = s;
        c.he_init = false;
    }
    args.init_seed.map(|v| c.init_seed = v);
    args.data_seed.map(|v| c.data_seed = v);
    args.tiebreak_seed.map(|v| c.tiebreak_seed = v);
    args.lr.map(|v| c.sgd.lr = v);
    args.momentum.map(|v| c.sgd.momentum = v);
    args.weight_decay.map(|v| c.sgd.weight_decay = v);
    args.batch_size.map(|v| c.sgd.batch_size = v);
    args.iterations.map(|v| c.sgd.iterations = v);
    args.accumulation.map(|v| c.sgd.accumulation_steps = v);
    if let Some(s) = &args.schedule {
        match parse_schedule(s) {
            Ok(s) => c.sgd.schedule = s,
            Err(e) => errs.push(e),
        }
    }
    if args.no_lr_scale {
        c.sgd.lr_ensemble_scale = false;
    }
    c.stop_rule |= args.stop_rule;
    args.log_every.map(|v| c.log_every = v);
    args.checkpoint_every.map(|v| c.checkpoint_every = v);
    if args.init_from.is_some() {
        c.init_from = args.init_from.clone();
    }
    args.world_size.map(|v| c.world_size = v);
    if args.rank.is_some() {
        c.rank = args.rank;
    }
    if let Some(t) = &args.transport {
        match t.parse::<TransportKind>() {
            Ok(t) => c.transport = t,
            Err(e) => errs.push(e.to_string()),
        }
    }
    if args.bind.is_some() {
        c.bind = args.bind.clone();
    }
    if let Some(list) = &args.connect {
        c.connect = list.clone();
    }
    errs.extend(c.problems());
    if errs.is_empty() {
        Ok(c)
    } else {
        Err(errs)
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("TREENET_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn runtime_failure(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    let code = match e {
        Error::Spec(_) | Error::InvalidArgument(_) | Error::LabelOutOfRange { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    };
    ExitCode::from(code)
}

fn cmd_train(args: &TrainArgs) -> ExitCode {
    let cfg = match resolve(args) {
        Ok(c) => c,
        Err(errs) => {
            eprintln!("invalid configuration:");
            errs.iter().for_each(|e| eprintln!("  - {e}"));
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match train(&cfg) {
        Ok(s) => {
            println!("run directory: {}", cfg.out.display());
            println!("parameters: {}", s.param_count);
            println!("updates: {}", s.updates);
            if let Some(l) = s.final_loss {
                println!("final training loss: {l:.6}");
            }
            if s.comm.bytes_sent() > 0 {
                println!("communication: {} bytes sent, {:.3} s", s.comm.bytes_sent(), s.comm.seconds());
            }
            match &s.metrics {
                Some(m) => print_metrics(m),
                None => println!("rank finished; run `treenet eval --run {}` once every rank is done", cfg.out.display()),
            }
            ExitCode::SUCCESS
        }
        Err(e) => runtime_failure(e),
    }
}

fn print_metrics(m: &crate::metrics::MetricsRecord) {
    println!("ensemble-mean accuracy: {:.4}", m.ensemble_mean_acc);
    println!("oracle accuracy (any member correct): {:.4}", m.oracle_acc);
    println!("oracle accuracy (lowest-loss member): {:.4}", m.oracle_lowest_loss_acc);
    let accs: Vec<String> = m.member_accs.iter().map(|a| format!("{a:.4}")).collect();
    println!("member accuracies: {}", accs.join(" "));
}

fn cmd_eval(args: &EvalArgs) -> ExitCode {
    match eval(&args.run, args.members.as_deref()) {
        Ok(m) => {
            print_metrics(&m);
            let out = args.out.clone().unwrap_or_else(|| args.run.join("eval.json"));
            match m.write_json(&out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => runtime_failure(e),
            }
        }
        Err(e) => runtime_failure(e),
    }
}

fn cmd_bench(args: &BenchArgs) -> ExitCode {
    let mut world = args.world_size;
    if let Some(path) = &args.spec {
        match std::fs::read_to_string(path).map_err(Error::from).and_then(|t| Ok(parse_spec(&t)?)) {
            Ok(s) => world = s.world_size,
            Err(e) => return runtime_failure(e),
        }
    }
    let mut errs = Vec::new();
    if world < 2 {
        errs.push(format!("bench-comm needs a world size of at least 2, got {world}"));
    }
    let kind = args.transport.parse::<TransportKind>().map_err(|e| errs.push(e.to_string())).ok();
    if args.sizes.is_empty() || args.sizes.contains(&0) {
        errs.push("--sizes must list positive element counts".into());
    }
    if !errs.is_empty() {
        eprintln!("usage error:");
        errs.iter().for_each(|e| eprintln!("  - {e}"));
        return ExitCode::from(EXIT_CONFIG);
    }
    let rows = match bench_broadcast(world, &args.sizes, args.repeats, kind.expect("checked")) {
        Ok(r) => r,
        Err(e) => return runtime_failure(e),
    };
    let mut text = String::from("payload_elements,bytes,wall_seconds,comm_fraction\n");
    for r in &rows {
        text.push_str(&format!("{},{},{:.6e},{:.4}\n", r.payload_elements, r.bytes, r.wall_seconds, r.comm_fraction));
    }
    match &args.out {
        Some(p) => match std::fs::write(p, text) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => runtime_failure(e.into()),
        },
        None => {
            print!("{text}");
            ExitCode::SUCCESS
        }
    }
}

pub fn run(cli: Cli) -> ExitCode {
    init_logging();
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BenchComm(a) => cmd_bench(a),
    }
}

/// Entry point of the `treenet` binary.
pub fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 })
        }
    }
}
