use std::fs;
use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{MclAlgorithm, RunConfig};
use crate::data::{Dataset, SamplingMode, SamplingPlan};
use crate::dist::{run_distributed, run_rank, CommStats, TcpTransport, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};
use crate::graph::{member_seed, read_checkpoint, CheckpointRecord, CompiledGraph, InitPolicy, WeightInit};
use crate::metrics::{ensemble_probs, MetricsRecord};
use crate::netspec::builders::{distributed_treenet, mlp_chain, quick_cnn, with_loss};
use crate::netspec::{expand_treenet, localize, parse_spec, NetworkSpec, SplitPoint};
use crate::trainer::{
    replicate_records, train_mcl_classical, ClassicalMclConfig, Feed, HistoryRecord, StopRule, TrainOptions,
    TrainReport, Trainer,
};

/// What the configuration trains.
#[derive(Debug, Clone)]
pub enum Plan {
    /// One graph holding every member.
    Joint(NetworkSpec),
    /// One single-member graph per member, each on its own index list.
    PerMember { spec: NetworkSpec, lists: Vec<Vec<usize>>, shared_init: bool },
    /// A multi-rank spec.
    Distributed(NetworkSpec),
}

pub fn init_policy(cfg: &RunConfig) -> InitPolicy {
    let weights = if cfg.he_init { WeightInit::He } else { WeightInit::Gaussian(cfg.init_std) };
    InitPolicy { weights, ..InitPolicy::default() }
}

/// The network the run starts from: the spec file, or a default architecture
/// chosen by the example shape.
pub fn base_spec(cfg: &RunConfig, train: &Dataset) -> Result<NetworkSpec> {
    if let Some(path) = &cfg.spec {
        return Ok(parse_spec(&fs::read_to_string(path)?)?);
    }
    Ok(match train.example_shape() {
        [c, h, w] => quick_cnn([*c, *h, *w], [32, 32, 64], 64, train.classes()),
        shape => mlp_chain(shape.iter().product(), &cfg.hidden, train.classes()),
    })
}

fn apply_loss(cfg: &RunConfig, spec: NetworkSpec) -> NetworkSpec {
    let mut spec = with_loss(spec, cfg.loss, Some(cfg.k_or_default()), Some(cfg.mix));
    if cfg.normalize_by_k {
        for l in spec.layers.iter_mut().filter(|l| l.kind.is_loss()) {
            l.params.insert("normalize_by_k".into(), "true".into());
        }
    }
    spec
}

pub fn plan(cfg: &RunConfig, train: &Dataset) -> Result<Plan> {
    let base = base_spec(cfg, train)?;
    let split = SplitPoint::parse(&cfg.split);
    if base.world_size > 1 {
        return Ok(Plan::Distributed(apply_loss(cfg, base)));
    }
    let already_ensemble = base.member_outputs().len() > 1;
    if cfg.sampling != SamplingMode::Shared || matches!(cfg.mcl_algorithm, MclAlgorithm::Classical { .. }) {
        let spec = with_loss(base, crate::losses::LossMode::IndependentCe, None, None);
        let lists = match cfg.sampling {
            SamplingMode::Shared => vec![(0..train.len()).collect(); cfg.members],
            mode => SamplingPlan::new(mode, train.len(), cfg.members, cfg.data_seed)?.members,
        };
        return Ok(Plan::PerMember { spec, lists, shared_init: !cfg.sampling.per_member_init() });
    }
    if cfg.world_size > 1 {
        let global = distributed_treenet(&apply_loss(cfg, base), &split, cfg.world_size)?;
        return Ok(Plan::Distributed(global));
    }
    let spec = if already_ensemble { base } else { expand_treenet(&base, cfg.members, &split)? };
    Ok(Plan::Joint(apply_loss(cfg, spec)))
}

/// Graphs of the plan as evaluation sees them: multi-rank specs are
/// localized into one single-process graph.
pub fn compile_plan(plan: &Plan, cfg: &RunConfig) -> Result<Vec<CompiledGraph>> {
    let init = init_policy(cfg);
    match plan {
        Plan::Joint(spec) => Ok(vec![CompiledGraph::compile(spec, &init, cfg.init_seed)?]),
        Plan::PerMember { spec, lists, shared_init } => (0..lists.len())
            .map(|m| {
                let seed = if *shared_init { cfg.init_seed } else { member_seed(cfg.init_seed, m) };
                CompiledGraph::compile(spec, &init, seed)
            })
            .collect(),
        Plan::Distributed(global) => Ok(vec![CompiledGraph::compile(&localize(global)?, &init, cfg.init_seed)?]),
    }
}

fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        sgd: cfg.sgd.clone(),
        loss: None,
        data_seed: cfg.data_seed,
        tiebreak_seed: cfg.tiebreak_seed,
        log_every: cfg.log_every,
        stop_rule: cfg.stop_rule.then(StopRule::default),
        ensemble_size: None,
        checkpoint_dir: (cfg.checkpoint_every > 0).then(|| cfg.out.join("checkpoints")),
        checkpoint_every: cfg.checkpoint_every,
    }
}

fn init_from(graphs: &mut [CompiledGraph], path: &Path) -> Result<()> {
    let records = read_checkpoint(path)?;
    for g in graphs.iter_mut() {
        if g.load_records(&records).is_err() {
            let members = g.num_members().max(1);
            g.load_records(&replicate_records(&records, members))?;
        }
    }
    Ok(())
}

fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in history {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("checkpoints")
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub param_count: usize,
    pub updates: usize,
    pub final_loss: Option<f64>,
    pub comm: CommStats,
    pub metrics: Option<MetricsRecord>,
}

fn evaluate_graphs(graphs: &mut [CompiledGraph], test: &Dataset, members: Option<&[usize]>) -> Result<MetricsRecord> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let probs = ensemble_probs(graphs, test, &idx)?;
    let probs = match members {
        None => probs,
        Some(sel) => sel
            .iter()
            .map(|&m| {
                probs.get(m).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("member {m} out of range for an ensemble of {}", probs.len()))
                })
            })
            .collect::<Result<_>>()?,
    };
    MetricsRecord::from_probs(&probs, test.labels(), test.classes())
}

fn finish(cfg: &RunConfig, graphs: &mut [CompiledGraph], test: &Dataset) -> Result<MetricsRecord> {
    let metrics = evaluate_graphs(graphs, test, None)?;
    metrics.write_json(&cfg.out.join("metrics.json"))?;
    metrics.write_assignment_csv(&cfg.out.join("assignment.csv"))?;
    Ok(metrics)
}

/// Trains per `cfg` and writes the run directory.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    fs::create_dir_all(checkpoint_dir(cfg))?;
    cfg.write(&cfg.out.join("config.json"))?;
    let (train, test) = cfg.dataset.load()?;
    log::info!("training on {} ({} examples, {} classes)", train.name, train.len(), train.classes());
    let plan = plan(cfg, &train)?;
    let opts = train_options(cfg);
    let all: Vec<usize> = (0..train.len()).collect();
    match plan {
        Plan::Distributed(ref global) => {
            let init = init_policy(cfg);
            if let Some(rank) = cfg.rank {
                let addrs: Vec<SocketAddr> =
                    cfg.connect.iter().map(|a| a.parse().map_err(|_| Error::InvalidArgument(a.clone()))).collect::<Result<_>>()?;
                let listener = TcpListener::bind(cfg.bind.as_deref().map_or(addrs[rank], |b| b.parse().expect("validated")))?;
                let transport = TcpTransport::with_listener(rank, listener, &addrs, DEFAULT_TIMEOUT)?;
                let (graph, report, comm) =
                    run_rank(global, Box::new(transport), &train, all, &opts, &init, cfg.init_seed, DEFAULT_TIMEOUT)?;
                graph.save_checkpoint(&checkpoint_dir(cfg).join(format!("final-rank{rank}.ckpt")))?;
                if graph.num_members() > 0 {
                    write_history(&cfg.out.join("history.jsonl"), &report.history)?;
                }
                return Ok(TrainSummary {
                    param_count: graph.param_count(),
                    updates: report.iterations,
                    final_loss: report.losses.last().copied(),
                    comm,
                    metrics: None,
                });
            }
            let run = run_distributed(global, cfg.transport, &train, &all, &opts, &init, cfg.init_seed)?;
            for (r, g) in run.graphs.iter().enumerate() {
                g.save_checkpoint(&checkpoint_dir(cfg).join(format!("final-rank{r}.ckpt")))?;
            }
            write_history(&cfg.out.join("history.jsonl"), &run.report.history)?;
            let mut local = compile_plan(&plan, cfg)?;
            let records: Vec<CheckpointRecord> = run.graphs.iter().flat_map(CompiledGraph::checkpoint_records).collect();
            local[0].load_records(&records)?;
            let metrics = finish(cfg, &mut local, &test)?;
            Ok(TrainSummary {
                param_count: run.graphs.iter().map(CompiledGraph::param_count).sum(),
                updates: run.report.iterations,
                final_loss: run.report.losses.last().copied(),
                comm: run.total_stats(),
                metrics: Some(metrics),
            })
        }
        Plan::Joint(_) | Plan::PerMember { .. } => {
            let mut graphs = compile_plan(&plan, cfg)?;
            if let Some(path) = &cfg.init_from {
                init_from(&mut graphs, path)?;
            }
            let (mut graphs, report) = match (&plan, cfg.mcl_algorithm) {
                (_, MclAlgorithm::Classical { rounds }) => {
                    let ccfg = ClassicalMclConfig { train: opts, rounds, seed: cfg.data_seed, ..Default::default() };
                    let r = train_mcl_classical(graphs, &train, &all, &ccfg)?;
                    log::info!("classical MCL: {} rounds, converged {}, empty members {:?}", r.rounds, r.converged, r.empty_members);
                    (r.graphs, TrainReport::default())
                }
                (Plan::PerMember { lists, .. }, _) => {
                    let mut t = Trainer::new(graphs, Feed::PerGraph(lists.clone()), opts)?;
                    let report = t.run(&train)?;
                    (t.graphs, report)
                }
                _ => {
                    let mut t = Trainer::new(graphs, Feed::all(train.len()), opts)?;
                    let report = t.run(&train)?;
                    (t.graphs, report)
                }
            };
            for (i, g) in graphs.iter().enumerate() {
                g.save_checkpoint(&checkpoint_dir(cfg).join(format!("final-graph{i}.ckpt")))?;
            }
            write_history(&cfg.out.join("history.jsonl"), &report.history)?;
            let metrics = finish(cfg, &mut graphs, &test)?;
            Ok(TrainSummary {
                param_count: graphs.iter().map(CompiledGraph::param_count).sum(),
                updates: report.iterations,
                final_loss: report.losses.last().copied(),
                comm: CommStats::default(),
                metrics: Some(metrics),
            })
        }
    }
}

/// Re-evaluates a finished run from its directory.
pub fn eval(run: &Path, members: Option<&[usize]>) -> Result<MetricsRecord> {
    let cfg = RunConfig::read(&run.join("config.json"))?;
    let (train, test) = cfg.dataset.load()?;
    let plan = plan(&cfg, &train)?;
    let mut graphs = compile_plan(&plan, &cfg)?;
    let ckpts = run.join("checkpoints");
    match plan {
        Plan::Distributed(ref global) => {
            let mut records = Vec::new();
            for r in 0..global.world_size {
                records.extend(read_checkpoint(&ckpts.join(format!("final-rank{r}.ckpt")))?);
            }
            graphs[0].load_records(&records)?;
        }
        _ => {
            for (i, g) in graphs.iter_mut().enumerate() {
                g.load_checkpoint(&ckpts.join(format!("final-graph{i}.ckpt")))?;
            }
        }
    }
    evaluate_graphs(&mut graphs, &test, members)
}
