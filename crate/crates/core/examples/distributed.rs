//! Runs a TreeNet over three ranks, once with in-process channels and once
//! over loopback TCP, checks both against single-process training, and
//! prints broadcast byte counts.
//!
//! `cargo run --release --example distributed`

use treenet::data::synth_split;
use treenet::dist::{bench_broadcast, run_distributed, run_local_equivalent, TransportKind};
use treenet::netspec::builders::{distributed_treenet, mlp_chain};
use treenet::netspec::SplitPoint;
use treenet::trainer::{SgdConfig, TrainOptions};
use treenet::InitPolicy;

fn main() -> treenet::Result<()> {
    let global = distributed_treenet(&mlp_chain(2, &[16, 16], 8), &SplitPoint::At("fc1".into()), 3)?;
    let (train, _) = synth_split(8, 30, 1, 2, 0.3, 0)?;
    let idx: Vec<usize> = (0..train.len()).collect();
    let opts = TrainOptions {
        sgd: SgdConfig { lr: 0.05, batch_size: 16, iterations: 100, ..SgdConfig::default() },
        log_every: 50,
        ..TrainOptions::default()
    };
    let init = InitPolicy::he();
    let (local, local_report) = run_local_equivalent(&global, &train, &idx, &opts, &init, 3)?;
    for kind in [TransportKind::InProcess, TransportKind::Tcp] {
        let run = run_distributed(&global, kind, &train, &idx, &opts, &init, 3)?;
        let gap = run
            .graphs
            .iter()
            .flat_map(|g| g.param_blocks().map(|(layer, i, p)| p.max_abs_diff(&local.layer_params(layer).expect("shared name")[i])).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let stats = run.total_stats();
        println!(
            "{kind:?}: final loss {:.6} (local {:.6}), max param gap {gap:.1e}, {} bytes sent",
            run.report.losses.last().unwrap_or(&f64::NAN),
            local_report.losses.last().unwrap_or(&f64::NAN),
            stats.bytes_sent()
        );
    }
    for row in bench_broadcast(3, &[1_000, 10_000, 100_000], 3, TransportKind::InProcess)? {
        println!(
            "payload {:>7} elements: {:>8} bytes per pass, {:.2e} s, comm share {:.2}",
            row.payload_elements, row.bytes, row.wall_seconds, row.comm_fraction
        );
    }
    Ok(())
}
