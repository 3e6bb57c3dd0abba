//! Multiple choice learning on 8 synthetic classes with 4 members: sweeps k
//! and prints oracle accuracy, member accuracies, and which member wins each
//! class.
//!
//! `cargo run --release --example mcl_specialization`

use treenet::data::synth_split;
use treenet::metrics::evaluate;
use treenet::netspec::builders::mlp_chain;
use treenet::netspec::{expand_treenet, SplitPoint};
use treenet::trainer::{train_mcl_sgd, SgdConfig, TrainOptions};
use treenet::{CompiledGraph, InitPolicy};

fn main() -> treenet::Result<()> {
    let (train, test) = synth_split(8, 200, 200, 2, 0.3, 0)?;
    let spec = expand_treenet(&mlp_chain(2, &[32], 8), 4, &SplitPoint::None)?;
    let opts = TrainOptions {
        sgd: SgdConfig { lr: 0.05, batch_size: 64, iterations: 6000, ..SgdConfig::default() },
        log_every: 2000,
        ..TrainOptions::default()
    };
    for k in 1..=4 {
        let graph = CompiledGraph::compile(&spec, &InitPolicy::he(), 0)?;
        let (mut t, _) = train_mcl_sgd(vec![graph], &train, (0..train.len()).collect(), k, opts.clone())?;
        let m = evaluate(&mut t.graphs, &test, None)?;
        let accs: Vec<String> = m.member_accs.iter().map(|a| format!("{a:.3}")).collect();
        println!(
            "k={k}: oracle {:.4}, ensemble mean {:.4}, members [{}], median class entropy {:.3} bits",
            m.oracle_acc,
            m.ensemble_mean_acc,
            accs.join(" "),
            m.median_row_entropy()
        );
        if k == 1 {
            for (class, row) in m.assignment_dist.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|p| format!("{p:.2}")).collect();
                println!("    class {class}: {}", cells.join(" "));
            }
        }
    }
    Ok(())
}
