//! Parses the layer-spec files in `examples/specs`, prints their canonical
//! text, and shows what each rank of the distributed spec keeps.
//!
//! `cargo run --example parse_spec`

use std::path::Path;

use treenet::netspec::{parse_spec, prune_for_rank};
use treenet::{CompiledGraph, InitPolicy};

fn main() -> treenet::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/specs");
    for file in ["mlp_treenet.spec", "quick_x3_distributed.spec"] {
        let spec = parse_spec(&std::fs::read_to_string(dir.join(file))?)?;
        println!("== {file}: {} layers, world size {}, loss {}", spec.layers.len(), spec.world_size, spec.loss_mode()?);
        if spec.world_size == 1 {
            let g = CompiledGraph::compile(&spec, &InitPolicy::default(), 0)?;
            println!("{} members, {} parameters", g.num_members(), g.param_count());
            print!("{}", spec.to_text());
            continue;
        }
        for rank in 0..spec.world_size {
            let local = prune_for_rank(&spec, rank)?;
            let names: Vec<&str> = local.layers.iter().map(|l| l.name.as_str()).collect();
            let g = CompiledGraph::compile_for_rank(&spec, rank, &InitPolicy::default(), 0)?;
            println!("rank {rank}: {} params, layers {}", g.param_count(), names.join(" "));
        }
    }
    Ok(())
}
