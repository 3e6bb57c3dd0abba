//! Programmatic constructors for the architectures used by the presets.

use std::collections::BTreeSet;

use super::{InputSpec, LayerKind, LayerSpec, NetworkSpec, SplitPoint};
use crate::error::SpecError;
use crate::losses::LossMode;

/// `fc1 -> relu1 -> ... -> fcN -> loss` over a flat input named `data`.
pub fn mlp_chain(input_dim: usize, hidden: &[usize], classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut prev = "data".to_string();
    for (i, &h) in hidden.iter().enumerate() {
        let n = i + 1;
        layers.push(LayerSpec::new(format!("fc{n}"), LayerKind::Dense).bottom(&prev).top(format!("fc{n}")).param("num_output", h));
        layers.push(LayerSpec::new(format!("relu{n}"), LayerKind::Relu).bottom(format!("fc{n}")).top(format!("relu{n}")));
        prev = format!("relu{n}");
    }
    let last = format!("fc{}", hidden.len() + 1);
    layers.push(LayerSpec::new(&last, LayerKind::Dense).bottom(&prev).top(&last).param("num_output", classes));
    layers.push(LayerSpec::new("loss", LayerKind::Loss(LossMode::IndependentCe)).bottom(&last));
    let inputs = vec![InputSpec { name: "data".into(), shape: vec![input_dim] }];
    NetworkSpec::new(inputs, layers).expect("well-formed chain")
}

/// A CIFAR10-Quick style network: three 5×5 conv/pool stages and two dense
/// layers, with configurable widths.
pub fn quick_cnn(input: [usize; 3], channels: [usize; 3], hidden: usize, classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut prev = "data".to_string();
    for (i, &c) in channels.iter().enumerate() {
        let n = i + 1;
        layers.push(
            LayerSpec::new(format!("conv{n}"), LayerKind::Conv2d)
                .bottom(&prev)
                .top(format!("conv{n}"))
                .param("num_output", c)
                .param("kernel_size", 5)
                .param("pad", 2),
        );
        let (a, b) = if n == 1 { ("pool", "relu") } else { ("relu", "pool") };
        let mut cur = format!("conv{n}");
        for kind in [a, b] {
            let name = format!("{kind}{n}");
            let l = if kind == "pool" {
                LayerSpec::new(&name, LayerKind::MaxPool).param("kernel_size", 3).param("stride", 2)
            } else {
                LayerSpec::new(&name, LayerKind::Relu)
            };
            layers.push(l.bottom(&cur).top(&name));
            cur = name;
        }
        prev = cur;
    }
    layers.push(LayerSpec::new("ip1", LayerKind::Dense).bottom(&prev).top("ip1").param("num_output", hidden));
    layers.push(LayerSpec::new("ip2", LayerKind::Dense).bottom("ip1").top("ip2").param("num_output", classes));
    layers.push(LayerSpec::new("loss", LayerKind::Loss(LossMode::IndependentCe)).bottom("ip2"));
    let inputs = vec![InputSpec { name: "data".into(), shape: input.to_vec() }];
    NetworkSpec::new(inputs, layers).expect("well-formed network")
}

/// Sets the kind (and `k` / `mix` where given) of every loss layer.
pub fn with_loss(mut spec: NetworkSpec, mode: LossMode, k: Option<usize>, mix: Option<f64>) -> NetworkSpec {
    for l in spec.layers.iter_mut().filter(|l| l.kind.is_loss()) {
        l.kind = LayerKind::Loss(mode);
        l.params.remove("k");
        l.params.remove("mix");
        if mode.uses_assignment() {
            if let Some(k) = k {
                l.params.insert("k".into(), k.to_string());
            }
        }
        if mode == LossMode::MclPlusCe {
            if let Some(mix) = mix {
                l.params.insert("mix".into(), mix.to_string());
            }
        }
    }
    spec
}

/// Lays a TreeNet over `world_size` ranks: layers up to `split` live on
/// rank 0, their output is broadcast to every rank, each rank holds one
/// branch, and the branch scores are gathered back to rank 0 for the loss.
pub fn distributed_treenet(base: &NetworkSpec, split: &SplitPoint, world_size: usize) -> Result<NetworkSpec, SpecError> {
    let loss = base
        .layers
        .iter()
        .find(|l| l.kind.is_loss())
        .ok_or_else(|| SpecError::NotAChain("no loss layer".into()))?
        .clone();
    let (trunk_len, shared_blob) = match split {
        SplitPoint::At(name) => {
            let pos = base.layers.iter().position(|l| &l.name == name).ok_or_else(|| SpecError::UnknownSplitPoint(name.clone()))?;
            if !base.layers[pos].kind.is_parameterized() {
                return Err(SpecError::SplitNotParameterized(name.clone()));
            }
            (pos + 1, base.layers[pos].tops[0].clone())
        }
        SplitPoint::None => (0, base.inputs[0].name.clone()),
        SplitPoint::All => return Err(SpecError::NotAChain("a single model has nothing to distribute".into())),
    };
    let root: BTreeSet<usize> = [0].into();
    let mut layers: Vec<LayerSpec> = base.layers[..trunk_len]
        .iter()
        .map(|l| LayerSpec { include_ranks: Some(root.clone()), ..l.clone() })
        .collect();
    let shared_b = format!("{shared_blob}_b");
    layers.push(
        LayerSpec::new("broad", LayerKind::Broadcast).bottom(&shared_blob).top(&shared_b).root(0).include(0..world_size),
    );
    let mut last = shared_b.clone();
    for l in base.layers[trunk_len..].iter().filter(|l| !l.kind.is_loss()) {
        let mut l = l.clone();
        for b in l.bottoms.iter_mut() {
            if *b == shared_blob {
                *b = shared_b.clone();
            }
        }
        last = l.tops[0].clone();
        layers.push(l);
    }
    let mut gather = LayerSpec::new("gather", LayerKind::Gather).bottom(&last).root(0);
    for r in 0..world_size {
        gather = gather.top(format!("{last}_{r}"));
    }
    layers.push(gather);
    let mut loss_layer = LayerSpec { bottoms: Vec::new(), include_ranks: Some(root), ..loss };
    for r in 0..world_size {
        loss_layer = loss_layer.bottom(format!("{last}_{r}"));
    }
    layers.push(loss_layer);
    let mut spec = NetworkSpec { layers, world_size, members: Some(world_size), split_point: Some(split.label()), rank: None, ..base.clone() };
    spec.name = Some(format!("{}_x{world_size}", base.name.as_deref().unwrap_or("net")));
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{expand_treenet, localize, parse_spec};

    #[test]
    fn chain_round_trips_through_text() {
        let spec = mlp_chain(2, &[16, 16], 8);
        assert_eq!(parse_spec(&spec.to_text()).unwrap(), spec);
        assert_eq!(spec.layers.len(), 6);
    }

    #[test]
    fn quick_cnn_is_valid() {
        let spec = quick_cnn([3, 32, 32], [4, 4, 8], 16, 10);
        assert_eq!(spec.layer("conv3").unwrap().params["num_output"], "8");
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn distributed_layout_localizes_to_a_treenet() {
        let base = with_loss(mlp_chain(4, &[6, 5], 3), LossMode::ScoreAveraged, None, None);
        let split = SplitPoint::At("fc1".into());
        let dist = distributed_treenet(&base, &split, 3).unwrap();
        assert_eq!(dist.world_size, 3);
        let local = localize(&dist).unwrap();
        let tree = expand_treenet(&base, 3, &split).unwrap();
        let params = |s: &NetworkSpec| -> BTreeSet<String> {
            s.layers.iter().filter(|l| l.kind.is_parameterized()).map(|l| l.name.clone()).collect()
        };
        assert_eq!(params(&local), params(&tree));
    }
}
