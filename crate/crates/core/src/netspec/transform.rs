use std::collections::{BTreeSet, HashMap, HashSet};

use super::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::SpecError;
use crate::losses::LossMode;

/// Keeps only the layers whose communication group contains `rank`.
///
/// On non-root ranks a broadcast layer loses its bottom (its top becomes an
/// input of the local graph) and a gather layer loses its tops.
pub fn prune_for_rank(spec: &NetworkSpec, rank: usize) -> Result<NetworkSpec, SpecError> {
    if rank >= spec.world_size {
        return Err(SpecError::RankOutOfRange { line: 0, rank, world_size: spec.world_size });
    }
    let ws = spec.world_size;
    let mut layers = Vec::new();
    for l in &spec.layers {
        if !l.ranks(ws).contains(&rank) {
            continue;
        }
        let mut l = l.clone();
        let is_root = l.comm_root(ws) == rank;
        match l.kind {
            LayerKind::Broadcast if !is_root => l.bottoms.clear(),
            LayerKind::Gather if !is_root => l.tops.clear(),
            _ => {}
        }
        layers.push(l);
    }
    let pruned = NetworkSpec { rank: Some(rank), layers, ..spec.clone() };
    let mut produced: HashSet<&str> = pruned.inputs.iter().map(|i| i.name.as_str()).collect();
    for l in &pruned.layers {
        for b in &l.bottoms {
            if !produced.contains(b.as_str()) {
                return Err(SpecError::OrphanedBlob { rank, layer: l.name.clone(), blob: b.clone() });
            }
        }
        produced.extend(l.tops.iter().map(String::as_str));
    }
    pruned.validate()?;
    Ok(pruned)
}

fn suffixed(name: &str, idx: usize) -> String {
    format!("{name}@{idx}")
}

/// Rank-local view with globally unique names: layers carried by more than
/// one rank are renamed `<layer>@<rank>` (and their tops `<blob>@<rank>`).
///
/// The names match those of [`localize`], so parameters of rank `r` line up
/// with the corresponding layers of the single-process equivalent.
pub fn replica_view(spec: &NetworkSpec, rank: usize) -> Result<NetworkSpec, SpecError> {
    let mut view = prune_for_rank(spec, rank)?;
    let ws = spec.world_size;
    let mut resolve: HashMap<String, String> =
        view.inputs.iter().map(|i| (i.name.clone(), i.name.clone())).collect();
    for l in view.layers.iter_mut() {
        for b in l.bottoms.iter_mut() {
            *b = resolve[b.as_str()].clone();
        }
        let replicated = l.ranks(ws).len() > 1;
        match l.kind {
            LayerKind::Gather => {
                for t in &l.tops {
                    resolve.insert(t.clone(), t.clone());
                }
            }
            LayerKind::Broadcast => {
                for t in l.tops.iter_mut() {
                    let renamed = suffixed(t, rank);
                    resolve.insert(t.clone(), renamed.clone());
                    *t = renamed;
                }
            }
            _ => {
                if replicated {
                    l.name = suffixed(&l.name, rank);
                }
                for t in l.tops.iter_mut() {
                    let renamed = if replicated { suffixed(t, rank) } else { t.clone() };
                    resolve.insert(t.clone(), renamed.clone());
                    *t = renamed;
                }
            }
        }
    }
    view.validate()?;
    Ok(view)
}

/// Single-process equivalent of a multi-rank spec.
///
/// Every rank's copy of a layer becomes its own layer (named as in
/// [`replica_view`]); a broadcast becomes one `Identity` per group rank reading
/// the root's blob, and a gather becomes one `Identity` per group rank feeding
/// the corresponding top. Group members appear in ascending rank order, so
/// gradient contributions are summed in the same order as the distributed
/// runtime sums them.
pub fn localize(spec: &NetworkSpec) -> Result<NetworkSpec, SpecError> {
    let ws = spec.world_size;
    let mut resolve: HashMap<(usize, String), String> = HashMap::new();
    for r in 0..ws {
        for i in &spec.inputs {
            resolve.insert((r, i.name.clone()), i.name.clone());
        }
    }
    let lookup = |resolve: &HashMap<(usize, String), String>, r: usize, blob: &str, layer: &LayerSpec| {
        resolve
            .get(&(r, blob.to_string()))
            .cloned()
            .ok_or_else(|| SpecError::OrphanedBlob { rank: r, layer: layer.name.clone(), blob: blob.into() })
    };
    let mut layers = Vec::new();
    for l in &spec.layers {
        let group: Vec<usize> = l.ranks(ws).into_iter().collect();
        let root = l.comm_root(ws);
        let plain = |name: String| {
            let mut out = LayerSpec::new(name, LayerKind::Identity);
            out.line = l.line;
            out
        };
        match l.kind {
            LayerKind::Broadcast => {
                let src = lookup(&resolve, root, &l.bottoms[0], l)?;
                for &r in &group {
                    let top = suffixed(&l.tops[0], r);
                    layers.push(plain(suffixed(&l.name, r)).bottom(src.clone()).top(top.clone()));
                    resolve.insert((r, l.tops[0].clone()), top);
                }
            }
            LayerKind::Gather => {
                for (i, &r) in group.iter().enumerate() {
                    let src = lookup(&resolve, r, &l.bottoms[0], l)?;
                    layers.push(plain(suffixed(&l.name, r)).bottom(src).top(l.tops[i].clone()));
                    resolve.insert((root, l.tops[i].clone()), l.tops[i].clone());
                }
            }
            _ => {
                let replicated = group.len() > 1;
                for &r in &group {
                    let mut copy = l.clone();
                    copy.include_ranks = None;
                    copy.exclude_ranks = BTreeSet::new();
                    copy.mpi_root = None;
                    if replicated {
                        copy.name = suffixed(&l.name, r);
                    }
                    copy.bottoms = l.bottoms.iter().map(|b| lookup(&resolve, r, b, l)).collect::<Result<_, _>>()?;
                    copy.tops = l
                        .tops
                        .iter()
                        .map(|t| {
                            let renamed = if replicated { suffixed(t, r) } else { t.clone() };
                            resolve.insert((r, t.clone()), renamed.clone());
                            renamed
                        })
                        .collect();
                    layers.push(copy);
                }
            }
        }
    }
    let local = NetworkSpec { world_size: 1, rank: None, layers, ..spec.clone() };
    local.validate()?;
    Ok(local)
}

/// Where a TreeNet branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitPoint {
    /// Nothing shared: a classical ensemble of independent copies.
    None,
    /// Everything shared: a single model.
    All,
    /// Layers up to and including the named parameterized layer are shared.
    At(String),
}

impl SplitPoint {
    pub fn parse(s: &str) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "none" | "ensemble" => Self::None,
            "all" | "single" => Self::All,
            _ => Self::At(s.to_string()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::All => "all".into(),
            Self::At(s) => s.clone(),
        }
    }
}

/// Multi-member losses read every member's scores and are never replicated.
fn is_ensemble_loss(kind: LayerKind) -> bool {
    matches!(kind, LayerKind::Loss(m) if m != LossMode::IndependentCe)
}

/// Builds a TreeNet: layers downstream of the split point are copied once
/// per member (`<layer>@<m>`, tops `<blob>@<m>`) and every copy reads the
/// shared blob. Ensemble losses stay single and receive all members' scores.
///
/// Applying it again to a branch layer of the result nests the tree.
pub fn expand_treenet(base: &NetworkSpec, members: usize, split: &SplitPoint) -> Result<NetworkSpec, SpecError> {
    if members == 0 {
        return Err(SpecError::InvalidValue { line: 0, field: "members".into(), value: "0".into() });
    }
    if base.world_size > 1 || base.layers.iter().any(|l| l.kind.is_comm()) {
        return Err(SpecError::NotAChain("TreeNet expansion works on single-process specs".into()));
    }
    let roots: HashSet<String> = match split {
        SplitPoint::All => {
            let mut spec = base.clone();
            spec.members = Some(spec.member_outputs().len().max(1));
            spec.split_point = Some(split.label());
            spec.validate()?;
            return Ok(spec);
        }
        SplitPoint::None => base.inputs.iter().map(|i| i.name.clone()).collect(),
        SplitPoint::At(name) => {
            let layer = base.layer(name).ok_or_else(|| SpecError::UnknownSplitPoint(name.clone()))?;
            if !layer.kind.is_parameterized() {
                return Err(SpecError::SplitNotParameterized(name.clone()));
            }
            layer.tops.iter().cloned().collect()
        }
    };
    // Blobs and layers downstream of the split.
    let mut tainted = roots;
    let mut downstream = HashSet::new();
    for l in &base.layers {
        if l.bottoms.iter().any(|b| tainted.contains(b)) {
            downstream.insert(l.name.clone());
            tainted.extend(l.tops.iter().cloned());
        }
    }
    let replicated = |l: &LayerSpec| downstream.contains(&l.name) && !is_ensemble_loss(l.kind);
    let produced_by_replica: HashSet<String> =
        base.layers.iter().filter(|l| replicated(l)).flat_map(|l| l.tops.iter().cloned()).collect();

    let mut layers: Vec<LayerSpec> =
        base.layers.iter().filter(|l| !replicated(l) && !is_ensemble_loss(l.kind)).cloned().collect();
    for m in 0..members {
        for l in base.layers.iter().filter(|l| replicated(l)) {
            let mut copy = l.clone();
            copy.name = suffixed(&l.name, m);
            copy.bottoms = l
                .bottoms
                .iter()
                .map(|b| if produced_by_replica.contains(b) { suffixed(b, m) } else { b.clone() })
                .collect();
            copy.tops = l.tops.iter().map(|t| suffixed(t, m)).collect();
            layers.push(copy);
        }
    }
    for l in base.layers.iter().filter(|l| is_ensemble_loss(l.kind)) {
        let mut copy = l.clone();
        copy.bottoms = l
            .bottoms
            .iter()
            .flat_map(|b| {
                if produced_by_replica.contains(b) {
                    (0..members).map(|m| suffixed(b, m)).collect::<Vec<_>>()
                } else {
                    vec![b.clone()]
                }
            })
            .collect();
        layers.push(copy);
    }
    let mut spec = NetworkSpec { layers, ..base.clone() };
    spec.members = Some(spec.member_outputs().len().max(1));
    spec.split_point = Some(split.label());
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_spec;

    fn appendix() -> NetworkSpec {
        parse_spec(crate::netspec::parse::tests::APPENDIX_STYLE).unwrap()
    }

    fn five_conv_chain() -> NetworkSpec {
        let mut text = String::from("input { name: data shape: 1 shape: 8 shape: 8 }\n");
        let mut prev = "data".to_string();
        for i in 1..=5 {
            text += &format!(
                "layer {{ name: conv{i} type: Conv2D bottom: {prev} top: conv{i} num_output: 2 kernel_size: 3 pad: 1 }}\n\
                 layer {{ name: relu{i} type: ReLU bottom: conv{i} top: relu{i} }}\n"
            );
            prev = format!("relu{i}");
        }
        text += &format!("layer {{ name: fc type: Dense bottom: {prev} top: fc num_output: 3 }}\n");
        text += "layer { name: loss type: SoftmaxLoss bottom: fc }\n";
        parse_spec(&text).unwrap()
    }

    #[test]
    fn root_keeps_everything_and_workers_start_at_broadcast() {
        let spec = appendix();
        let r0 = prune_for_rank(&spec, 0).unwrap();
        assert_eq!(r0.layers.len(), spec.layers.len());
        let r1 = prune_for_rank(&spec, 1).unwrap();
        assert_eq!(r1.layers[0].name, "broad");
        assert!(r1.layers[0].bottoms.is_empty());
        let gather = r1.layer("ExampleLayer").unwrap();
        assert!(gather.tops.is_empty());
        assert!(r1.layer("loss").is_none());
        assert!(r1.layer("conv1").is_none());
    }

    #[test]
    fn unannotated_spec_prunes_to_itself() {
        let spec = five_conv_chain();
        let pruned = prune_for_rank(&spec, 0).unwrap();
        assert_eq!(pruned.layers, spec.layers);
    }

    #[test]
    fn pruning_covers_each_layer_on_its_group() {
        let spec = appendix();
        let views: Vec<_> = (0..3).map(|r| prune_for_rank(&spec, r).unwrap()).collect();
        for l in &spec.layers {
            let holders: BTreeSet<usize> =
                (0..3).filter(|&r| views[r].layer(&l.name).is_some()).collect();
            assert_eq!(holders, l.ranks(3), "layer {}", l.name);
        }
    }

    #[test]
    fn orphaning_a_loss_blob_is_an_error() {
        let text = "input { name: data shape: 2 }\n\
                    layer { name: fc type: Dense bottom: data top: fc num_output: 2 include { mpi_rank: 1 } }\n\
                    layer { name: loss type: SoftmaxLoss bottom: fc include { mpi_rank: 0 } }";
        assert!(matches!(parse_spec(text), Err(SpecError::OrphanedBlob { rank: 0, .. })));
    }

    #[test]
    fn replica_view_names_match_localized_spec() {
        let spec = appendix();
        let local = localize(&spec).unwrap();
        assert_eq!(local.world_size, 1);
        for r in 0..3 {
            let view = replica_view(&spec, r).unwrap();
            for l in view.layers.iter().filter(|l| l.kind.is_parameterized()) {
                assert!(local.layer(&l.name).is_some(), "{} missing from local spec", l.name);
            }
        }
        assert!(local.layer("ip1@2").is_some());
        assert!(local.layer("conv1").is_some());
        assert_eq!(local.member_outputs(), vec!["ip2_0", "ip2_1", "ip2_2"]);
        let broad: Vec<_> = local.layers.iter().filter(|l| l.name.starts_with("broad@")).collect();
        assert_eq!(broad.len(), 3);
        assert!(broad.iter().all(|l| l.bottoms == ["pool2"]));
    }

    #[test]
    fn split_at_conv2_shares_prefix() {
        let spec = expand_treenet(&five_conv_chain(), 5, &SplitPoint::At("conv2".into())).unwrap();
        for shared in ["conv1", "relu1", "conv2"] {
            assert!(spec.layer(shared).is_some());
            assert!(spec.layer(&format!("{shared}@0")).is_none());
        }
        for m in 0..5 {
            for rep in ["relu2", "conv3", "conv5", "fc", "loss"] {
                assert!(spec.layer(&format!("{rep}@{m}")).is_some(), "{rep}@{m}");
            }
        }
        assert_eq!(spec.layer("relu2@3").unwrap().bottoms, vec!["conv2"]);
        assert_eq!(spec.ensemble_size(), 5);
        assert_eq!(spec.member_outputs(), (0..5).map(|m| format!("fc@{m}")).collect::<Vec<_>>());
    }

    #[test]
    fn split_none_copies_everything() {
        let spec = expand_treenet(&five_conv_chain(), 4, &SplitPoint::None).unwrap();
        assert_eq!(spec.layers.len(), 4 * five_conv_chain().layers.len());
        assert!(spec.layer("conv1@3").unwrap().bottoms == ["data"]);
    }

    #[test]
    fn split_at_last_parameterized_layer_duplicates_only_the_loss() {
        let base = five_conv_chain();
        let spec = expand_treenet(&base, 2, &SplitPoint::At("conv5".into())).unwrap();
        assert!(spec.layer("conv5").is_some());
        assert!(spec.layer("relu5@1").is_some());
        assert!(spec.layer("fc@1").is_some());
    }

    #[test]
    fn ensemble_losses_collect_all_branches() {
        let text = "input { name: data shape: 3 }\n\
                    layer { name: fc1 type: Dense bottom: data top: fc1 num_output: 4 }\n\
                    layer { name: fc2 type: Dense bottom: fc1 top: fc2 num_output: 2 }\n\
                    layer { name: loss type: MCLLoss bottom: fc2 k: 1 }";
        let spec = expand_treenet(&parse_spec(text).unwrap(), 3, &SplitPoint::At("fc1".into())).unwrap();
        assert_eq!(spec.layer("loss").unwrap().bottoms, vec!["fc2@0", "fc2@1", "fc2@2"]);
    }

    #[test]
    fn nested_expansion_builds_a_tree() {
        let base = five_conv_chain();
        let once = expand_treenet(&base, 2, &SplitPoint::At("conv1".into())).unwrap();
        let twice = expand_treenet(&once, 2, &SplitPoint::At("conv3@0".into())).unwrap();
        assert!(twice.layer("conv4@0@1").is_some());
        assert!(twice.layer("conv4@1").is_some());
        assert_eq!(twice.ensemble_size(), 3);
    }

    #[test]
    fn split_errors() {
        let base = five_conv_chain();
        assert!(matches!(
            expand_treenet(&base, 2, &SplitPoint::At("conv9".into())),
            Err(SpecError::UnknownSplitPoint(_))
        ));
        assert!(matches!(
            expand_treenet(&base, 2, &SplitPoint::At("relu1".into())),
            Err(SpecError::SplitNotParameterized(_))
        ));
    }
}
