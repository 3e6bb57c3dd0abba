//! Declarative network/ensemble specifications.
//!
//! A spec is an ordered list of layer blocks plus a few network-level fields.
//! The text grammar is
//!
//! ```text
//! spec   := item*
//! item   := key ':' value | key '{' item* '}'
//! ```
//!
//! with `#` comments and free whitespace. Recognised top-level items are
//! `name`, `world_size`, `members`, `split_point`, `rank`, repeated
//! `input { name: <id> shape: <int>* }` blocks, and repeated `layer { .. }`
//! blocks:
//!
//! ```text
//! layer {
//!   name: broad
//!   type: MPIBroadcast
//!   bottom: pool2
//!   top: pool2_b
//!   mpi_param { root: 0 }
//!   include { mpi_rank: 0 mpi_rank: 1 mpi_rank: 2 }
//! }
//! ```
//!
//! Any other scalar key inside a layer is a hyperparameter (`num_output`,
//! `kernel_size`, `stride`, `pad`, `k`, `mix`). Loss layers take member score
//! blobs as bottoms; labels are supplied with each batch and are never named.

pub mod builders;
mod parse;
mod transform;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use parse::parse_spec;
pub use transform::{expand_treenet, localize, prune_for_rank, replica_view, SplitPoint};

use crate::error::SpecError;
use crate::losses::LossMode;
use crate::tensor::LayerPrimitive;

/// Source line of a parsed item. Never participates in equality, so a spec
/// compares equal to its re-parsed serialization.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SourceLine(pub usize);

impl PartialEq for SourceLine {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for SourceLine {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv2d,
    MaxPool,
    Relu,
    Softmax,
    Average,
    Concat,
    Identity,
    Broadcast,
    Gather,
    Loss(LossMode),
}

impl LayerKind {
    pub fn canonical_name(&self) -> &'static str {
        match self {
            Self::Dense => "Dense",
            Self::Conv2d => "Conv2D",
            Self::MaxPool => "MaxPool",
            Self::Relu => "ReLU",
            Self::Softmax => "Softmax",
            Self::Average => "Average",
            Self::Concat => "Concat",
            Self::Identity => "Identity",
            Self::Broadcast => "MPIBroadcast",
            Self::Gather => "MPIGather",
            Self::Loss(LossMode::IndependentCe) => "SoftmaxLoss",
            Self::Loss(LossMode::ScoreAveraged) => "ScoreAveragedLoss",
            Self::Loss(LossMode::ProbAveraged) => "ProbAveragedLoss",
            Self::Loss(LossMode::Mcl) => "MCLLoss",
            Self::Loss(LossMode::MclPlusCe) => "MCLCELoss",
        }
    }

    pub fn is_comm(&self) -> bool {
        matches!(self, Self::Broadcast | Self::Gather)
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, Self::Loss(_))
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Self::Dense | Self::Conv2d)
    }
}

impl FromStr for LayerKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "Dense" | "InnerProduct" => Self::Dense,
            "Conv2D" | "Convolution" => Self::Conv2d,
            "MaxPool" | "Pooling" => Self::MaxPool,
            "ReLU" => Self::Relu,
            "Softmax" => Self::Softmax,
            "Average" => Self::Average,
            "Concat" => Self::Concat,
            "Identity" | "Split" => Self::Identity,
            "MPIBroadcast" | "Broadcast" => Self::Broadcast,
            "MPIGather" | "Gather" => Self::Gather,
            "SoftmaxLoss" | "SoftmaxWithLoss" => Self::Loss(LossMode::IndependentCe),
            "ScoreAveragedLoss" => Self::Loss(LossMode::ScoreAveraged),
            "ProbAveragedLoss" => Self::Loss(LossMode::ProbAveraged),
            "MCLLoss" => Self::Loss(LossMode::Mcl),
            "MCLCELoss" => Self::Loss(LossMode::MclPlusCe),
            _ => return Err(()),
        })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    /// Per-example shape.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub bottoms: Vec<String>,
    pub tops: Vec<String>,
    pub params: BTreeMap<String, String>,
    pub mpi_root: Option<usize>,
    /// `Some` when an `include` block is present.
    pub include_ranks: Option<BTreeSet<usize>>,
    pub exclude_ranks: BTreeSet<usize>,
    pub line: SourceLine,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            bottoms: Vec::new(),
            tops: Vec::new(),
            params: BTreeMap::new(),
            mpi_root: None,
            include_ranks: None,
            exclude_ranks: BTreeSet::new(),
            line: SourceLine::default(),
        }
    }

    pub fn bottom(mut self, blob: impl Into<String>) -> Self {
        self.bottoms.push(blob.into());
        self
    }

    pub fn top(mut self, blob: impl Into<String>) -> Self {
        self.tops.push(blob.into());
        self
    }

    pub fn param(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.params.insert(key.into(), value.to_string());
        self
    }

    pub fn include(mut self, ranks: impl IntoIterator<Item = usize>) -> Self {
        self.include_ranks = Some(ranks.into_iter().collect());
        self
    }

    pub fn root(mut self, rank: usize) -> Self {
        self.mpi_root = Some(rank);
        self
    }

    /// Ranks that carry this layer, ascending. Default is every rank.
    pub fn ranks(&self, world_size: usize) -> BTreeSet<usize> {
        let base: BTreeSet<usize> = match &self.include_ranks {
            Some(set) => set.clone(),
            None => (0..world_size).collect(),
        };
        base.difference(&self.exclude_ranks).copied().collect()
    }

    /// Root of a communication layer: `mpi_param { root }` or the lowest rank
    /// of its group.
    pub fn comm_root(&self, world_size: usize) -> usize {
        self.mpi_root
            .or_else(|| self.ranks(world_size).into_iter().next())
            .unwrap_or(0)
    }

    fn usize_param(&self, key: &str) -> Result<Option<usize>, SpecError> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<usize>().map(Some).map_err(|_| SpecError::InvalidValue {
                line: self.line.0,
                field: key.into(),
                value: v.clone(),
            }),
        }
    }

    fn required(&self, key: &str) -> Result<usize, SpecError> {
        self.usize_param(key)?.ok_or_else(|| SpecError::MissingField {
            line: self.line.0,
            layer: self.name.clone(),
            field: key.into(),
        })
    }

    fn positive(&self, key: &str, value: usize) -> Result<usize, SpecError> {
        if value == 0 {
            Err(SpecError::InvalidValue { line: self.line.0, field: key.into(), value: "0".into() })
        } else {
            Ok(value)
        }
    }

    pub fn f64_param(&self, key: &str) -> Result<Option<f64>, SpecError> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<f64>().map(Some).map_err(|_| SpecError::InvalidValue {
                line: self.line.0,
                field: key.into(),
                value: v.clone(),
            }),
        }
    }

    pub fn k_param(&self) -> Result<Option<usize>, SpecError> {
        self.usize_param("k")
    }

    /// Compute primitive for non-communication, non-loss layers.
    pub fn primitive(&self) -> Result<Option<LayerPrimitive>, SpecError> {
        Ok(Some(match self.kind {
            LayerKind::Dense => {
                LayerPrimitive::Dense { outputs: self.positive("num_output", self.required("num_output")?)? }
            }
            LayerKind::Conv2d => LayerPrimitive::Conv2d {
                outputs: self.positive("num_output", self.required("num_output")?)?,
                kernel: self.positive("kernel_size", self.required("kernel_size")?)?,
                stride: self.positive("stride", self.usize_param("stride")?.unwrap_or(1))?,
                pad: self.usize_param("pad")?.unwrap_or(0),
            },
            LayerKind::MaxPool => LayerPrimitive::MaxPool {
                kernel: self.positive("kernel_size", self.required("kernel_size")?)?,
                stride: self.positive("stride", self.usize_param("stride")?.unwrap_or(1))?,
            },
            LayerKind::Relu => LayerPrimitive::Relu,
            LayerKind::Softmax => LayerPrimitive::Softmax,
            LayerKind::Average => LayerPrimitive::Average,
            LayerKind::Concat => LayerPrimitive::Concat,
            LayerKind::Identity => LayerPrimitive::Identity,
            LayerKind::Broadcast | LayerKind::Gather | LayerKind::Loss(_) => return Ok(None),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: Option<String>,
    pub inputs: Vec<InputSpec>,
    pub world_size: usize,
    /// Declared ensemble size; defaults to the number of member outputs.
    pub members: Option<usize>,
    pub split_point: Option<String>,
    /// Set on specs produced by [`prune_for_rank`]: the rank this view is for.
    pub rank: Option<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(inputs: Vec<InputSpec>, layers: Vec<LayerSpec>) -> Result<Self, SpecError> {
        let world_size = infer_world_size(&layers);
        let spec = Self { name: None, inputs, world_size, members: None, split_point: None, rank: None, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Score blobs feeding the loss layers, in layer order. These are the
    /// ensemble members.
    pub fn member_outputs(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_loss())
            .flat_map(|l| l.bottoms.iter().cloned())
            .collect()
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.unwrap_or_else(|| self.member_outputs().len().max(1))
    }

    /// The loss mode shared by all loss layers, `IndependentCe` when none.
    pub fn loss_mode(&self) -> Result<LossMode, SpecError> {
        let mut mode: Option<(LossMode, &str)> = None;
        for l in &self.layers {
            if let LayerKind::Loss(m) = l.kind {
                match mode {
                    Some((prev, _)) if prev != m => {
                        return Err(SpecError::MixedLossModes(
                            LayerKind::Loss(prev).to_string(),
                            l.kind.to_string(),
                        ))
                    }
                    _ => mode = Some((m, &l.name)),
                }
            }
        }
        Ok(mode.map(|(m, _)| m).unwrap_or(LossMode::IndependentCe))
    }

    pub fn to_text(&self) -> String {
        parse::serialize(self)
    }

    /// Checks every structural invariant; also prunes for each rank when the
    /// spec is global so that per-rank dataflow is verified.
    pub fn validate(&self) -> Result<(), SpecError> {
        let mut names = HashMap::new();
        for l in &self.layers {
            if names.insert(l.name.as_str(), ()).is_some() {
                return Err(SpecError::DuplicateName { line: l.line.0, name: l.name.clone() });
            }
        }
        for l in &self.layers {
            self.check_layer(l)?;
        }
        self.check_dataflow()?;
        if let Some(split) = self.split_point.as_ref().filter(|_| self.rank.is_none()) {
            if !matches!(split.as_str(), "none" | "all") {
                match self.layer(split) {
                    None => return Err(SpecError::UnknownSplitPoint(split.clone())),
                    Some(l) if !l.kind.is_parameterized() => {
                        return Err(SpecError::SplitNotParameterized(split.clone()))
                    }
                    _ => {}
                }
            }
        }
        self.loss_mode()?;
        if self.rank.is_none() && self.world_size > 1 {
            for r in 0..self.world_size {
                prune_for_rank(self, r)?;
            }
        }
        Ok(())
    }

    fn check_layer(&self, l: &LayerSpec) -> Result<(), SpecError> {
        let line = l.line.0;
        for &r in l.include_ranks.iter().flatten().chain(&l.exclude_ranks).chain(&l.mpi_root) {
            if r >= self.world_size {
                return Err(SpecError::RankOutOfRange { line, rank: r, world_size: self.world_size });
            }
        }
        let group = l.ranks(self.world_size);
        if group.is_empty() {
            return Err(SpecError::EmptyGroup { line, layer: l.name.clone() });
        }
        let arity = |message: String| SpecError::Arity { line, layer: l.name.clone(), message };
        match l.kind {
            LayerKind::Broadcast | LayerKind::Gather => {
                let root = l.comm_root(self.world_size);
                if !group.contains(&root) {
                    return Err(SpecError::RootNotInGroup { line, layer: l.name.clone(), root });
                }
                let is_root = self.rank.is_none_or(|r| r == root);
                if l.kind == LayerKind::Broadcast {
                    let want_bottoms = usize::from(is_root);
                    if l.bottoms.len() != want_bottoms || l.tops.len() != 1 {
                        return Err(SpecError::BroadcastArity {
                            line,
                            layer: l.name.clone(),
                            bottoms: l.bottoms.len(),
                            tops: l.tops.len(),
                        });
                    }
                } else {
                    if l.bottoms.len() != 1 {
                        return Err(arity(format!("gather takes exactly 1 bottom, found {}", l.bottoms.len())));
                    }
                    let want_tops = if is_root { group.len() } else { 0 };
                    if l.tops.len() != want_tops {
                        return Err(SpecError::GatherArity {
                            line,
                            layer: l.name.clone(),
                            tops: l.tops.len(),
                            group: want_tops,
                        });
                    }
                }
            }
            LayerKind::Loss(_) => {
                if l.bottoms.is_empty() || !l.tops.is_empty() {
                    return Err(arity("loss layers take one or more score bottoms and no tops".into()));
                }
            }
            LayerKind::Average | LayerKind::Concat => {
                if l.bottoms.is_empty() || l.tops.len() != 1 {
                    return Err(arity("expects one or more bottoms and exactly 1 top".into()));
                }
            }
            _ => {
                if l.bottoms.len() != 1 || l.tops.len() != 1 {
                    return Err(arity(format!(
                        "expects exactly 1 bottom and 1 top, found {} and {}",
                        l.bottoms.len(),
                        l.tops.len()
                    )));
                }
            }
        }
        if l.kind.is_loss() {
            if let Some(k) = l.k_param()? {
                if k == 0 {
                    return Err(SpecError::InvalidValue { line, field: "k".into(), value: "0".into() });
                }
            }
            l.f64_param("mix")?;
        }
        l.primitive()?;
        Ok(())
    }

    fn check_dataflow(&self) -> Result<(), SpecError> {
        let mut produced: BTreeSet<&str> = self.inputs.iter().map(|i| i.name.as_str()).collect();
        for l in &self.layers {
            for b in &l.bottoms {
                if !produced.contains(b.as_str()) {
                    return Err(SpecError::DanglingBlob { line: l.line.0, layer: l.name.clone(), blob: b.clone() });
                }
            }
            for t in &l.tops {
                if !produced.insert(t.as_str()) {
                    return Err(SpecError::DuplicateBlob { line: l.line.0, blob: t.clone() });
                }
            }
        }
        Ok(())
    }
}

/// One past the largest rank mentioned anywhere, or 1.
fn infer_world_size(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .flat_map(|l| l.include_ranks.iter().flatten().chain(&l.exclude_ranks).chain(&l.mpi_root))
        .max()
        .map_or(1, |&r| r + 1)
}
