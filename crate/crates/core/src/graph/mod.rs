//! Executable graphs compiled from a [`NetworkSpec`].

mod checkpoint;
mod init;

use std::collections::HashMap;

use crate::dist::{Collectives, CommLayer, LocalCollectives};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};
use crate::netspec::{replica_view, LayerKind, NetworkSpec};
use crate::tensor::{softmax, LayerPrimitive, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord};
pub use init::{layer_seed, member_seed, InitPolicy, WeightInit};

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    Compute(LayerPrimitive),
    /// Root side of a broadcast: sends its input, keeps a copy as output.
    BroadcastRoot(CommLayer),
    /// Receiving side of a broadcast: no input, the received copy is output.
    BroadcastRecv(CommLayer),
    /// Root side of a gather: one output per group rank.
    GatherRoot(CommLayer),
    /// Sending side of a gather: no outputs.
    GatherSend(CommLayer),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Node {
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }
}

/// Member scores and probabilities of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub scores: Vec<Tensor>,
    pub probs: Vec<Tensor>,
}

/// A topologically ordered DAG with its parameter and gradient stores.
///
/// Forward activations are cached inside the graph until the next forward
/// pass, so `backward` always differentiates the most recent `forward`.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    spec: NetworkSpec,
    nodes: Vec<Node>,
    blob_names: Vec<String>,
    inputs: Vec<(usize, Vec<usize>)>,
    member_outputs: Vec<usize>,
    loss: LossConfig,
    cache: Option<Vec<Option<Tensor>>>,
}

/// Per-example shape of every blob of a (global or local) spec.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<HashMap<String, Vec<usize>>> {
    let mut shapes: HashMap<String, Vec<usize>> =
        spec.inputs.iter().map(|i| (i.name.clone(), i.shape.clone())).collect();
    for l in &spec.layers {
        let ins: Vec<Vec<usize>> = l.bottoms.iter().filter_map(|b| shapes.get(b).cloned()).collect();
        match l.kind {
            LayerKind::Loss(_) => {}
            LayerKind::Broadcast | LayerKind::Gather => {
                if let Some(s) = ins.first() {
                    for t in &l.tops {
                        shapes.insert(t.clone(), s.clone());
                    }
                }
            }
            _ => {
                let prim = l.primitive()?.expect("compute layer");
                let out = prim
                    .output_shape(&ins)
                    .map_err(|e| Error::InvalidShape { layer: l.name.clone(), message: e.to_string() })?;
                shapes.insert(l.tops[0].clone(), out);
            }
        }
    }
    Ok(shapes)
}

/// Loss configuration declared by the spec's loss layers.
pub fn loss_config_of(spec: &NetworkSpec) -> Result<LossConfig> {
    let mode = spec.loss_mode()?;
    let mut cfg = LossConfig::new(mode);
    if let Some(l) = spec.layers.iter().find(|l| l.kind.is_loss()) {
        if let Some(k) = l.k_param()? {
            cfg.k = k;
        }
        if let Some(mix) = l.f64_param("mix")? {
            cfg.mix = mix;
        }
        if let Some(v) = l.params.get("normalize_by_k") {
            cfg.normalize_by_k = v == "true" || v == "1";
        }
    }
    if mode.uses_assignment() {
        let m = spec.member_outputs().len();
        if cfg.k > m {
            return Err(Error::InvalidArgument(format!("k = {} exceeds {m} members", cfg.k)));
        }
    }
    Ok(cfg)
}

impl CompiledGraph {
    /// Compiles a single-process spec.
    pub fn compile(spec: &NetworkSpec, init: &InitPolicy, seed: u64) -> Result<Self> {
        Self::build(spec, spec, init, seed)
    }

    /// Compiles the view of `rank` in a multi-rank spec. Layer names follow
    /// [`replica_view`], so parameters match those of the same layers in the
    /// localized single-process spec.
    pub fn compile_for_rank(global: &NetworkSpec, rank: usize, init: &InitPolicy, seed: u64) -> Result<Self> {
        let view = replica_view(global, rank)?;
        Self::build(&view, global, init, seed)
    }

    fn build(spec: &NetworkSpec, global: &NetworkSpec, init: &InitPolicy, seed: u64) -> Result<Self> {
        spec.validate()?;
        let global_shapes = infer_shapes(global)?;
        let ws = global.world_size;
        let mut blob_names = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let intern = |name: &str, shape: Vec<usize>, names: &mut Vec<String>, shapes: &mut Vec<Vec<usize>>| {
            names.push(name.to_string());
            shapes.push(shape);
            names.len() - 1
        };
        let mut inputs = Vec::new();
        for i in &spec.inputs {
            let id = intern(&i.name, i.shape.clone(), &mut blob_names, &mut shapes);
            inputs.push((id, i.shape.clone()));
        }
        let mut nodes = Vec::new();
        let mut member_outputs = Vec::new();
        for l in &spec.layers {
            let ins: Vec<usize> = l.bottoms.iter().map(|b| blob_ids_lookup(&blob_names, b)).collect();
            let in_shapes: Vec<Vec<usize>> = ins.iter().map(|&i| shapes[i].clone()).collect();
            if l.kind.is_loss() {
                member_outputs.extend(ins);
                continue;
            }
            let (op, out_shapes, params) = if l.kind.is_comm() {
                let id = global
                    .layers
                    .iter()
                    .position(|g| g.name == l.name)
                    .ok_or_else(|| Error::InvalidArgument(format!("comm layer `{}` not in global spec", l.name)))?;
                let global_layer = &global.layers[id];
                let example_shape = global_layer
                    .tops
                    .first()
                    .and_then(|t| global_shapes.get(t))
                    .cloned()
                    .ok_or_else(|| Error::InvalidShape { layer: l.name.clone(), message: "unknown blob shape".into() })?;
                let comm = CommLayer {
                    id: u16::try_from(id).map_err(|_| Error::InvalidArgument("too many layers".into()))?,
                    name: l.name.clone(),
                    group: global_layer.ranks(ws).into_iter().collect(),
                    root: global_layer.comm_root(ws),
                    example_shape: example_shape.clone(),
                };
                let outs = vec![example_shape; l.tops.len()];
                let op = match (l.kind, l.bottoms.is_empty(), l.tops.is_empty()) {
                    (LayerKind::Broadcast, false, _) => NodeOp::BroadcastRoot(comm),
                    (LayerKind::Broadcast, true, _) => NodeOp::BroadcastRecv(comm),
                    (_, _, false) => NodeOp::GatherRoot(comm),
                    _ => NodeOp::GatherSend(comm),
                };
                (op, outs, Vec::new())
            } else {
                let prim = l.primitive()?.expect("compute layer");
                let shape_err = |e: Error| Error::InvalidShape { layer: l.name.clone(), message: e.to_string() };
                let out = prim.output_shape(&in_shapes).map_err(shape_err)?;
                let pshapes = prim.param_shapes(&in_shapes).map_err(shape_err)?;
                let params = init.init_params(&l.name, &pshapes, seed);
                (NodeOp::Compute(prim), vec![out], params)
            };
            let outputs =
                l.tops.iter().zip(out_shapes).map(|(t, s)| intern(t, s, &mut blob_names, &mut shapes)).collect();
            let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            nodes.push(Node { name: l.name.clone(), op, inputs: ins, outputs, params, grads });
        }
        Ok(Self { spec: spec.clone(), nodes, blob_names, inputs, member_outputs, loss: loss_config_of(spec)?, cache: None })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss
    }

    pub fn set_loss_config(&mut self, loss: LossConfig) {
        self.loss = loss;
    }

    pub fn loss_mode(&self) -> LossMode {
        self.loss.mode
    }

    /// Member score blobs available on this graph (empty on non-root ranks).
    pub fn member_output_names(&self) -> Vec<&str> {
        self.member_outputs.iter().map(|&b| self.blob_names[b].as_str()).collect()
    }

    /// Declared input blobs (zero on ranks fed only by broadcasts).
    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn num_members(&self) -> usize {
        self.member_outputs.len()
    }

    /// Stored parameter scalars. Shared layers are stored, and counted, once.
    pub fn param_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.params).map(Tensor::len).sum()
    }

    /// Parameter blocks in node order as `(layer, index, tensor)`.
    pub fn param_blocks(&self) -> impl Iterator<Item = (&str, usize, &Tensor)> {
        self.nodes.iter().flat_map(|n| n.params.iter().enumerate().map(move |(i, p)| (n.name.as_str(), i, p)))
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.nodes.iter().flat_map(|n| n.params.iter().cloned()).collect()
    }

    pub fn grads(&self) -> Vec<Tensor> {
        self.nodes.iter().flat_map(|n| n.grads.iter().cloned()).collect()
    }

    /// Parameter blocks of one layer.
    pub fn layer_params(&self, layer: &str) -> Option<&[Tensor]> {
        self.nodes.iter().find(|n| n.name == layer).map(|n| n.params.as_slice())
    }

    pub fn layer_grads(&self, layer: &str) -> Option<&[Tensor]> {
        self.nodes.iter().find(|n| n.name == layer).map(|n| n.grads.as_slice())
    }

    /// Replaces all parameters, in [`params`](Self::params) order.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut it = values.iter();
        for n in &mut self.nodes {
            for p in &mut n.params {
                let v = it.next().ok_or_else(|| Error::InvalidArgument("too few parameter blocks".into()))?;
                if v.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        layer: n.name.clone(),
                        expected: p.shape().to_vec(),
                        actual: v.shape().to_vec(),
                    });
                }
                *p = v.clone();
            }
        }
        if it.next().is_some() {
            return Err(Error::InvalidArgument("too many parameter blocks".into()));
        }
        Ok(())
    }

    /// Mutable parameter/gradient pairs in [`params`](Self::params) order.
    pub fn params_and_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.nodes.iter_mut().flat_map(|n| {
            let name = n.name.as_str();
            n.params.iter_mut().zip(n.grads.iter_mut()).map(move |(p, g)| (name, p, g))
        })
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grads.iter_mut().for_each(|g| g.fill(0.0));
        }
    }

    /// Forward pass of a graph without communication layers (or with only
    /// single-rank groups).
    pub fn forward(&mut self, batch: &Tensor) -> Result<ForwardResult> {
        self.forward_with(std::slice::from_ref(batch), &mut LocalCollectives)
    }

    /// Forward pass feeding `feeds` to the declared inputs in order.
    pub fn forward_with(&mut self, feeds: &[Tensor], comm: &mut dyn Collectives) -> Result<ForwardResult> {
        if feeds.len() != self.inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} input tensors for {} declared inputs",
                feeds.len(),
                self.inputs.len()
            )));
        }
        let mut blobs: Vec<Option<Tensor>> = vec![None; self.blob_names.len()];
        for ((id, shape), feed) in self.inputs.iter().zip(feeds) {
            if &feed.shape()[1.min(feed.shape().len())..] != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    layer: self.blob_names[*id].clone(),
                    expected: shape.clone(),
                    actual: feed.shape().get(1..).unwrap_or(&[]).to_vec(),
                });
            }
            blobs[*id] = Some(feed.clone());
        }
        for node in &self.nodes {
            let take = |i: usize| blobs[i].as_ref().ok_or(Error::MissingCache);
            match &node.op {
                NodeOp::Compute(prim) => {
                    let ins = node.inputs.iter().map(|&i| take(i)).collect::<Result<Vec<_>>>()?;
                    let out = prim.forward(&ins, &node.params).map_err(|e| rename_layer(e, &node.name))?;
                    blobs[node.outputs[0]] = Some(out);
                }
                NodeOp::BroadcastRoot(c) => {
                    let out = comm.broadcast_forward(c, Some(take(node.inputs[0])?))?;
                    blobs[node.outputs[0]] = Some(out);
                }
                NodeOp::BroadcastRecv(c) => {
                    blobs[node.outputs[0]] = Some(comm.broadcast_forward(c, None)?);
                }
                NodeOp::GatherRoot(c) => {
                    let list = comm.gather_forward(c, take(node.inputs[0])?)?.ok_or_else(|| {
                        Error::Protocol(format!("gather `{}` returned nothing on its root", c.name))
                    })?;
                    for (&o, t) in node.outputs.iter().zip(list) {
                        blobs[o] = Some(t);
                    }
                }
                NodeOp::GatherSend(c) => {
                    comm.gather_forward(c, take(node.inputs[0])?)?;
                }
            }
        }
        let scores: Vec<Tensor> = self
            .member_outputs
            .iter()
            .map(|&b| blobs[b].clone().ok_or(Error::MissingCache))
            .collect::<Result<_>>()?;
        let probs = scores.iter().map(softmax).collect();
        self.cache = Some(blobs);
        Ok(ForwardResult { scores, probs })
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Backward pass from gradients with respect to each member's scores.
    /// Parameter gradients are added to the gradient store.
    pub fn backward(&mut self, member_grads: &[Tensor]) -> Result<()> {
        self.backward_with(member_grads, &mut LocalCollectives)
    }

    pub fn backward_with(&mut self, member_grads: &[Tensor], comm: &mut dyn Collectives) -> Result<()> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        if member_grads.len() != self.member_outputs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} member gradients for {} members",
                member_grads.len(),
                self.member_outputs.len()
            )));
        }
        // Contributions per blob, tagged with the consuming node index so they
        // can be summed in ascending consumer order.
        let sink = self.nodes.len();
        let mut contrib: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); self.blob_names.len()];
        for (&b, g) in self.member_outputs.iter().zip(member_grads) {
            let value = cache[b].as_ref().ok_or(Error::MissingCache)?;
            if g.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    layer: self.blob_names[b].clone(),
                    expected: value.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            contrib[b].push((sink, g.clone()));
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &mut self.nodes[idx];
            let out_grads: Vec<Option<Tensor>> =
                node.outputs.iter().map(|&o| sum_in_order(std::mem::take(&mut contrib[o]))).collect();
            let value = |i: usize| cache[i].as_ref().ok_or(Error::MissingCache);
            let or_zeros = |g: Option<Tensor>, blob: usize| -> Result<Tensor> {
                match g {
                    Some(g) => Ok(g),
                    None => Ok(Tensor::zeros(value(blob)?.shape())),
                }
            };
            let input_grads: Vec<Tensor> = match &node.op {
                NodeOp::Compute(prim) => {
                    let Some(upstream) = out_grads.into_iter().next().flatten() else { continue };
                    let ins = node.inputs.iter().map(|&i| value(i)).collect::<Result<Vec<_>>>()?;
                    let (dx, dp) =
                        prim.backward(&ins, &node.params, &upstream).map_err(|e| rename_layer(e, &node.name))?;
                    for (acc, g) in node.grads.iter_mut().zip(&dp) {
                        acc.add_assign(g)?;
                    }
                    dx
                }
                NodeOp::BroadcastRoot(c) => {
                    let g = or_zeros(out_grads.into_iter().next().flatten(), node.outputs[0])?;
                    let sum = comm.broadcast_backward(c, g)?.ok_or_else(|| {
                        Error::Protocol(format!("broadcast `{}` returned no gradient on its root", c.name))
                    })?;
                    vec![sum]
                }
                NodeOp::BroadcastRecv(c) => {
                    let g = or_zeros(out_grads.into_iter().next().flatten(), node.outputs[0])?;
                    comm.broadcast_backward(c, g)?;
                    Vec::new()
                }
                NodeOp::GatherRoot(c) => {
                    let grads = out_grads
                        .into_iter()
                        .zip(&node.outputs)
                        .map(|(g, &o)| or_zeros(g, o))
                        .collect::<Result<Vec<_>>>()?;
                    vec![comm.gather_backward(c, Some(grads))?]
                }
                NodeOp::GatherSend(c) => vec![comm.gather_backward(c, None)?],
            };
            for (&i, g) in node.inputs.iter().zip(input_grads) {
                contrib[i].push((idx, g));
            }
        }
        Ok(())
    }

    /// Checkpoint records of every parameter block.
    pub fn checkpoint_records(&self) -> Vec<CheckpointRecord> {
        self.param_blocks()
            .map(|(name, index, t)| CheckpointRecord { layer: name.to_string(), index, tensor: t.clone() })
            .collect()
    }

    /// Loads parameters from checkpoint records, matched by layer name and
    /// block index. Every parameter block must be present.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        let by_key: HashMap<(&str, usize), &Tensor> =
            records.iter().map(|r| ((r.layer.as_str(), r.index), &r.tensor)).collect();
        for n in &mut self.nodes {
            for (i, p) in n.params.iter_mut().enumerate() {
                let t = by_key
                    .get(&(n.name.as_str(), i))
                    .ok_or_else(|| Error::Checkpoint(format!("no record for `{}` block {i}", n.name)))?;
                if t.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        layer: n.name.clone(),
                        expected: p.shape().to_vec(),
                        actual: t.shape().to_vec(),
                    });
                }
                *p = (*t).clone();
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_records())
    }

    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let records = read_checkpoint(path)?;
        self.load_records(&records)
    }
}

fn blob_ids_lookup(names: &[String], blob: &str) -> usize {
    // Specs are validated, so the most recent producer always exists.
    names.iter().rposition(|n| n == blob).expect("validated dataflow")
}

fn sum_in_order(mut parts: Vec<(usize, Tensor)>) -> Option<Tensor> {
    parts.sort_by_key(|(i, _)| *i);
    let mut it = parts.into_iter().map(|(_, t)| t);
    let mut acc = it.next()?;
    for t in it {
        acc.add_assign(&t).expect("gradient shapes agree");
    }
    Some(acc)
}

fn rename_layer(e: Error, layer: &str) -> Error {
    match e {
        Error::ShapeMismatch { expected, actual, .. } => {
            Error::ShapeMismatch { layer: layer.to_string(), expected, actual }
        }
        Error::InvalidShape { message, .. } => Error::InvalidShape { layer: layer.to_string(), message },
        other => other,
    }
}

#[cfg(test)]
mod tests;
