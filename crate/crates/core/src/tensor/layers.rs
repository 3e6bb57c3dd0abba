use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// One node type of the fixed primitive set.
///
/// Shapes passed to [`LayerPrimitive::output_shape`] and
/// [`LayerPrimitive::param_shapes`] are per-example (no batch axis); tensors
/// passed to `forward`/`backward` carry the batch on axis 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerPrimitive {
    /// Fully connected; the input is flattened per example.
    /// Params: weight `[outputs, fan_in]`, bias `[outputs]`.
    Dense { outputs: usize },
    /// Params: weight `[outputs, channels, kernel, kernel]`, bias `[outputs]`.
    Conv2d { outputs: usize, kernel: usize, stride: usize, pad: usize },
    MaxPool { kernel: usize, stride: usize },
    Relu,
    /// Softmax over the last axis.
    Softmax,
    /// Elementwise mean of N equally shaped inputs.
    Average,
    /// Concatenation along the first per-example axis.
    Concat,
    Identity,
}

impl LayerPrimitive {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "Dense",
            Self::Conv2d { .. } => "Conv2D",
            Self::MaxPool { .. } => "MaxPool",
            Self::Relu => "ReLU",
            Self::Softmax => "Softmax",
            Self::Average => "Average",
            Self::Concat => "Concat",
            Self::Identity => "Identity",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Self::Dense { .. } | Self::Conv2d { .. })
    }

    fn accepts_many(&self) -> bool {
        matches!(self, Self::Average | Self::Concat)
    }

    fn bad_shape(&self, message: impl Into<String>) -> Error {
        Error::InvalidShape { layer: self.kind_name().into(), message: message.into() }
    }

    /// Per-example output shape for the given per-example input shapes.
    pub fn output_shape(&self, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
        if inputs.is_empty() {
            return Err(self.bad_shape("needs at least one input"));
        }
        if inputs.len() > 1 && !self.accepts_many() {
            return Err(self.bad_shape(format!("takes one input, got {}", inputs.len())));
        }
        let first = &inputs[0];
        match *self {
            Self::Dense { outputs } => Ok(vec![outputs]),
            Self::Conv2d { outputs, kernel, stride, pad } => {
                let (_, h, w) = chw(self, first)?;
                let ho = window_out(h + 2 * pad, kernel, stride).ok_or_else(|| {
                    self.bad_shape(format!("kernel {kernel} does not fit input {first:?} with pad {pad}"))
                })?;
                let wo = window_out(w + 2 * pad, kernel, stride).ok_or_else(|| {
                    self.bad_shape(format!("kernel {kernel} does not fit input {first:?} with pad {pad}"))
                })?;
                Ok(vec![outputs, ho, wo])
            }
            Self::MaxPool { kernel, stride } => {
                let (c, h, w) = chw(self, first)?;
                let ho = window_out(h, kernel, stride)
                    .ok_or_else(|| self.bad_shape(format!("pool {kernel} does not fit input {first:?}")))?;
                let wo = window_out(w, kernel, stride)
                    .ok_or_else(|| self.bad_shape(format!("pool {kernel} does not fit input {first:?}")))?;
                Ok(vec![c, ho, wo])
            }
            Self::Relu | Self::Softmax | Self::Identity => Ok(first.clone()),
            Self::Average => {
                if let Some(other) = inputs.iter().find(|s| *s != first) {
                    return Err(Error::ShapeMismatch {
                        layer: self.kind_name().into(),
                        expected: first.clone(),
                        actual: other.clone(),
                    });
                }
                Ok(first.clone())
            }
            Self::Concat => {
                let mut out = first.clone();
                if out.is_empty() {
                    return Err(self.bad_shape("scalar inputs cannot be concatenated"));
                }
                for s in &inputs[1..] {
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(Error::ShapeMismatch {
                            layer: self.kind_name().into(),
                            expected: first.clone(),
                            actual: s.clone(),
                        });
                    }
                    out[0] += s[0];
                }
                Ok(out)
            }
        }
    }

    /// Parameter tensor shapes for a per-example input shape.
    pub fn param_shapes(&self, inputs: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        match *self {
            Self::Dense { outputs } => {
                let fan_in: usize = inputs
                    .first()
                    .ok_or_else(|| self.bad_shape("needs an input"))?
                    .iter()
                    .product();
                Ok(vec![vec![outputs, fan_in], vec![outputs]])
            }
            Self::Conv2d { outputs, kernel, .. } => {
                let (c, _, _) = chw(self, inputs.first().ok_or_else(|| self.bad_shape("needs an input"))?)?;
                Ok(vec![vec![outputs, c, kernel, kernel], vec![outputs]])
            }
            _ => Ok(Vec::new()),
        }
    }

    fn check_inputs(&self, inputs: &[&Tensor], params: &[Tensor]) -> Result<Vec<usize>> {
        let per_example: Vec<Vec<usize>> = inputs
            .iter()
            .map(|t| {
                if t.shape().is_empty() {
                    Err(self.bad_shape("input without batch axis"))
                } else {
                    Ok(t.shape()[1..].to_vec())
                }
            })
            .collect::<Result<_>>()?;
        if let Some(t) = inputs.iter().find(|t| t.batch() != inputs[0].batch()) {
            return Err(Error::ShapeMismatch {
                layer: self.kind_name().into(),
                expected: inputs[0].shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        let out = self.output_shape(&per_example)?;
        let expected = self.param_shapes(&per_example)?;
        if expected.len() != params.len() {
            return Err(self.bad_shape(format!("expected {} parameter tensors, got {}", expected.len(), params.len())));
        }
        for (e, p) in expected.iter().zip(params) {
            if e.as_slice() != p.shape() {
                return Err(Error::ShapeMismatch {
                    layer: self.kind_name().into(),
                    expected: e.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        let mut full = vec![inputs[0].batch()];
        full.extend(out);
        Ok(full)
    }

    pub fn forward(&self, inputs: &[&Tensor], params: &[Tensor]) -> Result<Tensor> {
        let out_shape = self.check_inputs(inputs, params)?;
        let x = inputs[0];
        let out = match *self {
            Self::Dense { outputs } => dense_forward(x, &params[0], &params[1], outputs),
            Self::Conv2d { outputs, kernel, stride, pad } => {
                conv_forward(x, &params[0], &params[1], outputs, kernel, stride, pad, &out_shape)
            }
            Self::MaxPool { kernel, stride } => {
                let (values, _) = pool_forward(x, kernel, stride, &out_shape);
                values
            }
            Self::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Self::Softmax => softmax(x),
            Self::Identity => x.clone(),
            Self::Average => {
                let mut acc = inputs[0].clone();
                for t in &inputs[1..] {
                    acc.add_assign(t)?;
                }
                let n = inputs.len() as f64;
                acc.data_mut().iter_mut().for_each(|v| *v /= n);
                acc
            }
            Self::Concat => concat_forward(inputs, &out_shape),
        };
        if cfg!(debug_assertions) {
            out.check_finite(self.kind_name())?;
        }
        Ok(out)
    }

    /// Gradients of a scalar functional with respect to every input and every
    /// parameter, given its gradient `upstream` with respect to the output.
    pub fn backward(
        &self,
        inputs: &[&Tensor],
        params: &[Tensor],
        upstream: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let out_shape = self.check_inputs(inputs, params)?;
        if upstream.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: self.kind_name().into(),
                expected: out_shape,
                actual: upstream.shape().to_vec(),
            });
        }
        let x = inputs[0];
        Ok(match *self {
            Self::Dense { .. } => {
                let (dx, dw, db) = dense_backward(x, &params[0], upstream);
                (vec![dx], vec![dw, db])
            }
            Self::Conv2d { kernel, stride, pad, .. } => {
                let (dx, dw, db) = conv_backward(x, &params[0], upstream, kernel, stride, pad);
                (vec![dx], vec![dw, db])
            }
            Self::MaxPool { kernel, stride } => {
                let (_, arg) = pool_forward(x, kernel, stride, &out_shape);
                let mut dx = Tensor::zeros(x.shape());
                for (o, &src) in arg.iter().enumerate() {
                    dx.data_mut()[src] += upstream.data()[o];
                }
                (vec![dx], Vec::new())
            }
            Self::Relu => {
                let mut dx = upstream.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                (vec![dx], Vec::new())
            }
            Self::Softmax => {
                let y = softmax(x);
                let classes = *y.shape().last().unwrap_or(&1);
                let mut dx = Tensor::zeros(x.shape());
                for ((dr, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(classes)
                    .zip(y.data().chunks(classes))
                    .zip(upstream.data().chunks(classes))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..classes {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                (vec![dx], Vec::new())
            }
            Self::Identity => (vec![upstream.clone()], Vec::new()),
            Self::Average => {
                let n = inputs.len() as f64;
                let share = upstream.map(|g| g / n);
                (vec![share; inputs.len()], Vec::new())
            }
            Self::Concat => {
                let batch = x.batch();
                let mut grads: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
                let out_row = upstream.row_len();
                for b in 0..batch {
                    let up = &upstream.data()[b * out_row..(b + 1) * out_row];
                    let mut offset = 0;
                    for g in grads.iter_mut() {
                        let w = g.row_len();
                        g.row_mut(b).copy_from_slice(&up[offset..offset + w]);
                        offset += w;
                    }
                }
                (grads, Vec::new())
            }
        })
    }
}

fn window_out(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > extent {
        None
    } else {
        Some((extent - kernel) / stride + 1)
    }
}

fn chw(prim: &LayerPrimitive, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(prim.bad_shape(format!("expects a [channels, height, width] input, got {shape:?}"))),
    }
}

/// Row-wise softmax over the last axis, computed with max-subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let classes = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let classes = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, outputs: usize) -> Tensor {
    let batch = x.batch();
    let fan_in = x.row_len();
    let mut out = vec![0.0; batch * outputs];
    for n in 0..batch {
        let xr = x.row(n);
        let or = &mut out[n * outputs..(n + 1) * outputs];
        for (o, slot) in or.iter_mut().enumerate() {
            let wr = &w.data()[o * fan_in..(o + 1) * fan_in];
            let mut acc = b.data()[o];
            for (a, c) in wr.iter().zip(xr) {
                acc += a * c;
            }
            *slot = acc;
        }
    }
    Tensor { shape: vec![batch, outputs], data: out }
}

fn dense_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let batch = x.batch();
    let fan_in = x.row_len();
    let outputs = g.row_len();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[outputs]);
    for n in 0..batch {
        let xr = x.row(n);
        let gr = g.row(n);
        for (o, &go) in gr.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            db.data[o] += go;
            let wr = &w.data()[o * fan_in..(o + 1) * fan_in];
            let dwr = &mut dw.data[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                dwr[i] += go * xr[i];
            }
            let dxr = &mut dx.data[n * fan_in..(n + 1) * fan_in];
            for i in 0..fan_in {
                dxr[i] += go * wr[i];
            }
        }
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    outputs: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor {
    let (batch, channels, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..batch {
        for o in 0..outputs {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data[o];
                    for c in 0..channels {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * channels + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * channels + c) * kernel + ky) * kernel + kx;
                                acc += w.data[wi] * x.data[xi];
                            }
                        }
                    }
                    out.data[((n * outputs + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (batch, channels, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (outputs, ho, wo) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[outputs]);
    for n in 0..batch {
        for o in 0..outputs {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g.data[((n * outputs + o) * ho + oy) * wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    db.data[o] += go;
                    for c in 0..channels {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * channels + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * channels + c) * kernel + ky) * kernel + kx;
                                dw.data[wi] += go * x.data[xi];
                                dx.data[xi] += go * w.data[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Max values and, per output element, the flat input index that won.
/// Equal maxima resolve to the first index in scan order.
fn pool_forward(x: &Tensor, kernel: usize, stride: usize, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let (batch, channels, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0usize; out.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * h * wd;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * wd + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * wd + ox * stride + kx;
                            if x.data[idx] > x.data[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = ((n * channels + c) * ho + oy) * wo + ox;
                    out.data[o] = x.data[best];
                    arg[o] = best;
                }
            }
        }
    }
    (out, arg)
}

fn concat_forward(inputs: &[&Tensor], out_shape: &[usize]) -> Tensor {
    let batch = inputs[0].batch();
    let mut out = Tensor::zeros(out_shape);
    let out_row = out.row_len();
    for n in 0..batch {
        let mut offset = 0;
        for t in inputs {
            let r = t.row(n);
            out.data[n * out_row + offset..n * out_row + offset + r.len()].copy_from_slice(r);
            offset += r.len();
        }
    }
    out
}
