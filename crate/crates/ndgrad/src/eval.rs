use std::collections::{BTreeMap, HashMap};

use crate::graph::{conv_geom, Graph, NodeId, Op};
use crate::kernels;
use crate::{GradError, ParamStore, Tensor};

/// Named tensors supplied to the free inputs of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: &'a Tensor) -> Self {
        self.bind(name, value);
        self
    }

    /// Binds every tensor in the store under its own name.
    pub fn bind_store(&mut self, store: &'a ParamStore) -> &mut Self {
        for (name, t) in store.iter() {
            self.map.insert(name.to_string(), t);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Output of every node from one forward pass.
#[derive(Clone, Debug)]
pub struct Values {
    tensors: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.tensors[id.0].item()
    }

    pub fn into_tensor(mut self, id: NodeId) -> Tensor {
        self.tensors.swap_remove(id.0)
    }
}

/// Gradients keyed by trainable input name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, inserting names not yet present.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.map.values_mut() {
            g.scale_assign(k);
        }
    }

    /// Euclidean norm over all gradients.
    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl Graph {
    /// Evaluates every node. Pure: same bindings, bit-identical values.
    pub fn forward(&self, bindings: &Bindings) -> Result<Values, GradError> {
        let mut tensors: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = |id: NodeId| &tensors[id.0];
            let out = match &node.op {
                Op::Input { name, .. } => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| GradError::UnboundInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GradError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    if !t.is_finite() {
                        return Err(GradError::NonFiniteInput(name.clone()));
                    }
                    t.clone()
                }
                Op::Constant(t) => t.clone(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut out = vec![0.0; m * n];
                    kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
                    raw(&node.shape, out)
                }
                Op::Add(a, b) => zip(v(*a), v(*b), |x, y| x + y),
                Op::Sub(a, b) => zip(v(*a), v(*b), |x, y| x - y),
                Op::Mul(a, b) => zip(v(*a), v(*b), |x, y| x * y),
                Op::Div(a, b) => zip(v(*a), v(*b), |x, y| x / y),
                Op::AddRowBias(x, b) => {
                    let (tx, tb) = (v(*x), v(*b));
                    let n = tb.len();
                    let mut out = tx.data().to_vec();
                    for row in out.chunks_mut(n) {
                        for (o, bv) in row.iter_mut().zip(tb.data()) {
                            *o += bv;
                        }
                    }
                    raw(&node.shape, out)
                }
                Op::ScaleBy(x, s) => {
                    let k = v(*s).item();
                    v(*x).map(|e| e * k)
                }
                Op::Scale(x, k) => v(*x).map(|e| e * k),
                Op::Offset(x, k) => v(*x).map(|e| e + k),
                Op::Relu(x) => v(*x).map(|e| e.max(0.0)),
                Op::Sigmoid(x) => v(*x).map(sigmoid),
                Op::Exp(x) => v(*x).map(f64::exp),
                Op::Log(x) => v(*x).map(f64::ln),
                Op::Clamp { x, lo, hi } => v(*x).map(|e| e.clamp(*lo, *hi)),
                Op::Sum(x) => Tensor::scalar(v(*x).sum()),
                Op::Mean(x) => {
                    let t = v(*x);
                    Tensor::scalar(t.sum() / t.len() as f64)
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (tx, tw) = (v(*x), v(*w));
                    let geom = conv_geom(tx.shape(), tw.shape(), *stride, *pad);
                    let mut out = vec![0.0; node.shape.iter().product()];
                    kernels::conv2d_forward(
                        &geom,
                        tx.data(),
                        tw.data(),
                        b.map(|b| v(b).data()),
                        &mut out,
                    );
                    raw(&node.shape, out)
                }
                Op::GlobalAvgPool(x) => {
                    let t = v(*x);
                    let plane = t.shape()[1] * t.shape()[2];
                    let out = t
                        .data()
                        .chunks(plane)
                        .map(|c| c.iter().sum::<f64>() / plane as f64)
                        .collect();
                    raw(&node.shape, out)
                }
                Op::AvgPool { x, k } => {
                    let t = v(*x);
                    raw(&node.shape, avg_pool(t, *k))
                }
                Op::UpsampleNearest { x, factor } => {
                    let t = v(*x);
                    raw(&node.shape, upsample(t, *factor))
                }
                Op::ConcatChannels(xs) => {
                    let mut out = Vec::with_capacity(node.shape.iter().product());
                    for x in xs {
                        out.extend_from_slice(v(*x).data());
                    }
                    raw(&node.shape, out)
                }
                Op::Reshape(x) => raw(&node.shape, v(*x).data().to_vec()),
                Op::SliceCols { x, start, end } => {
                    let t = v(*x);
                    let n = t.shape()[1];
                    let out = t
                        .data()
                        .chunks(n)
                        .flat_map(|row| row[*start..*end].iter().copied())
                        .collect();
                    raw(&node.shape, out)
                }
                Op::LogSoftmax(x) => {
                    let t = v(*x);
                    let n = *t.shape().last().unwrap();
                    let mut out = t.data().to_vec();
                    for row in out.chunks_mut(n) {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
                        for e in row.iter_mut() {
                            *e -= lse;
                        }
                    }
                    raw(&node.shape, out)
                }
            };
            if !out.is_finite() {
                return Err(GradError::NonFinite {
                    node: idx,
                    op: node.op.kind(),
                });
            }
            tensors.push(out);
        }
        Ok(Values { tensors })
    }

    /// Reverse-mode gradients of a scalar node wrt every trainable input.
    ///
    /// Inputs with no path to `loss` get an all-zero gradient.
    pub fn backward(&self, values: &Values, loss: NodeId) -> Result<Gradients, GradError> {
        let loss_shape = &self
            .nodes
            .get(loss.0)
            .ok_or(GradError::UnknownNode(loss.0))?
            .shape;
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(GradError::NonScalarLoss {
                node: loss.0,
                shape: loss_shape.clone(),
            });
        }
        if values.tensors.len() != self.nodes.len() {
            return Err(GradError::StaleValues);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |id: NodeId| &values.tensors[id.0];
            let needs = |id: NodeId| self.nodes[id.0].requires_grad;
            let send = |grads: &mut Vec<Option<Tensor>>, id: NodeId, t: Tensor| {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                // Inputs keep their gradient for collection below.
                Op::Input { .. } => grads[idx] = Some(g),
                Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul_grad_a(g.data(), tb.data(), m, k, n, &mut ga);
                        send(&mut grads, *a, raw(ta.shape(), ga));
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; k * n];
                        kernels::matmul_grad_b(ta.data(), g.data(), m, k, n, &mut gb);
                        send(&mut grads, *b, raw(tb.shape(), gb));
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        send(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        send(&mut grads, *b, g.map(|e| -e));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, zip(&g, val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        send(&mut grads, *b, zip(&g, val(*a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let tb = val(*b);
                    if needs(*a) {
                        send(&mut grads, *a, zip(&g, tb, |x, y| x / y));
                    }
                    if needs(*b) {
                        let ta = val(*a);
                        let gb = Tensor::from_fn(tb.shape(), |i| {
                            let d = tb.data()[i];
                            -g.data()[i] * ta.data()[i] / (d * d)
                        });
                        send(&mut grads, *b, gb);
                    }
                }
                Op::AddRowBias(x, b) => {
                    if needs(*b) {
                        let tb = val(*b);
                        let n = tb.len();
                        let mut gb = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (acc, e) in gb.iter_mut().zip(row) {
                                *acc += e;
                            }
                        }
                        send(&mut grads, *b, raw(tb.shape(), gb));
                    }
                    if needs(*x) {
                        send(&mut grads, *x, g);
                    }
                }
                Op::ScaleBy(x, s) => {
                    let (tx, ts) = (val(*x), val(*s));
                    if needs(*s) {
                        let d: f64 = g.data().iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                        send(&mut grads, *s, Tensor::full(ts.shape(), d));
                    }
                    if needs(*x) {
                        let k = ts.item();
                        send(&mut grads, *x, g.map(|e| e * k));
                    }
                }
                Op::Scale(x, k) => send(&mut grads, *x, g.map(|e| e * k)),
                Op::Offset(x, _) => send(&mut grads, *x, g),
                Op::Relu(x) => {
                    let gx = zip(&g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    send(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = val(NodeId(idx));
                    send(&mut grads, *x, zip(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Exp(x) => {
                    let y = val(NodeId(idx));
                    send(&mut grads, *x, zip(&g, y, |gv, yv| gv * yv));
                }
                Op::Log(x) => send(&mut grads, *x, zip(&g, val(*x), |gv, xv| gv / xv)),
                Op::Clamp { x, lo, hi } => {
                    let gx = zip(&g, val(*x), |gv, xv| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    send(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(&mut grads, *x, Tensor::full(&shape, g.item()));
                }
                Op::Mean(x) => {
                    let t = val(*x);
                    let k = g.item() / t.len() as f64;
                    send(&mut grads, *x, Tensor::full(t.shape(), k));
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let geom = conv_geom(tx.shape(), tw.shape(), *stride, *pad);
                    let mut gx = needs(*x).then(|| vec![0.0; tx.len()]);
                    let mut gw = needs(*w).then(|| vec![0.0; tw.len()]);
                    let want_b = b.filter(|b| needs(*b));
                    let mut gb = want_b.map(|b| vec![0.0; val(b).len()]);
                    kernels::conv2d_backward(
                        &geom,
                        tx.data(),
                        tw.data(),
                        g.data(),
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        send(&mut grads, *x, raw(tx.shape(), gx));
                    }
                    if let Some(gw) = gw {
                        send(&mut grads, *w, raw(tw.shape(), gw));
                    }
                    if let (Some(b), Some(gb)) = (want_b, gb) {
                        send(&mut grads, b, raw(val(b).shape(), gb));
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let t = val(*x);
                    let plane = t.shape()[1] * t.shape()[2];
                    let gx = Tensor::from_fn(t.shape(), |i| g.data()[i / plane] / plane as f64);
                    send(&mut grads, *x, gx);
                }
                Op::AvgPool { x, k } => {
                    let t = val(*x);
                    let (h, w) = (t.shape()[1], t.shape()[2]);
                    let (oh, ow) = (h / k, w / k);
                    let norm = (k * k) as f64;
                    let gx = Tensor::from_fn(t.shape(), |i| {
                        let c = i / (h * w);
                        let y = (i / w) % h;
                        let xx = i % w;
                        g.data()[(c * oh + y / k) * ow + xx / k] / norm
                    });
                    send(&mut grads, *x, gx);
                }
                Op::UpsampleNearest { x, factor } => {
                    let t = val(*x);
                    // Each source pixel collects the factor x factor block it was copied to.
                    let gx = avg_pool(&g, *factor);
                    let k = (factor * factor) as f64;
                    send(&mut grads, *x, raw(t.shape(), gx.into_iter().map(|e| e * k).collect()));
                }
                Op::ConcatChannels(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let t = val(x);
                        let n = t.len();
                        if needs(x) {
                            send(&mut grads, x, raw(t.shape(), g.data()[offset..offset + n].to_vec()));
                        }
                        offset += n;
                    }
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(&mut grads, *x, raw(&shape, g.into_data()));
                }
                Op::SliceCols { x, start, end } => {
                    let t = val(*x);
                    let n = t.shape()[1];
                    let width = end - start;
                    let mut gx = vec![0.0; t.len()];
                    for (r, row) in g.data().chunks(width).enumerate() {
                        gx[r * n + start..r * n + end].copy_from_slice(row);
                    }
                    send(&mut grads, *x, raw(t.shape(), gx));
                }
                Op::LogSoftmax(x) => {
                    let y = val(NodeId(idx));
                    let n = *y.shape().last().unwrap();
                    let mut gx = g.data().to_vec();
                    for (row_g, row_y) in gx.chunks_mut(n).zip(y.data().chunks(n)) {
                        let total: f64 = row_g.iter().sum();
                        for (gv, yv) in row_g.iter_mut().zip(row_y) {
                            *gv -= yv.exp() * total;
                        }
                    }
                    send(&mut grads, *x, raw(y.shape(), gx));
                }
            }
        }

        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input {
                name,
                trainable: true,
            } = &node.op
            {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(&node.shape));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn raw(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape fixed at graph build time")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    raw(a.shape(), data)
}

fn avg_pool(t: &Tensor, k: usize) -> Vec<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            let row = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut out[(ch * oh + y / k) * ow..(ch * oh + y / k + 1) * ow];
            for (xx, v) in row.iter().enumerate() {
                dst[xx / k] += v;
            }
        }
    }
    let norm = (k * k) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

fn upsample(t: &Tensor, f: usize) -> Vec<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let src = &t.data()[(ch * h + y / f) * w..(ch * h + y / f + 1) * w];
            for xx in 0..ow {
                out.push(src[xx / f]);
            }
        }
    }
    out
}
