//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters enter through [`Graph::param`], which hands out a single node
//! per parameter no matter how many times it is requested, so weights
//! shared across unrolled iterations accumulate their gradient in one place.
//!
//! Graphs built with [`Graph::inference`] record nothing: intermediate
//! values are freed as soon as the caller drops their [`Var`] handles.

use std::sync::Arc;

use crate::error::{DanError, Result};
use crate::ops::{col2im, gemm, im2col, ConvGeom, Mat};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    PixelShuffle(usize, usize),
    GlobalAvgPool(usize),
    Softmax(usize),
    Expand(usize),
    Concat(usize, usize),
    Sum(usize),
    L1(usize, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient of a parameter, `None` when it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn leaf(&self, var: &Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(id, _)| *id == var.id).map(|(_, t)| t)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|t| t.sq_norm())
            .sum::<f64>()
            .sqrt()
    }
}

/// Records one forward pass for later differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    record: bool,
    nodes: Vec<Node>,
    next_id: usize,
    param_vars: Vec<Option<Var>>,
    macs: u64,
}

impl<'p> Graph<'p> {
    /// A recording graph that supports [`Graph::backward`].
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            record: true,
            nodes: Vec::new(),
            next_id: 0,
            param_vars: vec![None; params.len()],
            macs: 0,
        }
    }

    /// A non-recording graph for inference.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            record: false,
            ..Graph::new(params)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Multiply-accumulate operations executed so far (convolutions and
    /// dense maps only).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Number of distinct parameter nodes materialized in this graph.
    pub fn param_node_count(&self) -> usize {
        self.param_vars.iter().filter(|v| v.is_some()).count()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let value = Arc::new(value);
        let id = self.next_id;
        self.next_id += 1;
        if self.record {
            self.nodes.push(Node {
                value: Arc::clone(&value),
                op,
            });
        }
        Var { id, value }
    }

    /// A constant or input leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The unique node for parameter `id`.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = &self.param_vars[id.0] {
            return v.clone();
        }
        let value = Arc::clone(self.params.get_arc(id));
        let node_id = self.next_id;
        self.next_id += 1;
        if self.record {
            self.nodes.push(Node {
                value: Arc::clone(&value),
                op: Op::Param(id),
            });
        }
        let var = Var { id: node_id, value };
        self.param_vars[id.0] = Some(var.clone());
        var
    }

    /// 2-D cross-correlation with zero padding. `w` is `co×ci×k×k`, `b` is
    /// `co×1×1×1`.
    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = x.shape();
        let [co, wci, kh, kw] = w.shape();
        if wci != ci || kh != kw {
            return Err(DanError::Shape(format!(
                "conv weight {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            )));
        }
        if let Some(b) = b {
            if b.value().len() != co {
                return Err(DanError::Shape(format!("conv bias {:?} for {co} outputs", b.shape())));
            }
        }
        let geom = ConvGeom::new(ci, h, wd, co, kh, stride, pad).ok_or_else(|| {
            DanError::Shape(format!("conv kernel {kh} stride {stride} pad {pad} on {h}×{wd} input"))
        })?;
        let out = conv_forward(x.value(), w.value(), b.map(|b| b.value()), &geom);
        self.macs += geom.macs_per_item() * n as u64;
        Ok(self.push(
            out,
            Op::Conv {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
        ))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(DanError::Shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
        }
        let mut out = a.value().clone();
        out.add_assign(b.value());
        Ok(self.push(out, Op::Add(a.id, b.id)))
    }

    /// Elementwise product; `b` may be `N×C×1×1` and is then broadcast over
    /// the spatial dimensions of `a`.
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let [n, c, h, w] = a.shape();
        let bs = b.shape();
        let out = if bs == a.shape() {
            let data = a.value().data().iter().zip(b.value().data()).map(|(x, y)| x * y).collect();
            Tensor::from_vec(a.shape(), data)?
        } else if bs == [n, c, 1, 1] {
            let hw = h * w;
            let mut out = a.value().clone();
            for (chunk, &s) in out.data_mut().chunks_mut(hw).zip(b.value().data()) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
            out
        } else {
            return Err(DanError::Shape(format!("mul {:?} * {bs:?}", a.shape())));
        };
        Ok(self.push(out, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Var {
        let out = x.value().map(|v| v * factor);
        self.push(out, Op::Scale(x.id, factor))
    }

    pub fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let out = x.value().map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x.id, slope))
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let out = x.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x.id))
    }

    /// Depth-to-space rearrangement: `N×(C·r²)×H×W → N×C×(H·r)×(W·r)`.
    pub fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = x.shape();
        if r == 0 || c % (r * r) != 0 {
            return Err(DanError::Shape(format!("pixel shuffle ×{r} on {c} channels")));
        }
        let oc = c / (r * r);
        let src = x.value();
        let mut out = Tensor::zeros([n, oc, h * r, w * r]);
        for b in 0..n {
            for o in 0..oc {
                for i in 0..r {
                    for j in 0..r {
                        let ic = o * r * r + i * r + j;
                        for y in 0..h {
                            for xx in 0..w {
                                out.set(b, o, y * r + i, xx * r + j, src.get(b, ic, y, xx));
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::PixelShuffle(x.id, r)))
    }

    /// Mean over the spatial dimensions: `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: &Var) -> Var {
        let [n, c, h, w] = x.shape();
        let hw = (h * w) as f64;
        let data = x.value().data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        self.push(out, Op::GlobalAvgPool(x.id))
    }

    /// Softmax over the channel axis of an `N×C×1×1` tensor.
    pub fn softmax(&mut self, x: &Var) -> Result<Var> {
        let [n, c, h, w] = x.shape();
        if h != 1 || w != 1 {
            return Err(DanError::Shape(format!("softmax expects N×C×1×1, got {:?}", x.shape())));
        }
        let mut out = x.value().clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        debug_assert_eq!(out.n(), n);
        Ok(self.push(out, Op::Softmax(x.id)))
    }

    /// Broadcasts an `N×C×1×1` tensor to `N×C×H×W`.
    pub fn expand(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, xh, xw] = x.shape();
        if xh != 1 || xw != 1 {
            return Err(DanError::Shape(format!("expand expects N×C×1×1, got {:?}", x.shape())));
        }
        let mut out = Tensor::zeros([n, c, h, w]);
        for (chunk, &v) in out.data_mut().chunks_mut(h * w).zip(x.value().data()) {
            chunk.fill(v);
        }
        Ok(self.push(out, Op::Expand(x.id)))
    }

    /// Channel concatenation of two tensors with equal `N, H, W`.
    pub fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let [n, ca, h, w] = a.shape();
        let [nb, cb, hb, wb] = b.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(DanError::Shape(format!("concat {:?} with {:?}", a.shape(), b.shape())));
        }
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.value().item(i));
            data.extend_from_slice(b.value().item(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data)?;
        Ok(self.push(out, Op::Concat(a.id, b.id)))
    }

    /// Sum of all entries as a `1×1×1×1` scalar.
    pub fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::full([1, 1, 1, 1], x.value().sum());
        self.push(out, Op::Sum(x.id))
    }

    /// Mean absolute difference as a `1×1×1×1` scalar.
    pub fn l1(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(DanError::Shape(format!("l1 {:?} vs {:?}", a.shape(), b.shape())));
        }
        let total: f64 = a.value().data().iter().zip(b.value().data()).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::full([1, 1, 1, 1], total / a.value().len() as f64);
        Ok(self.push(out, Op::L1(a.id, b.id)))
    }

    /// Differentiates the scalar `loss` with respect to every parameter and
    /// leaf it depends on.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !self.record {
            return Err(DanError::InvalidArgument("backward on a non-recording graph".into()));
        }
        if loss.value().len() != 1 {
            return Err(DanError::Shape(format!("backward needs a scalar, got {:?}", loss.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss.shape(), 1.0));
        let mut params: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut leaves = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match node.op {
                Op::Leaf => leaves.push((id, g)),
                Op::Param(p) => accumulate_opt(&mut params[p.0], g),
                Op::Conv { x, w, b, stride, pad } => {
                    let xv = &self.nodes[x].value;
                    let wv = &self.nodes[w].value;
                    let [_, ci, h, wd] = xv.shape();
                    let [co, _, k, _] = wv.shape();
                    let geom = ConvGeom::new(ci, h, wd, co, k, stride, pad).expect("geometry validated in forward");
                    let (dx, dw, db) = conv_backward(xv, wv, &g, &geom, b.is_some());
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    if av.shape() == bv.shape() {
                        let da = zip_map(&g, bv, |x, y| x * y);
                        let db = zip_map(&g, av, |x, y| x * y);
                        accumulate(&mut grads, a, da);
                        accumulate(&mut grads, b, db);
                    } else {
                        let hw = av.h() * av.w();
                        let mut da = g.clone();
                        for (chunk, &s) in da.data_mut().chunks_mut(hw).zip(bv.data()) {
                            chunk.iter_mut().for_each(|v| *v *= s);
                        }
                        let mut db = Tensor::zeros(bv.shape());
                        for ((d, gc), ac) in db.data_mut().iter_mut().zip(g.data().chunks(hw)).zip(av.data().chunks(hw)) {
                            *d = gc.iter().zip(ac).map(|(x, y)| x * y).sum();
                        }
                        accumulate(&mut grads, a, da);
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Scale(x, f) => accumulate(&mut grads, x, g.map(|v| v * f)),
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.nodes[x].value;
                    let dx = zip_map(&g, xv, |d, v| if v > 0.0 { d } else { slope * d });
                    accumulate(&mut grads, x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = zip_map(&g, &node.value, |d, s| d * s * (1.0 - s));
                    accumulate(&mut grads, x, dx);
                }
                Op::PixelShuffle(x, r) => {
                    let [n, c, h, w] = self.nodes[x].value.shape();
                    let oc = c / (r * r);
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for b in 0..n {
                        for o in 0..oc {
                            for i in 0..r {
                                for j in 0..r {
                                    let ic = o * r * r + i * r + j;
                                    for y in 0..h {
                                        for xx in 0..w {
                                            dx.set(b, ic, y, xx, g.get(b, o, y * r + i, xx * r + j));
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.nodes[x].value.shape();
                    let hw = shape[2] * shape[3];
                    let mut dx = Tensor::zeros(shape);
                    for (chunk, &d) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                        chunk.fill(d / hw as f64);
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Softmax(x) => {
                    let c = node.value.c();
                    let mut dx = Tensor::zeros(node.value.shape());
                    for ((d, s), gr) in dx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)).zip(g.data().chunks(c)) {
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            d[i] = s[i] * (gr[i] - dot);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Expand(x) => {
                    let shape = self.nodes[x].value.shape();
                    let hw = g.h() * g.w();
                    let data = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads, x, Tensor::from_vec(shape, data)?);
                }
                Op::Concat(a, b) => {
                    let sa = self.nodes[a].value.shape();
                    let sb = self.nodes[b].value.shape();
                    let la = sa[1] * sa[2] * sa[3];
                    let lb = sb[1] * sb[2] * sb[3];
                    let mut da = Vec::with_capacity(sa.iter().product());
                    let mut db = Vec::with_capacity(sb.iter().product());
                    for item in g.data().chunks(la + lb) {
                        da.extend_from_slice(&item[..la]);
                        db.extend_from_slice(&item[la..]);
                    }
                    accumulate(&mut grads, a, Tensor::from_vec(sa, da)?);
                    accumulate(&mut grads, b, Tensor::from_vec(sb, db)?);
                }
                Op::Sum(x) => {
                    let d = g.data()[0];
                    accumulate(&mut grads, x, Tensor::full(self.nodes[x].value.shape(), d));
                }
                Op::L1(a, b) => {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let scale = g.data()[0] / av.len() as f64;
                    let da = zip_map(av, bv, |x, y| scale * sign(x - y));
                    let db = da.map(|v| -v);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
            }
        }
        Ok(Gradients { params, leaves })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    accumulate_opt(&mut grads[id], g);
}

fn accumulate_opt(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: &ConvGeom) -> Tensor {
    let n = x.n();
    let p = geom.out_pixels();
    let kk = geom.patch_len();
    let mut out = Tensor::zeros([n, geom.co, geom.ho, geom.wo]);
    let wmat = Mat::new(w.data(), geom.co, kk);
    let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    for i in 0..n {
        let out_item = out.item_mut(i);
        if let Some(b) = b {
            for (chunk, &bv) in out_item.chunks_mut(p).zip(b.data()) {
                chunk.fill(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        if geom.is_pointwise() {
            gemm(wmat, Mat::new(x.item(i), kk, p), out_item, beta);
        } else {
            im2col(x.item(i), geom, &mut col);
            gemm(wmat, Mat::new(&col, kk, p), out_item, beta);
        }
    }
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, geom: &ConvGeom, has_bias: bool) -> (Tensor, Tensor, Option<Tensor>) {
    let n = x.n();
    let p = geom.out_pixels();
    let kk = geom.patch_len();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = has_bias.then(|| Tensor::zeros([geom.co, 1, 1, 1]));
    let wmat = Mat::new(w.data(), geom.co, kk);
    let pointwise = geom.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcol = vec![0.0; kk * p];
    for i in 0..n {
        let gi = Mat::new(g.item(i), geom.co, p);
        if let Some(db) = db.as_mut() {
            for (d, chunk) in db.data_mut().iter_mut().zip(g.item(i).chunks(p)) {
                *d += chunk.iter().sum::<f64>();
            }
        }
        if pointwise {
            gemm(gi, Mat::new(x.item(i), kk, p).t(), dw.data_mut(), 1.0);
            gemm(wmat.t(), gi, dx.item_mut(i), 0.0);
        } else {
            im2col(x.item(i), geom, &mut col);
            gemm(gi, Mat::new(&col, kk, p).t(), dw.data_mut(), 1.0);
            gemm(wmat.t(), gi, &mut dcol, 0.0);
            col2im(&dcol, geom, dx.item_mut(i));
        }
    }
    (dx, dw, db)
}
