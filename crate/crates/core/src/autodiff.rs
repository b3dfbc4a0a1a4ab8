//! Reverse-mode automatic differentiation over row-major `f64` matrices,
//! and the small shared-trunk network used to exercise the multi-task
//! strategies.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so the
//! reverse sweep is a single pass over the node list from the seed node down.
//! Every node holds a `rows × cols` matrix; rows index samples of a batch and
//! parameters are single-row leaves. Gradients accumulate until
//! [`Graph::zero_grad`] is called.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::{CentralView, DisparityMap, Error, Result, Tensor5};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Leaf that never receives a gradient.
    Constant,
    /// `Y = X·Wᵀ + b` per row, `W` row-major `(out, in)`.
    Dense { w: usize, x: usize, b: usize },
    Relu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Abs(usize),
    MinConst(usize, f64),
    Mean(usize),
    Sum(usize),
    /// Scalar computed outside the graph with a known gradient w.r.t. its input.
    External { input: usize, grad: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    grad: Vec<f64>,
    rows: usize,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, op: Op) -> Var {
        let grad = if matches!(op, Op::Constant) { Vec::new() } else { vec![0.0; value.len()] };
        self.nodes.push(Node { value, grad, rows, op });
        Var(self.nodes.len() - 1)
    }

    /// Single-row differentiable leaf.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, 1, Op::Leaf)
    }

    pub fn leaf_f32(&mut self, value: &[f32]) -> Var {
        self.leaf(value.iter().map(|&x| x as f64).collect())
    }

    /// `rows × (len/rows)` leaf excluded from differentiation.
    pub fn constant(&mut self, value: Vec<f64>, rows: usize) -> Result<Var> {
        if rows == 0 || !value.len().is_multiple_of(rows) {
            return Err(Error::dims(format!("{} values do not split into {rows} rows", value.len())));
        }
        Ok(self.push(value, rows, Op::Constant))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    /// Accumulated gradient; empty for constants.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.value.len() != nb.value.len() || na.rows != nb.rows {
            return Err(Error::dims(format!(
                "operand shapes differ: {}x{} vs {}x{}",
                na.rows,
                na.value.len() / na.rows.max(1),
                nb.rows,
                nb.value.len() / nb.rows.max(1)
            )));
        }
        Ok(())
    }

    pub fn dense(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let rows = self.nodes[x.0].rows;
        let n_in = self.nodes[x.0].value.len() / rows;
        let n_out = self.nodes[b.0].value.len();
        if self.nodes[w.0].value.len() != n_in * n_out || self.nodes[b.0].rows != 1 || n_in == 0 {
            return Err(Error::dims(format!(
                "dense weight has {} entries, expected {n_out}x{n_in}",
                self.nodes[w.0].value.len()
            )));
        }
        let (wv, xv, bv) = (&self.nodes[w.0].value, &self.nodes[x.0].value, &self.nodes[b.0].value);
        let mut y = Vec::with_capacity(rows * n_out);
        for xr in xv.chunks_exact(n_in) {
            for (row, &bi) in wv.chunks_exact(n_in).zip(bv) {
                y.push(bi + row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Ok(self.push(y, rows, Op::Dense { w: w.0, x: x.0, b: b.0 }))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rows = self.nodes[a.0].rows;
        self.push(y, rows, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_op(a, f64::abs, Op::Abs(a.0))
    }

    /// Element-wise `min(a, c)`; ties route the gradient to `a`.
    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| x.min(c), Op::MinConst(a.0, c))
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let y = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rows = self.nodes[a.0].rows;
        Ok(self.push(y, rows, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Mean over all entries.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::arg("mean of an empty node"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(vec![m], 1, Op::Mean(a.0)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum::<f64>();
        self.push(vec![s], 1, Op::Sum(a.0))
    }

    /// Scalar node with externally computed value and input gradient.
    pub fn external(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.nodes[input.0].value.len() {
            return Err(Error::dims("external gradient length differs from its input"));
        }
        Ok(self.push(vec![value], 1, Op::External { input: input.0, grad }))
    }

    /// Mean Huber loss built from primitives:
    /// `min(e,δ)² + 2δ·(e − min(e,δ))` with `e = |p − y|`.
    pub fn huber(&mut self, pred: Var, truth: Var, delta: f64) -> Result<Var> {
        let d = self.sub(pred, truth)?;
        let e = self.abs(d);
        let q = self.min_const(e, delta);
        let q2 = self.mul(q, q)?;
        let lin = self.sub(e, q)?;
        let lin = self.scale(lin, 2.0 * delta);
        let h = self.add(q2, lin)?;
        self.mean(h)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulate `d loss / d node` into every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// [`Graph::backward`] with the seed gradient `seed` instead of one.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::arg("backward needs a scalar loss node"));
        }
        // Upstream gradients of interior nodes for this sweep; leaves
        // accumulate straight into their stored gradient.
        let mut up: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        up[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = up[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                continue;
            }
            for (acc, gi) in self.nodes[i].grad.iter_mut().zip(&g) {
                *acc += gi;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let sends = self.local_grads(&op, g);
            self.nodes[i].op = op;
            for (j, contrib) in sends {
                match &self.nodes[j].op {
                    Op::Constant => {}
                    Op::Leaf => self.nodes[j].grad.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    _ => match &mut up[j] {
                        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                        slot => *slot = Some(contrib),
                    },
                }
            }
        }
        Ok(())
    }

    /// Contributions of node `i` with upstream gradient `g` to its operands.
    fn local_grads(&self, op: &Op, g: Vec<f64>) -> Vec<(usize, Vec<f64>)> {
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| !matches!(self.nodes[j].op, Op::Constant);
        match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::Dense { w, x, b } => {
                let (xv, wv) = (val(x), val(w));
                let n_out = val(b).len();
                let n_in = wv.len() / n_out;
                let mut out = Vec::with_capacity(3);
                if wants(w) {
                    let mut gw = vec![0.0; wv.len()];
                    for (gr, xr) in g.chunks_exact(n_out).zip(xv.chunks_exact(n_in)) {
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr).for_each(|(a, xi)| *a += go * xi);
                            }
                        }
                    }
                    out.push((w, gw));
                }
                if wants(x) {
                    let mut gx = vec![0.0; xv.len()];
                    for (gr, gxr) in g.chunks_exact(n_out).zip(gx.chunks_exact_mut(n_in)) {
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                gxr.iter_mut().zip(&wv[o * n_in..(o + 1) * n_in]).for_each(|(a, wi)| *a += go * wi);
                            }
                        }
                    }
                    out.push((x, gx));
                }
                if wants(b) {
                    let mut gb = vec![0.0; n_out];
                    for gr in g.chunks_exact(n_out) {
                        gb.iter_mut().zip(gr).for_each(|(a, x)| *a += x);
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::Relu(a) => vec![(a, val(a).iter().zip(&g).map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 }).collect())],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g)],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => vec![
                (a, g.iter().zip(val(b)).map(|(gi, y)| gi * y).collect()),
                (b, g.iter().zip(val(a)).map(|(gi, x)| gi * x).collect()),
            ],
            Op::Scale(a, c) => vec![(a, g.iter().map(|x| c * x).collect())],
            Op::Abs(a) => vec![(a, val(a).iter().zip(&g).map(|(&x, &gi)| if x == 0.0 { 0.0 } else { gi * x.signum() }).collect())],
            Op::MinConst(a, c) => vec![(a, val(a).iter().zip(&g).map(|(&x, &gi)| if x <= c { gi } else { 0.0 }).collect())],
            Op::Mean(a) => {
                let n = val(a).len();
                vec![(a, vec![g[0] / n as f64; n])]
            }
            Op::Sum(a) => vec![(a, vec![g[0]; val(a).len()])],
            Op::External { input, ref grad } => vec![(input, grad.iter().map(|x| g[0] * x).collect())],
        }
    }
}

/// Parameter group of the toy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Shared,
    Cv,
    Disp,
}

/// Architecture of [`ToyNet`]: a two-layer shared trunk and one
/// `dense → relu → dense` head per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dims: [usize; 5],
    pub hidden: usize,
    pub head_hidden: usize,
}

impl LayerSpec {
    pub fn new(input_dims: [usize; 5], hidden: usize, head_hidden: usize) -> Self {
        LayerSpec { input_dims, hidden, head_hidden }
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn cv_dims(&self) -> [usize; 3] {
        [self.input_dims[2], self.input_dims[3], self.input_dims[4]]
    }

    pub fn disp_dims(&self) -> [usize; 2] {
        [self.input_dims[2], self.input_dims[3]]
    }

    /// `(name, group, out, in)` of every dense layer in parameter order.
    pub fn layers(&self) -> Vec<(&'static str, ParamGroup, usize, usize)> {
        let [s, t, l] = self.cv_dims();
        vec![
            ("trunk.0", ParamGroup::Shared, self.hidden, self.input_len()),
            ("trunk.1", ParamGroup::Shared, self.hidden, self.hidden),
            ("cv.0", ParamGroup::Cv, self.head_hidden, self.hidden),
            ("cv.1", ParamGroup::Cv, s * t * l, self.head_hidden),
            ("disp.0", ParamGroup::Disp, self.head_hidden, self.hidden),
            ("disp.1", ParamGroup::Disp, s * t, self.head_hidden),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.input_dims.contains(&0) || self.hidden == 0 || self.head_hidden == 0 {
            return Err(Error::arg("layer sizes must be positive"));
        }
        Ok(())
    }
}

/// One weight matrix or bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    spec: LayerSpec,
    params: Vec<Param>,
}

/// Graph handles produced by [`ToyNet::build`].
#[derive(Debug, Clone)]
pub struct NetVars {
    pub params: Vec<Var>,
    pub cv: Var,
    pub disp: Var,
}

impl ToyNet {
    /// He-normal weights, zero biases.
    pub fn init(spec: LayerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(seed, streams::INIT);
        let mut params = Vec::new();
        for (name, group, out, inp) in spec.layers() {
            let std = (2.0 / inp as f64).sqrt();
            let w = (0..out * inp).map(|_| (std * rng::normal(&mut r)) as f32).collect();
            params.push(Param { name: format!("{name}.w"), group, data: w });
            params.push(Param { name: format!("{name}.b"), group, data: vec![0.0; out] });
        }
        Ok(ToyNet { spec, params })
    }

    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        let mut net = Self::init(spec, 0)?;
        net.params.iter_mut().for_each(|p| p.data.iter_mut().for_each(|x| *x = 0.0));
        Ok(net)
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// `(start, len)` of each parameter in the flattened parameter vector.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.params
            .iter()
            .map(|p| {
                let r = (off, p.data.len());
                off += p.data.len();
                r
            })
            .collect()
    }

    /// Flattened-vector ranges belonging to `group`.
    pub fn group_ranges(&self, group: ParamGroup) -> Vec<std::ops::Range<usize>> {
        self.params
            .iter()
            .zip(self.offsets())
            .filter(|(p, _)| p.group == group)
            .map(|(_, (o, l))| o..o + l)
            .collect()
    }

    /// Record the forward pass for one coded light field.
    pub fn build(&self, g: &mut Graph, coded: &Tensor5) -> Result<NetVars> {
        self.build_batch(g, std::slice::from_ref(coded))
    }

    /// Record the forward pass for a batch; output rows follow input order.
    pub fn build_batch(&self, g: &mut Graph, batch: &[Tensor5]) -> Result<NetVars> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut x = Vec::with_capacity(batch.len() * self.spec.input_len());
        for coded in batch {
            if coded.dims() != self.spec.input_dims {
                return Err(Error::dims(format!(
                    "network expects input {:?}, got {:?}",
                    self.spec.input_dims,
                    coded.dims()
                )));
            }
            x.extend(coded.data().iter().map(|&v| v as f64));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf_f32(&p.data)).collect();
        let x = g.constant(x, batch.len())?;
        let layer = |g: &mut Graph, i: usize, x: Var| g.dense(params[2 * i], x, params[2 * i + 1]);
        let h = layer(g, 0, x)?;
        let h = g.relu(h);
        let h = layer(g, 1, h)?;
        let trunk = g.relu(h);
        let c = layer(g, 2, trunk)?;
        let c = g.relu(c);
        let cv = layer(g, 3, c)?;
        let d = layer(g, 4, trunk)?;
        let d = g.relu(d);
        let disp = layer(g, 5, d)?;
        Ok(NetVars { params, cv, disp })
    }

    pub fn forward(&self, coded: &Tensor5) -> Result<(CentralView, DisparityMap)> {
        Ok(self.forward_batch(std::slice::from_ref(coded))?.remove(0))
    }

    pub fn forward_batch(&self, batch: &[Tensor5]) -> Result<Vec<(CentralView, DisparityMap)>> {
        let mut g = Graph::new();
        let vars = self.build_batch(&mut g, batch)?;
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let (ncv, nd) = (self.spec.cv_dims().iter().product::<usize>(), self.spec.input_dims[2] * self.spec.input_dims[3]);
        g.value(vars.cv)
            .chunks_exact(ncv)
            .zip(g.value(vars.disp).chunks_exact(nd))
            .map(|(c, d)| {
                Ok((
                    CentralView::from_vec(self.spec.cv_dims(), to32(c))?,
                    DisparityMap::from_vec(self.spec.disp_dims(), to32(d))?,
                ))
            })
            .collect()
    }

    /// Concatenated parameter gradients of a graph built by [`ToyNet::build`].
    pub fn gradient(&self, g: &Graph, vars: &NetVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for &p in &vars.params {
            out.extend_from_slice(g.grad(p));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.spec).expect("layer spec serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.param_count());
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for x in &p.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated { expected: 8, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != NET_MAGIC {
            return Err(Error::BadMagic { expected: *NET_MAGIC, found: magic });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json = bytes
            .get(8..8 + n)
            .ok_or(Error::Truncated { expected: 8 + n, found: bytes.len() })?;
        let spec: LayerSpec = serde_json::from_slice(json).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut net = Self::zeros(spec)?;
        let payload = &bytes[8 + n..];
        let expected = 4 * net.param_count();
        if payload.len() < expected {
            return Err(Error::Truncated { expected: 8 + n + expected, found: bytes.len() });
        }
        if payload.len() > expected {
            return Err(Error::TrailingBytes(payload.len() - expected));
        }
        let mut vals = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut idx = 0;
        for p in &mut net.params {
            for x in &mut p.data {
                *x = vals.next().unwrap();
                if !x.is_finite() {
                    return Err(Error::NonFinite(idx));
                }
                idx += 1;
            }
        }
        Ok(net)
    }
}

const NET_MAGIC: &[u8; 4] = b"LFNN";

pub fn read_net(path: impl AsRef<Path>) -> Result<ToyNet> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    ToyNet::from_bytes(&buf)
}

pub fn write_net(net: &ToyNet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::File::create(path)?.write_all(&net.to_bytes())?;
    Ok(())
}

/// `p ← p − lr·(g + wd·p)`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dims(format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = (*p as f64 - lr * (g as f64 + weight_decay * *p as f64)) as f32;
    }
    Ok(())
}

/// First-order update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `m ← μ·m + g`, `p ← p − lr·m`.
    Sgd { momentum: f64 },
    /// Bias-corrected first and second moment estimates.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer over a flat parameter vector. Weight decay enters as the
/// gradient term `wd·p`; a zero gradient with `wd = 0` never moves a
/// parameter under either rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer { kind, lr, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, lr, weight_decay)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, lr, weight_decay)
    }

    fn begin(&mut self, n: usize, grad: &[f64]) -> Result<()> {
        if grad.len() != n {
            return Err(Error::dims(format!("{} grads for {n} params", grad.len())));
        }
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
            self.t = 0;
        }
        self.t += 1;
        Ok(())
    }

    /// Step direction for coordinate `i` at value `p` with raw gradient `g`.
    fn delta(&mut self, i: usize, p: f64, g: f64) -> f64 {
        let g = g + self.weight_decay * p;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                self.m[i] = momentum * self.m[i] + g;
                self.m[i]
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let mh = self.m[i] / (1.0 - beta1.powi(self.t as i32));
                let vh = self.v[i] / (1.0 - beta2.powi(self.t as i32));
                mh / (vh.sqrt() + eps)
            }
        }
    }

    /// Update the parameters of `net` with the flattened gradient `grad`.
    pub fn step(&mut self, net: &mut ToyNet, grad: &[f64]) -> Result<()> {
        self.begin(net.param_count(), grad)?;
        let mut i = 0;
        for p in &mut net.params {
            for x in &mut p.data {
                let d = self.delta(i, *x as f64, grad[i]);
                if d != 0.0 {
                    *x = (*x as f64 - self.lr * d) as f32;
                }
                i += 1;
            }
        }
        Ok(())
    }

    /// One step on free `f64` values such as MTU log-variances.
    pub fn step_values(&mut self, values: &mut [f64], grad: &[f64]) -> Result<()> {
        self.begin(values.len(), grad)?;
        for (i, x) in values.iter_mut().enumerate() {
            *x -= self.lr * self.delta(i, *x, grad[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, x0: &[f64]) {
        let mut g = Graph::new();
        let x = g.leaf(x0.to_vec());
        let y = build(&mut g, x);
        g.backward(y).unwrap();
        let analytic = g.grad(x).to_vec();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut g = Graph::new();
                let mut xv = x0.to_vec();
                xv[i] += d;
                let x = g.leaf(xv);
                let y = build(&mut g, x);
                g.value(y)[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x0 = [0.3, -1.2, 0.8, 2.1, -0.4, 0.05];
        check_grad(|g, x| { let r = g.relu(x); g.sum(r) }, &x0);
        check_grad(|g, x| { let m = g.mul(x, x).unwrap(); g.mean(m).unwrap() }, &x0);
        check_grad(|g, x| { let a = g.abs(x); let s = g.scale(a, 3.0); g.sum(s) }, &x0);
        check_grad(|g, x| { let m = g.min_const(x, 0.5); let p = g.mul(m, x).unwrap(); g.sum(p) }, &x0);
        check_grad(|g, x| { let s = g.add(x, x).unwrap(); let d = g.sub(s, x).unwrap(); let m = g.mul(d, d).unwrap(); g.sum(m) }, &x0);
        check_grad(|g, x| {
            let w = g.leaf((0..12).map(|i| (i as f64 * 0.3).sin()).collect());
            let b = g.leaf(vec![0.1, -0.2]);
            let y = g.dense(w, x, b).unwrap();
            let r = g.relu(y);
            let m = g.mul(r, y).unwrap();
            g.sum(m)
        }, &x0);
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        // ½‖Wx‖² has gradient (Wx)xᵀ.
        let mut g = Graph::new();
        let w = g.leaf(vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let x = g.leaf(vec![0.5, -1.0, 2.0]);
        let b = g.leaf(vec![0.0, 0.0]);
        let y = g.dense(w, x, b).unwrap();
        let sq = g.mul(y, y).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        g.backward(l).unwrap();
        let wx = g.value(y).to_vec();
        let xv = [0.5, -1.0, 2.0];
        let expected: Vec<f64> = wx.iter().flat_map(|a| xv.iter().map(move |b| a * b)).collect();
        assert_eq!(g.grad(w), expected.as_slice());
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, -2.0]);
        let m = g.mul(x, x).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        let once = g.grad(x).to_vec();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), &[2.0 * once[0], 2.0 * once[1]]);
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), once.as_slice());
        assert!(g.backward(m).is_err());
    }

    #[test]
    fn primitive_huber_matches_closed_form() {
        let mut g = Graph::new();
        let p = g.leaf(vec![0.5, 2.0, -0.25, 1.0]);
        let y = g.leaf(vec![0.0; 4]);
        let h = g.huber(p, y, 1.0).unwrap();
        let expected = (0.25 + 3.0 + 0.0625 + 1.0) / 4.0;
        assert!((g.value(h)[0] - expected).abs() < 1e-15);
    }

    fn small_spec() -> LayerSpec {
        LayerSpec::new([1, 1, 2, 2, 2], 4, 3)
    }

    #[test]
    fn zero_net_gives_zero_outputs() {
        let net = ToyNet::zeros(small_spec()).unwrap();
        let x = Tensor5::filled([1, 1, 2, 2, 2], 0.7);
        let (cv, d) = net.forward(&x).unwrap();
        assert_eq!(cv.dims(), [2, 2, 2]);
        assert_eq!(d.dims(), [2, 2]);
        assert!(cv.data().iter().chain(d.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let net = ToyNet::init(small_spec(), 3).unwrap();
        let x = Tensor5::from_fn([1, 1, 2, 2, 2], |i| i[4] as f32 + 0.1 * i[2] as f32);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(net.forward(&Tensor5::zeros([1, 1, 2, 2, 1])).is_err());
    }

    #[test]
    fn init_biases_zero_and_groups_partition() {
        let net = ToyNet::init(small_spec(), 1).unwrap();
        for p in net.params() {
            if p.name.ends_with(".b") {
                assert!(p.data.iter().all(|&b| b == 0.0));
            }
        }
        let total: usize = [ParamGroup::Shared, ParamGroup::Cv, ParamGroup::Disp]
            .iter()
            .flat_map(|&gr| net.group_ranges(gr))
            .map(|r| r.len())
            .sum();
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn net_serialization_round_trip() {
        let net = ToyNet::init(small_spec(), 9).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"LFNN");
        assert_eq!(ToyNet::from_bytes(&bytes).unwrap(), net);
        assert!(ToyNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ToyNet::from_bytes(&extra).is_err());
    }

    #[test]
    fn optimizers_leave_zero_gradient_params_alone() {
        let mut net = ToyNet::init(small_spec(), 2).unwrap();
        let before = net.clone();
        let zero = vec![0.0; net.param_count()];
        for mut opt in [Optimizer::sgd(0.1, 0.9, 0.0), Optimizer::adam(0.1, 0.0)] {
            opt.step(&mut net, &zero).unwrap();
            assert_eq!(net, before);
        }
        let mut x = [1.0];
        let mut sgd = Optimizer::sgd(1.0, 0.0, 0.1);
        sgd.step_values(&mut x, &[0.0]).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-15);
        let mut adam = Optimizer::adam(0.01, 0.0);
        let mut y = [0.5];
        adam.step_values(&mut y, &[3.0]).unwrap();
        // The first bias-corrected Adam step has magnitude lr.
        assert!((y[0] - 0.49).abs() < 1e-9);
    }

    #[test]
    fn sgd_step_cases() {
        let mut p = [1.0f32];
        sgd_step(&mut p, &[0.0], 1.0, 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        let mut q = [0.5f32, -2.0];
        sgd_step(&mut q, &[3.0, 1.0], 0.0, 0.3).unwrap();
        assert_eq!(q, [0.5, -2.0]);
        sgd_step(&mut q, &[1.0, -1.0], 0.5, 0.0).unwrap();
        assert_eq!(q, [0.0, -1.5]);
        assert!(sgd_step(&mut q, &[1.0], 0.5, 0.0).is_err());
    }
}
