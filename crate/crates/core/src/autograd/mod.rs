//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op validates its
//! inputs, computes its value eagerly, and records what its backward rule
//! needs. Nodes only reference earlier nodes, so the arena order is already
//! a topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Graph::zero_grad`] doubles every leaf gradient.

pub(crate) mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

use kernels::{MatRef, Window};

pub use kernels::valid_extent;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Batch statistics reported by [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over (n, h, w).
    pub var: Vec<f64>,
    /// Number of values each channel's statistics were computed from.
    pub count: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    AddN(Vec<usize>),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    SumAll(usize),
    Reshape(usize),
    SliceChannel {
        src: usize,
        n: usize,
        c: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        win: Window,
        cols: Vec<f64>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        input: usize,
        scale: Vec<f64>,
    },
    CrossCorrelate {
        exemplar: usize,
        search: usize,
        win: Window,
        cols: Vec<f64>,
    },
    LogisticLoss {
        score: usize,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation; see the module docs.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. It is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor4) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Adds an input tensor that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor4) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[self.idx(v).expect("variable from another graph")].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.value(v).dims()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[self.idx(v)?].value.item()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.idx(v).ok().and_then(|i| self.nodes[i].value.grad())
    }

    /// Clears the gradient buffers of every leaf.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                node.value.clear_grad();
            }
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor4, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn same_dims(&self, op: &'static str, a: usize, b: usize) -> Result<Dims> {
        let (da, db) = (self.nodes[a].value.dims(), self.nodes[b].value.dims());
        if da != db {
            return Err(Error::shape(op, format!("{da} vs {db}")));
        }
        Ok(da)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let dims = self.same_dims(name, ia, ib)?;
        let data = self
            .data(ia)
            .iter()
            .zip(self.data(ib))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(Tensor4::new(dims, data)?, op(ia, ib), needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = &self.nodes[ia].value;
        let data = value.data().iter().map(|x| f(*x)).collect();
        let t = Tensor4::new(value.dims(), data)?;
        let needs = self.needs(ia);
        Ok(self.push(t, op(ia), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Sum of any number of equally shaped nodes, as one node.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let ids = vars.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>()?;
        let first = *ids
            .first()
            .ok_or_else(|| Error::Invalid("add_n of zero terms".into()))?;
        let dims = self.nodes[first].value.dims();
        let mut data = vec![0.0; dims.len()];
        let mut needs = false;
        for &i in &ids {
            self.same_dims("add_n", first, i)?;
            for (d, x) in data.iter_mut().zip(self.data(i)) {
                *d += x;
            }
            needs |= self.needs(i);
        }
        Ok(self.push(Tensor4::new(dims, data)?, Op::AddN(ids), needs))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| k * x, |i| Op::Scale(i, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x + k, Op::AddConst)
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs)
    }

    /// `max(x, 0)` with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: f64 = self.data(ia).iter().sum();
        let needs = self.needs(ia);
        Ok(self.push(Tensor4::scalar(s), Op::SumAll(ia), needs))
    }

    pub fn reshape(&mut self, a: Var, dims: Dims) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.nodes[ia].value.clone().with_requires_grad(false).reshaped(dims)?;
        let needs = self.needs(ia);
        Ok(self.push(t, Op::Reshape(ia), needs))
    }

    /// Channel `c` of sample `n` as a 1x1xHxW tensor.
    pub fn slice_channel(&mut self, a: Var, n: usize, c: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let d = src.dims();
        if n >= d.n || c >= d.c {
            return Err(Error::shape(
                "slice_channel",
                format!("({n}, {c}) out of range for {d}"),
            ));
        }
        let t = Tensor4::new(Dims::new(1, 1, d.h, d.w), src.channel(n, c).to_vec())?;
        let needs = self.needs(ia);
        Ok(self.push(t, Op::SliceChannel { src: ia, n, c }, needs))
    }

    /// Valid-mode 2-D convolution (cross-correlation, no kernel flip).
    ///
    /// `weight` is (C_out, C_in, k_h, k_w); `bias`, if given, has C_out
    /// elements.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (ii, iw) = (self.idx(input)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let x = self.nodes[ii].value.dims();
        let k = self.nodes[iw].value.dims();
        if x.c != k.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", x.c, k.c),
            ));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.len() != k.n {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} values for {} kernels", self.nodes[ib].value.len(), k.n),
                ));
            }
        }
        let win = Window::new(x.c, x.h, x.w, k.h, k.w, stride).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("{}x{} kernel at stride {stride} does not fit {}x{}", k.h, k.w, x.h, x.w),
            )
        })?;
        let (patch, pos) = (win.patch(), win.positions());
        let out_dims = Dims::new(x.n, k.n, win.out_h, win.out_w);
        let mut cols = vec![0.0; x.n * patch * pos];
        let mut out = vec![0.0; out_dims.len()];
        let wdata = self.data(iw);
        for s in 0..x.n {
            let c = &mut cols[s * patch * pos..(s + 1) * patch * pos];
            kernels::im2col(&win, self.nodes[ii].value.sample(s), c);
            let o = &mut out[s * k.n * pos..(s + 1) * k.n * pos];
            if let Some(ib) = ib {
                for (co, b) in self.data(ib).iter().enumerate() {
                    o[co * pos..(co + 1) * pos].iter_mut().for_each(|v| *v = *b);
                }
            }
            gemm_beta(MatRef::new(wdata, k.n, patch), MatRef::new(c, patch, pos), 1.0, o);
        }
        let needs = self.needs(ii) || self.needs(iw) || ib.is_some_and(|b| self.needs(b));
        let op = Op::Conv2d {
            input: ii,
            weight: iw,
            bias: ib,
            win,
            cols,
        };
        Ok(self.push(Tensor4::new(out_dims, out)?, op, needs))
    }

    /// Valid-mode max pooling with a square window.
    pub fn max_pool(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let ii = self.idx(input)?;
        let x = self.nodes[ii].value.dims();
        let win = Window::new(x.c, x.h, x.w, k, k, stride).ok_or_else(|| {
            Error::shape(
                "max_pool",
                format!("{k}x{k} window at stride {stride} does not fit {}x{}", x.h, x.w),
            )
        })?;
        let out_dims = Dims::new(x.n, x.c, win.out_h, win.out_w);
        let per = out_dims.sample();
        let mut out = vec![0.0; out_dims.len()];
        let mut argmax = vec![0; out_dims.len()];
        for s in 0..x.n {
            kernels::maxpool_forward(
                &win,
                self.nodes[ii].value.sample(s),
                &mut out[s * per..(s + 1) * per],
                &mut argmax[s * per..(s + 1) * per],
            );
            argmax[s * per..(s + 1) * per]
                .iter_mut()
                .for_each(|a| *a += s * x.sample());
        }
        let needs = self.needs(ii);
        Ok(self.push(Tensor4::new(out_dims, out)?, Op::MaxPool { input: ii, argmax }, needs))
    }

    /// Batch normalization with batch statistics (training mode).
    ///
    /// `gamma` and `beta` hold one value per channel. Returns the output and
    /// the statistics used, so callers can maintain running averages.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (ii, ig, ib) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let x = self.nodes[ii].value.dims();
        if self.nodes[ig].value.len() != x.c || self.nodes[ib].value.len() != x.c {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {} channels, parameters do not match", x.c),
            ));
        }
        let count = x.n * x.plane();
        if count < 2 {
            return Err(Error::shape(
                "batch_norm",
                "training mode needs at least two values per channel",
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let mut out = vec![0.0; x.len()];
        let stats = kernels::batchnorm_train(
            self.data(ii),
            x.n,
            x.c,
            x.plane(),
            self.data(ig),
            self.data(ib),
            eps,
            &mut out,
        );
        let needs = self.needs(ii) || self.needs(ig) || self.needs(ib);
        let op = Op::BatchNorm {
            input: ii,
            gamma: ig,
            beta: ib,
            xhat: stats.xhat,
            inv_std: stats.inv_std,
        };
        let v = self.push(Tensor4::new(x, out)?, op, needs);
        Ok((
            v,
            BatchStats {
                mean: stats.mean,
                var: stats.var,
                count,
            },
        ))
    }

    /// `y = scale[c] * x + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, input: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let ii = self.idx(input)?;
        let x = self.nodes[ii].value.dims();
        if scale.len() != x.c || shift.len() != x.c {
            return Err(Error::shape(
                "channel_affine",
                format!("input has {} channels, coefficients have {}/{}", x.c, scale.len(), shift.len()),
            ));
        }
        let src = self.data(ii);
        let plane = x.plane();
        let out: Vec<f64> = src
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = (i / plane) % x.c;
                scale[c] * v + shift[c]
            })
            .collect();
        let needs = self.needs(ii);
        let op = Op::ChannelAffine {
            input: ii,
            scale: scale.to_vec(),
        };
        Ok(self.push(Tensor4::new(x, out)?, op, needs))
    }

    /// Slides each exemplar sample over the matching search sample.
    ///
    /// `out[s, 0, y, x] = sum_{c,i,j} exemplar[s,c,i,j] * search[s,c,y+i,x+j]`.
    pub fn cross_correlate(&mut self, exemplar: Var, search: Var) -> Result<Var> {
        let (ie, is) = (self.idx(exemplar)?, self.idx(search)?);
        let e = self.nodes[ie].value.dims();
        let z = self.nodes[is].value.dims();
        if e.n != z.n || e.c != z.c {
            return Err(Error::shape(
                "cross_correlate",
                format!("exemplar {e} and search {z} differ in batch or channels"),
            ));
        }
        let win = Window::new(z.c, z.h, z.w, e.h, e.w, 1).ok_or_else(|| {
            Error::shape(
                "cross_correlate",
                format!("exemplar {}x{} is larger than search {}x{}", e.h, e.w, z.h, z.w),
            )
        })?;
        let (patch, pos) = (win.patch(), win.positions());
        let out_dims = Dims::new(z.n, 1, win.out_h, win.out_w);
        let mut cols = vec![0.0; z.n * patch * pos];
        let mut out = vec![0.0; out_dims.len()];
        for s in 0..z.n {
            let c = &mut cols[s * patch * pos..(s + 1) * patch * pos];
            kernels::im2col(&win, self.nodes[is].value.sample(s), c);
            gemm_beta(
                MatRef::new(self.nodes[ie].value.sample(s), 1, patch),
                MatRef::new(c, patch, pos),
                0.0,
                &mut out[s * pos..(s + 1) * pos],
            );
        }
        let needs = self.needs(ie) || self.needs(is);
        let op = Op::CrossCorrelate {
            exemplar: ie,
            search: is,
            win,
            cols,
        };
        Ok(self.push(Tensor4::new(out_dims, out)?, op, needs))
    }

    /// Weighted logistic loss averaged over the batch:
    /// `(1/n) * sum_s sum_u weight[u] * log(1 + exp(-label[u] * score[u]))`.
    ///
    /// `labels` and `weights` are laid out like `score`.
    pub fn logistic_loss(&mut self, score: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let is = self.idx(score)?;
        let d = self.nodes[is].value.dims();
        if labels.len() != d.len() || weights.len() != d.len() {
            return Err(Error::shape(
                "logistic_loss",
                format!("score {d} vs {} labels / {} weights", labels.len(), weights.len()),
            ));
        }
        let total: f64 = self
            .data(is)
            .iter()
            .zip(labels)
            .zip(weights)
            .map(|((s, y), w)| w * kernels::softplus(-y * s))
            .sum();
        let needs = self.needs(is);
        let op = Op::LogisticLoss {
            score: is,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor4::scalar(total / d.n as f64), op, needs))
    }

    /// Back-propagates from a one-element `root`, accumulating into leaf
    /// gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ir = self.idx(root).map_err(|_| Error::Backward("root is not part of this graph".into()))?;
        if !self.nodes[ir].value.dims().is_scalar() {
            return Err(Error::Backward(format!(
                "root must have one element, got {}",
                self.nodes[ir].value.dims()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=ir).map(|_| None).collect();
        adj[ir] = Some(vec![1.0]);
        for i in (0..=ir).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        // Leaves the sweep never reached still hold a (zero) gradient.
        for node in &mut self.nodes[..=ir] {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad().is_none() {
                node.value.zero_grad();
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                self.acc(adj, *a, |d| add_into(d, g));
                self.acc(adj, *b, |d| add_into(d, g));
            }
            Op::AddN(ids) => {
                for id in ids {
                    self.acc(adj, *id, |d| add_into(d, g));
                }
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, |d| add_into(d, g));
                self.acc(adj, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.acc(adj, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(xb) {
                        *d += g * y;
                    }
                });
                self.acc(adj, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xa) {
                        *d += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.acc(adj, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(xb) {
                        *d += g / y;
                    }
                });
                self.acc(adj, *b, |d| {
                    for (((d, g), x), y) in d.iter_mut().zip(g).zip(xa).zip(xb) {
                        *d -= g * x / (y * y);
                    }
                });
            }
            Op::Scale(a, k) => self.acc(adj, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g);
            }),
            Op::AddConst(a) | Op::Reshape(a) => self.acc(adj, *a, |d| add_into(d, g)),
            Op::Sqrt(a) => self.acc(adj, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += 0.5 * g / y;
                    }
                }
            }),
            Op::Abs(a) => {
                let x = self.data(*a);
                self.acc(adj, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        } else if *x < 0.0 {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.acc(adj, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::SumAll(a) => self.acc(adj, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SliceChannel { src, n, c } => {
                let sd = self.nodes[*src].value.dims();
                let start = sd.offset(*n, *c, 0, 0);
                self.acc(adj, *src, |d| add_into(&mut d[start..start + sd.plane()], g));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
                cols,
            } => self.conv_backward(*input, *weight, *bias, win, cols, g, adj),
            Op::MaxPool { input, argmax } => self.acc(adj, *input, |d| {
                for (g, a) in g.iter().zip(argmax) {
                    d[*a] += g;
                }
            }),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dims = self.nodes[*input].value.dims();
                let (dx, dg, db) = kernels::batchnorm_backward(
                    g,
                    xhat,
                    inv_std,
                    self.data(*gamma),
                    dims.n,
                    dims.c,
                    dims.plane(),
                );
                self.acc(adj, *input, |d| add_into(d, &dx));
                self.acc(adj, *gamma, |d| add_into(d, &dg));
                self.acc(adj, *beta, |d| add_into(d, &db));
            }
            Op::ChannelAffine { input, scale } => {
                let dims = self.nodes[*input].value.dims();
                let plane = dims.plane();
                self.acc(adj, *input, |d| {
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        *d += scale[(i / plane) % dims.c] * g;
                    }
                });
            }
            Op::CrossCorrelate {
                exemplar,
                search,
                win,
                cols,
            } => {
                let e = self.nodes[*exemplar].value.dims();
                let (patch, pos) = (win.patch(), win.positions());
                if self.needs(*exemplar) {
                    self.acc(adj, *exemplar, |d| {
                        for s in 0..e.n {
                            gemm_beta(
                                MatRef::new(&g[s * pos..(s + 1) * pos], 1, pos),
                                MatRef::new(&cols[s * patch * pos..(s + 1) * patch * pos], patch, pos).t(),
                                1.0,
                                &mut d[s * patch..(s + 1) * patch],
                            );
                        }
                    });
                }
                if self.needs(*search) {
                    let sample = self.nodes[*search].value.dims().sample();
                    let mut dcols = vec![0.0; patch * pos];
                    self.acc(adj, *search, |d| {
                        for s in 0..e.n {
                            gemm_beta(
                                MatRef::new(self.nodes[*exemplar].value.sample(s), 1, patch).t(),
                                MatRef::new(&g[s * pos..(s + 1) * pos], 1, pos),
                                0.0,
                                &mut dcols,
                            );
                            kernels::col2im_add(win, &dcols, &mut d[s * sample..(s + 1) * sample]);
                        }
                    });
                }
            }
            Op::LogisticLoss {
                score,
                labels,
                weights,
            } => {
                let x = self.data(*score);
                let n = self.nodes[*score].value.dims().n as f64;
                self.acc(adj, *score, |d| {
                    for (((d, s), y), w) in d.iter_mut().zip(x).zip(labels).zip(weights) {
                        *d += g[0] * w * (-y) * kernels::sigmoid(-y * s) / n;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: usize,
        weight: usize,
        bias: Option<usize>,
        win: &Window,
        cols: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let x = self.nodes[input].value.dims();
        let k = self.nodes[weight].value.dims();
        let (patch, pos) = (win.patch(), win.positions());
        let gs = |s: usize| &g[s * k.n * pos..(s + 1) * k.n * pos];
        if let Some(b) = bias {
            self.acc(adj, b, |d| {
                for s in 0..x.n {
                    for (co, row) in gs(s).chunks_exact(pos).enumerate() {
                        d[co] += row.iter().sum::<f64>();
                    }
                }
            });
        }
        if self.needs(weight) {
            self.acc(adj, weight, |d| {
                for s in 0..x.n {
                    gemm_beta(
                        MatRef::new(gs(s), k.n, pos),
                        MatRef::new(&cols[s * patch * pos..(s + 1) * patch * pos], patch, pos).t(),
                        1.0,
                        d,
                    );
                }
            });
        }
        if self.needs(input) {
            let w = self.data(weight);
            let mut dcols = vec![0.0; patch * pos];
            self.acc(adj, input, |d| {
                for s in 0..x.n {
                    gemm_beta(MatRef::new(w, k.n, patch).t(), MatRef::new(gs(s), k.n, pos), 0.0, &mut dcols);
                    kernels::col2im_add(win, &dcols, &mut d[s * x.sample()..(s + 1) * x.sample()]);
                }
            });
        }
    }

    /// Runs `f` on input `i`'s adjoint buffer, allocating it on first use.
    /// Inputs that do not need gradients are skipped.
    fn acc(&self, adj: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[i].needs_grad {
            return;
        }
        let len = self.nodes[i].value.len();
        f(adj[i].get_or_insert_with(|| vec![0.0; len]));
    }
}

fn gemm_beta(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    kernels::gemm(a, b, beta, out);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
