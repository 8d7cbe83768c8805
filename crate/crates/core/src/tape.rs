//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and returns the gradient of a
//! scalar loss with respect to every node that requires one. The training loop
//! builds a fresh tape per mini-batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a compact `d_r x d_c` matrix is expanded to `d_m x d_n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepeatMode {
    /// `out[r][c] = compact[r mod d_r][c mod d_c]`
    #[default]
    Tile,
    /// `out[r][c] = compact[r * d_r / d_m][c * d_c / d_n]`
    Block,
}

impl RepeatMode {
    /// Index into the compact axis of length `compact` for position `pos` of
    /// the expanded axis of length `full`.
    #[inline]
    pub fn source_index(self, pos: usize, compact: usize, full: usize) -> usize {
        match self {
            RepeatMode::Tile => pos % compact,
            RepeatMode::Block => pos * compact / full,
        }
    }

    fn index_map(self, compact: usize, full: usize) -> Vec<usize> {
        (0..full).map(|p| self.source_index(p, compact, full)).collect()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    BroadcastBatch(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Repeat(Var, RepeatMode),
    ModulatedLinear {
        input: Var,
        compact: Var,
        weight: Var,
        mode: RepeatMode,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when no path connects the node to the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes have valid shapes")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(node, self.shape(a).to_vec(), value, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(node, self.shape(x).to_vec(), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector over the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRow(x, bias), self.shape(x).to_vec(), value, rg))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Natural log. Callers feeding probabilities clamp first.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Gradient passes through inside `[lo, hi]` and is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Op::Mean(x), vec![1], vec![m], rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            matmul_into(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::BatchMatMul(a, b), vec![bs, m, n], out, rg))
    }

    /// Stacks `batch` copies of `x` along a new leading axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(Error::InvalidShape {
                shape: vec![0],
                reason: "broadcast_batch needs a positive batch".into(),
            });
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let value = self.value(x).repeat(batch);
        let rg = self.rg(x);
        Ok(self.push(Op::BroadcastBatch(x), shape, value, rg))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat(parts.to_vec()), shape, value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), shape, value, rg))
    }

    /// Selects rows of a 2-D tensor: `out[i] = x[indices[i]]`. Serves both
    /// embedding lookup and in-batch permutation.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "gather_rows needs a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![0, cols],
                reason: "gather_rows with no indices".into(),
            });
        }
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "row".into(),
                    index: i,
                    size: rows,
                });
            }
            value.extend_from_slice(&self.value(x)[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::GatherRows(x, indices.to_vec()),
            vec![indices.len(), cols],
            value,
            rg,
        ))
    }

    /// Expands the last two axes `[.., d_r, d_c]` to `[.., rows, cols]`.
    pub fn repeat(&mut self, x: Var, rows: usize, cols: usize, mode: RepeatMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "repeat needs at least 2 axes".into(),
            });
        }
        let (dr, dc) = (s[s.len() - 2], s[s.len() - 1]);
        check_divides("rows", dr, rows)?;
        check_divides("cols", dc, cols)?;
        let outer: usize = s[..s.len() - 2].iter().product();
        let rmap = mode.index_map(dr, rows);
        let cmap = mode.index_map(dc, cols);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * rows * cols);
        for o in 0..outer {
            let block = &src[o * dr * dc..(o + 1) * dr * dc];
            for &r in &rmap {
                for &c in &cmap {
                    value.push(block[r * dc + c]);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([rows, cols]);
        let rg = self.rg(x);
        Ok(self.push(Op::Repeat(x, mode), shape, value, rg))
    }

    /// Per-sample weighted linear map without materialising the expanded
    /// weighting matrices:
    /// `out[i, n] = sum_m input[i, m] * weight[m, n] * compact[i, rho(m), kappa(n)]`
    /// where `rho`/`kappa` are the repeat index maps. Equivalent to
    /// `(repeat(compact) * weight)^T input` per sample.
    pub fn modulated_linear(&mut self, input: Var, compact: Var, weight: Var, mode: RepeatMode) -> Result<Var> {
        let (sh, ss, sw) = (self.shape(input), self.shape(compact), self.shape(weight));
        if sh.len() != 2 || sw.len() != 2 || ss.len() != 3 || sh[1] != sw[0] || ss[0] != sh[0] {
            return Err(Error::ShapeMismatch {
                op: "modulated_linear",
                lhs: sh.to_vec(),
                rhs: ss.iter().chain(sw).copied().collect(),
            });
        }
        let (bs, dm, dn, dr, dc) = (sh[0], sw[0], sw[1], ss[1], ss[2]);
        check_divides("rows", dr, dm)?;
        check_divides("cols", dc, dn)?;
        let rmap = mode.index_map(dr, dm);
        let cmap = mode.index_map(dc, dn);
        let (h, s, w) = (self.value(input), self.value(compact), self.value(weight));
        let mut out = vec![0.0; bs * dn];
        for i in 0..bs {
            let si = &s[i * dr * dc..(i + 1) * dr * dc];
            let oi = &mut out[i * dn..(i + 1) * dn];
            for m in 0..dm {
                let hm = h[i * dm + m];
                if hm == 0.0 {
                    continue;
                }
                let srow = &si[rmap[m] * dc..(rmap[m] + 1) * dc];
                let wrow = &w[m * dn..(m + 1) * dn];
                for n in 0..dn {
                    oi[n] += hm * wrow[n] * srow[cmap[n]];
                }
            }
        }
        let rg = self.rg(input) || self.rg(compact) || self.rg(weight);
        Ok(self.push(
            Op::ModulatedLinear {
                input,
                compact,
                weight,
                mode,
            },
            vec![bs, dn],
            out,
            rg,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_assign(gx, g));
                let n = self.value(*bias).len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Affine(x, scale) => acc(*x, &mut |gx| {
                for (a, gi) in gx.iter_mut().zip(g) {
                    *a += scale * gi;
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((a, gi), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *a += gi * y * (1.0 - y);
                }
            }),
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, &mut |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                })
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                acc(*x, &mut |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        *a += gi / xi;
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                acc(*x, &mut |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        if xi >= lo && xi <= hi {
                            *a += gi;
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n))
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| matmul_bt_acc(g, vb, ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_acc(va, g, gb, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        matmul_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        matmul_at_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::BroadcastBatch(x) => {
                let n = self.value(*x).len();
                acc(*x, &mut |gx| {
                    for chunk in g.chunks(n) {
                        add_assign(gx, chunk);
                    }
                })
            }
            Op::Concat(parts) => {
                let total = *node.shape.last().unwrap();
                let outer = node.value.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    acc(p, &mut |gp| {
                        for r in 0..outer {
                            add_assign(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_assign(gx, g)),
            Op::GatherRows(x, indices) => {
                let cols = self.shape(*x)[1];
                acc(*x, &mut |gx| {
                    for (i, &src) in indices.iter().enumerate() {
                        add_assign(&mut gx[src * cols..(src + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                })
            }
            Op::Repeat(x, mode) => {
                let s = self.shape(*x);
                let (dr, dc) = (s[s.len() - 2], s[s.len() - 1]);
                let (rows, cols) = (node.shape[node.shape.len() - 2], node.shape[node.shape.len() - 1]);
                let outer = node.value.len() / (rows * cols);
                let rmap = mode.index_map(dr, rows);
                let cmap = mode.index_map(dc, cols);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let gb = &mut gx[o * dr * dc..(o + 1) * dr * dc];
                        let go = &g[o * rows * cols..(o + 1) * rows * cols];
                        for (r, &sr) in rmap.iter().enumerate() {
                            for (c, &sc) in cmap.iter().enumerate() {
                                gb[sr * dc + sc] += go[r * cols + c];
                            }
                        }
                    }
                })
            }
            Op::ModulatedLinear {
                input,
                compact,
                weight,
                mode,
            } => self.modulated_linear_backward(*input, *compact, *weight, *mode, g, grads),
        }
    }

    fn modulated_linear_backward(
        &self,
        input: Var,
        compact: Var,
        weight: Var,
        mode: RepeatMode,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (sh, ss, sw) = (self.shape(input), self.shape(compact), self.shape(weight));
        let (bs, dm, dn, dr, dc) = (sh[0], sw[0], sw[1], ss[1], ss[2]);
        let rmap = mode.index_map(dr, dm);
        let cmap = mode.index_map(dc, dn);
        let (h, s, w) = (self.value(input), self.value(compact), self.value(weight));

        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut gh = want(input).then(|| vec![0.0; h.len()]);
        let mut gs = want(compact).then(|| vec![0.0; s.len()]);
        let mut gw = want(weight).then(|| vec![0.0; w.len()]);

        for i in 0..bs {
            let si = &s[i * dr * dc..(i + 1) * dr * dc];
            let gi = &g[i * dn..(i + 1) * dn];
            for m in 0..dm {
                let hm = h[i * dm + m];
                let r = rmap[m];
                let srow = &si[r * dc..(r + 1) * dc];
                let wrow = &w[m * dn..(m + 1) * dn];
                if let Some(gh) = gh.as_mut() {
                    let mut acc = 0.0;
                    for n in 0..dn {
                        acc += gi[n] * wrow[n] * srow[cmap[n]];
                    }
                    gh[i * dm + m] += acc;
                }
                if hm == 0.0 {
                    continue;
                }
                if let Some(gw) = gw.as_mut() {
                    let gwrow = &mut gw[m * dn..(m + 1) * dn];
                    for n in 0..dn {
                        gwrow[n] += gi[n] * hm * srow[cmap[n]];
                    }
                }
                if let Some(gs) = gs.as_mut() {
                    let gsrow = &mut gs[i * dr * dc + r * dc..i * dr * dc + (r + 1) * dc];
                    for n in 0..dn {
                        gsrow[cmap[n]] += gi[n] * hm * wrow[n];
                    }
                }
            }
        }

        for (v, buf) in [(input, gh), (compact, gs), (weight, gw)] {
            if let Some(buf) = buf {
                match grads[v.0].as_mut() {
                    Some(existing) => add_assign(existing, &buf),
                    None => grads[v.0] = Some(buf),
                }
            }
        }
    }
}

fn check_divides(axis: &str, compact: usize, full: usize) -> Result<()> {
    if compact == 0 || compact > full || !full.is_multiple_of(compact) {
        return Err(Error::Config(format!(
            "repeat {axis}: compact size {compact} must divide target size {full}"
        )));
    }
    Ok(())
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// `ga[m, k] += g[m, n] * b[k, n]^T`
fn matmul_bt_acc(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k, n] += a[m, k]^T * g[m, n]`
fn matmul_at_acc(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for j in 0..n {
                gbrow[j] += aip * grow[j];
            }
        }
    }
}
