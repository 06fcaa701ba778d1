//! Tensor tape for reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly and recorded as a node. The backward
//! pass expresses each vector-Jacobian product with the same recorded ops, so
//! gradients are themselves nodes and can be differentiated again. A second
//! reverse pass over `<grad, v>` yields the Hessian-vector product.
//!
//! The op set is deliberately small. Broadcasting, slicing, im2col, pooling
//! and transposition are all `Gather` with a precomputed index map; sums are
//! `ScatterAdd`, its transpose.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Index sentinel in gather maps: the output element is zero.
pub const ZERO_INDEX: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `op(a) · op(b)` for rank-2 operands, `op` optionally transposing.
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant.
    Mask(Var, Arc<[f64]>),
    /// `out[i] = a[idx[i]]`, zero where `idx[i] == ZERO_INDEX`.
    Gather(Var, Arc<[usize]>),
    /// `out[idx[i]] += a[i]`, skipping `ZERO_INDEX`.
    ScatterAdd(Var, Arc<[usize]>),
    Reshape(Var),
    Exp(Var),
    /// Row-wise log-softmax of a rank-2 tensor.
    LogSoftmax(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only tape of evaluated nodes.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rank2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        s => panic!("expected a rank-2 tensor, got shape {s:?}"),
    }
}

/// `op(a) · op(b)` on row-major buffers.
fn matmul_kernel(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = rank2(a);
    let (br, bc) = rank2(b);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * bc + p];
                }
            } else {
                let brow = &bd[p * bc..(p + 1) * bc];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::raw(vec![m, n], out)
}

fn log_softmax_kernel(a: &Tensor) -> Tensor {
    let (m, n) = rank2(a);
    let mut out = Vec::with_capacity(m * n);
    for row in a.data().chunks(n.max(1)).take(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::raw(vec![m, n], out)
}

/// Index map that repeats each of `rows` entries `cols` times (`[m] -> [m, n]`).
pub fn row_index(rows: usize, cols: usize) -> Arc<[usize]> {
    (0..rows)
        .flat_map(|r| std::iter::repeat_n(r, cols))
        .collect::<Vec<_>>()
        .into()
}

/// Index map that tiles `cols` entries over `rows` rows (`[n] -> [m, n]`).
pub fn col_index(rows: usize, cols: usize) -> Arc<[usize]> {
    (0..rows).flat_map(|_| 0..cols).collect::<Vec<_>>().into()
}

/// Index map for the transpose of an `[m, n]` tensor.
pub fn transpose_index(m: usize, n: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            idx.push(i * n + j);
        }
    }
    idx.into()
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

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = matmul_kernel(self.value(a), self.value(b), ta, tb);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add operands differ in shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul operands differ in shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::raw(x.shape().to_vec(), x.data().iter().map(|p| p * c).collect());
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn mask(&mut self, a: Var, mask: Arc<[f64]>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), mask.len(), "mask length differs from operand");
        let data = x.data().iter().zip(mask.iter()).map(|(p, m)| p * m).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(value, Op::Mask(a, mask), rg)
    }

    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), idx.len(), "gather shape/index mismatch");
        let x = self.value(a).data();
        let data = idx
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { x[i] })
            .collect();
        let value = Tensor::raw(shape, data);
        let rg = self.requires_grad(a);
        self.push(value, Op::Gather(a, idx), rg)
    }

    pub fn scatter_add(&mut self, a: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Var {
        let x = self.value(a).data();
        assert_eq!(x.len(), idx.len(), "scatter index length differs from operand");
        let mut data = vec![0.0; shape.iter().product()];
        for (&i, &v) in idx.iter().zip(x) {
            if i != ZERO_INDEX {
                data[i] += v;
            }
        }
        let value = Tensor::raw(shape, data);
        let rg = self.requires_grad(a);
        self.push(value, Op::ScatterAdd(a, idx), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("reshape must preserve element count");
        let rg = self.requires_grad(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::raw(x.shape().to_vec(), x.data().iter().map(|p| p.exp()).collect());
        let rg = self.requires_grad(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_kernel(self.value(a));
        let rg = self.requires_grad(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Sum of every element, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.scatter_add(a, vec![0; n].into(), Vec::new())
    }

    /// `<a, b>` as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mask: Arc<[f64]> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect::<Vec<_>>()
            .into();
        self.mask(a, mask)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) {
        if !self.requires_grad(target) {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    /// Reverse pass. Seeds pair an output node with its incoming adjoint
    /// (same shape). Returns the adjoint of each `wrt` node, or `None` when
    /// no path connects it to the seeds. All adjoints are recorded on the
    /// tape and can be differentiated again.
    pub fn backward(&mut self, seeds: &[(Var, Var)], wrt: &[Var]) -> Vec<Option<Var>> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return vec![None; wrt.len()];
        };
        let mut adj: Vec<Option<Var>> = vec![None; top + 1];
        for &(v, s) in seeds {
            assert_eq!(self.shape(v), self.shape(s), "seed shape differs from output");
            if self.requires_grad(v) {
                adj[v.0] = Some(match adj[v.0] {
                    Some(prev) => self.add(prev, s),
                    None => s,
                });
            }
        }
        let lowest_wrt = wrt.iter().map(|v| v.0).min().unwrap_or(0);
        for id in (lowest_wrt..=top).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    if self.requires_grad(a) {
                        let ga = if ta {
                            self.matmul(b, g, tb, true)
                        } else {
                            self.matmul(g, b, false, !tb)
                        };
                        self.accumulate(&mut adj, a, ga);
                    }
                    if self.requires_grad(b) {
                        let gb = if tb {
                            self.matmul(g, a, true, ta)
                        } else {
                            self.matmul(a, g, !ta, false)
                        };
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(a) {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if self.requires_grad(b) {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Mask(a, m) => {
                    let ga = self.mask(g, m);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Gather(a, idx) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.scatter_add(g, idx, shape);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.gather(g, idx, shape);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.reshape(g, shape);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let out = Var(id);
                    let ga = self.mul(g, out);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::LogSoftmax(a) => {
                    // d/dz: g - softmax(z) * rowsum(g)
                    let out = Var(id);
                    let (m, n) = rank2(self.value(out));
                    let rows = row_index(m, n);
                    let probs = self.exp(out);
                    let rs = self.scatter_add(g, rows.clone(), vec![m]);
                    let bc = self.gather(rs, rows, vec![m, n]);
                    let pb = self.mul(probs, bc);
                    let neg = self.scale(pb, -1.0);
                    let ga = self.add(g, neg);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }
        wrt.iter().map(|v| adj.get(v.0).copied().flatten()).collect()
    }
}
