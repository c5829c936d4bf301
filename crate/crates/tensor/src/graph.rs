use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows forming one independent sequence inside a packed
/// batch. Attention never crosses segment boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
    },
    Transpose(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CausalAttention {
        qkv: Var,
        segments: Vec<Segment>,
        n_heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Every node's inputs precede it, so reverse
/// index order is a valid backward schedule.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&d, rest)) => (rest.iter().product(), d),
        None => (1, 1),
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Moves a tensor into the graph as a leaf.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    /// Copies a parameter into the graph as a gradient-tracking leaf.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            true,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Option<T> {
        let n = self.node(v);
        (n.value.len() == 1).then(|| n.value[0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| x + y).collect();
        let shape = na.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| x * y).collect();
        let shape = na.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let na = self.node(a);
        let value = na.value.iter().map(|&x| x * s).collect();
        let shape = na.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.node(a).value.iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Vec::new(), vec![total], Op::Sum(a), rg)
    }

    /// Adds a length-`D` bias to every row of an `[.., D]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x), self.node(bias));
        let (_, d) = rows_cols(&nx.shape);
        if nb.shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: nx.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let mut value = nx.value.clone();
        for row in value.chunks_exact_mut(d) {
            add_into(row, &nb.value);
        }
        let shape = nx.shape.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, value, Op::AddBias { x, bias }, rg))
    }

    /// `[M x K] x [K x N] -> [M x N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[M x K] x [N x K]^T -> [M x N]`, without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: if b_transposed { "matmul_bt" } else { "matmul" },
            left: na.shape.clone(),
            right: nb.shape.clone(),
        };
        if na.shape.len() != 2 || nb.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (na.shape[0], na.shape[1]);
        let (n, kb) = if b_transposed {
            (nb.shape[0], nb.shape[1])
        } else {
            (nb.shape[1], nb.shape[0])
        };
        if k != kb {
            return Err(mismatch());
        }
        let b_strides = if b_transposed { (1, k) } else { (n, 1) };
        let mut value = vec![T::zero(); m * n];
        T::gemm(m, k, n, &na.value, (k, 1), &nb.value, b_strides, &mut value, (n, 1), false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: na.shape.len(),
            });
        }
        let (r, c) = (na.shape[0], na.shape[1]);
        let mut value = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = na.value[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nx = self.node(x);
        let rank = nx.shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let outer: usize = nx.shape[..axis].iter().product();
        let axis_len = nx.shape[axis];
        let inner: usize = nx.shape[axis + 1..].iter().product();
        let mut value = vec![T::zero(); nx.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let max = (0..axis_len)
                    .map(|j| nx.value[at(j)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..axis_len {
                    let e = (nx.value[at(j)] - max).exp();
                    value[at(j)] = e;
                    total = total + e;
                }
                for j in 0..axis_len {
                    value[at(j)] = value[at(j)] / total;
                }
            }
        }
        let shape = nx.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            value,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each row of the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (nx, ng, nb) = (self.node(x), self.node(gamma), self.node(beta));
        let (rows, d) = rows_cols(&nx.shape);
        if ng.shape != [d] || nb.shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: nx.shape.clone(),
                right: ng.shape.clone(),
            });
        }
        let inv_d = T::one() / T::from_usize(d).expect("dimension fits");
        let mut value = vec![T::zero(); nx.value.len()];
        let mut normalized = vec![T::zero(); nx.value.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &nx.value[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                normalized[r * d + j] = xh;
                value[r * d + j] = xh * ng.value[j] + nb.value[j];
            }
        }
        let shape = nx.shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let nx = self.node(x);
        let value = nx
            .value
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let shape = nx.shape.clone();
        let rg = self.rg(x);
        self.push(shape, value, Op::Gelu(x), rg)
    }

    /// Gathers rows of a `[V x D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let nt = self.node(table);
        if nt.shape.len() != 2 {
            return Err(TensorError::InvalidAxis {
                op: "embedding",
                axis: 1,
                rank: nt.shape.len(),
            });
        }
        let (v, d) = (nt.shape[0], nt.shape[1]);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    limit: v,
                });
            }
            value.extend_from_slice(&nt.value[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks rows of a 2-D tensor (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let nx = self.node(x);
        if nx.shape.len() != 2 {
            return Err(TensorError::InvalidAxis {
                op: "select_rows",
                axis: 1,
                rank: nx.shape.len(),
            });
        }
        let (r, d) = (nx.shape[0], nx.shape[1]);
        let mut value = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    limit: r,
                });
            }
            value.extend_from_slice(&nx.value[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), d],
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[N x 3D]` holding queries, keys and values side by side; the
    /// result is `[N x D]`. Each segment attends only to its own earlier rows.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[Segment], n_heads: usize) -> Result<Var> {
        let nq = self.node(qkv);
        let bad_shape = || TensorError::ShapeMismatch {
            op: "causal_attention",
            left: nq.shape.clone(),
            right: vec![n_heads],
        };
        if nq.shape.len() != 2 || nq.shape[1] % 3 != 0 || n_heads == 0 {
            return Err(bad_shape());
        }
        let rows = nq.shape[0];
        let width = nq.shape[1];
        let d = width / 3;
        if d % n_heads != 0 {
            return Err(bad_shape());
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(TensorError::Invalid(format!(
                    "causal_attention: segments must tile the rows contiguously (at row {covered})"
                )));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(TensorError::Invalid(format!(
                "causal_attention: segments cover {covered} of {rows} rows"
            )));
        }
        let hd = d / n_heads;
        let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
        let prob_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * n_heads;
        let mut probs = vec![T::zero(); prob_len];
        let mut out = vec![T::zero(); rows * d];
        let src = &nq.value;
        let mut offset = 0;
        for seg in segments {
            let l = seg.len;
            for h in 0..n_heads {
                let p = &mut probs[offset..offset + l * l];
                offset += l * l;
                for i in 0..l {
                    let qi = &src[(seg.start + i) * width + h * hd..][..hd];
                    let prow = &mut p[i * l..i * l + i + 1];
                    let mut max = T::neg_infinity();
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &src[(seg.start + j) * width + d + h * hd..][..hd];
                        let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                        *pj = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        total = total + *pj;
                    }
                    let o = &mut out[(seg.start + i) * d + h * hd..][..hd];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        *pj = *pj / total;
                        let vj = &src[(seg.start + j) * width + 2 * d + h * hd..][..hd];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc = *oc + *pj * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::CausalAttention {
                qkv,
                segments: segments.to_vec(),
                n_heads,
                probs: if rg { probs } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over the rows where `mask`
    /// is set. Accumulated in `f64`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let nl = self.node(logits);
        if nl.shape.len() != 2 || nl.shape[0] != targets.len() || targets.len() != mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: nl.shape.clone(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let v = nl.shape[1];
        let mut rows = Vec::new();
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                if t >= v {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        limit: v,
                    });
                }
                rows.push((r, t));
            }
        }
        if rows.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = 0.0f64;
        for &(r, t) in &rows {
            let row = &nl.value[r * v..(r + 1) * v];
            let max = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|x| (x.to_f64_lossy() - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[t].to_f64_lossy();
            probs.extend(row.iter().map(|x| (x.to_f64_lossy() - lse).exp()));
        }
        let loss = total / rows.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![T::from_f64_lossy(loss)],
            Op::CrossEntropy {
                logits,
                rows,
                probs: if rg { probs } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Consumes the graph; returns the
    /// gradients of every leaf that requires them.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.node(loss).shape.clone();
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &g, &mut grads);
            // Free activations as soon as they are no longer needed.
            self.nodes[idx].value = Vec::new();
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, idx: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(slot) = self.grad_slot(grads, v) {
                        add_into(slot, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((s, &gi), &y) in slot.iter_mut().zip(g).zip(vb) {
                        *s = *s + gi * y;
                    }
                }
                if let Some(slot) = self.grad_slot(grads, *b) {
                    for ((s, &gi), &x) in slot.iter_mut().zip(g).zip(va) {
                        *s = *s + gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for (d, &gi) in slot.iter_mut().zip(g) {
                        *d = *d + gi * *s;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for d in slot.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    add_into(slot, g);
                }
                if let Some(slot) = self.grad_slot(grads, *bias) {
                    let d = slot.len();
                    for row in g.chunks_exact(d) {
                        add_into(slot, row);
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if let Some(slot) = self.grad_slot(grads, *a) {
                    // dA = G * B^T : [m x n] x [n x k]
                    let bt_strides = if *b_transposed { (k, 1) } else { (1, n) };
                    T::gemm(m, n, k, g, (n, 1), vb, bt_strides, slot, (k, 1), true);
                }
                if let Some(slot) = self.grad_slot(grads, *b) {
                    if *b_transposed {
                        // B is [n x k]; dB = G^T * A : [n x m] x [m x k]
                        T::gemm(n, m, k, g, (1, n), va, (k, 1), slot, (k, 1), true);
                    } else {
                        // dB = A^T * G : [k x m] x [m x n]
                        T::gemm(k, m, n, va, (1, k), g, (n, 1), slot, (n, 1), true);
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    let shape = &self.nodes[idx].shape;
                    let (r, c) = (shape[0], shape[1]);
                    for i in 0..r {
                        for j in 0..c {
                            slot[j * r + i] = slot[j * r + i] + g[i * c + j];
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = &self.nodes[idx].value;
                if let Some(slot) = self.grad_slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * axis_len * inner + j * inner + i;
                            let dot = (0..*axis_len).fold(T::zero(), |acc, j| acc + y[at(j)] * g[at(j)]);
                            for j in 0..*axis_len {
                                let p = at(j);
                                slot[p] = slot[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let d = self.nodes[gamma.0].value.len();
                if let Some(slot) = self.grad_slot(grads, *gamma) {
                    for (gr, xr) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for j in 0..d {
                            slot[j] = slot[j] + gr[j] * xr[j];
                        }
                    }
                }
                if let Some(slot) = self.grad_slot(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        add_into(slot, gr);
                    }
                }
                let gv = &self.nodes[gamma.0].value;
                if let Some(slot) = self.grad_slot(grads, *x) {
                    let inv_d = T::one() / T::from_usize(d).expect("dimension fits");
                    for (r, ((gr, xr), sr)) in g
                        .chunks_exact(d)
                        .zip(normalized.chunks_exact(d))
                        .zip(slot.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                        }
                        mean_dxh = mean_dxh * inv_d;
                        mean_dxh_xh = mean_dxh_xh * inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            sr[j] = sr[j] + rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let xv = &self.nodes[x.0].value;
                if let Some(slot) = self.grad_slot(grads, *x) {
                    for ((s, &gi), &v) in slot.iter_mut().zip(g).zip(xv) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dth = (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        *s = *s + gi * (half * (T::one() + th) + half * v * dth);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(slot) = self.grad_slot(grads, *table) {
                    let d = self.nodes[table.0].shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut slot[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    let d = self.nodes[x.0].shape[1];
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut slot[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                segments,
                n_heads,
                probs,
            } => {
                let src = &self.nodes[qkv.0].value;
                let width = self.nodes[qkv.0].shape[1];
                let d = width / 3;
                let hd = d / n_heads;
                let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
                let Some(slot) = self.grad_slot(grads, *qkv) else {
                    return;
                };
                let mut offset = 0;
                let mut dp = Vec::new();
                for seg in segments {
                    let l = seg.len;
                    for h in 0..*n_heads {
                        let p = &probs[offset..offset + l * l];
                        offset += l * l;
                        for i in 0..l {
                            let gi = &g[(seg.start + i) * d + h * hd..][..hd];
                            let prow = &p[i * l..i * l + i + 1];
                            dp.clear();
                            // dP and dV
                            for (j, &pij) in prow.iter().enumerate() {
                                let vrow = (seg.start + j) * width + 2 * d + h * hd;
                                let vj = &src[vrow..vrow + hd];
                                dp.push(gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y));
                                let dv = &mut slot[vrow..vrow + hd];
                                for (dvc, &gc) in dv.iter_mut().zip(gi) {
                                    *dvc = *dvc + pij * gc;
                                }
                            }
                            let dot = prow.iter().zip(&dp).fold(T::zero(), |a, (&x, &y)| a + x * y);
                            let qrow = (seg.start + i) * width + h * hd;
                            for (j, &pij) in prow.iter().enumerate() {
                                let ds = pij * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let krow = (seg.start + j) * width + d + h * hd;
                                for c in 0..hd {
                                    let kc = src[krow + c];
                                    let qc = src[qrow + c];
                                    slot[qrow + c] = slot[qrow + c] + ds * kc;
                                    slot[krow + c] = slot[krow + c] + ds * qc;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            } => {
                if let Some(slot) = self.grad_slot(grads, *logits) {
                    let v = self.nodes[logits.0].shape[1];
                    let upstream = g[0].to_f64_lossy() / rows.len() as f64;
                    for (i, &(r, t)) in rows.iter().enumerate() {
                        let p = &probs[i * v..(i + 1) * v];
                        let dst = &mut slot[r * v..(r + 1) * v];
                        for (c, (dc, &pc)) in dst.iter_mut().zip(p).enumerate() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *dc = *dc + T::from_f64_lossy((pc - onehot) * upstream);
                        }
                    }
                }
            }
        }
    }
}
