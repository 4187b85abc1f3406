//! Define-then-run reverse-mode differentiation over a closed op set.
//!
//! A [`Graph`] is built once with symbolic shapes. Every builder call checks
//! shapes immediately, so a graph that builds is shape-correct for any
//! binding that matches the declared inputs. [`Graph::forward`] evaluates all
//! nodes in insertion order (which is a topological order) and
//! [`Graph::backward`] propagates adjoints from a scalar node.

use std::collections::{BTreeMap, HashMap};

use super::activation::{gelu, gelu_grad, sigmoid};
use super::kernels::{axpy, mm_nn, mm_nt, mm_tn};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to an integer input (token ids, targets).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexId(usize);

#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String, requires_grad: bool },
    /// `a · b` or `a · bᵀ`; `a` may carry a leading batch axis.
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    Mul(NodeId, NodeId),
    MulRow { x: NodeId, row: NodeId },
    /// `x + s` with `s` a one-element tensor.
    AddScalar { x: NodeId, s: NodeId },
    /// `x · s` with `s` a one-element tensor.
    MulScalar { x: NodeId, s: NodeId },
    /// `scale · x + shift` with constant coefficients.
    Affine { x: NodeId, scale: f64, shift: f64 },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Softmax { x: NodeId, causal: bool },
    LayerNorm { x: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: IndexId },
    /// Mean token cross-entropy of `logits` against integer targets.
    CrossEntropy { logits: NodeId, targets: IndexId },
    Sum(NodeId),
    /// `[B·T, H·E] → [B·H, T, E]`
    SplitHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    /// Inverse of `SplitHeads`.
    MergeHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow { .. } => "mul_row",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Affine { .. } => "affine",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

#[derive(Clone, Debug)]
struct IndexInput {
    name: String,
    len: usize,
    /// Exclusive upper bound every id must respect.
    bound: usize,
}

/// Named inputs for one forward pass.
pub struct Bindings<'a, R: Real> {
    reals: HashMap<String, &'a Tensor<R>>,
    indices: HashMap<String, &'a [usize]>,
}

impl<'a, R: Real> Default for Bindings<'a, R> {
    fn default() -> Self {
        Bindings {
            reals: HashMap::new(),
            indices: HashMap::new(),
        }
    }
}

impl<'a, R: Real> Bindings<'a, R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&mut self, name: impl Into<String>, t: &'a Tensor<R>) -> &mut Self {
        self.reals.insert(name.into(), t);
        self
    }

    pub fn indices(&mut self, name: impl Into<String>, ids: &'a [usize]) -> &mut Self {
        self.indices.insert(name.into(), ids);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<R>> {
        self.reals.get(name).copied()
    }
}

/// Gradients of a scalar with respect to every `requires_grad` input, by name.
pub type Gradients<R> = BTreeMap<String, Tensor<R>>;

#[derive(Clone, Debug)]
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node>,
    index_inputs: Vec<IndexInput>,
    values: Vec<Vec<R>>,
    aux: Vec<Vec<R>>,
    index_values: Vec<Vec<usize>>,
    evaluated: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(id: usize, op: &str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        node: format!("#{id} ({op})"),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            index_inputs: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            index_values: Vec::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Input { requires_grad, .. } => *requires_grad,
            other => inputs_of(other).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn check_input_name(&self, name: &str) -> Result<()> {
        let dup_real = self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Input { name: other, .. } if other == name));
        let dup_index = self.index_inputs.iter().any(|i| i.name == name);
        if dup_real || dup_index {
            return Err(Error::Graph(format!("duplicate input name {name:?}")));
        }
        Ok(())
    }

    /// Constant real input (no gradient).
    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        self.check_input_name(&name)?;
        Ok(self.push(
            Op::Input {
                name,
                requires_grad: false,
            },
            shape.to_vec(),
        ))
    }

    /// Differentiable real input.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        self.check_input_name(&name)?;
        Ok(self.push(
            Op::Input {
                name,
                requires_grad: true,
            },
            shape.to_vec(),
        ))
    }

    /// Integer input of fixed length whose entries must lie in `0..bound`.
    pub fn index_input(&mut self, name: impl Into<String>, len: usize, bound: usize) -> Result<IndexId> {
        let name = name.into();
        self.check_input_name(&name)?;
        self.index_inputs.push(IndexInput { name, len, bound });
        self.evaluated = false;
        Ok(IndexId(self.index_inputs.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; with `b` stored `[out, in]` this is a linear layer.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let id = self.next_id();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let kind = "matmul";
        if sa.len() < 2 || sa.len() > 3 || sb.len() < 2 || sb.len() > 3 {
            return Err(shape_err(id, kind, &[0, 0], &sa));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            let mut want = sb.clone();
            let l = want.len();
            if trans_b {
                want[l - 1] = k;
            } else {
                want[l - 2] = k;
            }
            return Err(shape_err(id, kind, &want, &sb));
        }
        let out = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (3, 2) => vec![sa[0], m, n],
            (3, 3) => {
                if sa[0] != sb[0] {
                    let mut want = sb.clone();
                    want[0] = sa[0];
                    return Err(shape_err(id, kind, &want, &sb));
                }
                vec![sa[0], m, n]
            }
            _ => return Err(shape_err(id, kind, &[sb[0], m, k], &sa)),
        };
        Ok(self.push(Op::MatMul { a, b, trans_b }, out))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, kind: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(self.next_id(), kind, sa, sb));
        }
        Ok(sa.to_vec())
    }

    fn row_compatible(&self, x: NodeId, row: NodeId, kind: &str) -> Result<Vec<usize>> {
        let sx = self.shape(x).to_vec();
        let sr = self.shape(row);
        let cols = *sx.last().unwrap_or(&1);
        if sr != [cols] {
            return Err(shape_err(self.next_id(), kind, &[cols], sr));
        }
        Ok(sx)
    }

    fn scalar_operand(&self, s: NodeId, kind: &str) -> Result<()> {
        let ss = self.shape(s);
        if ss != [1] {
            return Err(shape_err(self.next_id(), kind, &[1], ss));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let s = self.row_compatible(x, row, "add_row")?;
        Ok(self.push(Op::AddRow { x, row }, s))
    }

    /// Multiplies every row of `x` element-wise by a `[cols]` vector.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let s = self.row_compatible(x, row, "mul_row")?;
        Ok(self.push(Op::MulRow { x, row }, s))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.scalar_operand(s, "add_scalar")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddScalar { x, s }, shape))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.scalar_operand(s, "mul_scalar")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::MulScalar { x, s }, shape))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Affine { x, scale, shift }, shape))
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.affine(x, scale, 0.0)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Gelu(x), shape))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Sigmoid(x), shape))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Square(x), shape))
    }

    /// Softmax over the last axis. With `causal`, the last two axes must be
    /// a square `[T, T]` score matrix and entries above the diagonal are
    /// excluded (probability exactly zero).
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if causal {
            let l = shape.len();
            if l < 2 || shape[l - 1] != shape[l - 2] {
                let mut want = shape.clone();
                if l >= 2 {
                    want[l - 1] = shape[l - 2];
                }
                return Err(shape_err(self.next_id(), "softmax", &want, &shape));
            }
        }
        Ok(self.push(Op::Softmax { x, causal }, shape))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { x, eps }, shape))
    }

    pub fn embedding(&mut self, table: NodeId, ids: IndexId) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err(self.next_id(), "embedding", &[0, 0], &st));
        }
        let inp = &self.index_inputs[ids.0];
        if inp.bound > st[0] {
            return Err(shape_err(
                self.next_id(),
                "embedding",
                &[inp.bound, st[1]],
                &st,
            ));
        }
        let n = inp.len;
        Ok(self.push(Op::Embedding { table, ids }, vec![n, st[1]]))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: IndexId) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        let t = &self.index_inputs[targets.0];
        if sl.len() != 2 || sl[0] != t.len || t.bound > sl[1] {
            return Err(shape_err(
                self.next_id(),
                "cross_entropy",
                &[t.len, t.bound],
                &sl,
            ));
        }
        Ok(self.push(Op::CrossEntropy { logits, targets }, vec![1]))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Sum(x), vec![1]))
    }

    pub fn split_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != batch * seq || heads == 0 || !sx[1].is_multiple_of(heads) {
            return Err(shape_err(
                self.next_id(),
                "split_heads",
                &[batch * seq, heads * sx.get(1).copied().unwrap_or(0) / heads.max(1)],
                &sx,
            ));
        }
        let e = sx[1] / heads;
        Ok(self.push(
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            vec![batch * heads, seq, e],
        ))
    }

    pub fn merge_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[0] != batch * heads || sx[1] != seq {
            return Err(shape_err(
                self.next_id(),
                "merge_heads",
                &[batch * heads, seq, sx.get(2).copied().unwrap_or(0)],
                &sx,
            ));
        }
        Ok(self.push(
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            vec![batch * seq, heads * sx[2]],
        ))
    }

    /// Evaluates every node. Inputs not mentioned in `bindings` are an error.
    pub fn forward(&mut self, bindings: &Bindings<'_, R>) -> Result<()> {
        self.evaluated = false;
        self.index_values.clear();
        for inp in &self.index_inputs {
            let ids = bindings
                .indices
                .get(&inp.name)
                .ok_or_else(|| Error::Graph(format!("index input {:?} not bound", inp.name)))?;
            if ids.len() != inp.len {
                return Err(Error::Shape {
                    node: format!("index input {:?}", inp.name),
                    expected: vec![inp.len],
                    actual: vec![ids.len()],
                });
            }
            if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= inp.bound) {
                return Err(Error::TokenOutOfRange {
                    id,
                    position: pos,
                    vocab_size: inp.bound,
                });
            }
            self.index_values.push(ids.to_vec());
        }

        self.values.clear();
        self.aux.clear();
        for idx in 0..self.nodes.len() {
            let (value, aux) = self.eval_node(idx, bindings)?;
            self.values.push(value);
            self.aux.push(aux);
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(&self, idx: usize, bindings: &Bindings<'_, R>) -> Result<(Vec<R>, Vec<R>)> {
        let node = &self.nodes[idx];
        let v = |id: &NodeId| -> &[R] { &self.values[id.0] };
        let mut aux = Vec::new();
        let out = match &node.op {
            Op::Input { name, .. } => {
                let t = bindings
                    .reals
                    .get(name)
                    .ok_or_else(|| Error::Graph(format!("input {name:?} not bound")))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::Shape {
                        node: format!("#{idx} (input {name:?})"),
                        expected: node.shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                t.data().to_vec()
            }
            Op::MatMul { a, b, trans_b } => {
                let (batch, m, k, n, b_batched) = self.mm_dims(*a, *b, *trans_b);
                let (av, bv) = (v(a), v(b));
                let mut out = vec![R::zero(); batch * m * n];
                for bi in 0..batch {
                    let asl = &av[bi * m * k..(bi + 1) * m * k];
                    let bsl = if b_batched {
                        &bv[bi * k * n..(bi + 1) * k * n]
                    } else {
                        bv
                    };
                    let csl = &mut out[bi * m * n..(bi + 1) * m * n];
                    if *trans_b {
                        mm_nt(asl, bsl, csl, m, k, n, false);
                    } else {
                        mm_nn(asl, bsl, csl, m, k, n, false);
                    }
                }
                out
            }
            Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| *x + *y).collect(),
            Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| *x * *y).collect(),
            Op::AddRow { x, row } => {
                let r = v(row);
                let cols = r.len();
                let mut out = v(x).to_vec();
                if cols > 0 {
                    for chunk in out.chunks_mut(cols) {
                        for (o, b) in chunk.iter_mut().zip(r) {
                            *o += *b;
                        }
                    }
                }
                out
            }
            Op::MulRow { x, row } => {
                let r = v(row);
                let cols = r.len();
                let mut out = v(x).to_vec();
                if cols > 0 {
                    for chunk in out.chunks_mut(cols) {
                        for (o, b) in chunk.iter_mut().zip(r) {
                            *o *= *b;
                        }
                    }
                }
                out
            }
            Op::AddScalar { x, s } => {
                let c = v(s)[0];
                v(x).iter().map(|e| *e + c).collect()
            }
            Op::MulScalar { x, s } => {
                let c = v(s)[0];
                v(x).iter().map(|e| *e * c).collect()
            }
            Op::Affine { x, scale, shift } => {
                let (a, b) = (R::of(*scale), R::of(*shift));
                v(x).iter().map(|e| a * *e + b).collect()
            }
            Op::Gelu(x) => v(x).iter().map(|e| gelu(*e)).collect(),
            Op::Sigmoid(x) => v(x).iter().map(|e| sigmoid(*e)).collect(),
            Op::Square(x) => v(x).iter().map(|e| *e * *e).collect(),
            Op::Softmax { x, causal } => {
                let xv = v(x);
                let cols = *node.shape.last().unwrap_or(&1);
                let mut out = vec![R::zero(); xv.len()];
                if cols > 0 {
                    for (r, (src, dst)) in xv.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
                        let live = if *causal { r % cols + 1 } else { cols };
                        softmax_row(&src[..live], &mut dst[..live]);
                    }
                }
                out
            }
            Op::LayerNorm { x, eps } => {
                let xv = v(x);
                let cols = *node.shape.last().unwrap_or(&1);
                let mut out = vec![R::zero(); xv.len()];
                if cols > 0 {
                    for (src, dst) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
                        let rstd = layer_norm_row(src, dst, R::of(*eps));
                        aux.push(rstd);
                    }
                }
                out
            }
            Op::Embedding { table, ids } => {
                let tv = v(table);
                let d = node.shape[1];
                let ids = &self.index_values[ids.0];
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    out.extend_from_slice(&tv[id * d..(id + 1) * d]);
                }
                out
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = v(logits);
                let vsz = self.nodes[logits.0].shape[1];
                let t = &self.index_values[targets.0];
                let mut total = R::zero();
                for (row, &target) in lv.chunks(vsz).zip(t) {
                    total += log_sum_exp(row) - row[target];
                }
                vec![total / R::of(t.len().max(1) as f64)]
            }
            Op::Sum(x) => {
                let mut acc = R::zero();
                for e in v(x) {
                    acc += *e;
                }
                vec![acc]
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let xv = v(x);
                let e = node.shape[2];
                let mut out = vec![R::zero(); xv.len()];
                for b in 0..*batch {
                    for t in 0..*seq {
                        let src = &xv[(b * seq + t) * heads * e..(b * seq + t + 1) * heads * e];
                        for h in 0..*heads {
                            let dst = ((b * heads + h) * seq + t) * e;
                            out[dst..dst + e].copy_from_slice(&src[h * e..(h + 1) * e]);
                        }
                    }
                }
                out
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let xv = v(x);
                let e = self.nodes[x.0].shape[2];
                let mut out = vec![R::zero(); xv.len()];
                for b in 0..*batch {
                    for t in 0..*seq {
                        let dst = (b * seq + t) * heads * e;
                        for h in 0..*heads {
                            let src = ((b * heads + h) * seq + t) * e;
                            out[dst + h * e..dst + (h + 1) * e].copy_from_slice(&xv[src..src + e]);
                        }
                    }
                }
                out
            }
        };
        Ok((out, aux))
    }

    fn mm_dims(&self, a: NodeId, b: NodeId, trans_b: bool) -> (usize, usize, usize, usize, bool) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if trans_b {
            sb[sb.len() - 2]
        } else {
            sb[sb.len() - 1]
        };
        match (sa.len(), sb.len()) {
            (3, 3) => (sa[0], m, k, n, true),
            (3, 2) => (1, sa[0] * m, k, n, false),
            _ => (1, m, k, n, false),
        }
    }

    pub fn value(&self, id: NodeId) -> Result<Tensor<R>> {
        if !self.evaluated {
            return Err(Error::Graph("value read before forward".into()));
        }
        Tensor::new(self.nodes[id.0].shape.clone(), self.values[id.0].clone())
    }

    pub fn value_slice(&self, id: NodeId) -> Result<&[R]> {
        if !self.evaluated {
            return Err(Error::Graph("value read before forward".into()));
        }
        Ok(&self.values[id.0])
    }

    pub fn scalar(&self, id: NodeId) -> Result<R> {
        let v = self.value_slice(id)?;
        if v.len() != 1 {
            return Err(shape_err(id.0, self.nodes[id.0].op.kind(), &[1], &self.nodes[id.0].shape));
        }
        Ok(v[0])
    }

    /// Gradients of the scalar node `output` with respect to every
    /// `requires_grad` input. Inputs that do not reach `output` get zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<R>> {
        if !self.evaluated {
            return Err(Error::Graph("backward called before forward".into()));
        }
        if self.nodes[output.0].shape != [1] {
            return Err(Error::Graph(format!(
                "backward seed must be a scalar of shape [1], node #{} has shape {:?}",
                output.0, self.nodes[output.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![R::one()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Input { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input {
                name,
                requires_grad: true,
            } = &node.op
            {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![R::zero(); node.shape.iter().product()]);
                out.insert(name.clone(), Tensor::new(node.shape.clone(), data)?);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, idx: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[idx];
        let v = |id: &NodeId| -> &[R] { &self.values[id.0] };
        let wants = |id: &NodeId| self.nodes[id.0].needs_grad;
        let y = &self.values[idx];

        match &node.op {
            Op::Input { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (batch, m, k, n, b_batched) = self.mm_dims(*a, *b, *trans_b);
                let (av, bv) = (v(a), v(b));
                if wants(a) {
                    let ga = grad_slot(grads, *a, av.len());
                    for bi in 0..batch {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let bsl = if b_batched {
                            &bv[bi * k * n..(bi + 1) * k * n]
                        } else {
                            bv
                        };
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // dA = dC · B with B [n, k]
                            mm_nn(gsl, bsl, dst, m, n, k, true);
                        } else {
                            // dA = dC · Bᵀ with B [k, n]
                            mm_nt(gsl, bsl, dst, m, n, k, true);
                        }
                    }
                }
                if wants(b) {
                    let gb = grad_slot(grads, *b, bv.len());
                    for bi in 0..batch {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &av[bi * m * k..(bi + 1) * m * k];
                        let dst = if b_batched {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &mut gb[..]
                        };
                        if *trans_b {
                            // dB = dCᵀ · A  -> [n, k]
                            mm_tn(gsl, asl, dst, n, m, k, true);
                        } else {
                            // dB = Aᵀ · dC  -> [k, n]
                            mm_tn(asl, gsl, dst, k, m, n, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if wants(id) {
                        let dst = grad_slot(grads, *id, g.len());
                        axpy(R::one(), g, dst);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = v(b);
                    let dst = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = v(a);
                    let dst = grad_slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow { x, row } => {
                let cols = self.nodes[row.0].shape[0];
                if wants(x) {
                    let dst = grad_slot(grads, *x, g.len());
                    axpy(R::one(), g, dst);
                }
                if wants(row) && cols > 0 {
                    let dst = grad_slot(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        axpy(R::one(), chunk, dst);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let cols = self.nodes[row.0].shape[0];
                if cols == 0 {
                    return;
                }
                if wants(x) {
                    let r = v(row);
                    let dst = grad_slot(grads, *x, g.len());
                    for (dchunk, gchunk) in dst.chunks_mut(cols).zip(g.chunks(cols)) {
                        for j in 0..cols {
                            dchunk[j] += gchunk[j] * r[j];
                        }
                    }
                }
                if wants(row) {
                    let xv = v(x);
                    let dst = grad_slot(grads, *row, cols);
                    for (xchunk, gchunk) in xv.chunks(cols).zip(g.chunks(cols)) {
                        for j in 0..cols {
                            dst[j] += gchunk[j] * xchunk[j];
                        }
                    }
                }
            }
            Op::AddScalar { x, s } => {
                if wants(x) {
                    let dst = grad_slot(grads, *x, g.len());
                    axpy(R::one(), g, dst);
                }
                if wants(s) {
                    let total: R = g.iter().copied().sum();
                    grad_slot(grads, *s, 1)[0] += total;
                }
            }
            Op::MulScalar { x, s } => {
                if wants(x) {
                    let c = v(s)[0];
                    let dst = grad_slot(grads, *x, g.len());
                    axpy(c, g, dst);
                }
                if wants(s) {
                    let xv = v(x);
                    let mut total = R::zero();
                    for i in 0..g.len() {
                        total += g[i] * xv[i];
                    }
                    grad_slot(grads, *s, 1)[0] += total;
                }
            }
            Op::Affine { x, scale, .. } => {
                if wants(x) {
                    let dst = grad_slot(grads, *x, g.len());
                    axpy(R::of(*scale), g, dst);
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let xv = v(x);
                    let dst = grad_slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(x) {
                    let dst = grad_slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * y[i] * (R::one() - y[i]);
                    }
                }
            }
            Op::Square(x) => {
                if wants(x) {
                    let xv = v(x);
                    let dst = grad_slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dst[i] += R::of(2.0) * g[i] * xv[i];
                    }
                }
            }
            Op::Softmax { x, .. } => {
                if wants(x) {
                    let cols = *node.shape.last().unwrap_or(&1);
                    if cols == 0 {
                        return;
                    }
                    let dst = grad_slot(grads, *x, g.len());
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dst.chunks_mut(cols)) {
                        let mut s = R::zero();
                        for j in 0..cols {
                            s += yr[j] * gr[j];
                        }
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, .. } => {
                if wants(x) {
                    let cols = *node.shape.last().unwrap_or(&1);
                    if cols == 0 {
                        return;
                    }
                    let rstd = &self.aux[idx];
                    let inv_n = R::of(1.0 / cols as f64);
                    let dst = grad_slot(grads, *x, g.len());
                    for (r, ((yr, gr), dr)) in y
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(dst.chunks_mut(cols))
                        .enumerate()
                    {
                        let mut mean_g = R::zero();
                        let mut mean_gy = R::zero();
                        for j in 0..cols {
                            mean_g += gr[j];
                            mean_gy += gr[j] * yr[j];
                        }
                        mean_g *= inv_n;
                        mean_gy *= inv_n;
                        for j in 0..cols {
                            dr[j] += rstd[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(table) {
                    let d = node.shape[1];
                    let tlen = v(table).len();
                    let dst = grad_slot(grads, *table, tlen);
                    for (row, &id) in self.index_values[ids.0].iter().enumerate() {
                        axpy(R::one(), &g[row * d..(row + 1) * d], &mut dst[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if wants(logits) {
                    let lv = v(logits);
                    let vsz = self.nodes[logits.0].shape[1];
                    let t = &self.index_values[targets.0];
                    let scale = g[0] / R::of(t.len().max(1) as f64);
                    let dst = grad_slot(grads, *logits, lv.len());
                    for ((row, dr), &target) in lv.chunks(vsz).zip(dst.chunks_mut(vsz)).zip(t) {
                        let lse = log_sum_exp(row);
                        for j in 0..vsz {
                            dr[j] += scale * (row[j] - lse).exp();
                        }
                        dr[target] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let n = v(x).len();
                    let dst = grad_slot(grads, *x, n);
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                if wants(x) {
                    let e = node.shape[2];
                    let dst = grad_slot(grads, *x, g.len());
                    for b in 0..*batch {
                        for t in 0..*seq {
                            let base = (b * seq + t) * heads * e;
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + t) * e;
                                axpy(R::one(), &g[src..src + e], &mut dst[base + h * e..base + (h + 1) * e]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                if wants(x) {
                    let e = self.nodes[x.0].shape[2];
                    let dst = grad_slot(grads, *x, g.len());
                    for b in 0..*batch {
                        for t in 0..*seq {
                            let base = (b * seq + t) * heads * e;
                            for h in 0..*heads {
                                let d = ((b * heads + h) * seq + t) * e;
                                axpy(R::one(), &g[base + h * e..base + (h + 1) * e], &mut dst[d..d + e]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<R: Real>(grads: &mut [Option<Vec<R>>], id: NodeId, len: usize) -> &mut [R] {
    grads[id.0].get_or_insert_with(|| vec![R::zero(); len])
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input { .. } => vec![],
        Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddRow { x, row } | Op::MulRow { x, row } => vec![*x, *row],
        Op::AddScalar { x, s } | Op::MulScalar { x, s } => vec![*x, *s],
        Op::Affine { x, .. }
        | Op::Gelu(x)
        | Op::Sigmoid(x)
        | Op::Square(x)
        | Op::Softmax { x, .. }
        | Op::LayerNorm { x, .. }
        | Op::Sum(x)
        | Op::SplitHeads { x, .. }
        | Op::MergeHeads { x, .. } => vec![*x],
        Op::Embedding { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

pub(crate) fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    if !max.is_finite() {
        return max;
    }
    let mut s = R::zero();
    for x in row {
        s += (*x - max).exp();
    }
    max + s.ln()
}

pub(crate) fn softmax_row<R: Real>(src: &[R], dst: &mut [R]) {
    let max = src.iter().copied().fold(R::neg_infinity(), R::max);
    let mut s = R::zero();
    for (d, x) in dst.iter_mut().zip(src) {
        *d = (*x - max).exp();
        s += *d;
    }
    let inv = R::one() / s;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

/// Writes the normalized row into `dst` and returns `1/σ`.
pub(crate) fn layer_norm_row<R: Real>(src: &[R], dst: &mut [R], eps: R) -> R {
    let n = R::of(src.len() as f64);
    let mut mean = R::zero();
    for x in src {
        mean += *x;
    }
    mean = mean / n;
    let mut var = R::zero();
    for x in src {
        let d = *x - mean;
        var += d * d;
    }
    var = var / n;
    let rstd = R::one() / (var + eps).sqrt();
    for (d, x) in dst.iter_mut().zip(src) {
        *d = (*x - mean) * rstd;
    }
    rstd
}
