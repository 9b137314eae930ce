//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` is a single reverse sweep. All tensors
//! are dense and row-major; matrix operations treat shape `[rows, cols]`
//! and a rank-1 tensor `[n]` as a single row.

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm, Layout, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A value in the graph plus its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    /// Present on leaves after a backward pass reached them.
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Real> DiffTensor<F> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("expected a matrix, got shape {s:?}"),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: F },
    Sigmoid { a: NodeId },
    SoftmaxRows { a: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<F> },
    Rope { x: NodeId, positions: Vec<usize>, head_dim: usize, base: f64 },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, batch: usize, seq: usize, heads: usize, probs: Vec<F> },
    PrefixAttention { q: NodeId, k: NodeId, v: NodeId, ctx_k: NodeId, ctx_v: NodeId, spans: Vec<(usize, usize)>, heads: usize, probs: Vec<F> },
    SliceCols { a: NodeId, start: usize },
    GatherRows { a: NodeId, rows: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Clamp { a: NodeId, lo: F, hi: F },
    BceWithLogits { logits: NodeId, targets: Vec<F>, mask: Vec<F>, count: usize },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<F> },
    BinaryNll { p: NodeId, labels: Vec<F>, lo: F, hi: F },
    MaskedMse { pred: NodeId, targets: Vec<F>, mask: Vec<F>, count: usize },
}

#[derive(Debug, Clone)]
struct Node<F> {
    tensor: DiffTensor<F>,
    op: Op<F>,
    param: Option<ParamId>,
}

/// A single-threaded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: NodeId) -> &DiffTensor<F> {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn scalar(&self, id: NodeId) -> F {
        let t = self.tensor(id);
        assert_eq!(t.numel(), 1, "not a scalar: {:?}", t.shape);
        t.data[0]
    }

    /// Attention weights recorded by an attention node, laid out
    /// `[batch, heads, seq, seq]` for causal attention and row-major per
    /// query/head for prefix attention.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[F]> {
        match &self.nodes[id.0].op {
            Op::CausalAttention { probs, .. } | Op::PrefixAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            tensor: DiffTensor {
                shape,
                data,
                grad: None,
                requires_grad,
            },
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].tensor.dims2()
    }

    // ---- leaves ----------------------------------------------------------

    /// A constant leaf.
    pub fn input(&mut self, data: Vec<F>, shape: &[usize]) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "input shape");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, data: Vec<F>, shape: &[usize]) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "variable shape");
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    /// A leaf holding a copy of a stored parameter. When `trainable`, its
    /// gradient can be moved back into the store with [`Graph::take_param_grads`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId, trainable: bool) -> NodeId {
        let p = store.get(id);
        let node = self.push(p.shape.clone(), p.data.clone(), Op::Leaf, trainable);
        self.nodes[node.0].param = Some(id);
        node
    }

    /// Constant copy of a node's current value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let t = self.tensor(id);
        let (shape, data) = (t.shape.clone(), t.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), Layout::Normal, self.value(b), Layout::Normal, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg)
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> (Vec<usize>, Vec<F>) {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shapes differ");
        let out = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        (ta.shape.clone(), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, out) = self.zip_same(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, out) = self.zip_same(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, out) = self.zip_same(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Mul { a, b }, rg)
    }

    /// `a[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.dims2(a);
        let bv = self.value(bias);
        assert_eq!(bv.len(), c, "bias width");
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for row in av.chunks_exact(c.max(1)).take(r) {
            out.extend(row.iter().zip(bv).map(|(&x, &b)| x + b));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, bias]);
        self.push(shape, out, Op::AddRow { a, bias }, rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: F) -> NodeId {
        let t = self.tensor(a);
        let out = t.data.iter().map(|&x| x * factor).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale { a, factor }, rg)
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.tensor(a);
        let out = t.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Sigmoid { a }, rg)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims2(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c).take(r) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::SoftmaxRows { a }, rg)
    }

    /// Row-wise `gain * x / sqrt(mean(x^2) + eps)`.
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.dims2(x);
        let g = self.value(gain);
        assert_eq!(g.len(), c, "rmsnorm gain width");
        let xv = self.value(x);
        let eps = F::lit(eps);
        let n = F::lit(c as f64);
        let mut out = Vec::with_capacity(r * c);
        let mut inv_rms = Vec::with_capacity(r);
        for row in xv.chunks_exact(c).take(r) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / n;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(g).map(|(&v, &gg)| gg * v * inv));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain]);
        self.push(shape, out, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// Rotary position rotation. Each row is split into heads of `head_dim`
    /// columns; pair `(2i, 2i+1)` of a head at position `m` is rotated by
    /// `m * base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: NodeId, positions: &[usize], head_dim: usize, base: f64) -> NodeId {
        let (r, c) = self.dims2(x);
        assert_eq!(positions.len(), r, "one position per row");
        assert!(head_dim.is_multiple_of(2) && head_dim > 0 && c.is_multiple_of(head_dim), "rope head_dim");
        let mut out = self.value(x).to_vec();
        for (row, &pos) in out.chunks_exact_mut(c).zip(positions) {
            rotate_row(row, pos, head_dim, base, false);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            shape,
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
            rg,
        )
    }

    // ---- attention -----------------------------------------------------------

    /// Multi-head causal self-attention over `batch` sequences of `seq`
    /// rows each; `q`, `k`, `v` are `[batch*seq, heads*head_dim]`.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, batch: usize, seq: usize, heads: usize) -> NodeId {
        let (rows, d) = self.dims2(q);
        assert_eq!(rows, batch * seq, "attention rows");
        assert_eq!(self.dims2(k), (rows, d));
        assert_eq!(self.dims2(v), (rows, d));
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![F::zero(); rows * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..=i {
                        let kj = &kv[(b * seq + j) * d + off..][..dh];
                        p[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut p[..=i]);
                    let o = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let vj = &vv[(b * seq + j) * d + off..][..dh];
                        axpy(p[j], vj, o);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            vec![rows, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention for rows that each sit after a prefix of context rows.
    ///
    /// Query row `r` attends to `ctx_k/ctx_v` rows `spans[r].0 ..
    /// spans[r].0 + spans[r].1` followed by its own key/value row.
    #[allow(clippy::too_many_arguments)]
    pub fn prefix_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        ctx_k: NodeId,
        ctx_v: NodeId,
        spans: &[(usize, usize)],
        heads: usize,
    ) -> NodeId {
        let (rows, d) = self.dims2(q);
        assert_eq!(spans.len(), rows, "one span per query row");
        assert_eq!(self.dims2(k), (rows, d));
        assert_eq!(self.dims2(v), (rows, d));
        let (crows, cd) = self.dims2(ctx_k);
        assert_eq!(cd, d, "context width");
        assert_eq!(self.dims2(ctx_v), (crows, d));
        for &(s, l) in spans {
            assert!(s + l <= crows, "span out of context range");
        }
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (ckv, cvv) = (self.value(ctx_k), self.value(ctx_v));
        let total: usize = spans.iter().map(|&(_, l)| (l + 1) * heads).sum();
        let mut probs = vec![F::zero(); total];
        let mut out = vec![F::zero(); rows * d];
        let mut cursor = 0;
        for (r, &(start, len)) in spans.iter().enumerate() {
            for h in 0..heads {
                let off = h * dh;
                let qi = &qv[r * d + off..][..dh];
                let p = &mut probs[cursor..cursor + len + 1];
                cursor += len + 1;
                for j in 0..len {
                    p[j] = dot(qi, &ckv[(start + j) * d + off..][..dh]) * scale;
                }
                p[len] = dot(qi, &kv[r * d + off..][..dh]) * scale;
                softmax_in_place(p);
                let o = &mut out[r * d + off..][..dh];
                for j in 0..len {
                    axpy(p[j], &cvv[(start + j) * d + off..][..dh], o);
                }
                axpy(p[len], &vv[r * d + off..][..dh], o);
            }
        }
        let rg = self.rg(&[q, k, v, ctx_k, ctx_v]);
        self.push(
            vec![rows, d],
            out,
            Op::PrefixAttention {
                q,
                k,
                v,
                ctx_k,
                ctx_v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            rg,
        )
    }

    // ---- indexing ----------------------------------------------------------

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.dims2(a);
        assert!(start + len <= c, "column slice out of range");
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in av.chunks_exact(c).take(r) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(vec![r, len], out, Op::SliceCols { a, start }, rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let (r, c) = self.dims2(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r, "row {i} out of range {r}");
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(vec![rows.len(), c], out, Op::GatherRows { a, rows: rows.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.dims2(parts[0]).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p);
            assert_eq!(pc, c, "concat widths");
            out.extend_from_slice(self.value(p));
            r += pr;
        }
        let rg = self.rg(parts);
        self.push(vec![r, c], out, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().copied().sum::<F>();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = F::lit(v.len().max(1) as f64);
        let s = v.iter().copied().sum::<F>() / n;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean { a }, rg)
    }

    /// Elementwise clip; the gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        let t = self.tensor(a);
        let out = t.data.iter().map(|&x| x.max(lo).min(hi)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Clamp { a, lo, hi }, rg)
    }

    /// Mean binary cross-entropy in logit space over entries with nonzero
    /// `mask`. Returns 0 when nothing is unmasked.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Vec<F>, mask: Vec<F>) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "bce targets");
        assert_eq!(z.len(), mask.len(), "bce mask");
        let mut total = F::zero();
        let mut count = 0usize;
        for ((&zi, &ti), &wi) in z.iter().zip(&targets).zip(&mask) {
            if wi != F::zero() {
                total = total + wi * bce_logit(zi, ti);
                count += 1;
            }
        }
        let loss = if count == 0 { F::zero() } else { total / F::lit(count as f64) };
        let rg = self.rg(&[logits]);
        self.push(
            vec![],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                count,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits[n, classes]` against labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let (r, c) = self.dims2(logits);
        assert_eq!(labels.len(), r, "one label per row");
        let mut probs = self.value(logits).to_vec();
        let mut total = F::zero();
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            assert!(y < c, "label {y} out of range");
            softmax_in_place(row);
            total = total - row[y].max(F::min_positive_value()).ln();
        }
        let loss = total / F::lit(r.max(1) as f64);
        let rg = self.rg(&[logits]);
        self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean of `-log(p)` (label 1) or `-log(1-p)` (label 0) with `p` clamped
    /// to `[lo, hi]`; clamped entries pass no gradient.
    pub fn binary_nll(&mut self, p: NodeId, labels: Vec<F>, lo: F, hi: F) -> NodeId {
        let pv = self.value(p);
        assert_eq!(pv.len(), labels.len(), "one label per probability");
        let n = F::lit(pv.len().max(1) as f64);
        let total = pv
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| {
                let x = x.max(lo).min(hi);
                -(y * x.ln() + (F::one() - y) * (F::one() - x).ln())
            })
            .sum::<F>();
        let rg = self.rg(&[p]);
        self.push(vec![], vec![total / n], Op::BinaryNll { p, labels, lo, hi }, rg)
    }

    /// Mean squared error over entries with nonzero `mask`.
    pub fn masked_mse(&mut self, pred: NodeId, targets: Vec<F>, mask: Vec<F>) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.len(), targets.len(), "mse targets");
        assert_eq!(pv.len(), mask.len(), "mse mask");
        let mut total = F::zero();
        let mut count = 0usize;
        for ((&x, &t), &w) in pv.iter().zip(&targets).zip(&mask) {
            if w != F::zero() {
                total = total + w * (x - t) * (x - t);
                count += 1;
            }
        }
        let loss = if count == 0 { F::zero() } else { total / F::lit(count as f64) };
        let rg = self.rg(&[pred]);
        self.push(
            vec![],
            vec![loss],
            Op::MaskedMse {
                pred,
                targets,
                mask,
                count,
            },
            rg,
        )
    }

    // ---- differentiation ---------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients are added to the `grad` of
    /// every reachable leaf that requires one; calling again accumulates.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rt = self.tensor(root);
        if rt.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rt.shape.clone()));
        }
        if !rt.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let t = &mut self.nodes[i].tensor;
                if t.requires_grad {
                    match &mut t.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => t.grad = Some(g),
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Clear leaf gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    /// Add gradients of trainable parameter leaves into `store` and clear them
    /// on the graph side.
    pub fn take_param_grads(&mut self, store: &mut ParamStore<F>) {
        for n in &mut self.nodes {
            if let (Some(pid), Some(g)) = (n.param, n.tensor.grad.take()) {
                let p = store.get_mut(pid);
                p.grad.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].tensor.requires_grad;
        let len_of = |id: NodeId| self.nodes[id.0].tensor.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, Layout::Normal, self.value(*b), Layout::Transposed, ga, true);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a), Layout::Transposed, g, Layout::Normal, gb, true);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if needs(id) {
                        add_into(slot(grads, id, g.len()), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, g.len());
                    for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * bb;
                    }
                }
                if needs(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, g.len());
                    for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * aa;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*bias) {
                    let c = len_of(*bias);
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *factor);
                }
            }
            Op::Sigmoid { a } => {
                if needs(*a) {
                    let y = &node.tensor.data;
                    let ga = slot(grads, *a, g.len());
                    for ((x, &gy), &yy) in ga.iter_mut().zip(g).zip(y) {
                        *x = *x + gy * yy * (F::one() - yy);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if needs(*a) {
                    let (_, c) = node.tensor.dims2();
                    let y = &node.tensor.data;
                    let ga = slot(grads, *a, g.len());
                    for ((gr, yr), xr) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                        let s = dot(gr, yr);
                        for ((x, &gy), &yy) in xr.iter_mut().zip(gr).zip(yr) {
                            *x = *x + yy * (gy - s);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (_, c) = node.tensor.dims2();
                let xv = self.value(*x);
                let gv = self.value(*gain);
                if needs(*x) {
                    let n = F::lit(c as f64);
                    let gx = slot(grads, *x, g.len());
                    for (((gr, xr), out), &inv) in g.chunks_exact(c).zip(xv.chunks_exact(c)).zip(gx.chunks_exact_mut(c)).zip(inv_rms) {
                        // dx = inv * (g*gain) - x * inv^3 * sum(g*gain*x) / n
                        let s = gr.iter().zip(gv).zip(xr).map(|((&a, &b), &c)| a * b * c).sum::<F>();
                        let coef = inv * inv * inv * s / n;
                        for (((o, &gy), &gg), &xx) in out.iter_mut().zip(gr).zip(gv).zip(xr) {
                            *o = *o + inv * gy * gg - xx * coef;
                        }
                    }
                }
                if needs(*gain) {
                    let gg = slot(grads, *gain, c);
                    for ((gr, xr), &inv) in g.chunks_exact(c).zip(xv.chunks_exact(c)).zip(inv_rms) {
                        for ((o, &gy), &xx) in gg.iter_mut().zip(gr).zip(xr) {
                            *o = *o + gy * xx * inv;
                        }
                    }
                }
            }
            Op::Rope { x, positions, head_dim, base } => {
                if needs(*x) {
                    let (_, c) = node.tensor.dims2();
                    let mut back = g.to_vec();
                    for (row, &pos) in back.chunks_exact_mut(c).zip(positions) {
                        rotate_row(row, pos, *head_dim, *base, true);
                    }
                    add_into(slot(grads, *x, g.len()), &back);
                }
            }
            Op::CausalAttention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *batch, *seq, *heads, probs, grads);
            }
            Op::PrefixAttention { q, k, v, ctx_k, ctx_v, spans, heads, probs } => {
                self.prefix_attention_backward(g, [*q, *k, *v, *ctx_k, *ctx_v], spans, *heads, probs, grads);
            }
            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let (_, c) = self.dims2(*a);
                    let (_, w) = node.tensor.dims2();
                    let ga = slot(grads, *a, len_of(*a));
                    for (dst, src) in ga.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                        add_into(&mut dst[*start..*start + w], src);
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                if needs(*a) {
                    let (_, c) = self.dims2(*a);
                    let ga = slot(grads, *a, len_of(*a));
                    for (&r, src) in rows.iter().zip(g.chunks_exact(c)) {
                        add_into(&mut ga[r * c..(r + 1) * c], src);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = len_of(p);
                    if needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Sum { a } => {
                if needs(*a) {
                    let ga = slot(grads, *a, len_of(*a));
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean { a } => {
                if needs(*a) {
                    let n = len_of(*a);
                    let d = g[0] / F::lit(n.max(1) as f64);
                    let ga = slot(grads, *a, n);
                    ga.iter_mut().for_each(|x| *x = *x + d);
                }
            }
            Op::Clamp { a, lo, hi } => {
                if needs(*a) {
                    let av = self.value(*a);
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gy), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x >= *lo && x <= *hi {
                            *o = *o + gy;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets, mask, count } => {
                if needs(*logits) && *count > 0 {
                    let z = self.value(*logits);
                    let scale = g[0] / F::lit(*count as f64);
                    let gz = slot(grads, *logits, z.len());
                    for (((o, &zi), &ti), &wi) in gz.iter_mut().zip(z).zip(targets).zip(mask) {
                        if wi != F::zero() {
                            *o = *o + scale * wi * (sigmoid(zi) - ti);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if needs(*logits) {
                    let (r, c) = self.dims2(*logits);
                    let scale = g[0] / F::lit(r.max(1) as f64);
                    let gz = slot(grads, *logits, r * c);
                    for ((o, p), &y) in gz.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(labels) {
                        for (j, (oo, &pp)) in o.iter_mut().zip(p).enumerate() {
                            let t = if j == y { F::one() } else { F::zero() };
                            *oo = *oo + scale * (pp - t);
                        }
                    }
                }
            }
            Op::BinaryNll { p, labels, lo, hi } => {
                if needs(*p) {
                    let pv = self.value(*p);
                    let scale = g[0] / F::lit(pv.len().max(1) as f64);
                    let gp = slot(grads, *p, pv.len());
                    for ((o, &x), &y) in gp.iter_mut().zip(pv).zip(labels) {
                        if x > *lo && x < *hi {
                            *o = *o + scale * (-y / x + (F::one() - y) / (F::one() - x));
                        }
                    }
                }
            }
            Op::MaskedMse { pred, targets, mask, count } => {
                if needs(*pred) && *count > 0 {
                    let pv = self.value(*pred);
                    let scale = g[0] * F::lit(2.0) / F::lit(*count as f64);
                    let gp = slot(grads, *pred, pv.len());
                    for (((o, &x), &t), &w) in gp.iter_mut().zip(pv).zip(targets).zip(mask) {
                        if w != F::zero() {
                            *o = *o + scale * w * (x - t);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let rg = [q, k, v].map(|id| self.nodes[id.0].tensor.requires_grad);
        if !rg.iter().any(|&x| x) {
            return;
        }
        let (rows, d) = self.dims2(q);
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![F::zero(); rows * d];
        let mut gk = vec![F::zero(); rows * d];
        let mut gv = vec![F::zero(); rows * d];
        let mut dp = vec![F::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..=i];
                    let go = &g[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let vj = &vv[(b * seq + j) * d + off..][..dh];
                        dp[j] = dot(go, vj);
                        axpy(p[j], go, &mut gv[(b * seq + j) * d + off..][..dh]);
                    }
                    let s = dot(&dp[..=i], p);
                    let qi = &qv[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = &kv[(b * seq + j) * d + off..][..dh];
                        axpy(ds, kj, &mut gq[(b * seq + i) * d + off..][..dh]);
                        axpy(ds, qi, &mut gk[(b * seq + j) * d + off..][..dh]);
                    }
                }
            }
        }
        for (id, (need, buf)) in [q, k, v].into_iter().zip(rg.into_iter().zip([gq, gk, gv])) {
            if need {
                add_into(slot(grads, id, rows * d), &buf);
            }
        }
    }

    fn prefix_attention_backward(
        &self,
        g: &[F],
        ids: [NodeId; 5],
        spans: &[(usize, usize)],
        heads: usize,
        probs: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let rg = ids.map(|id| self.nodes[id.0].tensor.requires_grad);
        if !rg.iter().any(|&x| x) {
            return;
        }
        let [q, k, v, ctx_k, ctx_v] = ids;
        let (rows, d) = self.dims2(q);
        let (crows, _) = self.dims2(ctx_k);
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (ckv, cvv) = (self.value(ctx_k), self.value(ctx_v));
        let mut gq = vec![F::zero(); rows * d];
        let mut gk = vec![F::zero(); rows * d];
        let mut gv = vec![F::zero(); rows * d];
        let mut gck = vec![F::zero(); crows * d];
        let mut gcv = vec![F::zero(); crows * d];
        let mut dp = Vec::new();
        let mut cursor = 0;
        for (r, &(start, len)) in spans.iter().enumerate() {
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[cursor..cursor + len + 1];
                cursor += len + 1;
                let go = &g[r * d + off..][..dh];
                dp.clear();
                for (j, &pj) in p[..len].iter().enumerate() {
                    let row = (start + j) * d + off;
                    dp.push(dot(go, &cvv[row..][..dh]));
                    axpy(pj, go, &mut gcv[row..][..dh]);
                }
                dp.push(dot(go, &vv[r * d + off..][..dh]));
                axpy(p[len], go, &mut gv[r * d + off..][..dh]);
                let s = dot(&dp, p);
                let qi = &qv[r * d + off..][..dh];
                for j in 0..len {
                    let ds = p[j] * (dp[j] - s) * scale;
                    let row = (start + j) * d + off;
                    axpy(ds, &ckv[row..][..dh], &mut gq[r * d + off..][..dh]);
                    axpy(ds, qi, &mut gck[row..][..dh]);
                }
                let ds = p[len] * (dp[len] - s) * scale;
                axpy(ds, &kv[r * d + off..][..dh], &mut gq[r * d + off..][..dh]);
                axpy(ds, qi, &mut gk[r * d + off..][..dh]);
            }
        }
        for (id, (need, buf)) in ids.into_iter().zip(rg.into_iter().zip([gq, gk, gv, gck, gcv])) {
            if need {
                let n = buf.len();
                add_into(slot(grads, id, n), &buf);
            }
        }
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut [F] {
    grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    y.iter_mut().zip(x).for_each(|(yy, &xx)| *yy = *yy + alpha * xx);
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
fn bce_logit<F: Real>(z: F, t: F) -> F {
    z.max(F::zero()) - z * t + (-z.abs()).exp().ln_1p()
}

fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / sum);
}

fn rotate_row<F: Real>(row: &mut [F], pos: usize, head_dim: usize, base: f64, inverse: bool) {
    if pos == 0 {
        return;
    }
    for head in row.chunks_exact_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = theta.sin_cos();
            let (s, c) = (F::lit(if inverse { -s } else { s }), F::lit(c));
            let (x0, x1) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}
