use super::kernels::{gemm, silu, silu_grad, softmax_backward_row, softmax_in_place, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Target value that `cross_entropy` skips (padding).
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    Sum(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, count: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Rope { x: Var, heads: usize, cos: Vec<T>, sin: Vec<T> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Eagerly built computation tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward simply walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::from_vec(&node.shape, node.value.clone()).expect("node shape is consistent")
    }

    /// Adds a copy of `t` as a leaf; it requires grad iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?.with_requires_grad(true);
        Ok(self.leaf(&t))
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{name} output (node {}, flat index {pos})",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    /// `a[m x k] * b[k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let bv = MatRef::row_major(self.value(b), br, bc);
        let bv = if trans_b { bv.t() } else { bv };
        gemm(MatRef::row_major(self.value(a), m, k), bv, T::one(), T::zero(), &mut out, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, trans_b }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| silu(x)).collect();
        let rg = self.requires_grad(a);
        self.push("silu", self.shape(a).to_vec(), out, Op::Silu(a), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[1]))?;
        if width == 0 {
            return Err(Error::shape("softmax", &shape, &[1]));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let rg = self.requires_grad(a);
        self.push("softmax", shape, out, Op::Softmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().map(|x| x.f64()).sum();
        let rg = self.requires_grad(a);
        self.push("sum", vec![], vec![T::of(s)], Op::Sum(a), rg)
    }

    /// Gathers rows of `table[vocab x h]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, h) = self.dims2("embedding", table)?;
        let mut out = Vec::with_capacity(ids.len() * h);
        let tv = self.value(table);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * h..(id + 1) * h]);
        }
        let rg = self.requires_grad(table);
        self.push(
            "embedding",
            vec![ids.len(), h],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    what: "target vocabulary",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &lv[i * vocab..(i + 1) * vocab];
            let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
            let lse = max + denom.ln();
            total += lse - row[t].f64();
            count += 1;
            let prow = &mut probs[i * vocab..(i + 1) * vocab];
            for (p, x) in prow.iter_mut().zip(row) {
                *p = T::of((x.f64() - lse).exp());
            }
        }
        if count == 0 {
            return Err(Error::Data("cross_entropy: every target is padding".into()));
        }
        let rg = self.requires_grad(logits);
        self.push(
            "cross_entropy",
            vec![],
            vec![T::of(total / count as f64)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (n, h) = self.dims2("rms_norm", x)?;
        if self.shape(gain) != [h] || h == 0 {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let mut out = vec![T::zero(); n * h];
        let mut inv_rms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xv[r * h..(r + 1) * h];
            let ms: f64 = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / h as f64;
            let inv = T::of(1.0 / (ms + eps).sqrt());
            inv_rms.push(inv);
            for ((o, &xi), &gi) in out[r * h..(r + 1) * h].iter_mut().zip(row).zip(gv) {
                *o = xi * inv * gi;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain);
        self.push("rms_norm", vec![n, h], out, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// Rotary position embedding on `x[n x (heads * head_dim)]`; row `i`
    /// sits at `positions[i]`. Adjacent pairs `(2j, 2j+1)` of each head are
    /// rotated by `pos * base^(-2j / head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        let (n, h) = self.dims2("rope", x)?;
        if positions.len() != n {
            return Err(Error::shape("rope", self.shape(x), &[positions.len()]));
        }
        let head_dim = rope_head_dim(h, heads)?;
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for j in 0..half {
                let angle = p as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        let mut out = self.value(x).to_vec();
        rotate_pairs(&mut out, n, heads, head_dim, &cos, &sin, false);
        let rg = self.requires_grad(x);
        self.push("rope", vec![n, h], out, Op::Rope { x, heads, cos, sin }, rg)
    }

    /// Causal multi-head attention over `[batch * seq, heads * head_dim]`
    /// projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (n, h) = self.dims2("attention", q)?;
        if self.shape(k) != [n, h] || self.shape(v) != [n, h] {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if n != batch * seq || heads == 0 || h % heads != 0 {
            return Err(Error::shape("attention", &[n, h], &[batch, seq, heads]));
        }
        let dh = h / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); n * h];
        for b in 0..batch {
            for hd in 0..heads {
                let base = b * seq * h + hd * dh;
                let p = &mut probs[(b * heads + hd) * seq * seq..][..seq * seq];
                let qm = MatRef::strided(&qv[base..], seq, dh, h);
                let km = MatRef::strided(&kv[base..], seq, dh, h);
                gemm(qm, km.t(), scale, T::zero(), p, seq);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    row[i + 1..].fill(T::neg_infinity());
                    softmax_in_place(row);
                }
                let vm = MatRef::strided(&vv[base..], seq, dh, h);
                gemm(MatRef::row_major(p, seq, seq), vm, T::one(), T::zero(), &mut out[base..], h);
            }
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        self.push(
            "attention",
            vec![n, h],
            out,
            Op::Attention {
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

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", &self.nodes[loss.0].shape, &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i} (flat index {pos})")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contrib) {
                    *a = *a + *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (br, bc) = (self.shape(*b)[0], self.shape(*b)[1]);
                let n = if *trans_b { br } else { bc };
                let gm = MatRef::row_major(g, m, n);
                if self.requires_grad(*a) {
                    let bm = MatRef::row_major(self.value(*b), br, bc);
                    // dA = dY * B^T, with B viewed as k x n
                    let bt = if *trans_b { bm } else { bm.t() };
                    let mut da = vec![T::zero(); m * k];
                    gemm(gm, bt, T::one(), T::zero(), &mut da, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let am = MatRef::row_major(self.value(*a), m, k);
                    let mut db = vec![T::zero(); br * bc];
                    if *trans_b {
                        gemm(gm.t(), am, T::one(), T::zero(), &mut db, k);
                    } else {
                        gemm(am.t(), gm, T::one(), T::zero(), &mut db, n);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let d = g.iter().map(|&x| x * *c).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g.iter().zip(self.value(*a)).map(|(&gy, &x)| gy * silu_grad(x)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let width = *node.shape.last().expect("softmax has a last dim");
                let mut d = vec![T::zero(); g.len()];
                for ((y, dy), dx) in node.value.chunks(width).zip(g.chunks(width)).zip(d.chunks_mut(width)) {
                    softmax_backward_row(y, dy, dx, T::one());
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                self.accumulate(grads, *a, d);
            }
            Op::Embedding { table, ids } => {
                let (vocab, h) = (self.shape(*table)[0], self.shape(*table)[1]);
                let mut d = vec![T::zero(); vocab * h];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &x) in d[id * h..(id + 1) * h].iter_mut().zip(&g[r * h..(r + 1) * h]) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.shape(*logits)[1];
                let coef = g[0] / T::of(*count as f64);
                let mut d = vec![T::zero(); probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    let row = &mut d[i * vocab..(i + 1) * vocab];
                    for (dv, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *dv = p * coef;
                    }
                    row[t] = row[t] - coef;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let h = self.shape(*gain)[0];
                let xv = self.value(*x);
                let gv = self.value(*gain);
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0f64; h];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let inv = inv.f64();
                        for j in 0..h {
                            dg[j] += g[r * h + j].f64() * xv[r * h + j].f64() * inv;
                        }
                    }
                    self.accumulate(grads, *gain, dg.into_iter().map(T::of).collect());
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = r * h..(r + 1) * h;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&xv[row.clone()])
                            .zip(gv)
                            .map(|((&dy, &xi), &gi)| dy.f64() * xi.f64() * gi.f64())
                            .sum();
                        let inv64 = inv.f64();
                        let c = T::of(inv64 * inv64 * inv64 * dot / h as f64);
                        for j in 0..h {
                            let idx = r * h + j;
                            dx[idx] = inv * gv[j] * g[idx] - xv[idx] * c;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Rope { x, heads, cos, sin } => {
                let (n, h) = (node.shape[0], node.shape[1]);
                let mut d = g.to_vec();
                rotate_pairs(&mut d, n, *heads, h / heads, cos, sin, true);
                self.accumulate(grads, *x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let h = node.shape[1];
                let dh = h / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); seq * seq];
                let mut ds = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for hd in 0..heads {
                        let base = b * seq * h + hd * dh;
                        let p = &probs[(b * heads + hd) * seq * seq..][..seq * seq];
                        let pm = MatRef::row_major(p, seq, seq);
                        let gm = MatRef::strided(&g[base..], seq, dh, h);
                        let qm = MatRef::strided(&qv[base..], seq, dh, h);
                        let km = MatRef::strided(&kv[base..], seq, dh, h);
                        let vm = MatRef::strided(&vv[base..], seq, dh, h);
                        gemm(pm.t(), gm, T::one(), T::one(), &mut dv[base..], h);
                        gemm(gm, vm.t(), T::one(), T::zero(), &mut dp, seq);
                        ds.fill(T::zero());
                        for i in 0..seq {
                            let r = i * seq..i * seq + i + 1;
                            softmax_backward_row(&p[r.clone()], &dp[r.clone()], &mut ds[r], scale);
                        }
                        let dsm = MatRef::row_major(&ds[..], seq, seq);
                        gemm(dsm, km, T::one(), T::one(), &mut dq[base..], h);
                        gemm(dsm.t(), qm, T::one(), T::one(), &mut dk[base..], h);
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
        }
    }
}

pub(crate) fn rope_head_dim(hidden: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "hidden size {hidden} is not divisible by {heads} heads"
        )));
    }
    let head_dim = hidden / heads;
    if !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary embeddings need an even head dimension, got {head_dim}"
        )));
    }
    Ok(head_dim)
}

fn rotate_pairs<T: Scalar>(buf: &mut [T], n: usize, heads: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    let h = heads * head_dim;
    for r in 0..n {
        let cs = &cos[r * half..(r + 1) * half];
        let sn = &sin[r * half..(r + 1) * half];
        for hd in 0..heads {
            let off = r * h + hd * head_dim;
            for j in 0..half {
                let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                let x0 = buf[off + 2 * j];
                let x1 = buf[off + 2 * j + 1];
                buf[off + 2 * j] = x0 * c - x1 * s;
                buf[off + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
}
