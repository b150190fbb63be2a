use super::kernels::{self, AttnDims};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, rows: usize, inp: usize, out: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddBias { x: Var, b: Var },
    Sigmoid { x: Var },
    Silu { x: Var },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<T> },
    Rope { x: Var, batch: usize, t: usize, heads: usize, head_dim: usize, cos: Vec<T>, sin: Vec<T> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, dims: AttnDims },
    Embedding { table: Var, tokens: Vec<usize> },
    MeanPool { h: Var, mask: Vec<T>, counts: Vec<T>, t: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, keep: Vec<bool>, probs: Vec<T>, count: T },
    Concat { a: Var, b: Var, na: usize, nb: usize },
    SelectRow { table: Var, row: usize },
    BroadcastRows { x: Var, rows: usize },
    MulSeq { x: Var, d: Var, t: usize, r: usize },
    Sum { x: Var },
    Reshape { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of operations. Inputs always precede outputs, so a single
/// reverse sweep visits every node after all of its consumers.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of leaf variables after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// 2-D matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul_fwd(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `x[..×in] · wᵀ` for a weight stored `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1] {
            return Err(Error::dim("linear", sx, sw));
        }
        let (out, inp) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / inp;
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = out;
        let y = kernels::linear_fwd(self.data(x), self.data(w), rows, inp, out);
        let value = Tensor::new(shape, y)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Linear { x, w, rows, inp, out }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), out).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Adds `b[n]` to every trailing row of `x[..×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sb.last().unwrap_or(&0);
        if sb.len() != 1 || sx.last() != Some(&n) {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bias = self.data(b);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let value = Tensor::new(sx.to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias { x, b }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::silu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu { x }, rg)
    }

    /// Per trailing row: `x / sqrt(mean(x²) + eps) ⊙ gamma`.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gamma));
        if sg.len() != 1 || sx.last() != Some(&sg[0]) || sg[0] == 0 {
            return Err(Error::dim("rms_norm", sx, sg));
        }
        if !(eps >= T::zero()) {
            return Err(Error::Config("rms_norm eps must be non-negative".into()));
        }
        let d = sg[0];
        let (y, inv_rms) = kernels::rms_norm_fwd(self.data(x), self.data(gamma), d, eps);
        let value = Tensor::new(sx.to_vec(), y)?;
        let rg = self.rg(&[x, gamma]);
        Ok(self.push(value, Op::RmsNorm { x, gamma, inv_rms }, rg))
    }

    /// Rotary embedding over `x[B×T×(heads·head_dim)]`; position = sequence index.
    pub fn rope(&mut self, x: Var, heads: usize, theta: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[2].is_multiple_of(heads) {
            return Err(Error::dim("rope", &sx, &[heads]));
        }
        let head_dim = sx[2] / heads;
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope needs an even head_dim, got {head_dim}")));
        }
        let (batch, t) = (sx[0], sx[1]);
        let (cos, sin) = kernels::rope_table::<T>(t, head_dim, theta);
        let y = kernels::rope_rotate(self.data(x), batch, t, heads, head_dim, &cos, &sin, false);
        let value = Tensor::new(sx, y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Rope { x, batch, t, heads, head_dim, cos, sin },
            rg,
        ))
    }

    /// Causal attention with `n_heads` query heads sharing `n_kv` key/value heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, n_kv: usize) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 3
            || sk.len() != 3
            || self.shape(v) != sk.as_slice()
            || sq[..2] != sk[..2]
            || n_kv == 0
            || !n_heads.is_multiple_of(n_kv)
            || sq[2] % n_heads != 0
            || sk[2] != sq[2] / n_heads * n_kv
        {
            return Err(Error::dim("attention", &sq, &sk));
        }
        let dims = AttnDims {
            batch: sq[0],
            t: sq[1],
            n_heads,
            n_kv,
            head_dim: sq[2] / n_heads,
        };
        let (out, probs) = kernels::attention_fwd(self.data(q), self.data(k), self.data(v), dims);
        let value = Tensor::new(sq, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, probs, dims }, rg))
    }

    /// Row lookup `table[V×d]` at `tokens[B×T]`, giving `[B×T×d]`.
    pub fn embedding(&mut self, table: Var, tokens: &[usize], batch: usize) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(Error::dim("embedding", &st, &[tokens.len(), batch]));
        }
        let (vocab, d) = (st[0], st[1]);
        let tab = self.data(table);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok >= vocab {
                return Err(Error::Index { op: "embedding", index: tok, bound: vocab });
            }
            out.extend_from_slice(&tab[tok * d..(tok + 1) * d]);
        }
        let value = Tensor::new(vec![batch, tokens.len() / batch, d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Embedding { table, tokens: tokens.to_vec() }, rg))
    }

    /// Masked mean over the sequence axis: `h[B×T×d]`, `mask[B×T]` → `[B×d]`.
    pub fn mean_pool(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        if sh.len() != 3 || mask.len() != sh[0] * sh[1] {
            return Err(Error::dim("mean_pool", &sh, &[mask.len()]));
        }
        let (batch, t, d) = (sh[0], sh[1], sh[2]);
        let hv = self.data(h);
        let mut out = vec![T::zero(); batch * d];
        let mut counts = Vec::with_capacity(batch);
        for b in 0..batch {
            let n = mask[b * t..(b + 1) * t].iter().filter(|&&m| m).count();
            if n == 0 {
                return Err(Error::Degenerate(format!("mean_pool: batch row {b} has an all-zero mask")));
            }
            let cnt = T::from_usize(n).unwrap();
            counts.push(cnt);
            let o = &mut out[b * d..(b + 1) * d];
            for s in 0..t {
                if mask[b * t + s] {
                    let row = &hv[(b * t + s) * d..(b * t + s + 1) * d];
                    for (acc, &x) in o.iter_mut().zip(row) {
                        *acc = *acc + x;
                    }
                }
            }
            for acc in o.iter_mut() {
                *acc = *acc / cnt;
            }
        }
        let mask = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let value = Tensor::new(vec![batch, d], out)?;
        let rg = self.rg(&[h]);
        Ok(self.push(value, Op::MeanPool { h, mask, counts, t }, rg))
    }

    /// Mean negative log-softmax of `targets` over rows where `keep` is true.
    /// `logits` is `[..×V]`; `targets` and `keep` have one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let vocab = *sl.last().unwrap_or(&0);
        let rows = if vocab == 0 { 0 } else { self.value(logits).numel() / vocab };
        if rows != targets.len() || rows != keep.len() {
            return Err(Error::dim("cross_entropy", &sl, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index { op: "cross_entropy", index: bad, bound: vocab });
        }
        let kept = keep.iter().filter(|&&k| k).count();
        if kept == 0 {
            return Err(Error::Degenerate("cross_entropy: every position is ignored".into()));
        }
        let (total, probs) = kernels::cross_entropy_fwd(self.data(logits), targets, keep, vocab);
        let count = T::from_usize(kept).unwrap();
        let value = Tensor::scalar(total / count);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", &sa, &sb));
        }
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).numel() / na.max(1);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * na..(r + 1) * na]);
            out.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b, na, nb }, rg))
    }

    /// Row `row` of a 2-D table, as a rank-1 tensor.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::dim("select_row", &st, &[row]));
        }
        if row >= st[0] {
            return Err(Error::Index { op: "select_row", index: row, bound: st[0] });
        }
        let n = st[1];
        let out = self.data(table)[row * n..(row + 1) * n].to_vec();
        let value = Tensor::new(vec![n], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::SelectRow { table, row }, rg))
    }

    /// Repeats a rank-1 `x[n]` into `[rows×n]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 {
            return Err(Error::dim("broadcast_rows", &sx, &[rows]));
        }
        let src = self.data(x);
        let out: Vec<T> = (0..rows).flat_map(|_| src.iter().copied()).collect();
        let value = Tensor::new(vec![rows, sx[0]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::BroadcastRows { x, rows }, rg))
    }

    /// `x[B×T×r] ⊙ d[B×r]`, with `d` broadcast over the sequence axis.
    pub fn mul_seq(&mut self, x: Var, d: Var) -> Result<Var> {
        let (sx, sd) = (self.shape(x).to_vec(), self.shape(d).to_vec());
        if sx.len() != 3 || sd.len() != 2 || sx[0] != sd[0] || sx[2] != sd[1] {
            return Err(Error::dim("mul_seq", &sx, &sd));
        }
        let (batch, t, r) = (sx[0], sx[1], sx[2]);
        let (xv, dv) = (self.data(x), self.data(d));
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            let dr = &dv[b * r..(b + 1) * r];
            for s in 0..t {
                let off = (b * t + s) * r;
                for i in 0..r {
                    out[off + i] = xv[off + i] * dr[i];
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(&[x, d]);
        Ok(self.push(value, Op::MulSeq { x, d, t, r }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Only leaves created with
    /// `requires_grad` receive gradients; each is accumulated over every path.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let c = contrib();
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(c) {
                    *a = *a + x;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (da, db) = kernels::matmul_bwd(g, self.data(a), self.data(b), m, k, n);
                self.accumulate(grads, a, || da);
                self.accumulate(grads, b, || db);
            }
            &Op::Linear { x, w, rows, inp, out } => {
                self.accumulate(grads, x, || kernels::linear_bwd_x(g, self.data(w), rows, inp, out));
                self.accumulate(grads, w, || kernels::linear_bwd_w(g, self.data(x), rows, inp, out));
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.to_vec());
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.iter().map(|&x| -x).collect());
            }
            &Op::Mul { a, b } => {
                self.accumulate(grads, a, || g.iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect());
                self.accumulate(grads, b, || g.iter().zip(self.data(a)).map(|(&x, &y)| x * y).collect());
            }
            &Op::Scale { x, c } => {
                self.accumulate(grads, x, || g.iter().map(|&v| v * c).collect());
            }
            &Op::AddBias { x, b } => {
                self.accumulate(grads, x, || g.to_vec());
                self.accumulate(grads, b, || {
                    let n = self.value(b).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    db
                });
            }
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                self.accumulate(grads, x, || {
                    g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect()
                });
            }
            &Op::Silu { x } => {
                self.accumulate(grads, x, || {
                    g.iter()
                        .zip(self.data(x))
                        .map(|(&gv, &xv)| gv * kernels::silu_grad(xv))
                        .collect()
                });
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let d = self.value(*gamma).numel();
                let (dx, dgamma) =
                    kernels::rms_norm_bwd(g, self.data(*x), self.data(*gamma), inv_rms, d);
                self.accumulate(grads, *x, || dx);
                self.accumulate(grads, *gamma, || dgamma);
            }
            Op::Rope { x, batch, t, heads, head_dim, cos, sin } => {
                self.accumulate(grads, *x, || {
                    kernels::rope_rotate(g, *batch, *t, *heads, *head_dim, cos, sin, true)
                });
            }
            Op::Attention { q, k, v, probs, dims } => {
                let (dq, dk, dv) = kernels::attention_bwd(
                    g,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    *dims,
                );
                self.accumulate(grads, *q, || dq);
                self.accumulate(grads, *k, || dk);
                self.accumulate(grads, *v, || dv);
            }
            Op::Embedding { table, tokens } => {
                self.accumulate(grads, *table, || {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![T::zero(); self.value(*table).numel()];
                    for (i, &tok) in tokens.iter().enumerate() {
                        for (acc, &v) in dt[tok * d..(tok + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *acc = *acc + v;
                        }
                    }
                    dt
                });
            }
            Op::MeanPool { h, mask, counts, t } => {
                self.accumulate(grads, *h, || {
                    let d = g.len() / counts.len();
                    let mut dh = vec![T::zero(); self.value(*h).numel()];
                    for (b, &cnt) in counts.iter().enumerate() {
                        for s in 0..*t {
                            let m = mask[b * t + s];
                            if m == T::zero() {
                                continue;
                            }
                            let off = (b * t + s) * d;
                            for i in 0..d {
                                dh[off + i] = g[b * d + i] * m / cnt;
                            }
                        }
                    }
                    dh
                });
            }
            Op::CrossEntropy { logits, targets, keep, probs, count } => {
                self.accumulate(grads, *logits, || {
                    let vocab = self.shape(*logits).last().copied().unwrap_or(0);
                    let scale = g[0] / *count;
                    let mut dl = vec![T::zero(); probs.len()];
                    for (r, (&tgt, &kept)) in targets.iter().zip(keep).enumerate() {
                        if !kept {
                            continue;
                        }
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (o, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o = p * scale;
                        }
                        row[tgt] = row[tgt] - scale;
                    }
                    dl
                });
            }
            &Op::Concat { a, b, na, nb } => {
                let w = na + nb;
                self.accumulate(grads, a, || g.chunks(w).flat_map(|row| row[..na].iter().copied()).collect());
                self.accumulate(grads, b, || g.chunks(w).flat_map(|row| row[na..].iter().copied()).collect());
            }
            &Op::SelectRow { table, row } => {
                self.accumulate(grads, table, || {
                    let n = g.len();
                    let mut dt = vec![T::zero(); self.value(table).numel()];
                    dt[row * n..(row + 1) * n].copy_from_slice(g);
                    dt
                });
            }
            &Op::BroadcastRows { x, rows } => {
                self.accumulate(grads, x, || {
                    let n = g.len() / rows.max(1);
                    let mut dx = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (acc, &v) in dx.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    dx
                });
            }
            &Op::MulSeq { x, d, t, r } => {
                let (xv, dv) = (self.data(x), self.data(d));
                let batch = dv.len() / r;
                self.accumulate(grads, x, || {
                    let mut dx = vec![T::zero(); xv.len()];
                    for b in 0..batch {
                        for s in 0..t {
                            let off = (b * t + s) * r;
                            for i in 0..r {
                                dx[off + i] = g[off + i] * dv[b * r + i];
                            }
                        }
                    }
                    dx
                });
                self.accumulate(grads, d, || {
                    let mut dd = vec![T::zero(); dv.len()];
                    for b in 0..batch {
                        for s in 0..t {
                            let off = (b * t + s) * r;
                            for i in 0..r {
                                dd[b * r + i] = dd[b * r + i] + g[off + i] * xv[off + i];
                            }
                        }
                    }
                    dd
                });
            }
            &Op::Sum { x } => {
                self.accumulate(grads, x, || vec![g[0]; self.value(x).numel()]);
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, || g.to_vec());
            }
        }
    }
}
