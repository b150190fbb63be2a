//! Slice-level forward and backward kernels used by the tape.

use super::Element;

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    // Branch on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

/// `y[rows×out] = x[rows×inp] · wᵀ` with `w` stored `[out×inp]`.
pub fn linear_fwd<T: Element>(x: &[T], w: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    T::gemm(
        rows,
        inp,
        out,
        T::one(),
        x,
        inp as isize,
        1,
        w,
        1,
        inp as isize,
        T::zero(),
        &mut y,
        out as isize,
        1,
    );
    y
}

/// `dx = dy · w`
pub fn linear_bwd_x<T: Element>(dy: &[T], w: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * inp];
    T::gemm(
        rows,
        out,
        inp,
        T::one(),
        dy,
        out as isize,
        1,
        w,
        inp as isize,
        1,
        T::zero(),
        &mut dx,
        inp as isize,
        1,
    );
    dx
}

/// `dw = dyᵀ · x`
pub fn linear_bwd_w<T: Element>(dy: &[T], x: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut dw = vec![T::zero(); out * inp];
    T::gemm(
        out,
        rows,
        inp,
        T::one(),
        dy,
        1,
        out as isize,
        x,
        inp as isize,
        1,
        T::zero(),
        &mut dw,
        inp as isize,
        1,
    );
    dw
}

/// Plain `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_fwd<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        &mut c,
        n as isize,
        1,
    );
    c
}

pub fn matmul_bwd<T: Element>(
    g: &[T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    // da = g · bᵀ
    let mut da = vec![T::zero(); m * k];
    T::gemm(
        m,
        n,
        k,
        T::one(),
        g,
        n as isize,
        1,
        b,
        1,
        n as isize,
        T::zero(),
        &mut da,
        k as isize,
        1,
    );
    // db = aᵀ · g
    let mut db = vec![T::zero(); k * n];
    T::gemm(
        k,
        m,
        n,
        T::one(),
        a,
        1,
        k as isize,
        g,
        n as isize,
        1,
        T::zero(),
        &mut db,
        n as isize,
        1,
    );
    (da, db)
}

/// Returns the normalized output and the per-row inverse RMS.
pub fn rms_norm_fwd<T: Element>(x: &[T], gamma: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let dn = T::from_usize(d).unwrap();
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let ir = T::one() / (ms + eps).sqrt();
        inv[r] = ir;
        for ((o, &v), &g) in y[r * d..(r + 1) * d].iter_mut().zip(row).zip(gamma) {
            *o = v * ir * g;
        }
    }
    (y, inv)
}

pub fn rms_norm_bwd<T: Element>(
    g: &[T],
    x: &[T],
    gamma: &[T],
    inv: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let dn = T::from_usize(d).unwrap();
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let ir = inv[r];
        let mut dot = T::zero();
        for i in 0..d {
            let xhat = xr[i] * ir;
            dgamma[i] = dgamma[i] + gr[i] * xhat;
            dot = dot + gr[i] * gamma[i] * xhat;
        }
        let mean = dot / dn;
        for i in 0..d {
            let xhat = xr[i] * ir;
            dx[r * d + i] = ir * (gr[i] * gamma[i] - xhat * mean);
        }
    }
    (dx, dgamma)
}

/// Rotation table `[t × head_dim/2]` of (cos, sin) for angle `pos·theta^(−2i/head_dim)`.
pub fn rope_table<T: Element>(t: usize, head_dim: usize, theta: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for pos in 0..t {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(T::from_f64_lossy(angle.cos()));
            sin.push(T::from_f64_lossy(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates adjacent pairs `(2i, 2i+1)` of each head in `x[B×T×(heads·head_dim)]`.
/// `inverse` applies the transpose rotation (used by the backward pass).
#[allow(clippy::too_many_arguments)]
pub fn rope_rotate<T: Element>(
    x: &[T],
    batch: usize,
    t: usize,
    heads: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) -> Vec<T> {
    let half = head_dim / 2;
    let width = heads * head_dim;
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for pos in 0..t {
            let base = (b * t + pos) * width;
            for h in 0..heads {
                let off = base + h * head_dim;
                for i in 0..half {
                    let c = cos[pos * half + i];
                    let s = if inverse { -sin[pos * half + i] } else { sin[pos * half + i] };
                    let x0 = x[off + 2 * i];
                    let x1 = x[off + 2 * i + 1];
                    y[off + 2 * i] = x0 * c - x1 * s;
                    y[off + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
    y
}

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub t: usize,
    pub n_heads: usize,
    pub n_kv: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }
    fn kv_width(&self) -> usize {
        self.n_kv * self.head_dim
    }
    fn group(&self) -> usize {
        self.n_heads / self.n_kv
    }
}

/// Causal grouped-query attention. Returns the output `[B×T×(H·hd)]` and the
/// softmax probabilities `[B×H×T×T]` (zero above the diagonal).
pub fn attention_fwd<T: Element>(q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims { batch, t, n_heads, head_dim, .. } = dims;
    let (qw, kw, group) = (dims.q_width(), dims.kv_width(), dims.group());
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut out = vec![T::zero(); batch * t * qw];
    let mut probs = vec![T::zero(); batch * n_heads * t * t];
    for b in 0..batch {
        for h in 0..n_heads {
            let g = h / group;
            let q_off = b * t * qw + h * head_dim;
            let kv_off = b * t * kw + g * head_dim;
            let p = &mut probs[(b * n_heads + h) * t * t..(b * n_heads + h + 1) * t * t];
            // S = scale · Q_h K_gᵀ
            T::gemm(
                t,
                head_dim,
                t,
                scale,
                &q[q_off..],
                qw as isize,
                1,
                &k[kv_off..],
                1,
                kw as isize,
                T::zero(),
                p,
                t as isize,
                1,
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let max = row[..=i].iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut z = T::zero();
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    z = z + *s;
                }
                for s in row[..=i].iter_mut() {
                    *s = *s / z;
                }
                for s in row[i + 1..].iter_mut() {
                    *s = T::zero();
                }
            }
            // O_h = P V_g
            T::gemm(
                t,
                t,
                head_dim,
                T::one(),
                p,
                t as isize,
                1,
                &v[kv_off..],
                kw as isize,
                1,
                T::zero(),
                &mut out[q_off..],
                qw as isize,
                1,
            );
        }
    }
    (out, probs)
}

pub fn attention_bwd<T: Element>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { batch, t, n_heads, head_dim, .. } = dims;
    let (qw, kw, group) = (dims.q_width(), dims.kv_width(), dims.group());
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); t * t];
    for b in 0..batch {
        for h in 0..n_heads {
            let gi = h / group;
            let q_off = b * t * qw + h * head_dim;
            let kv_off = b * t * kw + gi * head_dim;
            let p = &probs[(b * n_heads + h) * t * t..(b * n_heads + h + 1) * t * t];
            // dV_g += Pᵀ dO_h
            T::gemm(
                t,
                t,
                head_dim,
                T::one(),
                p,
                1,
                t as isize,
                &g[q_off..],
                qw as isize,
                1,
                T::one(),
                &mut dv[kv_off..],
                kw as isize,
                1,
            );
            // dP = dO_h V_gᵀ
            T::gemm(
                t,
                head_dim,
                t,
                T::one(),
                &g[q_off..],
                qw as isize,
                1,
                &v[kv_off..],
                1,
                kw as isize,
                T::zero(),
                &mut ds,
                t as isize,
                1,
            );
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut ds[i * t..(i + 1) * t];
                let dot = pr[..=i]
                    .iter()
                    .zip(dr[..=i].iter())
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                for x in dr[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            // dQ_h = scale · dS K_g
            T::gemm(
                t,
                t,
                head_dim,
                scale,
                &ds,
                t as isize,
                1,
                &k[kv_off..],
                kw as isize,
                1,
                T::one(),
                &mut dq[q_off..],
                qw as isize,
                1,
            );
            // dK_g += scale · dSᵀ Q_h
            T::gemm(
                t,
                t,
                head_dim,
                scale,
                &ds,
                1,
                t as isize,
                &q[q_off..],
                qw as isize,
                1,
                T::one(),
                &mut dk[kv_off..],
                kw as isize,
                1,
            );
        }
    }
    (dq, dk, dv)
}

/// Row-wise softmax cross-entropy. Returns (sum of losses over kept rows, probabilities).
pub fn cross_entropy_fwd<T: Element>(
    logits: &[T],
    targets: &[usize],
    keep: &[bool],
    vocab: usize,
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (r, (&tgt, &kept)) in targets.iter().zip(keep).enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
        let mut z = T::zero();
        let pr = &mut probs[r * vocab..(r + 1) * vocab];
        for (p, &s) in pr.iter_mut().zip(row) {
            *p = (s - max).exp();
            z = z + *p;
        }
        for p in pr.iter_mut() {
            *p = *p / z;
        }
        if kept {
            total = total + (max + z.ln() - row[tgt]);
        }
    }
    (total, probs)
}
