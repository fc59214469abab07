//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value.
//! [`Tape::backward`] replays the nodes in reverse, and adds the adjoints of
//! leaves created with `requires_grad = true` into persistent gradient
//! buffers. Those buffers accumulate across `backward` calls until
//! [`Tape::zero_grads`].
//!
//! Binary elementwise ops broadcast only over leading dimensions: the right
//! operand's shape must equal the left shape or be a suffix of it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// tanh-approximation GeLU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        count: usize,
    },
    Sum(Var),
    Reshape(Var),
    Select {
        x: Var,
        index: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Forward intermediates kept for the backward rule (softmax output,
    /// normalised activations, attention probabilities).
    saved: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

// C[m,n] += A[m,k] B[k,n]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

// C[m,n] += A[m,k] B[n,k]^T
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot4(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

// C[m,n] += A[k,m]^T B[k,n]
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// Copies head `h` of batch `bi` from `[B,M,D]` into `out[dh,M]`.
fn head_transpose(x: &[f64], bi: usize, h: usize, m: usize, d: usize, dh: usize, out: &mut [f64]) {
    for mi in 0..m {
        let row = &x[(bi * m + mi) * d + h * dh..(bi * m + mi) * d + (h + 1) * dh];
        for (p, &v) in row.iter().enumerate() {
            out[p * m + mi] = v;
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

// Four independent partial sums so the loop vectorises.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            s[i] += x[i] * y[i];
        }
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

fn gelu_fwd(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, saved: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, Vec::new())
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape(), g.clone())
                .expect("gradient buffers mirror their node's shape")
        })
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary_check(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(Error::shape(format!(
                "{name}: {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = av
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "mul")?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = av
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x * y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg, Vec::new()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg, Vec::new())
    }

    /// `a[..., m, k] @ b[k, n]`, or a batched product when `b` carries the
    /// same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2, got {sa:?} @ {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {sa:?} @ {sb:?}"
            )));
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(format!(
                "matmul batch dims differ: {sa:?} @ {sb:?}"
            )));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            if batched {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut data[i * m * n..(i + 1) * m * n],
                    );
                }
            } else {
                gemm(batch * m, k, n, ad, bd, &mut data);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg, Vec::new()))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, Vec::new())
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg, Vec::new())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| xd[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
            Vec::new(),
        ))
    }

    /// Normalises over the last dimension; `gamma` and `beta` have that size.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract(format!(
                "layernorm eps must be > 0, got {eps}"
            )));
        }
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layernorm over {d} features got gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        // saved layout: xhat (rows*d) followed by inv_std (rows)
        let mut saved = if rg {
            vec![0.0; xd.len() + rows]
        } else {
            Vec::new()
        };
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                out[r * d + c] = xh * g[c] + bt[c];
                if rg {
                    saved[r * d + c] = xh;
                }
            }
            if rg {
                saved[rows * d + r] = inv;
            }
        }
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, rg, saved))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut widths = Vec::with_capacity(xs.len());
        let inner: usize = base[axis + 1..].iter().product();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            widths.push(s[axis] * inner);
        }
        let outer: usize = base[..axis].iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*x).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner;
        let out = Tensor::new(&shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            rg,
            Vec::new(),
        ))
    }

    /// Rows of `table[V, D]` gathered by `ids`, shaped `[ids.len(), D]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "embedding table must be rank 2, got {s:?}"
            )));
        }
        if ids.is_empty() {
            return Err(Error::contract("embed with no ids"));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "token id {bad} outside table of {v} rows"
            )));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
            Vec::new(),
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits[..., V]`,
    /// skipping rows whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {rows} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= v) {
            return Err(Error::contract(format!(
                "target {bad} outside vocabulary of {v}"
            )));
        }
        let count = targets.iter().filter(|&&t| t != ignore).count();
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let rg = self.rg(logits);
        let ld = lv.data();
        let mut total = 0.0;
        let mut saved = if rg { vec![0.0; ld.len()] } else { Vec::new() };
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[t];
            if rg {
                for c in 0..v {
                    saved[r * v + c] = (row[c] - lse).exp();
                }
            }
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            rg,
            saved,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg, Vec::new())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg, Vec::new()))
    }

    /// `x[index]` along the first axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if index >= s[0] {
            return Err(Error::shape(format!(
                "select index {index} out of range for {s:?}"
            )));
        }
        let out_shape: Vec<usize> = if s.len() == 1 {
            vec![1]
        } else {
            s[1..].to_vec()
        };
        let w: usize = out_shape.iter().product();
        let data = self.value(x).data()[index * w..(index + 1) * w].to_vec();
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Select { x, index }, rg, Vec::new()))
    }

    /// Scaled dot-product attention over already-projected `q[B,L,D]`,
    /// `k[B,M,D]`, `v[B,M,D]` split into `heads` equal slices of `D`.
    /// With `causal`, query `l` only sees keys `m <= l` (requires `L == M`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape(format!(
                "attention expects q[B,L,D], k/v[B,M,D]; got {sq:?} {sk:?} {sv:?}"
            )));
        }
        let (b, l, d, m) = (sq[0], sq[1], sq[2], sk[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "{d} features do not split into {heads} heads"
            )));
        }
        if causal && l != m {
            return Err(Error::contract(
                "causal attention requires equal query and key lengths",
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; b * l * d];
        let mut probs = vec![0.0; b * heads * l * m];
        let mut kt = vec![0.0; dh * m];
        for bi in 0..b {
            for h in 0..heads {
                head_transpose(kd, bi, h, m, d, dh, &mut kt);
                for li in 0..l {
                    let visible = if causal { li + 1 } else { m };
                    let qrow = &qd[(bi * l + li) * d + h * dh..(bi * l + li) * d + (h + 1) * dh];
                    let prow = &mut probs
                        [((bi * heads + h) * l + li) * m..((bi * heads + h) * l + li + 1) * m];
                    let s = &mut prow[..visible];
                    for (p, &qv) in qrow.iter().enumerate() {
                        for (sv, kv) in s.iter_mut().zip(&kt[p * m..p * m + visible]) {
                            *sv += qv * kv;
                        }
                    }
                    let max = s.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x * scale));
                    let mut total = 0.0;
                    for sv in s.iter_mut() {
                        *sv = (*sv * scale - max).exp();
                        total += *sv;
                    }
                    let inv = 1.0 / total;
                    let orow =
                        &mut out[(bi * l + li) * d + h * dh..(bi * l + li) * d + (h + 1) * dh];
                    for (mi, pv) in s.iter_mut().enumerate() {
                        *pv *= inv;
                        let vrow =
                            &vd[(bi * m + mi) * d + h * dh..(bi * m + mi) * d + (h + 1) * dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += *pv * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, l, d], out)?;
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
            },
            rg,
            probs,
        ))
    }

    /// Propagates from a scalar `loss` and accumulates into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Accumulates into the adjoint of `v` when it tracks gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    let nb = buf.len();
                    for chunk in g.chunks(nb) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let nb = bd.len();
                acc(*a, &mut |buf| {
                    for (idx, (d, gv)) in buf.iter_mut().zip(g).enumerate() {
                        *d += gv * bd[idx % nb];
                    }
                });
                acc(*b, &mut |buf| {
                    for (idx, (gv, av)) in g.iter().zip(ad).enumerate() {
                        buf[idx % nb] += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| {
                for (d, gv) in buf.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let batched = sb.len() > 2;
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    if batched {
                        for t in 0..batch {
                            gemm_bt(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                &bd[t * k * n..(t + 1) * k * n],
                                &mut buf[t * m * k..(t + 1) * m * k],
                            );
                        }
                    } else {
                        gemm_bt(batch * m, n, k, g, bd, buf);
                    }
                });
                acc(*b, &mut |buf| {
                    if batched {
                        for t in 0..batch {
                            gemm_at(
                                k,
                                m,
                                n,
                                &ad[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut buf[t * k * n..(t + 1) * k * n],
                            );
                        }
                    } else {
                        gemm_at(k, batch * m, n, ad, g, buf);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x);
                acc(*x, &mut |buf| {
                    for ((d, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, &mut |buf| {
                    for ((d, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu_grad(*xv);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = node.value.last_dim();
                let rows = g.len() / d;
                let (xhat, inv) = node.saved.split_at(rows * d);
                let gam = val(*gamma);
                acc(*x, &mut |buf| {
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxh[c] = gr[c] * gam[c];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            buf[r * d + c] += inv[r] * (dxh[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |buf| {
                    for r in 0..rows {
                        for c in 0..d {
                            buf[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for chunk in g.chunks(d) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (x, &w) in xs.iter().zip(widths) {
                    acc(*x, &mut |buf| {
                        for o in 0..*outer {
                            add_into(
                                &mut buf[o * w..(o + 1) * w],
                                &g[o * total + offset..o * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Embed { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let v = nodes[logits.0].value.last_dim();
                let coef = g[0] / *count as f64;
                let probs = &node.saved;
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..v {
                            buf[r * v + c] += coef * probs[r * v + c];
                        }
                        buf[r * v + t] -= coef;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| {
                for d in buf.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Select { x, index } => {
                let w = g.len();
                acc(*x, &mut |buf| {
                    add_into(&mut buf[index * w..(index + 1) * w], g)
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
            } => self.attention_backward(node, g, (*q, *k, *v), *heads, *causal, &mut acc),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        causal: bool,
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let sq = self.nodes[q.0].value.shape();
        let (b, l, d) = (sq[0], sq[1], sq[2]);
        let m = self.nodes[k.0].value.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let probs = &node.saved;
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let (mut kt, mut vt) = (vec![0.0; dh * m], vec![0.0; dh * m]);
        let (mut dkt, mut dvt) = (vec![0.0; dh * m], vec![0.0; dh * m]);
        let mut ds = vec![0.0; m];
        for bi in 0..b {
            for h in 0..heads {
                head_transpose(kd, bi, h, m, d, dh, &mut kt);
                head_transpose(vd, bi, h, m, d, dh, &mut vt);
                dkt.fill(0.0);
                dvt.fill(0.0);
                for li in 0..l {
                    let visible = if causal { li + 1 } else { m };
                    let prow = &probs[((bi * heads + h) * l + li) * m..][..visible];
                    let row = (bi * l + li) * d + h * dh;
                    let grow = &g[row..row + dh];
                    let qrow = &qd[row..row + dh];
                    let dp = &mut ds[..visible];
                    dp.fill(0.0);
                    for (p, &gv) in grow.iter().enumerate() {
                        axpy(gv, &vt[p * m..p * m + visible], dp);
                        axpy(gv, prow, &mut dvt[p * m..p * m + visible]);
                    }
                    let dot = dot4(dp, prow);
                    for (x, &pv) in dp.iter_mut().zip(prow) {
                        *x = pv * (*x - dot) * scale;
                    }
                    let dqrow = &mut dq[row..row + dh];
                    for (p, &qv) in qrow.iter().enumerate() {
                        dqrow[p] += dot4(dp, &kt[p * m..p * m + visible]);
                        axpy(qv, dp, &mut dkt[p * m..p * m + visible]);
                    }
                }
                for mi in 0..m {
                    let row = (bi * m + mi) * d + h * dh;
                    for p in 0..dh {
                        dk[row + p] += dkt[p * m + mi];
                        dv[row + p] += dvt[p * m + mi];
                    }
                }
            }
        }
        acc(q, &mut |buf| add_into(buf, &dq));
        acc(k, &mut |buf| add_into(buf, &dk));
        acc(v, &mut |buf| add_into(buf, &dv));
    }
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over checked coordinates of `|analytic - central| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Coordinates skipped because the one-sided difference quotients
    /// disagree, i.e. `x` sits on (or within `eps` of) a kink such as relu at 0.
    pub excluded: Vec<usize>,
    pub checked: usize,
}

/// Compares the tape gradient of scalar `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::contract(format!(
            "grad_check eps {eps} outside [1e-7, 1e-4]"
        )));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point.clone());
        let out = f(&mut tape, xv)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::contract("grad_check function must return a scalar"));
    }
    let f0 = tape.value(out).item();
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros_like(x))
        .into_data();

    let kink_tol = (1e3 * eps).max(1e-3);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        excluded: Vec::new(),
        checked: 0,
    };
    let mut point = x.clone();
    for i in 0..x.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let fp = eval(&point)?;
        point.data_mut()[i] = orig - eps;
        let fm = eval(&point)?;
        point.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let forward = (fp - f0) / eps;
        let backward = (f0 - fm) / eps;
        if (forward - backward).abs() > kink_tol * central.abs().max(1.0) {
            report.excluded.push(i);
            continue;
        }
        let err = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
