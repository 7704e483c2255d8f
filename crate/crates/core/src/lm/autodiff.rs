//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations evaluate
//! eagerly and record enough state to run their adjoint; [`Graph::backward`]
//! walks the nodes in reverse creation order. Nodes created from parameters
//! remember the parameter index so gradients can be routed back to a
//! [`ParamStore`](super::ParamStore).

use super::tensor::{gemm, Tensor};
use super::LmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    PassThrough(Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Softplus(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        segs: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    Rows {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        src: Var,
        pairs: Vec<(usize, usize)>,
    },
    SegmentSum {
        x: Var,
        segs: Vec<(usize, usize)>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    nonfinite: Option<&'static str>,
}

/// Adjoints of every node reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn grad_buf(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Errors if any operation so far produced NaN or infinity.
    pub fn ensure_finite(&self) -> Result<(), LmError> {
        match self.nonfinite {
            Some(op) => Err(LmError::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "constant")
    }

    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf, "param");
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ad, bd) = (self.value(a).dims2(), self.value(b).dims2());
        let m = if ta { ad.1 } else { ad.0 };
        let n = if tb { bd.0 } else { bd.1 };
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            ad,
            ta,
            self.value(b).data(),
            bd,
            tb,
            &mut out,
            false,
        );
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb },
            "matmul",
        )
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{name}: shape mismatch");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| f(*p, *q))
            .collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    /// Adds a row vector `b` (length = last axis) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, c) = self.value(a).dims2();
        assert_eq!(self.value(b).len(), c, "add_row: width mismatch");
        let bias = self.value(b).data().to_vec();
        let x = self.value(a);
        let data = x
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(&bias).map(|(p, q)| p + q))
            .collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddRow(a, b), "add_row")
    }

    /// Adds a constant tensor; gradient flows only to `a`.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "add_const: shape mismatch");
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::PassThrough(a),
            "add_const",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape: size mismatch"
        );
        let t = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        self.push(t, Op::PassThrough(a), "reshape")
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| f(*v)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |v| v * c, Op::Scale(a, c), "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a), "gelu")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a), "softplus")
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (_, c) = x.dims2();
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let shape = x.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::LogSoftmax(a),
            "log_softmax",
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[T, 3d]` with query, key and value blocks side by side.
    /// `segs` lists `(start, len)` of each packed sequence; attention never
    /// crosses a segment boundary.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segs: &[(usize, usize)]) -> Var {
        let x = self.value(qkv);
        let (t, w) = x.dims2();
        let d = w / 3;
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = x.data();
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for &(s0, len) in segs {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &q[(s0 + i) * w + qo..(s0 + i) * w + qo + dh];
                    let row = &mut p[i * len..i * len + i + 1];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, pj) in row.iter_mut().enumerate() {
                        let kj = &q[(s0 + j) * w + ko..(s0 + j) * w + ko + dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *pj = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for pj in row.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    let o = &mut out[(s0 + i) * d + qo..(s0 + i) * d + qo + dh];
                    for (j, pj) in row.iter_mut().enumerate() {
                        *pj /= z;
                        let vj = &q[(s0 + j) * w + vo..(s0 + j) * w + vo + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += *pj * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let op = Op::Attention {
            qkv,
            heads,
            segs: segs.to_vec(),
            probs,
        };
        self.push(Tensor::from_parts(vec![t, d], out), op, "attention")
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (r, c) = tv.dims2();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < r, "row index {i} out of range {r}");
            data.extend_from_slice(tv.row(i));
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::Rows {
                table,
                ids: ids.to_vec(),
            },
            "rows",
        )
    }

    /// `out = base; out[o] += src[s]` for each `(o, s)` in `pairs`, indices
    /// into the flattened tensors. `base` is a constant.
    pub fn gather(&mut self, src: Var, base: Tensor, pairs: Vec<(usize, usize)>) -> Var {
        let mut out = base;
        let sv = self.value(src).data();
        let od = out.data_mut();
        for &(o, s) in &pairs {
            od[o] += sv[s];
        }
        self.push(out, Op::Gather { src, pairs }, "gather")
    }

    /// Sums contiguous `(start, len)` slices of a flattened tensor.
    pub fn segment_sum(&mut self, x: Var, segs: &[(usize, usize)]) -> Var {
        let xv = self.value(x).data();
        let data = segs
            .iter()
            .map(|&(s, l)| xv[s..s + l].iter().sum())
            .collect();
        self.push(
            Tensor::from_parts(vec![segs.len()], data),
            Op::SegmentSum {
                x,
                segs: segs.to_vec(),
            },
            "segment_sum",
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.adjoint(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn adjoint(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ad, bd) = (val(*a).dims2(), val(*b).dims2());
                let cd = node.value.dims2();
                let (av, bv) = (val(*a).data(), val(*b).data());
                {
                    let da = grad_buf(&mut g[a.0], av.len());
                    if *ta {
                        gemm(bv, bd, *tb, dy, cd, true, da, true);
                    } else {
                        gemm(dy, cd, false, bv, bd, !*tb, da, true);
                    }
                }
                let db = grad_buf(&mut g[b.0], bv.len());
                if *tb {
                    gemm(dy, cd, true, av, ad, *ta, db, true);
                } else {
                    gemm(av, ad, !*ta, dy, cd, false, db, true);
                }
            }
            Op::Add(a, b) => {
                add_into(&mut g[a.0], dy);
                add_into(&mut g[b.0], dy);
            }
            Op::Sub(a, b) => {
                add_into(&mut g[a.0], dy);
                let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                add_into(&mut g[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da: Vec<f64> = dy.iter().zip(bv).map(|(d, y)| d * y).collect();
                let db: Vec<f64> = dy.iter().zip(av).map(|(d, x)| d * x).collect();
                add_into(&mut g[a.0], &da);
                add_into(&mut g[b.0], &db);
            }
            Op::AddRow(a, b) => {
                add_into(&mut g[a.0], dy);
                let c = val(*b).len();
                let db = grad_buf(&mut g[b.0], c);
                for row in dy.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                }
            }
            Op::PassThrough(a) => add_into(&mut g[a.0], dy),
            Op::Scale(a, c) => {
                let d: Vec<f64> = dy.iter().map(|v| v * c).collect();
                add_into(&mut g[a.0], &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(val(*a).data())
                    .map(|(d, x)| d * gelu_grad(*x))
                    .collect();
                add_into(&mut g[a.0], &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(node.value.data())
                    .map(|(d, y)| d * y)
                    .collect();
                add_into(&mut g[a.0], &d);
            }
            Op::Softplus(a) => {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(val(*a).data())
                    .map(|(d, x)| d * sigmoid(*x))
                    .collect();
                add_into(&mut g[a.0], &d);
            }
            Op::LogSoftmax(a) => {
                let (_, c) = node.value.dims2();
                let mut d = Vec::with_capacity(dy.len());
                for (yr, dr) in node.value.data().chunks(c).zip(dy.chunks(c)) {
                    let s: f64 = dr.iter().sum();
                    d.extend(yr.iter().zip(dr).map(|(y, g)| g - y.exp() * s));
                }
                add_into(&mut g[a.0], &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).len();
                let gv = val(*gamma).data();
                let mut dx = Vec::with_capacity(dy.len());
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (r, (dr, hr)) in dy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dg[j] += dr[j] * hr[j];
                        db[j] += dr[j];
                        let dh = dr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx.push(rstd[r] * (dr[j] * gv[j] - m1 - hr[j] * m2));
                    }
                }
                add_into(&mut g[x.0], &dx);
                add_into(&mut g[gamma.0], &dg);
                add_into(&mut g[beta.0], &db);
            }
            Op::Attention {
                qkv,
                heads,
                segs,
                probs,
            } => {
                let x = val(*qkv);
                let (_, w) = x.dims2();
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let q = x.data();
                let dq = grad_buf(&mut g[qkv.0], q.len());
                let mut pi = 0;
                for &(s0, len) in segs {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        let mut ds = vec![0.0; len];
                        for i in 0..len {
                            let doi = &dy[(s0 + i) * d + qo..(s0 + i) * d + qo + dh];
                            let prow = &p[i * len..i * len + i + 1];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                let vj = &q[(s0 + j) * w + vo..(s0 + j) * w + vo + dh];
                                let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                ds[j] = dp;
                                dot += dp * prow[j];
                                let dv = &mut dq[(s0 + j) * w + vo..(s0 + j) * w + vo + dh];
                                for (a, b) in dv.iter_mut().zip(doi) {
                                    *a += prow[j] * b;
                                }
                            }
                            for j in 0..=i {
                                let s = prow[j] * (ds[j] - dot) * scale;
                                if s == 0.0 {
                                    continue;
                                }
                                for k in 0..dh {
                                    let kj = q[(s0 + j) * w + ko + k];
                                    let qi = q[(s0 + i) * w + qo + k];
                                    dq[(s0 + i) * w + qo + k] += s * kj;
                                    dq[(s0 + j) * w + ko + k] += s * qi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Rows { table, ids } => {
                let tv = val(*table);
                let (_, c) = tv.dims2();
                let dt = grad_buf(&mut g[table.0], tv.len());
                for (k, &r) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[r * c + j] += dy[k * c + j];
                    }
                }
            }
            Op::Gather { src, pairs } => {
                let ds = grad_buf(&mut g[src.0], val(*src).len());
                for &(o, s) in pairs {
                    ds[s] += dy[o];
                }
            }
            Op::SegmentSum { x, segs } => {
                let dx = grad_buf(&mut g[x.0], val(*x).len());
                for (k, &(s, l)) in segs.iter().enumerate() {
                    dx[s..s + l].iter_mut().for_each(|v| *v += dy[k]);
                }
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                let da = grad_buf(&mut g[a.0], n);
                da.iter_mut().for_each(|v| *v += dy[0]);
            }
        }
    }

    /// Gradients of parameter leaves as `(param index, gradient)` pairs.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients,
    ) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let p = n.param?;
            grads.grads[i].as_deref().map(|g| (p, g))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` with respect to every entry of the
    /// inputs, compared against the tape's gradients.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vs);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vs[k])
                .map(|s| s.to_vec())
                .unwrap_or(vec![0.0; t.len()]);
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic[i];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                assert!(err < 1e-5, "input {k}[{i}]: fd {fd} vs tape {a}");
            }
        }
    }

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let w = t(g.value(x).shape(), seed);
        let wv = g.constant(w);
        let p = g.mul(x, wv);
        g.sum(p)
    }

    #[test]
    fn matmul_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { t(&[3, 2], 1) } else { t(&[2, 3], 1) };
            let b = if tb { t(&[4, 3], 2) } else { t(&[3, 4], 2) };
            check(vec![a, b], move |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb);
                weighted_sum(g, m, 3)
            });
        }
    }

    #[test]
    fn elementwise_ops() {
        check(vec![t(&[2, 3], 4), t(&[2, 3], 5), t(&[3], 6)], |g, v| {
            let a = g.add(v[0], v[1]);
            let b = g.mul(a, v[1]);
            let c = g.sub(b, v[0]);
            let d = g.add_row(c, v[2]);
            let e = g.gelu(d);
            let f = g.softplus(e);
            let h = g.scale(f, 0.7);
            let i = g.exp(h);
            weighted_sum(g, i, 7)
        });
    }

    #[test]
    fn log_softmax_and_layer_norm() {
        check(vec![t(&[3, 5], 8), t(&[5], 9), t(&[5], 10)], |g, v| {
            let n = g.layer_norm(v[0], v[1], v[2]);
            let l = g.log_softmax(n);
            weighted_sum(g, l, 11)
        });
    }

    #[test]
    fn attention_two_segments() {
        check(vec![t(&[5, 12], 12)], |g, v| {
            let a = g.causal_attention(v[0], 2, &[(0, 3), (3, 2)]);
            weighted_sum(g, a, 13)
        });
    }

    #[test]
    fn attention_does_not_cross_segments() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 6], 1));
        let a = g.causal_attention(x, 1, &[(0, 2), (2, 2)]);
        let mut g2 = Graph::new();
        let mut x2 = t(&[4, 6], 1);
        // Perturb the second segment only.
        for v in &mut x2.data_mut()[12..] {
            *v += 1.0;
        }
        let y = g2.constant(x2);
        let b = g2.causal_attention(y, 1, &[(0, 2), (2, 2)]);
        assert_eq!(&g.value(a).data()[..4], &g2.value(b).data()[..4]);
    }

    #[test]
    fn gather_rows_segments_reshape() {
        check(vec![t(&[4, 3], 14)], |g, v| {
            let r = g.rows(v[0], &[2, 0, 2]);
            let flat = g.reshape(r, &[9]);
            let gat = g.gather(
                flat,
                Tensor::full(&[4], 0.5),
                vec![(0, 1), (1, 4), (1, 5), (3, 8)],
            );
            let s = g.segment_sum(gat, &[(0, 2), (2, 2)]);
            let sp = g.softplus(s);
            let c = g.add_const(sp, &Tensor::from_vec(vec![1.0, 2.0]));
            weighted_sum(g, c, 15)
        });
    }

    #[test]
    fn nonfinite_values_trip_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1000.0]));
        g.ensure_finite().unwrap();
        let _ = g.exp(x);
        assert!(matches!(g.ensure_finite(), Err(LmError::NonFinite(_))));
    }
}
