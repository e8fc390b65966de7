use super::gemm::{gemm, Trans};
use super::params::{ParamId, ParamStore};
use super::{log_sum_exp, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of the packed `[batch·seq × width]` activations fed to
/// [`Graph::causal_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Relu(Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    BatchedMatVec {
        mats: Var,
        vecs: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One recorded forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a parameter into the graph as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let var = self.leaf(store.value(id).clone(), store.get(id).requires_grad);
        self.bindings.push((var, id));
        var
    }

    pub(crate) fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attention probabilities `[batch, heads, seq, seq]` kept by a
    /// [`Graph::causal_attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-wise softmax of the logits behind a [`Graph::softmax_cross_entropy`]
    /// node.
    pub fn ce_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self
            .value(b)
            .dims2()
            .map_err(|_| Error::shape("matmul", self.shape(a), self.shape(b)))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        super::matmul_into(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(av.shape(), data)
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            Ok(av.map(|x| f(x, y)))
        } else {
            Err(Error::shape(name, av.shape(), bv.shape()))
        }
    }

    /// Element-wise sum; `b` may also be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Element-wise product; `b` may also be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2()?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Selects rows of a 2-D table; doubles as an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_vec(&[rows.len(), c], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(out, Op::GatherRows(table, rows.to_vec()), rg))
    }

    /// Per-sample matrix-vector product: `mats` holds one `rows×n` matrix
    /// per sample (packed as `[b, rows·n]` or `[b, rows, n]`), `vecs` is
    /// `[b, n]`; the result is `[b, rows]`.
    pub fn batched_matvec(&mut self, mats: Var, vecs: Var, rows: usize) -> Result<Var> {
        let (b, n) = self.value(vecs).dims2()?;
        let ms = self.value(mats);
        if ms.shape().first() != Some(&b) || ms.len() != b * rows * n {
            return Err(Error::shape(
                "batched_matvec",
                self.shape(mats),
                self.shape(vecs),
            ));
        }
        let (md, vd) = (ms.data(), self.value(vecs).data());
        let mut out = Tensor::zeros(&[b, rows]);
        let od = out.data_mut();
        for s in 0..b {
            let v = &vd[s * n..(s + 1) * n];
            for h in 0..rows {
                let off = (s * rows + h) * n;
                od[s * rows + h] = md[off..off + n].iter().zip(v).map(|(&x, &y)| x * y).sum();
            }
        }
        let rg = self.needs(&[mats, vecs]);
        Ok(self.push(out, Op::BatchedMatVec { mats, vecs }, rg))
    }

    /// Affine layer normalization over the last axis of a 2-D input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); m * d];
        let mut rstd = vec![T::zero(); m];
        let mut out = Tensor::zeros(&[m, d]);
        let od = out.data_mut();
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                od[r * d + c] = xh * g[c] + bt[c];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Causal multi-head scaled dot-product attention on packed
    /// `[batch·seq × width]` projections. Head `h` uses columns
    /// `h·w/heads .. (h+1)·w/heads`; scores are scaled by `1/sqrt(w/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
    ) -> Result<Var> {
        let (rows, width) = self.value(q).dims2()?;
        let AttentionShape { batch, seq, heads } = shape;
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                self.shape(q),
                &[batch, seq, heads],
            ));
        }
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(Error::shape(
                    "causal_attention",
                    self.shape(q),
                    self.shape(other),
                ));
            }
        }
        let dk = width / heads;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros(&[rows, width]);
        let od = out.data_mut();
        let mut heads_buf = HeadBuffers::new(seq, dk);
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                let at = |t: usize| (b * seq + t) * width + h * dk;
                heads_buf.load(&at, kd, vd);
                for i in 0..seq {
                    let qi = &qd[at(i)..at(i) + dk];
                    let prow = &mut probs[pbase + i * seq..pbase + i * seq + i + 1];
                    for (d, &x) in qi.iter().enumerate() {
                        let x = x * scale;
                        let kt = &heads_buf.kt[d * seq..d * seq + i + 1];
                        if d == 0 {
                            for (p, &kv) in prow.iter_mut().zip(kt) {
                                *p = x * kv;
                            }
                        } else {
                            axpy(x, kt, prow);
                        }
                    }
                    let max = prow.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for p in prow.iter_mut() {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    let inv = T::one() / sum;
                    for p in prow.iter_mut() {
                        *p *= inv;
                    }
                    for (d, o) in od[at(i)..at(i) + dk].iter_mut().enumerate() {
                        *o = dot(prow, &heads_buf.vt[d * seq..d * seq + i + 1]);
                    }
                }
            }
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                &[b, v],
                &[targets.len()],
            ));
        }
        let ld = self.value(logits).data();
        let mut probs = ld.to_vec();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "softmax_cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
            let row = &ld[r * v..(r + 1) * v];
            total += (log_sum_exp(row) - row[t]).as_f64();
            super::softmax_in_place(&mut probs[r * v..(r + 1) * v]);
        }
        let loss = T::of(total / b as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar root. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let gd = g.data();
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let n = self.nodes[b.0].value.shape()[1];
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    self.accumulate(&mut grads, *a, |da| {
                        gemm(
                            Trans::No,
                            Trans::Yes,
                            m,
                            k,
                            n,
                            T::one(),
                            gd,
                            bv,
                            T::one(),
                            da,
                        )
                    });
                    self.accumulate(&mut grads, *b, |db| {
                        gemm(
                            Trans::Yes,
                            Trans::No,
                            k,
                            n,
                            m,
                            T::one(),
                            av,
                            gd,
                            T::one(),
                            db,
                        )
                    });
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |da| add_into(da, gd));
                    let broadcast = self.nodes[b.0].value.len() != g.len();
                    self.accumulate(&mut grads, *b, |db| {
                        if broadcast {
                            db[0] += gd.iter().copied().sum::<T>();
                        } else {
                            add_into(db, gd);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let broadcast = bv.len() != gd.len();
                    self.accumulate(&mut grads, *a, |da| {
                        for (idx, x) in da.iter_mut().enumerate() {
                            *x += gd[idx] * if broadcast { bv[0] } else { bv[idx] };
                        }
                    });
                    self.accumulate(&mut grads, *b, |db| {
                        if broadcast {
                            db[0] += gd.iter().zip(av).map(|(&x, &y)| x * y).sum::<T>();
                        } else {
                            for (idx, x) in db.iter_mut().enumerate() {
                                *x += gd[idx] * av[idx];
                            }
                        }
                    });
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    self.accumulate(&mut grads, *a, |da| {
                        da.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * f)
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *a, |da| {
                        for ((x, &gy), &t) in da.iter_mut().zip(gd).zip(y) {
                            *x += gy * (T::one() - t * t);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xin = self.nodes[a.0].value.data();
                    self.accumulate(&mut grads, *a, |da| {
                        for ((x, &gy), &v) in da.iter_mut().zip(gd).zip(xin) {
                            if v > T::zero() {
                                *x += gy;
                            }
                        }
                    });
                }
                Op::AddBias(a, bias) => {
                    let n = self.nodes[bias.0].value.len();
                    self.accumulate(&mut grads, *a, |da| add_into(da, gd));
                    self.accumulate(&mut grads, *bias, |db| {
                        for row in gd.chunks(n) {
                            add_into(db, row);
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = gd[0];
                    self.accumulate(&mut grads, *a, |da| da.iter_mut().for_each(|x| *x += g0));
                }
                Op::Mean(a) => {
                    let g0 = gd[0] / T::of(self.nodes[a.0].value.len() as f64);
                    self.accumulate(&mut grads, *a, |da| da.iter_mut().for_each(|x| *x += g0));
                }
                Op::Reshape(a) => {
                    self.accumulate(&mut grads, *a, |da| add_into(da, gd));
                }
                Op::GatherRows(table, rows) => {
                    let c = self.nodes[table.0].value.shape()[1];
                    self.accumulate(&mut grads, *table, |dt| {
                        for (r, &src) in rows.iter().enumerate() {
                            add_into(&mut dt[src * c..(src + 1) * c], &gd[r * c..(r + 1) * c]);
                        }
                    });
                }
                Op::BatchedMatVec { mats, vecs } => {
                    let (b, n) = self.nodes[vecs.0].value.dims2()?;
                    let rows = node.value.shape()[1];
                    let (md, vd) = (
                        self.nodes[mats.0].value.data(),
                        self.nodes[vecs.0].value.data(),
                    );
                    self.accumulate(&mut grads, *mats, |dm| {
                        for s in 0..b {
                            let v = &vd[s * n..(s + 1) * n];
                            for h in 0..rows {
                                let gsh = gd[s * rows + h];
                                let off = (s * rows + h) * n;
                                for (x, &y) in dm[off..off + n].iter_mut().zip(v) {
                                    *x += gsh * y;
                                }
                            }
                        }
                    });
                    self.accumulate(&mut grads, *vecs, |dv| {
                        for s in 0..b {
                            let dvs = &mut dv[s * n..(s + 1) * n];
                            for h in 0..rows {
                                let gsh = gd[s * rows + h];
                                let off = (s * rows + h) * n;
                                for (x, &y) in dvs.iter_mut().zip(&md[off..off + n]) {
                                    *x += gsh * y;
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = self.nodes[gamma.0].value.len();
                    let gv = self.nodes[gamma.0].value.data();
                    self.accumulate(&mut grads, *gamma, |dg| {
                        for (grow, xrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                dg[c] += grow[c] * xrow[c];
                            }
                        }
                    });
                    self.accumulate(&mut grads, *beta, |db| {
                        for grow in gd.chunks(d) {
                            add_into(db, grow);
                        }
                    });
                    let inv_d = T::of(1.0 / d as f64);
                    self.accumulate(&mut grads, *x, |dx| {
                        let mut dxh = vec![T::zero(); d];
                        for (r, (grow, xrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for c in 0..d {
                                dxh[c] = grow[c] * gv[c];
                                m1 += dxh[c];
                                m2 += dxh[c] * xrow[c];
                            }
                            m1 *= inv_d;
                            m2 *= inv_d;
                            let out = &mut dx[r * d..(r + 1) * d];
                            for c in 0..d {
                                out[c] += rstd[r] * (dxh[c] - m1 - xrow[c] * m2);
                            }
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (dq, dk_, dv) = attention_backward(
                        *shape,
                        self.nodes[q.0].value.data(),
                        self.nodes[k.0].value.data(),
                        self.nodes[v.0].value.data(),
                        probs,
                        gd,
                        self.nodes[q.0].value.shape()[1],
                    );
                    self.accumulate(&mut grads, *q, |x| add_into(x, &dq));
                    self.accumulate(&mut grads, *k, |x| add_into(x, &dk_));
                    self.accumulate(&mut grads, *v, |x| add_into(x, &dv));
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                } => {
                    let b = targets.len();
                    let vsz = probs.len() / b.max(1);
                    let coef = gd[0] / T::of(b as f64);
                    self.accumulate(&mut grads, *logits, |dl| {
                        for (r, &t) in targets.iter().enumerate() {
                            let prow = &probs[r * vsz..(r + 1) * vsz];
                            let drow = &mut dl[r * vsz..(r + 1) * vsz];
                            for (x, &p) in drow.iter_mut().zip(prow) {
                                *x += coef * p;
                            }
                            drow[t] -= coef;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(buf.data_mut());
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// One head's keys and values, transposed to `[dk × seq]`.
struct HeadBuffers<T> {
    seq: usize,
    dk: usize,
    kt: Vec<T>,
    vt: Vec<T>,
}

impl<T: Real> HeadBuffers<T> {
    fn new(seq: usize, dk: usize) -> Self {
        HeadBuffers {
            seq,
            dk,
            kt: vec![T::zero(); seq * dk],
            vt: vec![T::zero(); seq * dk],
        }
    }

    fn load(&mut self, at: &impl Fn(usize) -> usize, kd: &[T], vd: &[T]) {
        for t in 0..self.seq {
            let base = at(t);
            for d in 0..self.dk {
                self.kt[d * self.seq + t] = kd[base + d];
                self.vt[d * self.seq + t] = vd[base + d];
            }
        }
    }
}

fn attention_backward<T: Real>(
    shape: AttentionShape,
    qd: &[T],
    kd: &[T],
    vd: &[T],
    probs: &[T],
    gd: &[T],
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionShape { batch, seq, heads } = shape;
    let dk = width / heads;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut dq = vec![T::zero(); qd.len()];
    let mut dkey = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = vec![T::zero(); seq];
    let mut hb = HeadBuffers::new(seq, dk);
    let mut dkt = vec![T::zero(); seq * dk];
    let mut dvt = vec![T::zero(); seq * dk];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            let at = |t: usize| (b * seq + t) * width + h * dk;
            hb.load(&at, kd, vd);
            dkt.iter_mut().for_each(|x| *x = T::zero());
            dvt.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..seq {
                let n = i + 1;
                let prow = &probs[pbase + i * seq..pbase + i * seq + n];
                let gi = &gd[at(i)..at(i) + dk];
                let dpi = &mut dp[..n];
                dpi.iter_mut().for_each(|x| *x = T::zero());
                for (d, &g) in gi.iter().enumerate() {
                    axpy(g, &hb.vt[d * seq..d * seq + n], dpi);
                    axpy(g, prow, &mut dvt[d * seq..d * seq + n]);
                }
                let total = dot(prow, dpi);
                for (x, &p) in dpi.iter_mut().zip(prow) {
                    *x = p * (*x - total) * scale;
                }
                let qi = &qd[at(i)..at(i) + dk];
                for d in 0..dk {
                    dq[at(i) + d] = dot(dpi, &hb.kt[d * seq..d * seq + n]);
                    axpy(qi[d], dpi, &mut dkt[d * seq..d * seq + n]);
                }
            }
            for t in 0..seq {
                let base = at(t);
                for d in 0..dk {
                    dkey[base + d] = dkt[d * seq + t];
                    dv[base + d] = dvt[d * seq + t];
                }
            }
        }
    }
    (dq, dkey, dv)
}
