//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and records itself as a node; node order
//! is a valid topological order, so `backward` is a single reverse sweep.
//! Matrices are stored row-major. Batched sequence ops (attention, per-item
//! sums) see a batch of `B` sequences of length `T` as `B*T` stacked rows.

use crate::error::{Error, Result};
use crate::gmm;
use crate::real::{c, Real};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Causal,
    Bidirectional,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Gelu(Var),
    SoftClamp(Var, T),
    Sum(Var),
    SegmentSum(Var, usize),
    LogSumExpRows(Var),
    Select {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    ColSlice(Var, usize),
    ColConcat(Vec<Var>),
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
        heads: usize,
        seq: usize,
        probs: Vec<T>,
    },
    GmmLogProb {
        params: Var,
        targets: Var,
        map: Vec<usize>,
        components: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Cheap to create; drop it after `backward`.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.ng(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(out, Op::Square(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_fwd(x).0);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    /// `bound * tanh(x / bound)`: identity near zero, saturates at `±bound`.
    pub fn soft_clamp(&mut self, a: Var, bound: T) -> Var {
        let out = self.value(a).map(|x| bound * (x / bound).tanh());
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftClamp(a, bound), ng)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Sums each consecutive block of `seg_rows` rows (all columns) into one
    /// value: `[B*seg_rows, n] -> [B, 1]`.
    pub fn segment_sum(&mut self, a: Var, seg_rows: usize) -> Result<Var> {
        let (r, n) = self.dims2(a);
        if seg_rows == 0 || r % seg_rows != 0 {
            return Err(Error::shape(
                "segment_sum",
                format!("{r} rows not divisible into segments of {seg_rows}"),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(seg_rows * n)
            .map(|s| s.iter().copied().sum())
            .collect();
        let b = out.len();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&[b, 1], out)?, Op::SegmentSum(a, seg_rows), ng))
    }

    /// Row-wise max-shifted log-sum-exp: `[m,n] -> [m,1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if n == 0 {
            return Err(Error::invalid("logsumexp over an empty row"));
        }
        let t = self.value(a);
        let out: Vec<T> = (0..m).map(|r| lse(t.row(r))).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&[m, 1], out)?, Op::LogSumExpRows(a), ng))
    }

    /// Gathers rows from several matrices of equal width; `index[i] =
    /// (source, row)` names output row `i`.
    pub fn select_rows(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let n = match sources.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(Error::invalid("select_rows without sources")),
        };
        if sources.iter().any(|&s| self.value(s).cols() != n) {
            return Err(Error::shape("select_rows", "sources differ in width"));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &(s, r) in &index {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::invalid(format!("select_rows: no source {s}")))?;
            let t = self.value(*src);
            if r >= t.rows() {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {r} of source with {} rows", t.rows()),
                ));
            }
            out.extend_from_slice(t.row(r));
        }
        let ng = self.ng(sources);
        let rows = index.len();
        Ok(self.push(
            Tensor::new(&[rows, n], out)?,
            Op::Select {
                sources: sources.to_vec(),
                index,
            },
            ng,
        ))
    }

    /// Rows of a single matrix, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        self.select_rows(&[table], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Reverses row order inside each consecutive block of `seq` rows.
    pub fn reverse_segments(&mut self, a: Var, seq: usize) -> Result<Var> {
        let r = self.value(a).rows();
        if seq == 0 || r % seq != 0 {
            return Err(Error::shape("reverse_segments", format!("{r} rows, seq {seq}")));
        }
        let idx: Vec<usize> = (0..r)
            .map(|i| (i / seq) * seq + (seq - 1 - i % seq))
            .collect();
        self.gather_rows(a, &idx)
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if start + len > n {
            return Err(Error::shape("col_slice", format!("[{start}, {}) of {n}", start + len)));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::ColSlice(a, start), ng))
    }

    pub fn col_concat(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::invalid("col_concat of nothing")),
        };
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("col_concat", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ColConcat(parts.to_vec()), ng))
    }

    /// Layer normalization over the last axis with affine gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", "gain/shift width"));
        }
        let eps: T = c(1e-5);
        let nf = T::from_f64(n as f64);
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over a batch of sequences of
    /// length `seq`, stacked as rows. Under [`Mask::Causal`] output row `i`
    /// mixes value rows `<= i` of its own sequence only.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        mask: Mask,
    ) -> Result<Var> {
        let (rows, dim) = self.dims2(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape("attention", format!("width {dim} over {heads} heads")));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape("attention", format!("{rows} rows, seq {seq}")));
        }
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * dim];
        let mut logits = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * dim + off..][..dh];
                    let end = match mask {
                        Mask::Causal => i + 1,
                        Mask::Bidirectional => seq,
                    };
                    let mut mx = T::neg_infinity();
                    for (j, l) in logits.iter_mut().enumerate().take(end) {
                        let kj = &kv[(b * seq + j) * dim + off..][..dh];
                        let s = dot(qi, kj) * scale;
                        *l = s;
                        mx = mx.max(s);
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut z = T::zero();
                    for j in 0..end {
                        let e = (logits[j] - mx).exp();
                        p[j] = e;
                        z = z + e;
                    }
                    let oi = &mut out[(b * seq + i) * dim + off..][..dh];
                    for j in 0..end {
                        p[j] = p[j] / z;
                        let vj = &vv[(b * seq + j) * dim + off..][..dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o = *o + p[j] * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&[rows, dim], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            ng,
        ))
    }

    /// Log-density of each target row under a diagonal Gaussian mixture whose
    /// raw parameters sit in row `map[i]` of `params` (layout described in
    /// [`gmm::RawLayout`]). Returns `[targets, 1]`.
    pub fn gmm_log_prob(
        &mut self,
        params: Var,
        targets: Var,
        map: Vec<usize>,
        components: usize,
    ) -> Result<Var> {
        let (pr, pc) = self.dims2(params);
        let (tr, dims) = self.dims2(targets);
        let layout = gmm::RawLayout::new(components, dims);
        if pc != layout.width() {
            return Err(Error::shape(
                "gmm_log_prob",
                format!("param width {pc}, expected {} for K={components}, dims={dims}", layout.width()),
            ));
        }
        if map.len() != tr || map.iter().any(|&m| m >= pr) {
            return Err(Error::shape("gmm_log_prob", "bad target-to-param map"));
        }
        let pv = self.value(params);
        let tv = self.value(targets);
        let mut scratch = vec![T::zero(); components];
        let out: Vec<T> = (0..tr)
            .map(|i| gmm::raw_log_prob(&layout, pv.row(map[i]), tv.row(i), &mut scratch))
            .collect();
        let ng = self.ng(&[params, targets]);
        Ok(self.push(
            Tensor::new(&[tr, 1], out)?,
            Op::GmmLogProb {
                params,
                targets,
                map,
                components,
            },
            ng,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        // Only leaves keep meaningful gradients for callers, but interior
        // gradients are harmless to return.
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut()
    }

    fn acc_map(&self, grads: &mut [Option<Tensor<T>>], v: Var, gout: &Tensor<T>, f: impl Fn(T, usize) -> T) {
        if let Some(g) = self.acc(grads, v) {
            for (i, (d, &go)) in g.data_mut().iter_mut().zip(gout.data()).enumerate() {
                *d = *d + f(go, i);
            }
        }
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(false, true, m, n, k, gout.data(), self.value(*b).data(), T::one(), ga.data_mut());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(true, false, k, m, n, self.value(*a).data(), gout.data(), T::one(), gb.data_mut());
                }
            }
            Op::AddBias(x, b) => {
                self.acc_map(grads, *x, gout, |g, _| g);
                let n = gout.cols();
                if let Some(gb) = self.acc(grads, *b) {
                    let gb = gb.data_mut();
                    for row in gout.data().chunks(n) {
                        for (d, &g) in gb.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, gout, |g, _| g);
                self.acc_map(grads, *b, gout, |g, _| g);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, gout, |g, _| g);
                self.acc_map(grads, *b, gout, |g, _| -g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_map(grads, *a, gout, |g, i| g * bv[i]);
                self.acc_map(grads, *b, gout, |g, i| g * av[i]);
            }
            Op::Scale(a, s) => self.acc_map(grads, *a, gout, |g, _| g * *s),
            Op::AddScalar(a) => self.acc_map(grads, *a, gout, |g, _| g),
            Op::Exp(a) => {
                let y = node.value.data();
                self.acc_map(grads, *a, gout, |g, i| g * y[i]);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two: T = c(2.0);
                self.acc_map(grads, *a, gout, |g, i| g * two * x[i]);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, gout, |g, i| g * gelu_fwd(x[i]).1);
            }
            Op::SoftClamp(a, bound) => {
                let y = node.value.data();
                self.acc_map(grads, *a, gout, |g, i| {
                    let t = y[i] / *bound;
                    g * (T::one() - t * t)
                });
            }
            Op::Sum(a) => {
                let g0 = gout.item();
                self.acc_map(grads, *a, &Tensor::full(self.shape(*a), g0), |g, _| g);
            }
            Op::SegmentSum(a, seg) => {
                let n = self.value(*a).cols();
                let per = seg * n;
                let go = gout.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, d) in ga.data_mut().iter_mut().enumerate() {
                        *d = *d + go[i / per];
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let n = x.cols();
                let y = node.value.data();
                let go = gout.data();
                let xd = x.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, d) in ga.data_mut().iter_mut().enumerate() {
                        let r = i / n;
                        *d = *d + go[r] * (xd[i] - y[r]).exp();
                    }
                }
            }
            Op::Select { sources, index } => {
                let n = gout.cols();
                for (s_idx, &src) in sources.iter().enumerate() {
                    if let Some(gs) = self.acc(grads, src) {
                        for (out_row, &(s, r)) in index.iter().enumerate() {
                            if s == s_idx {
                                let dst = gs.row_mut(r);
                                for (d, &g) in dst.iter_mut().zip(&gout.data()[out_row * n..(out_row + 1) * n]) {
                                    *d = *d + g;
                                }
                            }
                        }
                    }
                }
            }
            Op::ColSlice(a, start) => {
                let len = gout.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..gout.rows() {
                        let dst = &mut ga.row_mut(r)[*start..*start + len];
                        for (d, &g) in dst.iter_mut().zip(gout.row(r)) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::ColConcat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..gout.rows() {
                            let dst = gp.row_mut(r);
                            for (d, &g) in dst.iter_mut().zip(&gout.row(r)[off..off + w]) {
                                *d = *d + g;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = gout.cols();
                let m = gout.rows();
                let nf = T::from_f64(n as f64);
                let gam = self.value(*gamma).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let gx = gx.data_mut();
                    for r in 0..m {
                        let go = gout.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = go[j] * gam[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xh[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..n {
                            let d = go[j] * gam[j];
                            gx[r * n + j] = gx[r * n + j] + rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    let gg = gg.data_mut();
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + gout.row(r)[j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    let gb = gb.data_mut();
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] = gb[j] + gout.row(r)[j];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *seq, probs, gout, grads),
            Op::GmmLogProb {
                params,
                targets,
                map,
                components,
            } => {
                let dims = self.value(*targets).cols();
                let layout = gmm::RawLayout::new(*components, dims);
                let pv = self.value(*params);
                let tv = self.value(*targets);
                let want_p = self.nodes[params.0].needs_grad;
                let want_t = self.nodes[targets.0].needs_grad;
                let mut gp = want_p.then(|| Tensor::zeros(pv.shape()));
                let mut gt = want_t.then(|| Tensor::zeros(tv.shape()));
                let mut scratch = gmm::GradScratch::new(&layout);
                for (i, &m) in map.iter().enumerate() {
                    let go = gout.data()[i];
                    scratch.compute(&layout, pv.row(m), tv.row(i));
                    if let Some(gp) = gp.as_mut() {
                        for (d, &s) in gp.row_mut(m).iter_mut().zip(&scratch.d_params) {
                            *d = *d + go * s;
                        }
                    }
                    if let Some(gt) = gt.as_mut() {
                        for (d, &s) in gt.row_mut(i).iter_mut().zip(&scratch.d_target) {
                            *d = *d + go * s;
                        }
                    }
                }
                if let Some(gp) = gp {
                    self.acc(grads, *params).unwrap().add_assign(&gp);
                }
                if let Some(gt) = gt {
                    self.acc(grads, *targets).unwrap().add_assign(&gt);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: &[T],
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (rows, dim) = self.dims2(q);
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let go = gout.data();
        let mut gq = vec![T::zero(); rows * dim];
        let mut gk = vec![T::zero(); rows * dim];
        let mut gv = vec![T::zero(); rows * dim];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let goi = &go[(b * seq + i) * dim + off..][..dh];
                    let mut pdp = T::zero();
                    for j in 0..seq {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vv[(b * seq + j) * dim + off..][..dh];
                        dp[j] = dot(goi, vj);
                        pdp = pdp + p[j] * dp[j];
                        let gvj = &mut gv[(b * seq + j) * dim + off..][..dh];
                        for (d, &g) in gvj.iter_mut().zip(goi) {
                            *d = *d + p[j] * g;
                        }
                    }
                    let qi = &qv[(b * seq + i) * dim + off..][..dh];
                    for j in 0..seq {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        let kj = &kv[(b * seq + j) * dim + off..][..dh];
                        {
                            let gqi = &mut gq[(b * seq + i) * dim + off..][..dh];
                            for (d, &x) in gqi.iter_mut().zip(kj) {
                                *d = *d + ds * x;
                            }
                        }
                        let gkj = &mut gk[(b * seq + j) * dim + off..][..dh];
                        for (d, &x) in gkj.iter_mut().zip(qi) {
                            *d = *d + ds * x;
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, var) {
                for (d, x) in acc.data_mut().iter_mut().zip(g) {
                    *d = *d + x;
                }
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Max-shifted log-sum-exp of a non-empty slice.
pub(crate) fn lse<T: Real>(xs: &[T]) -> T {
    let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

fn gelu_fwd<T: Real>(x: T) -> (T, T) {
    let k: T = c((2.0 / std::f64::consts::PI).sqrt());
    let a: T = c(0.044715);
    let half: T = c(0.5);
    let three: T = c(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = k * (T::one() + three * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, finite_diff_check_many};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.leaf(Tensor::scalar(5.0), true);
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn unused_leaf_gets_zero_or_nothing() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let unused = g.leaf(Tensor::scalar(1.0), true);
        let z = g.square(x);
        let grads = g.backward(z).unwrap();
        let gu = grads.get(unused).map_or(0.0, |t| t.item());
        assert_eq!(gu, 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[3, 4]);
        let ops: Vec<(&str, fn(&mut Graph<f64>, Var) -> Result<Var>)> = vec![
            ("exp", |g, x| Ok(g.exp(x))),
            ("square", |g, x| Ok(g.square(x))),
            ("gelu", |g, x| Ok(g.gelu(x))),
            ("soft_clamp", |g, x| Ok(g.soft_clamp(x, 0.7))),
            ("scale", |g, x| Ok(g.scale(x, -1.3))),
            ("add_scalar", |g, x| {
                let y = g.add_scalar(x, 0.4);
                Ok(g.square(y))
            }),
            ("logsumexp_rows", |g, x| {
                let y = g.logsumexp_rows(x)?;
                Ok(g.square(y))
            }),
            ("segment_sum", |g, x| {
                let y = g.segment_sum(x, 1)?;
                Ok(g.square(y))
            }),
            ("reverse", |g, x| {
                let y = g.reverse_segments(x, 3)?;
                let w = g.constant(Tensor::new(&[3, 4], (0..12).map(|i| i as f64).collect())?);
                g.mul(y, w)
            }),
            ("slice_concat", |g, x| {
                let a = g.col_slice(x, 1, 2)?;
                let b = g.col_slice(x, 0, 1)?;
                let y = g.col_concat(&[a, b, a])?;
                Ok(g.square(y))
            }),
        ];
        for (name, op) in ops {
            let err = finite_diff_check(
                |g, x| {
                    let y = op(g, x)?;
                    let w = g.constant(Tensor::full(g.shape(y), 0.5));
                    let y = g.mul(y, w)?;
                    Ok(g.sum(y))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn matmul_bias_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = vec![
            rand_t(&mut rng, &[4, 3]),
            rand_t(&mut rng, &[3, 5]),
            rand_t(&mut rng, &[5]),
            rand_t(&mut rng, &[5]),
            rand_t(&mut rng, &[5]),
        ];
        let err = finite_diff_check_many(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_bias(h, v[2])?;
                let h = g.layer_norm(h, v[3], v[4])?;
                let h = g.gelu(h);
                let h = g.square(h);
                Ok(g.sum(h))
            },
            &xs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn attention_gradients_both_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mask in [Mask::Causal, Mask::Bidirectional] {
            let xs = vec![
                rand_t(&mut rng, &[6, 4]),
                rand_t(&mut rng, &[6, 4]),
                rand_t(&mut rng, &[6, 4]),
                rand_t(&mut rng, &[6, 4]),
            ];
            let err = finite_diff_check_many(
                |g, v| {
                    let o = g.attention(v[0], v[1], v[2], 2, 3, mask)?;
                    let o = g.mul(o, v[3])?;
                    Ok(g.sum(o))
                },
                &xs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{mask:?}: rel err {err}");
        }
    }

    #[test]
    fn attention_single_position_returns_value_row() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(&[1, 2], vec![0.3, -2.0]).unwrap());
        let k = g.constant(Tensor::new(&[1, 2], vec![1.5, 0.1]).unwrap());
        let v = g.constant(Tensor::new(&[1, 2], vec![7.0, -4.0]).unwrap());
        for mask in [Mask::Causal, Mask::Bidirectional] {
            let o = g.attention(q, k, v, 1, 1, mask).unwrap();
            assert_eq!(g.value(o).data(), &[7.0, -4.0]);
        }
    }

    #[test]
    fn attention_matches_brute_force() {
        // Three positions, width 2, one head.
        let qd = [0.5, -1.0, 1.0, 0.0, -0.3, 0.8];
        let kd = [1.0, 0.2, -0.5, 1.0, 0.3, -0.7];
        let vd = [1.0, 2.0, -1.0, 0.5, 3.0, -2.0];
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(&[3, 2], qd.to_vec()).unwrap());
        let k = g.constant(Tensor::new(&[3, 2], kd.to_vec()).unwrap());
        let v = g.constant(Tensor::new(&[3, 2], vd.to_vec()).unwrap());
        for (mask, causal) in [(Mask::Causal, true), (Mask::Bidirectional, false)] {
            let o = g.attention(q, k, v, 1, 3, mask).unwrap();
            for i in 0..3 {
                let end = if causal { i + 1 } else { 3 };
                let w: Vec<f64> = (0..end)
                    .map(|j| ((qd[2 * i] * kd[2 * j] + qd[2 * i + 1] * kd[2 * j + 1]) / 2f64.sqrt()).exp())
                    .collect();
                let z: f64 = w.iter().sum();
                for c in 0..2 {
                    let want: f64 = (0..end).map(|j| w[j] / z * vd[2 * j + c]).sum();
                    let got = g.value(o).row(i)[c];
                    assert!((got - want).abs() < 1e-12, "{mask:?} row {i} col {c}");
                }
            }
        }
    }

    #[test]
    fn causal_attention_ignores_later_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (rand_t(&mut rng, &[5, 4]), rand_t(&mut rng, &[5, 4]), rand_t(&mut rng, &[5, 4]));
        let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.attention(qv, kv, vv, 2, 5, Mask::Causal).unwrap();
            g.value(o).clone()
        };
        let base = run(&k, &v);
        for j in 0..5 {
            let (mut k2, mut v2) = (k.clone(), v.clone());
            k2.row_mut(j).iter_mut().for_each(|x| *x += 3.0);
            v2.row_mut(j).iter_mut().for_each(|x| *x -= 2.0);
            let pert = run(&k2, &v2);
            for i in 0..j {
                assert_eq!(base.row(i), pert.row(i), "row {i} changed after perturbing {j}");
            }
        }
    }

    #[test]
    fn select_rows_scatter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = vec![rand_t(&mut rng, &[3, 2]), rand_t(&mut rng, &[2, 2])];
        let err = finite_diff_check_many(
            |g, v| {
                let y = g.select_rows(v, vec![(0, 2), (1, 0), (0, 2), (1, 1), (0, 0)])?;
                let y = g.square(y);
                Ok(g.sum(y))
            },
            &xs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        let q = g.constant(Tensor::zeros(&[4, 3]));
        assert!(g.attention(q, q, a, 1, 2, Mask::Causal).is_err());
    }
}
