//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly, appends one node, and keeps whatever its
//! backward rule needs. Node ids increase in creation order, so the list is
//! already a topological order and `backward` is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use super::{matmul_into, sigmoid, softmax_row, Float, Parameter, Tensor};
use crate::{Error, Result, TokenId};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    ReluSq(Var),
    RmsNorm {
        x: Var,
        inv: Vec<F>,
    },
    Embed {
        table: Var,
        ids: Vec<TokenId>,
    },
    ShiftRows(Var),
    Wkv {
        k: Var,
        v: Var,
        q: Var,
        w: Var,
        states: Vec<F>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<TokenId>,
        probs: Vec<F>,
    },
    EntropyRows {
        logits: Var,
        logp: Vec<F>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<usize>,
}

/// One tape per thread; tapes are never shared.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_node(&mut self, value: Tensor<F>, requires_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input not bound to any parameter.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.leaf_node(value, true, None)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf_node(value, false, None)
    }

    /// A leaf whose gradient is routed to `params[index]` by
    /// [`Grads::accumulate_into`].
    pub fn param(&mut self, value: Tensor<F>, index: usize) -> Var {
        self.leaf_node(value, true, Some(index))
    }

    fn finite(value: Tensor<F>, op: &'static str) -> Result<Tensor<F>> {
        if value.all_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = av.matmul(bv)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![F::ZERO; m * n];
        F::gemm(
            m,
            k,
            n,
            F::ONE,
            av.data(),
            k as isize,
            1,
            bv.data(),
            1,
            k as isize,
            F::ZERO,
            &mut out,
            n as isize,
            1,
        );
        let out = Tensor::checked(&[m, n], out, "matmul_bt")?;
        Ok(self.push(out, Op::MatMulBT(a, b), &[a, b]))
    }

    /// Same shape, or `b` a vector broadcast along the rows of matrix `a`.
    fn broadcast_ok(&self, a: Var, b: Var) -> bool {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        sa == sb || (sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0])
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        if !self.broadcast_ok(a, b) {
            return Err(self.shape_err(name, a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % n]))
            .collect();
        Self::finite(Tensor::new(av.shape(), data)?, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(F) -> F) -> Result<Tensor<F>> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Self::finite(Tensor::new(av.shape(), data)?, name)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let out = self.unary(a, "scale", |x| x * c)?;
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "sigmoid", sigmoid)?;
        Ok(self.push(out, Op::Sigmoid(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "exp", |x| x.exp())?;
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "square", |x| x * x)?;
        Ok(self.push(out, Op::Square(a), &[a]))
    }

    /// `max(x, 0)²`
    pub fn relu_sq(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "relu_sq", |x| if x > F::ZERO { x * x } else { F::ZERO })?;
        Ok(self.push(out, Op::ReluSq(a), &[a]))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let eps = F::from_f64(RMS_EPS);
        let n = F::from_f64(cols as f64);
        let mut inv = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mut ss = F::ZERO;
            for &v in row {
                ss += v * v;
            }
            let s = F::ONE / (ss / n + eps).sqrt();
            inv.push(s);
            out.extend(row.iter().map(|&v| v * s));
        }
        let out = Self::finite(Tensor::new(xv.shape(), out)?, "rms_norm")?;
        Ok(self.push(out, Op::RmsNorm { x, inv }, &[x]))
    }

    /// Gathers rows of `table: [V×d]` into `[ids.len()×d]`.
    pub fn embed(&mut self, table: Var, ids: &[TokenId]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() {
            return Err(Error::Shape {
                op: "embed",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row `t` of the output is row `t-1` of the input; row 0 is zero.
    pub fn shift_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let mut out = vec![F::ZERO; rows * cols];
        out[cols..].copy_from_slice(&xv.data()[..(rows - 1) * cols]);
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(out, Op::ShiftRows(x), &[x]))
    }

    /// Linear recurrence from a zero state:
    /// `S_t = diag(w)·S_{t-1} + k_t v_tᵀ`, output row `y_t = S_tᵀ q_t`.
    /// `k, v, q: [T×d]`, `w: [d]` per key channel.
    pub fn wkv(&mut self, k: Var, v: Var, q: Var, w: Var) -> Result<Var> {
        let (kv, vv, qv, wv) = (self.value(k), self.value(v), self.value(q), self.value(w));
        if kv.shape() != vv.shape() || kv.shape() != qv.shape() || kv.rank() != 2 || wv.shape() != [kv.shape()[1]] {
            return Err(self.shape_err("wkv", k, w));
        }
        let (t_len, d) = (kv.shape()[0], kv.shape()[1]);
        let mut states = vec![F::ZERO; t_len * d * d];
        let mut out = vec![F::ZERO; t_len * d];
        let mut state = vec![F::ZERO; d * d];
        for t in 0..t_len {
            wkv_step(
                &mut state,
                wv.data(),
                kv.row(t),
                vv.row(t),
                qv.row(t),
                &mut out[t * d..(t + 1) * d],
            );
            states[t * d * d..(t + 1) * d * d].copy_from_slice(&state);
        }
        let out = Self::finite(Tensor::new(&[t_len, d], out)?, "wkv")?;
        Ok(self.push(out, Op::Wkv { k, v, q, w, states }, &[k, v, q, w]))
    }

    /// Per-row negative log-likelihood `lse(x_i) - x_i[target_i]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[TokenId]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2();
        if rows != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![F::ZERO; rows * vocab];
        let mut out = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= vocab {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = lv.row(r);
            let lse = softmax_row(row, &mut probs[r * vocab..(r + 1) * vocab]);
            out.push(lse - row[t]);
        }
        let out = Self::finite(Tensor::new(&[rows], out)?, "cross_entropy_rows")?;
        Ok(self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per-row entropy of `softmax(x_i)`.
    pub fn entropy_rows(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.all_finite() {
            return Err(Error::NonFinite("entropy_rows"));
        }
        let (rows, vocab) = lv.dims2();
        let mut logp = vec![F::ZERO; rows * vocab];
        let mut p = vec![F::ZERO; vocab];
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = lv.row(r);
            let lse = softmax_row(row, &mut p);
            let mut h = F::ZERO;
            for c in 0..vocab {
                let lp = row[c] - lse;
                logp[r * vocab + c] = lp;
                h -= p[c] * lp;
            }
            out.push(h.max(F::ZERO));
        }
        let out = Self::finite(Tensor::new(&[rows], out)?, "entropy_rows")?;
        Ok(self.push(out, Op::EntropyRows { logits, logp }, &[logits]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, cols) = xv.dims2();
        if rows.is_empty() {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(xv.row(r));
        }
        let shape = if xv.rank() == 1 {
            vec![rows.len()]
        } else {
            vec![rows.len(), cols]
        };
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = F::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let out = Self::finite(Tensor::scalar(s), "sum")?;
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    /// Reverse sweep from a scalar root. The tape is consumed.
    pub fn backward(self, root: Var) -> Result<Grads<F>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(rv.shape(), F::ONE));
        }
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
        }
        let params = self.nodes.iter().map(|n| n.param).collect();
        Ok(Grads { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![F::ZERO; m * k];
                    F::gemm(
                        m,
                        n,
                        k,
                        F::ONE,
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        F::ZERO,
                        &mut da,
                        k as isize,
                        1,
                    );
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![F::ZERO; k * n];
                    F::gemm(
                        k,
                        m,
                        n,
                        F::ONE,
                        av.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        F::ZERO,
                        &mut db,
                        n as isize,
                        1,
                    );
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::MatMulBT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(*a) {
                    // dA = dC · B
                    let mut da = vec![F::ZERO; m * k];
                    matmul_into(g.data(), bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![F::ZERO; n * k];
                    F::gemm(
                        n,
                        m,
                        k,
                        F::ONE,
                        g.data(),
                        1,
                        n as isize,
                        av.data(),
                        k as isize,
                        1,
                        F::ZERO,
                        &mut db,
                        k as isize,
                        1,
                    );
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[id].op, Op::Sub(..)) {
                    -F::ONE
                } else {
                    F::ONE
                };
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data().to_vec());
                }
                if self.wants(*b) {
                    let bshape = self.value(*b).shape();
                    let db = reduce_broadcast(g.data(), bshape, |x| x * sign);
                    accumulate(grads, *b, bshape, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.numel();
                if self.wants(*a) {
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * bv.data()[i % nb])
                        .collect();
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::ZERO; nb];
                    for (i, (&gi, &ai)) in g.data().iter().zip(av.data()).enumerate() {
                        db[i % nb] += gi * ai;
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Scale(a, c) => {
                let da = g.data().iter().map(|&x| x * *c).collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::Sigmoid(a) => {
                let da = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &s)| gi * s * (F::ONE - s))
                    .collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::Exp(a) => {
                let da = g.data().iter().zip(out.data()).map(|(&gi, &e)| gi * e).collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::Square(a) => {
                let two = F::from_f64(2.0);
                let da = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gi, &x)| gi * two * x)
                    .collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::ReluSq(a) => {
                let two = F::from_f64(2.0);
                let da = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gi, &x)| if x > F::ZERO { gi * two * x } else { F::ZERO })
                    .collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::RmsNorm { x, inv } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.dims2();
                let n = F::from_f64(cols as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                for (r, &s) in inv.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mut dot = F::ZERO;
                    for (&xi, &gi) in xr.iter().zip(gr) {
                        dot += xi * gi;
                    }
                    let coef = s * s * s * dot / n;
                    dx.extend(xr.iter().zip(gr).map(|(&xi, &gi)| s * gi - coef * xi));
                }
                let _ = rows;
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![F::ZERO; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (o, &gi) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o += gi;
                    }
                }
                accumulate(grads, *table, tv.shape(), dt);
            }
            Op::ShiftRows(x) => {
                let (rows, cols) = g.dims2();
                let mut dx = vec![F::ZERO; rows * cols];
                dx[..(rows - 1) * cols].copy_from_slice(&g.data()[cols..]);
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Wkv { k, v, q, w, states } => {
                let (kv, vv, qv, wv) = (self.value(*k), self.value(*v), self.value(*q), self.value(*w));
                let (t_len, d) = (kv.shape()[0], kv.shape()[1]);
                let wd = wv.data();
                let mut dk = vec![F::ZERO; t_len * d];
                let mut dv = vec![F::ZERO; t_len * d];
                let mut dq = vec![F::ZERO; t_len * d];
                let mut dw = vec![F::ZERO; d];
                // gs accumulates dL/dS_t while sweeping t downwards.
                let mut gs = vec![F::ZERO; d * d];
                for t in (0..t_len).rev() {
                    let dy = &g.data()[t * d..(t + 1) * d];
                    let s_t = &states[t * d * d..(t + 1) * d * d];
                    let qt = qv.row(t);
                    let kt = kv.row(t);
                    let vt = vv.row(t);
                    for a in 0..d {
                        dq[t * d + a] = dot(&s_t[a * d..(a + 1) * d], dy);
                        let grow = &mut gs[a * d..(a + 1) * d];
                        let qa = qt[a];
                        for bi in 0..d {
                            grow[bi] += qa * dy[bi];
                        }
                    }
                    let dvt = &mut dv[t * d..(t + 1) * d];
                    for a in 0..d {
                        let grow = &gs[a * d..(a + 1) * d];
                        let ka = kt[a];
                        for bi in 0..d {
                            dvt[bi] += grow[bi] * ka;
                        }
                        dk[t * d + a] = dot(grow, vt);
                        if t > 0 {
                            let prev = &states[(t - 1) * d * d + a * d..(t - 1) * d * d + (a + 1) * d];
                            dw[a] += dot(grow, prev);
                        }
                    }
                    for a in 0..d {
                        let wa = wd[a];
                        for x in &mut gs[a * d..(a + 1) * d] {
                            *x *= wa;
                        }
                    }
                }
                if self.wants(*k) {
                    accumulate(grads, *k, kv.shape(), dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, vv.shape(), dv);
                }
                if self.wants(*q) {
                    accumulate(grads, *q, qv.shape(), dq);
                }
                if self.wants(*w) {
                    accumulate(grads, *w, wv.shape(), dw);
                }
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let lv = self.value(*logits);
                let (_, vocab) = lv.dims2();
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    row[t as usize] -= F::ONE;
                    for x in row.iter_mut() {
                        *x *= gr;
                    }
                }
                accumulate(grads, *logits, lv.shape(), dl);
            }
            Op::EntropyRows { logits, logp } => {
                let lv = self.value(*logits);
                let (rows, vocab) = lv.dims2();
                let mut dl = vec![F::ZERO; rows * vocab];
                for r in 0..rows {
                    let h = out.data()[r];
                    let gr = g.data()[r];
                    for c in 0..vocab {
                        let lp = logp[r * vocab + c];
                        let p = lp.exp();
                        dl[r * vocab + c] = -gr * p * (lp + h);
                    }
                }
                accumulate(grads, *logits, lv.shape(), dl);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let (_, cols) = xv.dims2();
                let mut dx = vec![F::ZERO; xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g.data()[i * cols..(i + 1) * cols];
                    for (o, &gi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *o += gi;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![g.data()[0]; xv.numel()]);
            }
        }
    }
}

/// One recurrence step on a `d×d` state, writing the readout into `y`.
#[inline]
pub(crate) fn wkv_step<F: Float>(state: &mut [F], w: &[F], k: &[F], v: &[F], q: &[F], y: &mut [F]) {
    let d = w.len();
    y.fill(F::ZERO);
    for a in 0..d {
        let row = &mut state[a * d..(a + 1) * d];
        let (wa, ka, qa) = (w[a], k[a], q[a]);
        for bi in 0..d {
            let s = wa * row[bi] + ka * v[bi];
            row[bi] = s;
            y[bi] += s * qa;
        }
    }
}

/// Dot product with eight independent partial sums, so the reduction is
/// not one serial dependency chain.
fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::ZERO; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        let x: &[F; 8] = x.try_into().expect("chunk of 8");
        let y: &[F; 8] = y.try_into().expect("chunk of 8");
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

fn reduce_broadcast<F: Float>(g: &[F], shape: &[usize], f: impl Fn(F) -> F) -> Vec<F> {
    let n: usize = shape.iter().product();
    if n == g.len() {
        return g.iter().map(|&x| f(x)).collect();
    }
    let mut out = vec![F::ZERO; n];
    for (i, &x) in g.iter().enumerate() {
        out[i % n] += x;
    }
    out.into_iter().map(f).collect()
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, shape: &[usize], delta: Vec<F>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (x, d) in t.data_mut().iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => {
            *slot = Tensor::new(shape, delta).ok();
        }
    }
}

/// Gradients left on leaf nodes after [`Tape::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<Option<usize>>,
}

impl<F: Float> Grads<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds (`+=`) every parameter-bound leaf gradient into `params`.
    pub fn accumulate_into(&self, params: &mut [Parameter<F>]) {
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(idx)) = (g, p) {
                let dst = params[*idx].grad.data_mut();
                for (x, &d) in dst.iter_mut().zip(g.data()) {
                    *x += d;
                }
            }
        }
    }
}
