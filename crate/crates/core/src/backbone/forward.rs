//! The three forward modes: taped full-sequence, chunked and single-step.
//!
//! The taped path and the inference path perform the same arithmetic in
//! the same order; tests hold them to each other.

use alloc::vec;
use alloc::vec::Vec;

use super::{Model, RecurrentState, FFN_MULT};
use crate::numerics::tape::{wkv_step, RMS_EPS};
use crate::numerics::{matmul_into, sigmoid, Float, Tape, Tensor, Var};
use crate::{Error, Result, TokenId};

/// Model parameters bound as leaves of one tape.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl<F: Float> Model<F> {
    /// Registers every parameter on `tape`; gradients flow back to
    /// `params()[i]` through [`crate::numerics::Grads::accumulate_into`].
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound {
            vars: self
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(p.value.clone(), i))
                .collect(),
        }
    }

    /// Next-token logits `[T×V]` for every prefix of `tokens`, starting from
    /// a fresh state and recorded on `tape`.
    pub fn forward_full(&self, tape: &mut Tape<F>, bound: &Bound, tokens: &[TokenId]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Shape {
                op: "forward_full",
                lhs: vec![0],
                rhs: vec![self.vocab_size()],
            });
        }
        self.check_tokens(tokens)?;
        let s = self.slots();
        let p = |i: usize| bound.vars[i];
        let mut x = tape.embed(p(s.emb), tokens)?;
        for l in &s.layers {
            let z = tape.rms_norm(x)?;
            let z = tape.mul(z, p(l.ln1))?;
            let zt = token_shift(tape, z, p(l.tm_mu))?;
            let k = tape.matmul(zt, p(l.w_k))?;
            let v = tape.matmul(zt, p(l.w_v))?;
            let q = tape.matmul(zt, p(l.w_q))?;
            let r = tape.matmul(zt, p(l.w_r))?;
            let w = tape.sigmoid(p(l.decay))?;
            let y = tape.wkv(k, v, q, w)?;
            let gate = tape.sigmoid(r)?;
            let y = tape.mul(gate, y)?;
            let o = tape.matmul(y, p(l.w_o))?;
            x = tape.add(x, o)?;

            let u = tape.rms_norm(x)?;
            let u = tape.mul(u, p(l.ln2))?;
            let ut = token_shift(tape, u, p(l.cm_mu))?;
            let hdn = tape.matmul(ut, p(l.w_up))?;
            let hdn = tape.relu_sq(hdn)?;
            let o = tape.matmul(hdn, p(l.w_down))?;
            x = tape.add(x, o)?;
        }
        let h = tape.rms_norm(x)?;
        let h = tape.mul(h, p(s.ln_out))?;
        match s.head {
            Some(head) => tape.matmul(h, p(head)),
            None => tape.matmul_bt(h, p(s.emb)),
        }
    }

    /// Untaped convenience wrapper over [`Model::forward_full`].
    pub fn logits_full(&self, tokens: &[TokenId]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_full(&mut tape, &bound, tokens)?;
        Ok(tape.value(out).clone())
    }

    pub fn fresh_state(&self) -> RecurrentState<F> {
        RecurrentState::fresh(self.config())
    }

    /// Consumes one token; returns the next-token logits `[V]`.
    pub fn forward_step(&self, state: &mut RecurrentState<F>, token: TokenId) -> Result<Tensor<F>> {
        let out = self.forward_chunk(state, &[token])?;
        let v = self.vocab_size();
        Tensor::new(&[v], out.into_data())
    }

    /// Consumes `tokens` in order; row `i` of the result equals what the
    /// `i`-th of `tokens.len()` successive [`Model::forward_step`] calls
    /// would return. Position-wise projections are batched over the chunk.
    pub fn forward_chunk(&self, state: &mut RecurrentState<F>, tokens: &[TokenId]) -> Result<Tensor<F>> {
        let k = tokens.len();
        if k == 0 {
            return Err(Error::Shape {
                op: "forward_chunk",
                lhs: vec![0],
                rhs: vec![self.vocab_size()],
            });
        }
        self.check_tokens(tokens)?;
        let cfg = self.config();
        let (d, vsz) = (cfg.d_model, cfg.vocab_size);
        let dh = FFN_MULT * d;
        let s = self.slots();
        let val = |i: usize| self.params()[i].value.data();

        let mut x = Vec::with_capacity(k * d);
        for &t in tokens {
            x.extend_from_slice(&val(s.emb)[t as usize * d..(t as usize + 1) * d]);
        }
        let mut z = vec![F::ZERO; k * d];
        let mut mixed = vec![F::ZERO; k * d];
        let mut kk = vec![F::ZERO; k * d];
        let mut vv = vec![F::ZERO; k * d];
        let mut qq = vec![F::ZERO; k * d];
        let mut rr = vec![F::ZERO; k * d];
        let mut y = vec![F::ZERO; k * d];
        let mut o = vec![F::ZERO; k * d];
        let mut hdn = vec![F::ZERO; k * dh];
        let mut w = vec![F::ZERO; d];

        for (l, ls) in s.layers.iter().zip(state.layers.iter_mut()) {
            rms_norm_rows(&x, val(l.ln1), &mut z, d);
            shift_mix(&z, &mut ls.tm_prev, val(l.tm_mu), &mut mixed, d);
            matmul_into(&mixed, val(l.w_k), &mut kk, k, d, d);
            matmul_into(&mixed, val(l.w_v), &mut vv, k, d, d);
            matmul_into(&mixed, val(l.w_q), &mut qq, k, d, d);
            matmul_into(&mixed, val(l.w_r), &mut rr, k, d, d);
            for (wi, &p) in w.iter_mut().zip(val(l.decay)) {
                *wi = sigmoid(p);
            }
            for t in 0..k {
                let row = t * d..(t + 1) * d;
                wkv_step(
                    &mut ls.wkv,
                    &w,
                    &kk[row.clone()],
                    &vv[row.clone()],
                    &qq[row.clone()],
                    &mut y[row],
                );
            }
            for (yi, &ri) in y.iter_mut().zip(&rr) {
                *yi = sigmoid(ri) * *yi;
            }
            matmul_into(&y, val(l.w_o), &mut o, k, d, d);
            for (xi, &oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            rms_norm_rows(&x, val(l.ln2), &mut z, d);
            shift_mix(&z, &mut ls.cm_prev, val(l.cm_mu), &mut mixed, d);
            matmul_into(&mixed, val(l.w_up), &mut hdn, k, d, dh);
            for h in hdn.iter_mut() {
                *h = if *h > F::ZERO { *h * *h } else { F::ZERO };
            }
            matmul_into(&hdn, val(l.w_down), &mut o, k, dh, d);
            for (xi, &oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
        }
        rms_norm_rows(&x, val(s.ln_out), &mut z, d);
        let mut logits = vec![F::ZERO; k * vsz];
        match s.head {
            Some(head) => matmul_into(&z, val(head), &mut logits, k, d, vsz),
            None => F::gemm(
                k,
                d,
                vsz,
                F::ONE,
                &z,
                d as isize,
                1,
                val(s.emb),
                1,
                d as isize,
                F::ZERO,
                &mut logits,
                vsz as isize,
                1,
            ),
        }
        state.pos += k as u64;
        Tensor::checked(&[k, vsz], logits, "forward_chunk")
    }
}

/// `x̃_t = x_{t-1} + μ ⊙ (x_t − x_{t-1})`, i.e. `μ⊙x_t + (1−μ)⊙x_{t-1}`.
fn token_shift<F: Float>(tape: &mut Tape<F>, z: Var, mu: Var) -> Result<Var> {
    let prev = tape.shift_rows(z)?;
    let delta = tape.sub(z, prev)?;
    let delta = tape.mul(delta, mu)?;
    tape.add(prev, delta)
}

fn rms_norm_rows<F: Float>(x: &[F], gain: &[F], out: &mut [F], d: usize) {
    let eps = F::from_f64(RMS_EPS);
    let n = F::from_f64(d as f64);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mut ss = F::ZERO;
        for &v in xr {
            ss += v * v;
        }
        let s = F::ONE / (ss / n + eps).sqrt();
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = v * s * g;
        }
    }
}

/// Token shift against the cached previous row; updates the cache to the
/// last row of `z`.
fn shift_mix<F: Float>(z: &[F], prev: &mut [F], mu: &[F], out: &mut [F], d: usize) {
    for (t, (zr, or)) in z.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let pr: &[F] = if t == 0 { prev } else { &z[(t - 1) * d..t * d] };
        for c in 0..d {
            or[c] = pr[c] + mu[c] * (zr[c] - pr[c]);
        }
    }
    let k = z.len() / d;
    prev.copy_from_slice(&z[(k - 1) * d..]);
}
