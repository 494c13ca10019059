//! Central finite-difference oracle for tape gradients (f64 only).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default pass threshold on the maximum relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are
/// zero analytically are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst comparison.
    pub worst: (usize, usize),
    pub compared: usize,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(REL_ERR_FLOOR);
    libm::fabs(analytic - numeric) / denom
}

/// Compares the tape gradient of `f` at `inputs` against central
/// differences, perturbing every element of every input.
pub fn check<Fun>(name: &str, inputs: &[Tensor<f64>], h: f64, f: Fun) -> Result<GradReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradReport {
        name: name.into(),
        max_rel_err: 0.0,
        worst: (0, 0),
        compared: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for e in 0..inputs[which].numel() {
            let orig = inputs[which].data()[e];
            work[which].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[e], numeric);
            report.compared += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (which, e);
            }
        }
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

/// Contracts a tensor-valued output to a scalar with fixed random weights,
/// so every output element contributes a distinct gradient.
fn contract(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Finite-difference checks of every differentiable tape op on random
/// inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = FD_STEP;
    let mut out = Vec::new();

    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 5], 1.0);
    let w35 = random(&mut rng, &[3, 5], 1.0);
    out.push(check("matmul", &[a.clone(), b.clone()], h, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        contract(t, y, &w35)
    })?);

    let bt = random(&mut rng, &[5, 4], 1.0);
    out.push(check("matmul_bt", &[a.clone(), bt], h, |t, v| {
        let y = t.matmul_bt(v[0], v[1])?;
        contract(t, y, &w35)
    })?);

    let x = random(&mut rng, &[3, 4], 1.0);
    let y = random(&mut rng, &[3, 4], 1.0);
    let row = random(&mut rng, &[4], 1.0);
    let w34 = random(&mut rng, &[3, 4], 1.0);
    out.push(check("add", &[x.clone(), y.clone()], h, |t, v| {
        let z = t.add(v[0], v[1])?;
        contract(t, z, &w34)
    })?);
    out.push(check("add_broadcast", &[x.clone(), row.clone()], h, |t, v| {
        let z = t.add(v[0], v[1])?;
        contract(t, z, &w34)
    })?);
    out.push(check("sub_broadcast", &[x.clone(), row.clone()], h, |t, v| {
        let z = t.sub(v[0], v[1])?;
        contract(t, z, &w34)
    })?);
    out.push(check("mul", &[x.clone(), y.clone()], h, |t, v| {
        let z = t.mul(v[0], v[1])?;
        contract(t, z, &w34)
    })?);
    out.push(check("mul_broadcast", &[x.clone(), row.clone()], h, |t, v| {
        let z = t.mul(v[0], v[1])?;
        contract(t, z, &w34)
    })?);
    out.push(check("scale", core::slice::from_ref(&x), h, |t, v| {
        let z = t.scale(v[0], -1.75)?;
        contract(t, z, &w34)
    })?);
    out.push(check("sigmoid", core::slice::from_ref(&x), h, |t, v| {
        let z = t.sigmoid(v[0])?;
        contract(t, z, &w34)
    })?);
    out.push(check("exp", core::slice::from_ref(&x), h, |t, v| {
        let z = t.exp(v[0])?;
        contract(t, z, &w34)
    })?);
    out.push(check("square", core::slice::from_ref(&x), h, |t, v| {
        let z = t.square(v[0])?;
        contract(t, z, &w34)
    })?);
    // keep inputs away from the kink at zero
    let shifted = Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .map(|&v| if libm::fabs(v) < 0.05 { v + 0.1 } else { v })
            .collect(),
    )?;
    out.push(check("relu_sq", &[shifted], h, |t, v| {
        let z = t.relu_sq(v[0])?;
        contract(t, z, &w34)
    })?);
    out.push(check("rms_norm", core::slice::from_ref(&x), h, |t, v| {
        let z = t.rms_norm(v[0])?;
        contract(t, z, &w34)
    })?);

    let table = random(&mut rng, &[6, 4], 1.0);
    let ids = [2u32, 0, 2, 5];
    let w44 = random(&mut rng, &[4, 4], 1.0);
    out.push(check("embed", &[table], h, |t, v| {
        let z = t.embed(v[0], &ids)?;
        contract(t, z, &w44)
    })?);
    out.push(check("shift_rows", core::slice::from_ref(&x), h, |t, v| {
        let z = t.shift_rows(v[0])?;
        contract(t, z, &w34)
    })?);

    let (tl, d) = (5, 3);
    let k = random(&mut rng, &[tl, d], 1.0);
    let vv = random(&mut rng, &[tl, d], 1.0);
    let q = random(&mut rng, &[tl, d], 1.0);
    let w = Tensor::from_f64(&[d], &[0.9, 0.5, 0.97])?;
    let wo = random(&mut rng, &[tl, d], 1.0);
    out.push(check("wkv", &[k, vv, q, w], h, |t, v| {
        let z = t.wkv(v[0], v[1], v[2], v[3])?;
        contract(t, z, &wo)
    })?);

    let logits = random(&mut rng, &[3, 7], 2.0);
    let w3 = random(&mut rng, &[3], 1.0);
    out.push(check(
        "cross_entropy_rows",
        core::slice::from_ref(&logits),
        h,
        |t, v| {
            let z = t.cross_entropy_rows(v[0], &[1, 6, 0])?;
            contract(t, z, &w3)
        },
    )?);
    out.push(check("entropy_rows", core::slice::from_ref(&logits), h, |t, v| {
        let z = t.entropy_rows(v[0])?;
        contract(t, z, &w3)
    })?);
    let w2 = random(&mut rng, &[2, 7], 1.0);
    out.push(check("select_rows", &[logits], h, |t, v| {
        let z = t.select_rows(v[0], &[2, 0])?;
        contract(t, z, &w2)
    })?);
    Ok(out)
}
