//! Finite-difference verification of analytic gradients.
//!
//! The checker is independent of the backward implementation it validates:
//! it only ever calls a user closure for loss values, perturbing one input
//! coordinate at a time with a central difference.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation step for fp64 central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Loss value plus analytic gradients, one per checked input.
pub struct CheckOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Relative error between one analytic and one numeric coordinate.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Max relative error over two gradient buffers of equal length.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradients of a deterministic scalar function.
pub fn numeric_gradients<F>(f: &mut F, inputs: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compare analytic gradients against central differences.
///
/// `f` must be deterministic and scalar-valued (callers' responsibility; a
/// non-deterministic `f` makes the result meaningless). Returns the max over
/// all coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: &mut F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<CheckOutput>,
{
    let base = f(inputs)?;
    if base.grads.len() != inputs.len() {
        return Err(Error::Contract(format!(
            "grad_check: {} gradients for {} inputs",
            base.grads.len(),
            inputs.len()
        )));
    }
    for (g, x) in base.grads.iter().zip(inputs) {
        if g.len() != x.numel() {
            return Err(Error::Contract(format!(
                "grad_check: gradient of {} coords for input of {}",
                g.len(),
                x.numel()
            )));
        }
    }
    let mut value_only = |xs: &[Tensor]| f(xs).map(|out| out.loss);
    let numeric = numeric_gradients(&mut value_only, inputs, eps)?;
    let mut worst = 0.0f64;
    for (a, n) in base.grads.iter().zip(&numeric) {
        worst = worst.max(max_relative_error(a, n));
    }
    Ok(worst)
}

/// Check a function expressed directly as tape operations.
///
/// Every input becomes a `requires_grad` leaf; `build` must return a scalar.
pub fn grad_check_tape<B>(build: &mut B, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    B: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut f = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Contract("grad_check_tape: loss is not scalar".into()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
            .collect();
        Ok(CheckOutput { loss: tape.value(loss).data()[0], grads })
    };
    grad_check(&mut f, inputs, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_exact() {
        let mut rng = rng_for(21, "gc-linear");
        let w = rand_tensor(vec![3, 4], &mut rng);
        let x = rand_tensor(vec![4, 2], &mut rng);
        let err = grad_check_tape(
            &mut |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                let t = tape.tanh(y)?;
                tape.mean_all(t)
            },
            &[w, x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn every_core_op_passes_grad_check() {
        let mut rng = rng_for(22, "gc-ops");
        let x = rand_tensor(vec![3, 5], &mut rng);
        let b = rand_tensor(vec![5], &mut rng);
        let y = rand_tensor(vec![3, 5], &mut rng);

        let cases: Vec<(&str, Box<dyn FnMut(&mut Tape, &[Var]) -> Result<Var>>)> = vec![
            ("add", Box::new(|t, v| { let s = t.add(v[0], v[2])?; t.mean_all(s) })),
            ("sub", Box::new(|t, v| { let s = t.sub(v[0], v[2])?; t.mean_all(s) })),
            ("mul", Box::new(|t, v| { let s = t.mul(v[0], v[2])?; t.mean_all(s) })),
            ("scale", Box::new(|t, v| { let s = t.scale(v[0], -1.7)?; t.mean_all(s) })),
            ("add_row_vec", Box::new(|t, v| { let s = t.add_row_vec(v[0], v[1])?; t.mean_all(s) })),
            ("mul_row_vec", Box::new(|t, v| { let s = t.mul_row_vec(v[0], v[1])?; t.mean_all(s) })),
            ("transpose", Box::new(|t, v| { let s = t.transpose(v[0])?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("tanh", Box::new(|t, v| { let s = t.tanh(v[0])?; t.mean_all(s) })),
            ("softmax", Box::new(|t, v| { let s = t.softmax(v[0], 1)?; let w = t.mul(s, v[2])?; t.mean_all(w) })),
            ("log_softmax", Box::new(|t, v| { let s = t.log_softmax(v[0], 1)?; let w = t.mul(s, v[2])?; t.mean_all(w) })),
            ("reduce_mean", Box::new(|t, v| { let s = t.reduce_mean(v[0], 0)?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("reduce_sum", Box::new(|t, v| { let s = t.reduce_sum(v[0], 1)?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("gather_rows", Box::new(|t, v| { let s = t.gather_rows(v[0], &[2, 0, 2])?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("take_per_row", Box::new(|t, v| { let s = t.take_per_row(v[0], &[4, 0, 2])?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("slice_rows", Box::new(|t, v| { let s = t.slice_rows(v[0], 1, 2)?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("slice_cols", Box::new(|t, v| { let s = t.slice_cols(v[0], 1, 3)?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("concat_rows", Box::new(|t, v| { let s = t.concat_rows(&[v[0], v[2]])?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("concat_cols", Box::new(|t, v| { let s = t.concat_cols(&[v[0], v[2]])?; let u = t.tanh(s)?; t.mean_all(u) })),
            ("layer_norm", Box::new(|t, v| { let s = t.layer_norm(v[0], 1e-5)?; let w = t.mul(s, v[2])?; t.mean_all(w) })),
        ];
        for (name, mut build) in cases {
            let err = grad_check_tape(&mut build, &[x.clone(), b.clone(), y.clone()], DEFAULT_EPS)
                .unwrap();
            assert!(err < 1e-6, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // Scale the analytic gradient of a tanh chain by 2: the harness must
        // report a large error, proving it can catch a bad backward rule.
        let mut rng = rng_for(23, "gc-fault");
        let x = rand_tensor(vec![4], &mut rng);
        let mut f = |xs: &[Tensor]| {
            let mut tape = Tape::new();
            let v = tape.variable(xs[0].clone());
            let t = tape.tanh(v)?;
            let loss = tape.mean_all(t)?;
            tape.backward(loss)?;
            let grads = vec![tape.grad(v).unwrap().iter().map(|g| 2.0 * g).collect()];
            Ok(CheckOutput { loss: tape.value(loss).data()[0], grads })
        };
        let err = grad_check(&mut f, &[x], DEFAULT_EPS).unwrap();
        assert!(err > 0.1, "fault injection not detected: {err}");
    }
}
