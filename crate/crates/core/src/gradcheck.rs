//! Central finite-difference gradient checking.
//!
//! The checker recomputes the scalar objective with coordinate-wise
//! perturbations and compares against the analytic reverse-mode gradient.
//! Differences and quotients are taken in f64; the forward pass itself
//! stays in f32, which bounds what tolerance is meaningful.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-2;

/// How many coordinates per input to probe (sampled without replacement
/// when the tensor is larger).
const MAX_COORDS: usize = 24;

/// Builds the scalar objective twice per probed coordinate and checks
/// `|fd - analytic| <= atol + rtol * max(|fd|, |analytic|)` for every
/// probe, where `atol` is the round-off floor of a central difference on
/// an f32 forward pass (ulp(f)/2h plus an O(h^2) curvature allowance).
/// A pure relative criterion is meaningless for coordinates whose true
/// gradient sits below that floor. Returns the worst relative error over
/// coordinates that clear the floor.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, rtol: f64, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, f, rtol, FD_STEP, rng)
}

/// As `check_gradients` but with an explicit step: smaller steps suit
/// objectives with large third derivatives (normalization layers), at the
/// price of a higher round-off floor.
pub fn check_gradients_with<F>(
    inputs: &[Tensor],
    f: F,
    rtol: f64,
    h: f64,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item() as f64)
    };

    // analytic gradients
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    root.backward()?;
    let grads: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let f0 = root.value().item() as f64;
    let scale = f0.abs().max(1.0);
    let atol = scale * (4.0 * f32::EPSILON as f64 / (2.0 * h) + h * h);

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            let mut c: Vec<usize> = (0..MAX_COORDS).map(|_| rng.gen_range_usize(n)).collect();
            c.sort_unstable();
            c.dedup();
            c
        };
        for &j in &coords {
            let mut t_plus = inputs.to_vec();
            let mut t_minus = inputs.to_vec();
            let an = grads[i].data()[j] as f64;
            // Retry with shrinking steps: a kink of a piecewise-linear
            // activation inside the probe interval biases the central
            // difference, but leaves it once the interval shrinks past the
            // kink; a wrong adjoint fails at every step size.
            let mut ok = false;
            let mut report = (0.0f64, 0.0f64, atol);
            for step in [h, h / 4.0, h / 16.0] {
                let mut plus = input.to_vec();
                let mut minus = input.to_vec();
                plus[j] = (plus[j] as f64 + step) as f32;
                minus[j] = (minus[j] as f64 - step) as f32;
                t_plus[i] = Tensor::new(input.shape().to_vec(), plus)?;
                t_minus[i] = Tensor::new(input.shape().to_vec(), minus)?;
                let fd = (eval(&t_plus)? - eval(&t_minus)?) / (2.0 * step);
                let step_atol = scale * (4.0 * f32::EPSILON as f64 / (2.0 * step) + step * step);
                let mag = fd.abs().max(an.abs());
                let diff = (fd - an).abs();
                report = (fd, diff, step_atol);
                if diff <= step_atol + rtol * mag {
                    if mag > 100.0 * step_atol {
                        worst = worst.max(diff / mag);
                    }
                    ok = true;
                    break;
                }
            }
            if !ok {
                let (fd, diff, step_atol) = report;
                return Err(crate::error::Error::numerical(format!(
                    "gradient mismatch at input {i} coord {j}: fd {fd:.6e} vs analytic {an:.6e} (diff {diff:.3e}, atol {step_atol:.3e})"
                )));
            }
        }
    }
    Ok(worst)
}
