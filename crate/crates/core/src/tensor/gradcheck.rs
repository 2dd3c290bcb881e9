//! Central finite-difference gradient checking. This is the oracle side of
//! the autodiff contract: it evaluates the loss twice per checked coordinate
//! and never touches the reverse-mode machinery, so agreement between the two
//! is meaningful evidence.

use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;
use crate::rng::{rng_from_seed, Prng};
use rand::Rng;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative.
///
/// The denominator is floored so that coordinates whose true gradient is
/// tiny are held to a proportional absolute tolerance instead of dividing
/// by noise: for |g| below `floor`, a reported error of `e` means an
/// absolute disagreement of `e * floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Parameter name, flat index, analytic and numeric values at the worst
    /// coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Checks a scalar-valued graph against central differences on every input
/// coordinate. `build` receives a fresh tape plus leaves for `inputs` (in
/// order) and returns the scalar output variable.
///
/// Returns the maximum relative error over all coordinates of all inputs.
pub fn check_op<F>(inputs: &[Tensor], mut build: F, step: f64, floor: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic gradients in one reverse pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |tensors: &[Tensor], build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for ti in 0..inputs.len() {
        for ci in 0..inputs[ti].numel() {
            let x0 = work[ti].data()[ci];
            work[ti].data_mut()[ci] = x0 + step;
            let fp = eval(&work, &mut build)?;
            work[ti].data_mut()[ci] = x0 - step;
            let fm = eval(&work, &mut build)?;
            work[ti].data_mut()[ci] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[ti][ci], numeric, floor));
        }
    }
    Ok(max_err)
}

/// Finite-difference check of a model loss over registered parameters.
///
/// `loss` must evaluate the full forward pass from the current parameter
/// values (building and discarding its own tape). `analytic` holds the
/// reverse-mode gradients exported beforehand for the same parameter values.
/// `coords_per_param` coordinates are sampled per tensor (all of them if the
/// tensor is smaller), keeping the quadratic cost of differencing bounded.
#[allow(clippy::too_many_arguments)]
pub fn check_params<F>(
    params: &mut ParamSet,
    ids: &[ParamId],
    analytic: &[(ParamId, Vec<f64>)],
    mut loss: F,
    step: f64,
    floor: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let lookup: std::collections::HashMap<usize, &Vec<f64>> =
        analytic.iter().map(|(id, g)| (id.index(), g)).collect();
    let mut rng: Prng = rng_from_seed(seed);
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &id in ids {
        let n = params.value(id).numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            // Sampling without replacement keeps repeated coordinates from
            // wasting the budget on small tensors.
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < coords_per_param {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        let zero = vec![0.0; n];
        let a_vec: &[f64] = lookup.get(&id.index()).map(|v| v.as_slice()).unwrap_or(&zero);
        for ci in coords {
            let x0 = params.value(id).data()[ci];
            params.value_mut(id).data_mut()[ci] = x0 + step;
            let fp = loss(params)?;
            params.value_mut(id).data_mut()[ci] = x0 - step;
            let fm = loss(params)?;
            params.value_mut(id).data_mut()[ci] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(a_vec[ci], numeric, floor);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((params.name(id).to_string(), ci, a_vec[ci], numeric));
            }
        }
    }
    Ok(report)
}
