//! Finite-difference verification of tape gradients.

use serde::Serialize;

use crate::difftensor::tape::{ParamBinder, Tape, Var};
use crate::difftensor::tensor::{ParamStore, Tensor};
use crate::error::{HvprError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Step size, tolerance and how many elements of each input to probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Inputs larger than this are probed at evenly spaced elements only.
    pub max_per_input: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_per_input: usize::MAX,
        }
    }
}

fn probe_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    // odd offset so strided probes do not all land on the same channel phase
    (0..max)
        .map(|i| (i * numel + numel / (2 * max + 1)) / max % numel)
        .collect()
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every input element.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    finite_difference_check_with(
        op_name,
        f,
        inputs,
        &GradCheckOptions {
            eps,
            tol,
            max_per_input: usize::MAX,
        },
    )
}

/// [`finite_difference_check`] with explicit options.
pub fn finite_difference_check_with<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    options: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let GradCheckOptions {
        eps,
        tol,
        max_per_input,
    } = *options;
    if eps <= 0.0 {
        return Err(HvprError::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(HvprError::shape(
                "finite_difference_check",
                format!("{op_name} must return a scalar, got {:?}", value.shape()),
            ));
        }
        value.check_finite(op_name)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    for g in &analytic {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(HvprError::NumericFailure {
                op: op_name.to_string(),
            });
        }
    }

    let scalar_at = |values: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = eval(values)?;
        Ok(tape.value(out).data()[0])
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (ti, a) in analytic.iter().enumerate() {
        for j in probe_indices(inputs[ti].numel(), max_per_input) {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let plus = scalar_at(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let minus = scalar_at(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (a[j] - numeric).abs();
            let rel = abs / a[j].abs().max(numeric.abs()).max(1e-8);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel <= tol,
    })
}

/// Gradient check of a parameterized module: every trainable parameter of
/// `store` is appended to `inputs` as an extra differentiable input and bound
/// through a [`ParamBinder`] handed to `f`.
pub fn check_module<F>(
    op_name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &mut ParamBinder<'_>, &[Var]) -> Var,
{
    let options = GradCheckOptions {
        eps,
        tol,
        max_per_input: usize::MAX,
    };
    check_module_with(op_name, store, inputs, &options, f)
}

/// [`check_module`] with explicit options.
pub fn check_module_with<F>(
    op_name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    options: &GradCheckOptions,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &mut ParamBinder<'_>, &[Var]) -> Var,
{
    let trainable: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.tensor.requires_grad)
        .map(|(id, p)| (id, p.tensor.clone()))
        .collect();
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(trainable.iter().map(|(_, t)| t.clone()));
    let n_inputs = inputs.len();
    finite_difference_check_with(
        op_name,
        |tape, vars| {
            let mut binder = ParamBinder::new(store);
            for ((id, _), &v) in trainable.iter().zip(&vars[n_inputs..]) {
                binder.bind(*id, v);
            }
            f(tape, &mut binder, &vars[..n_inputs])
        },
        &all,
        options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let report = finite_difference_check(
            "scale3",
            |tape, v| {
                let y = tape.scale(v[0], 3.0);
                tape.sum(y)
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn square_matches_hand_derivative() {
        // d/dx sum x^2 at [1, 2] is [2, 4]; central differences are exact for
        // quadratics up to rounding.
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report = finite_difference_check(
            "square",
            |tape, v| {
                let y = tape.mul(v[0], v[0]);
                tape.sum(y)
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn topk_tie_is_flagged() {
        // Two equal scores sit on the selection boundary: perturbing either one
        // changes which is selected, so the one-sided derivatives disagree.
        let x = Tensor::new(&[1, 3], vec![2.0, 1.0, 1.0]).unwrap();
        let report = finite_difference_check(
            "topk_tie",
            |tape, v| {
                let (sel, _) = tape.topk_rows(v[0], 2);
                let sq = tape.mul(sel, sel);
                tape.sum(sq)
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = finite_difference_check(
            "blowup",
            |tape, v| {
                let y = tape.scale(v[0], f64::INFINITY);
                tape.sum(y)
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, HvprError::NumericFailure { op } if op == "blowup"));
    }
}
