//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub mod suites;

/// Relative-error floor in the denominator, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares tape gradients of the scalar `f` against central differences
/// with step `h` at every coordinate of every input.
///
/// `f` receives a fresh tape and one leaf per input, in order. Returns a
/// numeric error naming the coordinate if `f` is non-finite at a probe.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::Numeric("function is non-finite at the base point".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    let step = T::lit(h);
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for elem in 0..input.numel() {
            let orig = input.data()[elem];
            probe[which].data_mut()[elem] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[elem] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[elem] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value probing input {which}, element {elem}"
                )));
            }
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * h);
            let exact = analytic[which].data()[elem].as_f64();
            let denom = exact.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((which, elem));
                report.worst_analytic = exact;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_functions_are_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let w = Tensor::new(vec![3], vec![1.5, 0.25, -0.75]).unwrap();
        let report = grad_check(
            |tape: &Tape<f64>, v| {
                let p = tape.mul(v[0], v[1])?;
                Ok(tape.sum(p))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn kink_at_probe_point_is_reported() {
        // max(x, 0) at x = 0: the tape says 0, central differences say 1/2.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report = grad_check(
            |tape: &Tape<f64>, v| {
                let r = tape.clamp_min(v[0], 0.0);
                Ok(tape.sum(r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(!report.passed(1e-4));
        assert_eq!(report.worst, Some((0, 0)));
        assert!((report.worst_numeric - 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_probe_names_the_coordinate() {
        // log(x) at x = 1e-6 with h = 1e-5 probes a negative argument.
        let x = Tensor::new(vec![2], vec![1.0, 1e-6]).unwrap();
        let err = grad_check(
            |tape: &Tape<f64>, v| {
                let l = tape.log(v[0]);
                Ok(tape.sum(l))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("element 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_must_be_positive() {
        let x = Tensor::<f64>::ones(vec![1]);
        let f = |tape: &Tape<f64>, v: &[Var]| Ok(tape.sum(v[0]));
        assert!(grad_check(f, std::slice::from_ref(&x), 0.0).is_err());
        assert!(grad_check(f, &[x], f64::NAN).is_err());
    }
}
