//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so exactly-zero gradients
/// compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input (seeded sample).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            step: FD_STEP,
            tol,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
    /// Set when the function could not be evaluated (non-finite output, ...).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.inputs.iter().all(|r| r.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return write!(f, "FAIL ({msg})");
        }
        write!(
            f,
            "{} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tol
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar function against central
/// differences, input by input.
///
/// `f` receives a fresh tape with every input recorded as a parameter and
/// must return a scalar.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        let v = tape.value(out).item().map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("function value {v}"))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = match f(&mut tape, &vars) {
        Ok(v) => v,
        Err(e) => {
            return Ok(GradCheckReport {
                inputs: Vec::new(),
                tol: opts.tol,
                failure: Some(format!("forward at the base point: {e}")),
            })
        }
    };
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < input.len() => {
                let mut c = sample(&mut rng, input.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        for &c in &coords {
            let x0 = input.data()[c];
            point[i].data_mut()[c] = x0 + opts.step;
            let plus = eval(&point);
            point[i].data_mut()[c] = x0 - opts.step;
            let minus = eval(&point);
            point[i].data_mut()[c] = x0;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return Ok(GradCheckReport {
                        inputs: reports,
                        tol: opts.tol,
                        failure: Some(format!("input {i} coordinate {c}: {e}")),
                    })
                }
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[i].data()[c], numeric);
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f64::INFINITY } else { err };
                worst_index = c;
            }
        }
        reports.push(InputReport {
            input: i,
            max_rel_error: worst,
            worst_index,
            checked: coords.len(),
            passed: worst <= opts.tol,
        });
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol: opts.tol,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Backward;

    #[test]
    fn sum_of_squares_passes_tight_tolerance() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[x],
            &GradCheckOptions::with_tol(1e-6),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    struct WrongSquare;

    impl Backward<f64> for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }

        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad: &Tensor<f64>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<f64>>>> {
            // d(x^2)/dx is 2x; this returns x.
            Ok(vec![Some(grad.zip_map(inputs[0], |g, x| g * x)?)])
        }
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let x = Tensor::from_f64(&[3], &[0.5, 1.5, -2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.value(v[0]).map(|x| x * x);
                let y = tape.record("wrong_square", &[v[0]], sq, Box::new(WrongSquare))?;
                tape.sum(y)
            },
            &[x],
            &GradCheckOptions::with_tol(1e-4),
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_function_reports_location() {
        let x = Tensor::from_f64(&[2], &[1.0, 1e308]).unwrap();
        let report = grad_check(
            |tape, v| {
                let y = tape.scale(v[0], 10.0)?;
                tape.sum(y)
            },
            &[x],
            &GradCheckOptions::with_tol(1e-4),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.failure.unwrap().contains("scale"));
    }
}
