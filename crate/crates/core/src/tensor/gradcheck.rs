//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Lower bound on the relative-error denominator. Coordinates whose
    /// gradients are both below it are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

/// Max relative error between the tape gradient of scalar `f` at `point`
/// and central differences with step 1e-4.
pub fn grad_check<F>(f: F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_with(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        GradCheckOptions::default(),
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input gradient check. `f` receives one trainable leaf per point.
pub fn grad_check_with<F>(f: F, points: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work = points.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let stride = opts.max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for i in (0..n).step_by(stride) {
            let orig = work[input].data()[i];
            work[input].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[input].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[input].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coordinates += 1;
            if report.coordinates == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (input, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_of_squares() {
        let x = random(&[10], 3);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_a_perturbed_conv_backward() {
        let x = random(&[2, 5, 5], 4);
        let w = random(&[3, 2, 3, 3], 5);
        let f = |fault| {
            move |t: &mut Tape<f64>, v: &[Var]| {
                t.inject_fault(fault);
                let y = t.conv2d(v[0], v[1], None, 1, Padding::Same)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            }
        };
        let opts = GradCheckOptions::default();
        let clean = grad_check_with(f(None), &[x.clone(), w.clone()], opts).unwrap();
        assert!(clean.max_rel_error < 1e-6, "{clean:?}");
        let faulty = grad_check_with(f(Some(crate::tensor::Fault::ConvWeightGrad)), &[x, w], opts).unwrap();
        assert!(faulty.max_rel_error > 1e-3, "{faulty:?}");
        assert_eq!(faulty.worst.0, 1);
    }
}
