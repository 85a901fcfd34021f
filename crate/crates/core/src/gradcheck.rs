//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{branch, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default finite-difference step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Maximum over checked coordinates of
/// `|analytic - central| / max(1, |central|)`.
///
/// `f` must build a scalar from the supplied input variables. Every
/// coordinate of every input is perturbed; see [`grad_check_sampled`] for
/// large inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let coords = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(&f, inputs, eps, coords)
}

/// Like [`grad_check`], but perturbs at most `per_input` randomly chosen
/// coordinates of each input tensor.
pub fn grad_check_sampled<F, R>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    R: Rng + ?Sized,
{
    let coords = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= per_input {
                (0..n).collect()
            } else {
                let mut picked = sample(rng, n, per_input).into_vec();
                picked.sort_unstable();
                picked
            }
        })
        .collect();
    check_coords(&f, inputs, eps, coords)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let value = f(&tape, &vars)?.value().item()?;
    if !value.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    Ok(value)
}

fn check_coords<F>(f: &F, inputs: &[Tensor<f64>], eps: f64, coords: Vec<Vec<usize>>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {eps}")));
    }

    branch::start_recording();
    let analytic: Result<Vec<Tensor<f64>>> = (|| {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        let grads = tape.backward(out)?;
        Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
    })();
    let mut log = branch::finish_recording();
    let analytic = analytic?;

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (which, picked) in coords.iter().enumerate() {
        for &j in picked {
            let original = inputs[which].data()[j];
            let mut eval_at = |x: f64| -> Result<f64> {
                perturbed[which].data_mut()[j] = x;
                branch::start_replay(std::mem::take(&mut log));
                let value = evaluate(f, &perturbed);
                log = branch::finish_replay();
                value
            };
            let plus = eval_at(original + eps);
            let minus = eval_at(original - eps);
            perturbed[which].data_mut()[j] = original;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    branch::reset();
                    return Err(e);
                }
            };
            let central = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[j];
            if !a.is_finite() {
                return Err(Error::Numeric("grad_check: non-finite gradient".into()));
            }
            worst = worst.max((a - central).abs() / central.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_f64([4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let err = grad_check(|_, v| Ok(v[0].sum()), &[x], DEFAULT_EPS).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relu_near_kink_stays_on_its_piece() {
        let x = Tensor::from_f64([3], &[1e-7, -1e-7, 2.0]).unwrap();
        let err = grad_check(|_, v| Ok(v[0].relu().sum()), &[x], DEFAULT_EPS).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x*x) backpropagated through a stop-gradient copy gives half the slope
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let frozen = tape.constant(v[0].value());
                Ok(v[0].mul(frozen)?.sum())
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn rejects_bad_step_and_nonfinite() {
        let x = Tensor::from_f64([1], &[1.0]).unwrap();
        assert!(grad_check(|_, v| Ok(v[0].sum()), &[x.clone()], 0.0).is_err());
        let err = grad_check(|_, v| Ok(v[0].scale(f64::INFINITY).sum()), &[x], 1e-5);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn sampled_check_covers_small_inputs_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_f64([3], &[0.1, 0.2, 0.3]).unwrap();
        let err = grad_check_sampled(|_, v| Ok(v[0].mul(v[0])?.sum()), &[x], 1e-5, 10, &mut rng)
            .unwrap();
        assert!(err < 1e-8);
    }
}
