use serde::{Deserialize, Serialize};

use super::{backward, Tensor};
use crate::error::Result;

/// Central-difference gradient `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` for every coordinate of `x`.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&Tensor::leaf(x.shape().to_vec(), probe.clone(), false));
        probe[i] = orig - h;
        let minus = f(&Tensor::leaf(x.shape().to_vec(), probe.clone(), false));
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::leaf(x.shape().to_vec(), grad, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound of the relative-error denominator.
    pub denom_floor: f64,
    /// An input also passes when every absolute error is at most this.
    pub abs_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tol: 1e-4,
            step: 1e-5,
            denom_floor: 1e-8,
            abs_floor: 1e-8,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradcheckOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGradError {
    pub index: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub pass: bool,
}

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub tol: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs).fold(0.0, f64::max)
    }
}

/// Checks `backward` against [`fd_gradient`] for every input of `f`.
///
/// `f` must build its scalar output from library operations on the given
/// inputs. Inputs are re-created as tracked leaves, so callers may pass
/// untracked tensors.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tracked: Vec<Tensor> = inputs.iter().map(Tensor::tracked).collect();
    let loss = f(&tracked)?;
    let grads = backward(&loss)?;

    let constants: Vec<Tensor> = tracked.iter().map(Tensor::detach).collect();
    let mut params = Vec::with_capacity(inputs.len());
    for (index, input) in tracked.iter().enumerate() {
        let analytic = grads.wrt(input);
        let mut failed = false;
        let numeric = fd_gradient(
            |probe| {
                let mut args = constants.clone();
                args[index] = probe.clone();
                match f(&args).and_then(|t| t.item()) {
                    Ok(v) => v,
                    Err(_) => {
                        failed = true;
                        f64::NAN
                    }
                }
            },
            input,
            opts.step,
        );
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(opts.denom_floor);
            // NaN must never count as agreement
            failed |= abs.is_nan();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        let pass = !failed && (max_rel <= opts.tol || max_abs <= opts.abs_floor);
        params.push(ParamGradError {
            index,
            max_rel,
            max_abs,
            pass,
        });
    }
    let pass = params.iter().all(|p| p.pass);
    Ok(GradReport {
        params,
        tol: opts.tol,
        pass,
    })
}
