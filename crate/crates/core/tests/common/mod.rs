#![allow(dead_code)]

use isdet_core::layers::{load_params, named_params, ConvSpec, Params};
use isdet_core::tensor::{gradcheck, GradReport, GradcheckOptions};
use isdet_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop cross-correlation.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Index-map oracle for the patch-channel reconstruction: pixel `(b, c, h, w)`
/// lands at `(b, p, c, l)` with `p = (h mod K)·K + (w mod K)` and
/// `l = (h / K)·L_w + (w / K)`. Padding cells stay zero.
pub fn reconstruct_oracle(x: &Tensor, k: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (lh, lw) = (h.div_ceil(k), w.div_ceil(k));
    let l = lh * lw;
    let mut out = vec![0.0; b * k * k * c * l];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xi in 0..w {
                    let p = (y % k) * k + xi % k;
                    let li = (y / k) * lw + xi / k;
                    out[((bi * k * k + p) * c + ci) * l + li] = x.at(&[bi, ci, y, xi]);
                }
            }
        }
    }
    Tensor::new(&[b, k * k, c, l], out).unwrap()
}

/// Gradcheck of `loss(module, x)` over the input and every parameter of a module.
pub fn module_gradcheck<M, F>(module: &M, x: &Tensor, tol: f64, loss: F) -> Result<GradReport>
where
    M: Params + Clone,
    F: Fn(&M, &Tensor) -> Result<Tensor>,
{
    let mut inputs = vec![x.clone()];
    inputs.extend(named_params(module).into_iter().map(|(_, t)| t));
    gradcheck(
        |ts| {
            let mut m = module.clone();
            load_params(&mut m, &ts[1..])?;
            loss(&m, &ts[0])
        },
        &inputs,
        GradcheckOptions::with_tol(tol),
    )
}

/// A fixed random weighting of every output element, so the checked scalar
/// depends on all of them non-trivially.
pub fn weighted_sum(y: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(y.mul(&random(y.shape(), seed))?.sum())
}
