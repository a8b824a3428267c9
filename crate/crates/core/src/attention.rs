//! Patch-channel reconstruction, full-channel global self-attention and
//! reassembly.
//!
//! A feature map `B×C×H×W` is cut into non-overlapping `K×K` patches and
//! rearranged to `B×K²×C×L`, so that for every intra-patch pixel position
//! the `C×L` slice holds each channel's values across all `L` patches.
//! Attention then runs over channels within each of those `B·K²` slices:
//!
//! ```text
//! F = softmax((Q / √L) · Kᵀ) · V        Q, K, V: c₂×L,  weights: c₂×c₂
//! ```
//!
//! Dividing `Q` before the product keeps the score magnitudes small enough
//! that low-precision evaluation stays finite (see [`score_matrix`]).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Backward, Precision, Tensor};

pub const DEFAULT_PATCH: usize = 4;

/// Patch layout for an `H×W` map cut into `K×K` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub k: usize,
    /// Original extents.
    pub h: usize,
    pub w: usize,
    /// Extents after bottom/right zero padding to multiples of `k`.
    pub padded_h: usize,
    pub padded_w: usize,
    pub l_h: usize,
    pub l_w: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, k: usize) -> Result<PatchGrid> {
        if k == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "patch grid needs positive extents, got {h}×{w}, K={k}"
            )));
        }
        let l_h = h.div_ceil(k);
        let l_w = w.div_ceil(k);
        Ok(PatchGrid {
            k,
            h,
            w,
            padded_h: l_h * k,
            padded_w: l_w * k,
            l_h,
            l_w,
        })
    }

    /// Patch count `L`.
    pub fn l(&self) -> usize {
        self.l_h * self.l_w
    }

    pub fn k2(&self) -> usize {
        self.k * self.k
    }
}

/// Intermediate tensors of the reconstructor.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub grid: PatchGrid,
    /// `B×(C·K²)×L`, the unfolded patches.
    pub unfolded: Tensor,
    /// `B×C×K²×L`.
    pub split: Tensor,
    /// `B×K²×C×L`.
    pub output: Tensor,
}

fn dims4(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => shape_err(format!("{what} expects a rank-4 tensor, got {:?}", x.shape())),
    }
}

/// Non-overlapping `K×K` unfold: `B×C×H×W` (H, W multiples of K) to `B×(C·K²)×L`.
///
/// Row index is `c·K² + ki·K + kj`, column index is `lh·L_w + lw`.
pub fn unfold_patches(x: &Tensor, k: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "unfold")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return shape_err(format!("unfold: {h}×{w} is not a multiple of K={k}"));
    }
    let (lh, lw) = (h / k, w / k);
    x.reshape(&[b, c, lh, k, lw, k])?
        .permute(&[0, 1, 3, 5, 2, 4])?
        .reshape(&[b, c * k * k, lh * lw])
}

/// Inverse of [`unfold_patches`]: `B×(C·K²)×L` back to `B×C×(L_h·K)×(L_w·K)`.
pub fn fold_patches(x: &Tensor, k: usize, l_h: usize, l_w: usize) -> Result<Tensor> {
    let (b, ck2, l) = match *x.shape() {
        [b, ck2, l] => (b, ck2, l),
        _ => return shape_err(format!("fold expects B×(C·K²)×L, got {:?}", x.shape())),
    };
    if k == 0 || ck2 % (k * k) != 0 || l != l_h * l_w {
        return shape_err(format!("fold: {:?} inconsistent with K={k}, L={l_h}×{l_w}", x.shape()));
    }
    let c = ck2 / (k * k);
    x.reshape(&[b, c, k, k, l_h, l_w])?
        .permute(&[0, 1, 4, 2, 5, 3])?
        .reshape(&[b, c, l_h * k, l_w * k])
}

/// Runs the reconstructor and keeps every stage.
pub fn reconstruct_stages(x: &Tensor, k: usize) -> Result<Reconstruction> {
    let [b, c, h, w] = dims4(x, "reconstruct")?;
    let grid = PatchGrid::new(h, w, k)?;
    let padded = x.pad_bottom_right(grid.padded_h, grid.padded_w)?;
    let unfolded = unfold_patches(&padded, k)?;
    let split = unfolded.reshape(&[b, c, grid.k2(), grid.l()])?;
    let output = split.permute(&[0, 2, 1, 3])?;
    Ok(Reconstruction {
        grid,
        unfolded,
        split,
        output,
    })
}

/// `B×C×H×W` to `B×K²×C×L`; element `(b, p, c, l)` is the pixel at
/// intra-patch offset `p` of patch `l` in channel `c`. Maps whose sides
/// are not multiples of `K` are zero-padded on the bottom/right.
///
/// Single-pass equivalent of the stage pipeline in [`reconstruct_stages`].
pub fn reconstruct(x: &Tensor, k: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "reconstruct")?;
    let grid = PatchGrid::new(h, w, k)?;
    let map = PatchMap { b, c, grid };
    Ok(Tensor::op_result(
        vec![b, grid.k2(), c, grid.l()],
        map.gather_patches(x.data()),
        vec![x.clone()],
        Box::new(ToPatches(map)),
    ))
}

/// Exact inverse of [`reconstruct`] on the original `h×w` region.
pub fn reassemble(y: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let [b, k2, c, l] = dims4(y, "reassemble")?;
    let grid = PatchGrid::new(h, w, k)?;
    if k2 != grid.k2() || l != grid.l() {
        return shape_err(format!(
            "reassemble: {:?} does not match K={k} on {h}×{w} (expected K²={}, L={})",
            y.shape(),
            grid.k2(),
            grid.l()
        ));
    }
    let map = PatchMap { b, c, grid };
    Ok(Tensor::op_result(
        vec![b, c, h, w],
        map.gather_maps(y.data()),
        vec![y.clone()],
        Box::new(ToMaps(map)),
    ))
}

/// Composed form of [`reassemble`]: permute, reshape, fold, crop.
pub fn reassemble_stages(y: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let [b, k2, c, l] = dims4(y, "reassemble")?;
    let grid = PatchGrid::new(h, w, k)?;
    if k2 != grid.k2() || l != grid.l() {
        return shape_err(format!("reassemble: {:?} does not match K={k} on {h}×{w}", y.shape()));
    }
    let folded = fold_patches(
        &y.permute(&[0, 2, 1, 3])?.reshape(&[b, c * k2, l])?,
        k,
        grid.l_h,
        grid.l_w,
    )?;
    folded.crop_top_left(h, w)
}

/// Index map between `B×C×H×W` maps and their `B×K²×C×L` patch layout.
#[derive(Debug, Clone, Copy)]
struct PatchMap {
    b: usize,
    c: usize,
    grid: PatchGrid,
}

impl PatchMap {
    fn gather_patches(self, maps: &[f64]) -> Vec<f64> {
        let PatchGrid { k, h, w, l_h, l_w, .. } = self.grid;
        let l = l_h * l_w;
        let mut out = vec![0.0; self.b * k * k * self.c * l];
        for b in 0..self.b {
            for c in 0..self.c {
                let plane = &maps[(b * self.c + c) * h * w..][..h * w];
                for p in 0..k * k {
                    let (ki, kj) = (p / k, p % k);
                    let row = &mut out[((b * k * k + p) * self.c + c) * l..][..l];
                    for lh in 0..l_h {
                        let y = lh * k + ki;
                        if y >= h {
                            break;
                        }
                        for lw in 0..l_w {
                            let x = lw * k + kj;
                            if x >= w {
                                break;
                            }
                            row[lh * l_w + lw] = plane[y * w + x];
                        }
                    }
                }
            }
        }
        out
    }

    fn gather_maps(self, patches: &[f64]) -> Vec<f64> {
        let PatchGrid { k, h, w, l_h, l_w, .. } = self.grid;
        let mut out = vec![0.0; self.b * self.c * h * w];
        let mut pi = 0;
        for b in 0..self.b {
            for p in 0..k * k {
                let (ki, kj) = (p / k, p % k);
                for c in 0..self.c {
                    let plane = (b * self.c + c) * h * w;
                    for lh in 0..l_h {
                        let y = lh * k + ki;
                        for lw in 0..l_w {
                            let x = lw * k + kj;
                            if y < h && x < w {
                                out[plane + y * w + x] = patches[pi];
                            }
                            pi += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

struct ToPatches(PatchMap);

impl Backward for ToPatches {
    fn name(&self) -> &'static str {
        "reconstruct"
    }

    fn backward(&self, grad_out: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.gather_maps(grad_out))]
    }
}

struct ToMaps(PatchMap);

impl Backward for ToMaps {
    fn name(&self) -> &'static str {
        "reassemble"
    }

    fn backward(&self, grad_out: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.gather_patches(grad_out))]
    }
}

/// Splits `B×K²×3c₂×L` into contiguous channel thirds `(Q, K, V)`.
pub fn split_qkv(x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [_, _, c1, _] = dims4(x, "split_qkv")?;
    if c1 % 3 != 0 {
        return shape_err(format!("split_qkv: channel axis {c1} is not divisible by 3"));
    }
    let c2 = c1 / 3;
    Ok((x.narrow(2, 0, c2)?, x.narrow(2, c2, c2)?, x.narrow(2, 2 * c2, c2)?))
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    dims4(q, "fcgsa")?;
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return shape_err(format!(
            "fcgsa: Q {:?}, K {:?}, V {:?} differ",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok(())
}

/// Softmax-normalized `c₂×c₂` attention weights of every `(b, p)` slice.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return shape_err(format!("attention: Q {:?} and K {:?} differ", q.shape(), k.shape()));
    }
    let l = *q.shape().last().expect("rank checked") as f64;
    let scores = q.scale(1.0 / l.sqrt()).matmul(&k.transpose_last()?)?;
    Ok(scores.softmax_last())
}

/// Full-channel global self-attention over `B×K²×c₂×L` inputs.
pub fn fcgsa(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    attention_weights(q, k)?.matmul(v)
}

/// Where the `1/√L` factor enters the score computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalePlacement {
    /// `(Q/√L)·Kᵀ`
    PreScaled,
    /// `(Q·Kᵀ)/√L`
    PostScaled,
}

trait Real: Copy + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Div<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn zero() -> Self {
        0.0
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn zero() -> Self {
        0.0
    }
}

fn scores_in<T: Real>(q: &[f64], k: &[f64], c2: usize, l: usize, placement: ScalePlacement) -> Vec<f64> {
    let q: Vec<T> = q.iter().map(|&v| T::from_f64(v)).collect();
    let k: Vec<T> = k.iter().map(|&v| T::from_f64(v)).collect();
    let root = T::from_f64((l as f64).sqrt());
    let slices = q.len() / (c2 * l);
    let mut out = Vec::with_capacity(slices * c2 * c2);
    for s in 0..slices {
        let qs = &q[s * c2 * l..(s + 1) * c2 * l];
        let ks = &k[s * c2 * l..(s + 1) * c2 * l];
        for i in 0..c2 {
            for j in 0..c2 {
                let mut acc = T::zero();
                for t in 0..l {
                    let (a, b) = (qs[i * l + t], ks[j * l + t]);
                    acc = match placement {
                        ScalePlacement::PreScaled => acc + (a / root) * b,
                        ScalePlacement::PostScaled => acc + a * b,
                    };
                }
                if placement == ScalePlacement::PostScaled {
                    acc = acc / root;
                }
                out.push(acc.to_f64());
            }
        }
    }
    out
}

/// Raw attention scores evaluated at the requested precision.
///
/// Inputs are `…×c₂×L` tensors; the result has shape `…×c₂×c₂`. Values are
/// reported as `f64` but every intermediate is rounded to the chosen
/// precision, so overflow in 32-bit mode shows up as infinities.
pub fn score_matrix(q: &Tensor, k: &Tensor, placement: ScalePlacement, precision: Precision) -> Result<Tensor> {
    if q.shape() != k.shape() || q.rank() < 2 {
        return shape_err(format!("score_matrix: Q {:?} and K {:?} differ", q.shape(), k.shape()));
    }
    let r = q.rank();
    let (c2, l) = (q.shape()[r - 2], q.shape()[r - 1]);
    let data = match precision {
        Precision::F32 => scores_in::<f32>(q.data(), k.data(), c2, l, placement),
        Precision::F64 => scores_in::<f64>(q.data(), k.data(), c2, l, placement),
    };
    let mut shape = q.shape()[..r - 2].to_vec();
    shape.extend([c2, c2]);
    // overflow-probing result: may hold non-finite values
    Ok(Tensor::leaf(shape, data, false))
}

/// Untracked attention output with explicit scale placement and precision.
pub fn fcgsa_probe(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    placement: ScalePlacement,
    precision: Precision,
) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let scores = score_matrix(q, k, placement, precision)?;
    let weights = scores.softmax_last();
    let round = |t: &Tensor| -> Result<Tensor> {
        match precision {
            Precision::F64 => Ok(t.detach()),
            Precision::F32 => Ok(Tensor::leaf(
                t.shape().to_vec(),
                t.data().iter().map(|&x| x as f32 as f64).collect(),
                false,
            )),
        }
    };
    let out = round(&weights)?.matmul(&v.detach())?;
    round(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn grid_counts_partial_patches() {
        let g = PatchGrid::new(5, 5, 4).unwrap();
        assert_eq!((g.padded_h, g.padded_w, g.l()), (8, 8, 4));
        assert_eq!(PatchGrid::new(8, 8, 4).unwrap().l(), 4);
        assert!(PatchGrid::new(4, 4, 0).is_err());
    }

    #[test]
    fn unfold_layout_matches_patch_indexing() {
        let x = iota(&[1, 2, 4, 6]);
        let u = unfold_patches(&x, 2).unwrap();
        assert_eq!(u.shape(), &[1, 8, 6]);
        for c in 0..2 {
            for ki in 0..2 {
                for kj in 0..2 {
                    for lh in 0..2 {
                        for lw in 0..3 {
                            let row = c * 4 + ki * 2 + kj;
                            let col = lh * 3 + lw;
                            assert_eq!(u.at(&[0, row, col]), x.at(&[0, c, lh * 2 + ki, lw * 2 + kj]));
                        }
                    }
                }
            }
        }
        assert!(fold_patches(&u, 2, 2, 3).unwrap().bit_eq(&x));
    }

    #[test]
    fn reassemble_rejects_inconsistent_patch_count() {
        let y = Tensor::zeros(&[1, 16, 3, 2]);
        assert!(matches!(reassemble(&y, 4, 4, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn split_rejects_non_multiple_of_three() {
        assert!(split_qkv(&Tensor::zeros(&[1, 4, 10, 2])).is_err());
    }

    #[test]
    fn mismatched_qkv_is_a_shape_error() {
        let a = Tensor::zeros(&[1, 1, 2, 3]);
        let b = Tensor::zeros(&[1, 1, 2, 4]);
        assert!(fcgsa(&a, &a, &b).is_err());
    }
}
