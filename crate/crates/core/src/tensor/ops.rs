use super::kernels::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{numel, Backward, Tensor};
use crate::error::{shape_err, Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elementwise

struct AddRule;
impl Backward for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubRule;
impl Backward for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, g: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct MulRule;
impl Backward for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &[f64], _: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (p[0].data(), p[1].data());
        let da = p[0].is_tracked().then(|| g.iter().zip(b).map(|(g, b)| g * b).collect());
        let db = p[1].is_tracked().then(|| g.iter().zip(a).map(|(g, a)| g * a).collect());
        vec![da, db]
    }
}

struct ScaleRule(f64);
impl Backward for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct ShiftRule;
impl Backward for ShiftRule {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, g: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Pointwise map whose derivative is expressed through input and output values.
struct UnaryRule {
    name: &'static str,
    deriv: fn(x: f64, y: f64) -> f64,
}
impl Backward for UnaryRule {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, g: &[f64], out: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let d = self.deriv;
        vec![Some(
            g.iter()
                .zip(p[0].data())
                .zip(out.data())
                .map(|((g, &x), &y)| g * d(x, y))
                .collect(),
        )]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::op_result(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(AddRule),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::op_result(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(SubRule),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::op_result(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(MulRule),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::op_result(self.shape().to_vec(), data, vec![self.clone()], Box::new(ScaleRule(c)))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::op_result(self.shape().to_vec(), data, vec![self.clone()], Box::new(ShiftRule))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, deriv: fn(f64, f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::op_result(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(UnaryRule { name, deriv }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x·σ(x)`.
    pub fn silu(&self) -> Tensor {
        self.unary(
            "silu",
            |x| x * kernels::sigmoid(x),
            |x, _| {
                let s = kernels::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", kernels::softplus, |x, _| kernels::sigmoid(x))
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Tensor {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }
}

// ---------------------------------------------------------------------------
// reductions

struct SumRule;
impl Backward for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &[f64], _: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; p[0].numel()])]
    }
}

impl Tensor {
    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::op_result(vec![1], vec![s], vec![self.clone()], Box::new(SumRule))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulRule {
    batch: usize,
    m: usize,
    n: usize,
    p: usize,
}
impl Backward for MatmulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, g: &[f64], _: &Tensor, parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let MatmulRule { batch, m, n, p } = *self;
        let (a, b) = (&parents[0], &parents[1]);
        let da = a.is_tracked().then(|| {
            let mut da = vec![0.0; batch * m * n];
            for s in 0..batch {
                gemm_nt_acc(
                    m,
                    p,
                    n,
                    &g[s * m * p..(s + 1) * m * p],
                    &b.data()[s * n * p..(s + 1) * n * p],
                    &mut da[s * m * n..(s + 1) * m * n],
                );
            }
            da
        });
        let db = b.is_tracked().then(|| {
            let mut db = vec![0.0; batch * n * p];
            for s in 0..batch {
                gemm_tn_acc(
                    m,
                    n,
                    p,
                    &a.data()[s * m * n..(s + 1) * m * n],
                    &g[s * m * p..(s + 1) * m * p],
                    &mut db[s * n * p..(s + 1) * n * p],
                );
            }
            db
        });
        vec![da, db]
    }
}

impl Tensor {
    /// Batched matrix product over the trailing two axes; leading axes must match.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() {
            return shape_err(format!("matmul: incompatible ranks {sa:?} × {sb:?}"));
        }
        let r = sa.len();
        let (m, n, n2, p) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if n != n2 || sa[..r - 2] != sb[..r - 2] {
            return shape_err(format!("matmul: incompatible shapes {sa:?} × {sb:?}"));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * p];
        for s in 0..batch {
            gemm_acc(
                m,
                n,
                p,
                &self.data()[s * m * n..(s + 1) * m * n],
                &other.data()[s * n * p..(s + 1) * n * p],
                &mut out[s * m * p..(s + 1) * m * p],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        Ok(Tensor::op_result(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(MatmulRule { batch, m, n, p }),
        ))
    }

    /// Swaps the trailing two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return shape_err("transpose_last needs rank ≥ 2");
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.swap(r - 2, r - 1);
        self.permute(&order)
    }
}

// ---------------------------------------------------------------------------
// layout

struct ReshapeRule;
impl Backward for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct PermuteRule {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}
impl Backward for PermuteRule {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, g: &[f64], _: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (_, back) = kernels::permute_data(g, &self.out_shape, &self.inverse);
        vec![Some(back)]
    }
}

impl Tensor {
    /// Reinterprets the row-major data under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || numel(shape) != self.numel() {
            return shape_err(format!("reshape: cannot view {:?} as {shape:?}", self.shape()));
        }
        Ok(Tensor::op_result(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(ReshapeRule),
        ))
    }

    /// Reorders axes (output axis `i` is input axis `order[i]`), materializing the data.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if order.len() != r || order.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("permute: {order:?} is not a permutation of {r} axes"));
        }
        let (shape, data) = kernels::permute_data(self.data(), self.shape(), order);
        let rule = PermuteRule {
            out_shape: shape.clone(),
            inverse: kernels::inverse_permutation(order),
        };
        Ok(Tensor::op_result(shape, data, vec![self.clone()], Box::new(rule)))
    }
}

// ---------------------------------------------------------------------------
// slicing

/// Splits a shape around `axis` into (outer, extent, inner) block counts.
fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

struct NarrowRule {
    axis: usize,
    start: usize,
    len: usize,
}
impl Backward for NarrowRule {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, g: &[f64], _: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (outer, extent, inner) = blocks(p[0].shape(), self.axis);
        let mut dx = vec![0.0; p[0].numel()];
        for o in 0..outer {
            let src = &g[o * self.len * inner..(o + 1) * self.len * inner];
            let dst = o * extent * inner + self.start * inner;
            dx[dst..dst + self.len * inner].copy_from_slice(src);
        }
        vec![Some(dx)]
    }
}

struct ConcatRule {
    axis: usize,
}
impl Backward for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, g: &[f64], out: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (outer, extent, inner) = blocks(out.shape(), self.axis);
        let mut start = 0;
        p.iter()
            .map(|t| {
                let len = t.shape()[self.axis];
                let mut d = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let off = o * extent * inner + start * inner;
                    d.extend_from_slice(&g[off..off + len * inner]);
                }
                start += len;
                t.is_tracked().then_some(d)
            })
            .collect()
    }
}

impl Tensor {
    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return shape_err(format!(
                "narrow: range {start}..{} invalid for axis {axis} of {:?}",
                start + len,
                self.shape()
            ));
        }
        let (outer, extent, inner) = blocks(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * extent * inner + start * inner;
            data.extend_from_slice(&self.data()[off..off + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::op_result(
            shape,
            data,
            vec![self.clone()],
            Box::new(NarrowRule { axis, start, len }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if axis >= first.rank() {
            return shape_err(format!("concat: axis {axis} out of range for {:?}", first.shape()));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for t in parts {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err(format!("concat: {:?} incompatible with {:?}", t.shape(), first.shape()));
            }
            shape[axis] += t.shape()[axis];
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for t in parts {
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        Ok(Tensor::op_result(
            shape,
            data,
            parts.to_vec(),
            Box::new(ConcatRule { axis }),
        ))
    }
}

// ---------------------------------------------------------------------------
// spatial padding on the trailing two axes

struct PadRule {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
}
impl Backward for PadRule {
    fn name(&self) -> &'static str {
        "pad_bottom_right"
    }
    fn backward(&self, g: &[f64], _: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(crop_data(
            g,
            p[0].numel() / (self.h * self.w),
            self.hp,
            self.wp,
            self.h,
            self.w,
        ))]
    }
}

struct CropRule {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
}
impl Backward for CropRule {
    fn name(&self) -> &'static str {
        "crop_top_left"
    }
    fn backward(&self, g: &[f64], _: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(pad_data(
            g,
            p[0].numel() / (self.hp * self.wp),
            self.h,
            self.w,
            self.hp,
            self.wp,
        ))]
    }
}

fn pad_data(data: &[f64], planes: usize, h: usize, w: usize, hp: usize, wp: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * hp * wp];
    for pl in 0..planes {
        for r in 0..h {
            let src = &data[(pl * h + r) * w..(pl * h + r + 1) * w];
            let dst = (pl * hp + r) * wp;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

fn crop_data(data: &[f64], planes: usize, hp: usize, wp: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * h * w);
    for pl in 0..planes {
        for r in 0..h {
            let src = (pl * hp + r) * wp;
            out.extend_from_slice(&data[src..src + w]);
        }
    }
    out
}

impl Tensor {
    /// Zero-pads the trailing two axes on the bottom/right up to `hp × wp`.
    pub fn pad_bottom_right(&self, hp: usize, wp: usize) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return shape_err("pad needs rank ≥ 2");
        }
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        if hp < h || wp < w {
            return shape_err(format!("pad: target {hp}×{wp} smaller than {h}×{w}"));
        }
        if (hp, wp) == (h, w) {
            return Ok(self.clone());
        }
        let planes = self.numel() / (h * w);
        let mut shape = self.shape().to_vec();
        shape[r - 2] = hp;
        shape[r - 1] = wp;
        let data = pad_data(self.data(), planes, h, w, hp, wp);
        Ok(Tensor::op_result(
            shape,
            data,
            vec![self.clone()],
            Box::new(PadRule { h, w, hp, wp }),
        ))
    }

    /// Keeps the top-left `h × w` window of the trailing two axes.
    pub fn crop_top_left(&self, h: usize, w: usize) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return shape_err("crop needs rank ≥ 2");
        }
        let (hp, wp) = (self.shape()[r - 2], self.shape()[r - 1]);
        if h > hp || w > wp || h == 0 || w == 0 {
            return shape_err(format!("crop: window {h}×{w} outside {hp}×{wp}"));
        }
        if (hp, wp) == (h, w) {
            return Ok(self.clone());
        }
        let planes = self.numel() / (hp * wp);
        let mut shape = self.shape().to_vec();
        shape[r - 2] = h;
        shape[r - 1] = w;
        let data = crop_data(self.data(), planes, hp, wp, h, w);
        Ok(Tensor::op_result(
            shape,
            data,
            vec![self.clone()],
            Box::new(CropRule { h, w, hp, wp }),
        ))
    }
}

// ---------------------------------------------------------------------------
// softmax

struct SoftmaxRule {
    n: usize,
}
impl Backward for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, g: &[f64], out: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let n = self.n;
        let mut dx = vec![0.0; g.len()];
        for ((dx, g), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
            let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
            for i in 0..n {
                dx[i] = y[i] * (g[i] - dot);
            }
        }
        vec![Some(dx)]
    }
}

impl Tensor {
    /// Max-shifted softmax along the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape().last().expect("rank ≥ 1");
        let mut data = self.to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::op_result(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(SoftmaxRule { n }),
        )
    }
}
