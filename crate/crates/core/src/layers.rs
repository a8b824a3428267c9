//! Convolution, batch/instance normalization and activations, plus the
//! small parameter-container plumbing shared by the composite modules.

use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::tensor::{Backward, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Walks the trainable tensors of a module in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
    fn set_mode(&mut self, _mode: Mode) {}
}

pub fn named_params<P: Params + ?Sized>(module: &P) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, t| out.push((name, t.clone())));
    out
}

/// Number of scalar parameters found by enumerating the instantiated tensors.
pub fn enumerate_param_count<P: Params + ?Sized>(module: &P) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, t| n += t.numel());
    n
}

/// Overwrites parameters in visit order.
pub fn load_params<P: Params + ?Sized>(module: &mut P, values: &[Tensor]) -> Result<()> {
    let mut it = values.iter();
    let mut err = None;
    module.visit_mut("", &mut |name, t| match it.next() {
        Some(v) if v.shape() == t.shape() => *t = v.clone(),
        Some(v) => {
            err.get_or_insert(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                t.shape(),
                v.shape()
            )));
        }
        None => {
            err.get_or_insert(Error::Contract(format!("missing value for {name}")));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if it.next().is_some() {
        return Err(Error::Contract("more values than parameters".into()));
    }
    Ok(())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1, shape-preserving ("same") convolution.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            bias,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |n: usize| {
            let span = n + 2 * self.padding;
            if span < self.kernel || !(span - self.kernel).is_multiple_of(self.stride) {
                None
            } else {
                Some((span - self.kernel) / self.stride + 1)
            }
        };
        match (extent(h), extent(w)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => shape_err(format!(
                "conv k={} s={} p={} gives a non-integral output on {h}×{w}",
                self.kernel, self.stride, self.padding
            )),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + if self.bias { self.out_channels } else { 0 }
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let Geometry {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        let hw = ho * wo;
        for c in 0..cin {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * hw..][..hw];
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let dst = &mut row[oi * wo..(oi + 1) * wo];
                        if ii < 0 || ii as usize >= h {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * h + ii as usize) * w..][..w];
                        if stride == 1 {
                            // valid output columns map onto one contiguous run of the input row
                            let lo = pad.saturating_sub(kj).min(wo);
                            let hi = (w + pad).saturating_sub(kj).clamp(lo, wo);
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            let start = lo + kj - pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            continue;
                        }
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            *d = if jj < 0 || jj as usize >= w {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let Geometry {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        let hw = ho * wo;
        for c in 0..cin {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * hw..][..hw];
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        let base = (c * h + ii as usize) * w;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && (jj as usize) < w {
                                img[base + jj as usize] += row[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvRule {
    geo: Geometry,
    batch: usize,
    cout: usize,
    // im2col buffers per sample, kept for the weight gradient
    cols: Vec<f64>,
}

impl Backward for ConvRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, g: &[f64], _: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let geo = &self.geo;
        let ckk = geo.cin * geo.k * geo.k;
        let hw = geo.ho * geo.wo;
        let (x, weight) = (&p[0], &p[1]);
        let plane = geo.cin * geo.h * geo.w;
        let dx = x.is_tracked().then(|| {
            let mut dx = vec![0.0; x.numel()];
            dx.par_chunks_mut(plane).enumerate().for_each(|(b, dx_b)| {
                let gb = &g[b * self.cout * hw..(b + 1) * self.cout * hw];
                let mut dcols = vec![0.0; ckk * hw];
                gemm_tn_acc(self.cout, ckk, hw, weight.data(), gb, &mut dcols);
                geo.col2im(&dcols, dx_b);
            });
            dx
        });
        // per-sample partials summed in batch order keep the result deterministic
        let dw = weight.is_tracked().then(|| {
            let partials: Vec<Vec<f64>> = (0..self.batch)
                .into_par_iter()
                .map(|b| {
                    let gb = &g[b * self.cout * hw..(b + 1) * self.cout * hw];
                    let cols = &self.cols[b * ckk * hw..(b + 1) * ckk * hw];
                    let mut dw = vec![0.0; weight.numel()];
                    gemm_nt_acc(self.cout, hw, ckk, gb, cols, &mut dw);
                    dw
                })
                .collect();
            let mut dw = vec![0.0; weight.numel()];
            for p in partials {
                dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            dw
        });
        let mut out = vec![dx, dw];
        if let Some(bias) = p.get(2) {
            out.push(bias.is_tracked().then(|| {
                let mut db = vec![0.0; self.cout];
                for b in 0..self.batch {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[(b * self.cout + o) * hw..][..hw].iter().sum::<f64>();
                    }
                }
                db
            }));
        }
        out
    }
}

/// 2-D cross-correlation of a `B×Cin×H×W` input with `Cout×Cin×k×k` weights.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    if x.rank() != 4 {
        return shape_err(format!("conv2d expects B×C×H×W, got {:?}", x.shape()));
    }
    let (batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if cin != spec.in_channels {
        return shape_err(format!(
            "conv2d: input has {cin} channels, layer expects {}",
            spec.in_channels
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return shape_err(format!(
            "conv2d: weight {:?} does not match {:?}",
            weight.shape(),
            spec.weight_shape()
        ));
    }
    if spec.stride == 0 || spec.kernel == 0 {
        return shape_err("conv2d: zero stride or kernel");
    }
    match (bias, spec.bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => {}
        (None, false) => {}
        _ => return shape_err("conv2d: bias does not match the layer spec"),
    }
    let (ho, wo) = spec.output_extent(h, w)?;
    let geo = Geometry {
        cin,
        h,
        w,
        k: spec.kernel,
        stride: spec.stride,
        pad: spec.padding,
        ho,
        wo,
    };
    let cout = spec.out_channels;
    let ckk = cin * spec.kernel * spec.kernel;
    let hw = ho * wo;
    let mut cols = vec![0.0; batch * ckk * hw];
    let mut out = vec![0.0; batch * cout * hw];
    let plane = cin * h * w;
    out.par_chunks_mut(cout * hw)
        .zip(cols.par_chunks_mut(ckk * hw))
        .enumerate()
        .for_each(|(b, (out_b, cols_b))| {
            geo.im2col(&x.data()[b * plane..(b + 1) * plane], cols_b);
            if let Some(bias) = bias {
                for (o, &bv) in bias.data().iter().enumerate() {
                    out_b[o * hw..(o + 1) * hw].fill(bv);
                }
            }
            gemm_acc(cout, ckk, hw, weight.data(), cols_b, out_b);
        });
    let mut parents = vec![x.clone(), weight.clone()];
    parents.extend(bias.cloned());
    let needs_cols = weight.is_tracked();
    let rule = ConvRule {
        geo,
        batch,
        cout,
        cols: if needs_cols { cols } else { Vec::new() },
    };
    Ok(Tensor::op_result(
        vec![batch, cout, ho, wo],
        out,
        parents,
        Box::new(rule),
    ))
}

/// Convolution layer with its own parameters.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    /// Uniform init in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Conv2d {
        let bound = 1.0 / ((spec.in_channels * spec.kernel * spec.kernel) as f64).sqrt();
        let weight = Tensor::uniform(&spec.weight_shape(), bound, rng).tracked();
        let bias = spec
            .bias
            .then(|| Tensor::uniform(&[spec.out_channels], bound, rng).tracked());
        Conv2d { spec, weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), &self.spec)
    }

    pub fn zero_(&mut self) {
        self.weight = Tensor::zeros(self.weight.shape()).tracked();
        if let Some(b) = &mut self.bias {
            *b = Tensor::zeros(b.shape()).tracked();
        }
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// normalization

/// Standardizes each row of a `rows×n` buffer with population variance.
struct StandardizeRule {
    n: usize,
    inv_std: Vec<f64>,
}

impl Backward for StandardizeRule {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn backward(&self, g: &[f64], out: &Tensor, _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let n = self.n as f64;
        let mut dx = vec![0.0; g.len()];
        for (r, ((dx, g), y)) in dx
            .chunks_mut(self.n)
            .zip(g.chunks(self.n))
            .zip(out.data().chunks(self.n))
            .enumerate()
        {
            let mean_g = g.iter().sum::<f64>() / n;
            let mean_gy = g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / n;
            for i in 0..self.n {
                dx[i] = self.inv_std[r] * (g[i] - mean_g - y[i] * mean_gy);
            }
        }
        vec![Some(dx)]
    }
}

/// Per-row mean and population variance.
fn row_stats(data: &[f64], n: usize) -> Vec<(f64, f64)> {
    data.chunks(n)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, var)
        })
        .collect()
}

fn standardize_rows(x: &Tensor, n: usize, eps: f64) -> (Tensor, Vec<(f64, f64)>) {
    let stats = row_stats(x.data(), n);
    let inv_std: Vec<f64> = stats.iter().map(|&(_, v)| 1.0 / (v + eps).sqrt()).collect();
    let mut data = x.to_vec();
    for ((row, &(mean, _)), &s) in data.chunks_mut(n).zip(&stats).zip(&inv_std) {
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
    }
    let t = Tensor::op_result(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(StandardizeRule { n, inv_std }),
    );
    (t, stats)
}

struct ChannelAffineRule {
    channels: usize,
    inner: usize,
}

impl Backward for ChannelAffineRule {
    fn name(&self) -> &'static str {
        "channel_affine"
    }

    fn backward(&self, g: &[f64], _: &Tensor, p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (x, scale, shift) = (&p[0], &p[1], &p[2]);
        let (c, inner) = (self.channels, self.inner);
        let dx = x.is_tracked().then(|| {
            let mut dx = g.to_vec();
            for (blk, d) in dx.chunks_mut(inner).enumerate() {
                let s = scale.data()[blk % c];
                d.iter_mut().for_each(|v| *v *= s);
            }
            dx
        });
        let dscale = scale.is_tracked().then(|| {
            let mut ds = vec![0.0; c];
            for (blk, (gb, xb)) in g.chunks(inner).zip(x.data().chunks(inner)).enumerate() {
                ds[blk % c] += gb.iter().zip(xb).map(|(g, x)| g * x).sum::<f64>();
            }
            ds
        });
        let dshift = shift.is_tracked().then(|| {
            let mut ds = vec![0.0; c];
            for (blk, gb) in g.chunks(inner).enumerate() {
                ds[blk % c] += gb.iter().sum::<f64>();
            }
            ds
        });
        vec![dx, dscale, dshift]
    }
}

/// `y[b,c,…] = x[b,c,…]·scale[c] + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return shape_err("channel_affine expects B×C×…");
    }
    let c = x.shape()[1];
    if scale.shape() != [c] || shift.shape() != [c] {
        return shape_err(format!("channel_affine: per-channel terms must have shape [{c}]"));
    }
    let inner = x.numel() / (x.shape()[0] * c);
    let mut data = x.to_vec();
    for (blk, d) in data.chunks_mut(inner).enumerate() {
        let (s, t) = (scale.data()[blk % c], shift.data()[blk % c]);
        d.iter_mut().for_each(|v| *v = *v * s + t);
    }
    Ok(Tensor::op_result(
        x.shape().to_vec(),
        data,
        vec![x.clone(), scale.clone(), shift.clone()],
        Box::new(ChannelAffineRule { channels: c, inner }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalization layer state: affine parameters plus, for batch norm,
/// running statistics and a train/eval switch.
#[derive(Debug)]
pub struct NormState {
    pub kind: NormKind,
    pub eps: f64,
    pub gain: Tensor,
    pub shift: Tensor,
    pub momentum: f64,
    pub mode: Mode,
    running: Option<Mutex<RunningStats>>,
}

impl Clone for NormState {
    fn clone(&self) -> Self {
        NormState {
            kind: self.kind,
            eps: self.eps,
            gain: self.gain.clone(),
            shift: self.shift.clone(),
            momentum: self.momentum,
            mode: self.mode,
            running: self
                .running
                .as_ref()
                .map(|m| Mutex::new(m.lock().expect("poisoned").clone())),
        }
    }
}

impl NormState {
    pub fn batch(channels: usize) -> NormState {
        NormState {
            kind: NormKind::Batch,
            eps: DEFAULT_EPS,
            gain: Tensor::ones(&[channels]).tracked(),
            shift: Tensor::zeros(&[channels]).tracked(),
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Train,
            running: Some(Mutex::new(RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            })),
        }
    }

    pub fn instance(channels: usize) -> NormState {
        NormState {
            kind: NormKind::Instance,
            eps: DEFAULT_EPS,
            gain: Tensor::ones(&[channels]).tracked(),
            shift: Tensor::zeros(&[channels]).tracked(),
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Train,
            running: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.numel()
    }

    /// Snapshot of the running statistics (batch kind only).
    pub fn running(&self) -> Option<RunningStats> {
        self.running.as_ref().map(|m| m.lock().expect("poisoned").clone())
    }

    pub fn set_running(&mut self, stats: RunningStats) -> Result<()> {
        let c = self.channels();
        if stats.mean.len() != c || stats.var.len() != c || stats.var.iter().any(|v| *v < 0.0) {
            return Err(Error::Contract(
                "running statistics must be per-channel with var ≥ 0".into(),
            ));
        }
        match &mut self.running {
            Some(m) => {
                *m.get_mut().expect("poisoned") = stats;
                Ok(())
            }
            None => Err(Error::Contract(
                "instance normalization keeps no running statistics".into(),
            )),
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            NormKind::Instance => instance_norm(x, self),
            NormKind::Batch => batch_norm(x, self),
        }
    }
}

impl Params for NormState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "shift"), &mut self.shift);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

fn check_nchw(x: &Tensor, state: &NormState, op: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return shape_err(format!("{op} expects B×C×H×W, got {:?}", x.shape()));
    }
    let (b, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    if c != state.channels() {
        return shape_err(format!("{op}: input has {c} channels, layer has {}", state.channels()));
    }
    Ok((b, c, hw))
}

/// Instance normalization before the affine step: statistics per (sample, channel).
pub fn instance_standardize(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 4 {
        return shape_err(format!("instance_norm expects B×C×H×W, got {:?}", x.shape()));
    }
    let hw = x.shape()[2] * x.shape()[3];
    let (y, _) = standardize_rows(x, hw, eps);
    Ok(y)
}

pub fn instance_norm(x: &Tensor, state: &NormState) -> Result<Tensor> {
    if state.kind != NormKind::Instance {
        return Err(Error::Contract("instance_norm called with a batch-norm state".into()));
    }
    check_nchw(x, state, "instance_norm")?;
    let y = instance_standardize(x, state.eps)?;
    channel_affine(&y, &state.gain, &state.shift)
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// folds them into the running estimates; eval mode uses the running
/// estimates only.
pub fn batch_norm(x: &Tensor, state: &NormState) -> Result<Tensor> {
    if state.kind != NormKind::Batch {
        return Err(Error::Contract("batch_norm called with an instance-norm state".into()));
    }
    let (b, c, hw) = check_nchw(x, state, "batch_norm")?;
    let running = state.running.as_ref().expect("batch kind has running statistics");
    match state.mode {
        Mode::Train => {
            if b * hw < 2 {
                return Err(Error::Contract(format!(
                    "batch_norm in train mode needs at least two values per channel, got {}",
                    b * hw
                )));
            }
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let rows = x.permute(&[1, 0, 2, 3])?.reshape(&[c, b * hw])?;
            let (y, stats) = standardize_rows(&rows, b * hw, state.eps);
            {
                let mut r = running.lock().expect("poisoned");
                let m = state.momentum;
                for (i, &(mean, var)) in stats.iter().enumerate() {
                    r.mean[i] = (1.0 - m) * r.mean[i] + m * mean;
                    r.var[i] = (1.0 - m) * r.var[i] + m * var;
                }
            }
            let y = y.reshape(&[c, b, h, w])?.permute(&[1, 0, 2, 3])?;
            channel_affine(&y, &state.gain, &state.shift)
        }
        Mode::Eval => {
            let r = running.lock().expect("poisoned").clone();
            let inv: Vec<f64> = r.var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
            let offset: Vec<f64> = r.mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
            let y = channel_affine(x, &Tensor::new(&[c], inv)?, &Tensor::new(&[c], offset)?)?;
            channel_affine(&y, &state.gain, &state.shift)
        }
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.silu()
}

/// Softmax over the trailing axis.
pub fn softmax(x: &Tensor) -> Tensor {
    x.softmax_last()
}

// ---------------------------------------------------------------------------
// Conv-Norm-SiLU block

/// Bias-free convolution followed by a normalization layer and SiLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: NormState,
}

impl ConvNormAct {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, kind: NormKind, rng: &mut R) -> ConvNormAct {
        ConvNormAct::with_spec(ConvSpec::same(cin, cout, kernel, false), kind, rng)
    }

    pub fn with_spec<R: Rng + ?Sized>(spec: ConvSpec, kind: NormKind, rng: &mut R) -> ConvNormAct {
        let norm = match kind {
            NormKind::Batch => NormState::batch(spec.out_channels),
            NormKind::Instance => NormState::instance(spec.out_channels),
        };
        ConvNormAct {
            conv: Conv2d::new(spec, rng),
            norm,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu())
    }

    pub fn param_count(&self) -> usize {
        self.conv.spec.param_count() + self.norm.param_count()
    }
}

impl Params for ConvNormAct {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.norm.set_mode(mode);
    }
}
