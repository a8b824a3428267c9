//! A desk-scale grid-detection task used to check that gradients flow
//! through the bottleneck and head variants and that training descends.
//!
//! Images hold axis-aligned rectangles whose color encodes the class. Each
//! rectangle is assigned to the stride-aligned grid cell containing its
//! center; a cell holds at most one rectangle.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::error::{shape_err, Error, Result};
use crate::head::{DetectHead, HeadConfig, HeadOutput, HeadVariant};
use crate::isb::{Bottleneck, IsbConfig};
use crate::layers::{join, ConvNormAct, Mode, NormKind, Params};
use crate::tensor::{backward, Tensor};

/// Box target channels: center offset within the cell (x, y) and size relative to the image (w, h).
pub const BOX_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataConfig {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub stride: usize,
    /// Rectangles per image are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            samples: 64,
            height: 32,
            width: 32,
            classes: 2,
            stride: 4,
            max_objects: 3,
            min_side: 4,
            max_side: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `classes×G_h×G_w` one-hot class targets; all zero on background cells.
    pub cls: Tensor,
    /// `4×G_h×G_w` box targets, zero on background cells.
    pub boxes: Tensor,
    /// `G_h×G_w`, 1 on cells holding an object.
    pub objectness: Tensor,
}

fn class_color(class: usize, classes: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.2, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
    ];
    if classes <= PALETTE.len() {
        return PALETTE[class];
    }
    // spread hues evenly
    let h = class as f64 / classes as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

const PLACEMENT_RETRIES: usize = 200;

/// Deterministic synthetic dataset.
pub fn gen_synthetic(cfg: &ToyDataConfig) -> Result<Vec<ToySample>> {
    let ToyDataConfig {
        samples,
        height: h,
        width: w,
        classes,
        stride,
        max_objects,
        min_side,
        max_side,
        seed,
    } = *cfg;
    if classes == 0 || stride == 0 || h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} must be a positive multiple of stride {stride} and classes ≥ 1"
        )));
    }
    if min_side == 0 || min_side > max_side || max_side > h.min(w) || max_objects == 0 {
        return Err(Error::Config(
            "rectangle sides must satisfy 1 ≤ min ≤ max ≤ image side".into(),
        ));
    }
    let (gh, gw) = (h / stride, w / stride);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for n in 0..samples {
        let mut image = vec![0.0; 3 * h * w];
        for v in image.iter_mut() {
            *v = rng.gen_range(0.0..0.05);
        }
        let mut cls = vec![0.0; classes * gh * gw];
        let mut boxes = vec![0.0; BOX_CHANNELS * gh * gw];
        let mut obj = vec![0.0; gh * gw];
        let count = rng.gen_range(1..=max_objects);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let rw = rng.gen_range(min_side..=max_side);
                let rh = rng.gen_range(min_side..=max_side);
                let x0 = rng.gen_range(0..=w - rw);
                let y0 = rng.gen_range(0..=h - rh);
                let cx = x0 as f64 + rw as f64 / 2.0;
                let cy = y0 as f64 + rh as f64 / 2.0;
                let (gx, gy) = (
                    ((cx / stride as f64) as usize).min(gw - 1),
                    ((cy / stride as f64) as usize).min(gh - 1),
                );
                let cell = gy * gw + gx;
                if obj[cell] != 0.0 {
                    continue;
                }
                let class = rng.gen_range(0..classes);
                let color = class_color(class, classes);
                for (ch, &c) in color.iter().enumerate() {
                    for y in y0..y0 + rh {
                        image[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + rw].fill(c);
                    }
                }
                obj[cell] = 1.0;
                cls[class * gh * gw + cell] = 1.0;
                let target = [
                    cx / stride as f64 - gx as f64,
                    cy / stride as f64 - gy as f64,
                    rw as f64 / w as f64,
                    rh as f64 / h as f64,
                ];
                for (ch, t) in target.into_iter().enumerate() {
                    boxes[ch * gh * gw + cell] = t;
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "sample {n}: no collision-free placement after {PLACEMENT_RETRIES} attempts"
                )));
            }
        }
        out.push(ToySample {
            image: Tensor::new(&[3, h, w], image)?,
            cls: Tensor::new(&[classes, gh, gw], cls)?,
            boxes: Tensor::new(&[BOX_CHANNELS, gh, gw], boxes)?,
            objectness: Tensor::new(&[gh, gw], obj)?,
        });
    }
    Ok(out)
}

/// Batched targets in `B×…` layout.
#[derive(Debug, Clone)]
pub struct ToyTargets {
    pub cls: Tensor,
    pub boxes: Tensor,
    /// Objectness repeated over the box channels, `B×4×G_h×G_w`.
    pub box_mask: Tensor,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(parts.len() * first.numel());
    for p in parts {
        if p.shape() != first.shape() {
            return shape_err("stack: ragged batch");
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

/// Stacks samples into an image batch and its targets.
pub fn collate(samples: &[&ToySample]) -> Result<(Tensor, ToyTargets)> {
    let images = stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let cls = stack(&samples.iter().map(|s| &s.cls).collect::<Vec<_>>())?;
    let boxes = stack(&samples.iter().map(|s| &s.boxes).collect::<Vec<_>>())?;
    let mut mask = Vec::with_capacity(boxes.numel());
    for s in samples {
        for _ in 0..BOX_CHANNELS {
            mask.extend_from_slice(s.objectness.data());
        }
    }
    let box_mask = Tensor::new(boxes.shape(), mask)?;
    Ok((images, ToyTargets { cls, boxes, box_mask }))
}

/// Mean binary cross-entropy over every class logit plus mean L1 box error
/// over the box values of object cells.
pub fn toy_loss(pred: &HeadOutput, target: &ToyTargets) -> Result<Tensor> {
    let level = match pred.levels.as_slice() {
        [l] => l,
        _ => return shape_err(format!("toy loss expects one head level, got {}", pred.levels.len())),
    };
    if level.cls.shape() != target.cls.shape() || level.boxes.shape() != target.boxes.shape() {
        return shape_err(format!(
            "prediction {:?}/{:?} vs target {:?}/{:?}",
            level.cls.shape(),
            level.boxes.shape(),
            target.cls.shape(),
            target.boxes.shape()
        ));
    }
    // softplus(x) − x·t is the logit form of −t·ln σ(x) − (1−t)·ln(1−σ(x))
    let bce = level.cls.softplus().sub(&level.cls.mul(&target.cls)?)?.mean();
    let positives: f64 = target.box_mask.data().iter().sum();
    let l1 = level
        .boxes
        .sub(&target.boxes)?
        .abs()
        .mul(&target.box_mask)?
        .sum()
        .scale(1.0 / positives.max(1.0));
    bce.add(&l1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Channels entering the bottlenecks and the head.
    pub width: usize,
    pub blocks: usize,
    pub isb: bool,
    pub ratio: usize,
    pub patch: usize,
    pub head: HeadVariant,
    pub hidden: usize,
    pub classes: usize,
}

impl ToyModelConfig {
    pub fn baseline(classes: usize) -> ToyModelConfig {
        ToyModelConfig {
            width: 16,
            blocks: 1,
            isb: false,
            ratio: 8,
            patch: 4,
            head: HeadVariant::Baseline,
            hidden: 16,
            classes,
        }
    }

    pub fn instance_specific(classes: usize) -> ToyModelConfig {
        ToyModelConfig {
            isb: true,
            head: HeadVariant::Isadh,
            ..ToyModelConfig::baseline(classes)
        }
    }
}

/// `B×C×H×W` to `B×(C·s²)×(H/s)×(W/s)` by moving each `s×s` block into channels.
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let unfolded = attention::unfold_patches(x, s)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    unfolded.reshape(&[b, c * s * s, h / s, w / s])
}

/// Space-to-depth stem (stride 4), a stack of bottlenecks and a single-level head.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ToyModelConfig,
    pub stem: Vec<ConvNormAct>,
    pub blocks: Vec<Bottleneck>,
    pub head: DetectHead,
}

pub const TOY_STRIDE: usize = 4;

impl ToyModel {
    pub fn new(cfg: ToyModelConfig, seed: u64) -> Result<ToyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.width;
        let packed = 3 * TOY_STRIDE * TOY_STRIDE;
        let stem = vec![
            ConvNormAct::new(packed, w / 2, 3, NormKind::Batch, &mut rng),
            ConvNormAct::new(w / 2, w, 3, NormKind::Batch, &mut rng),
        ];
        let blocks = (0..cfg.blocks)
            .map(|_| -> Result<Bottleneck> {
                Ok(if cfg.isb {
                    Bottleneck::with_isb(IsbConfig::new(w, cfg.ratio, cfg.patch)?, true, &mut rng)
                } else {
                    Bottleneck::baseline(w, true, &mut rng)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_cfg = HeadConfig {
            level_channels: vec![w],
            nc: cfg.classes,
            reg_max: 1,
            c2: cfg.hidden,
            c3: cfg.hidden,
            strides: vec![TOY_STRIDE],
        };
        let head = DetectHead::new(head_cfg, cfg.head, &mut rng)?;
        Ok(ToyModel {
            cfg,
            stem,
            blocks,
            head,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<HeadOutput> {
        let mut x = space_to_depth(images, TOY_STRIDE)?;
        for s in &self.stem {
            x = s.forward(&x)?;
        }
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.head.forward(&[x])
    }
}

impl Params for ToyModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, s) in self.stem.iter().enumerate() {
            s.visit(&join(prefix, &format!("stem{i}")), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, s) in self.stem.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stem{i}")), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.stem.iter_mut().for_each(|s| s.set_mode(mode));
        self.blocks.iter_mut().for_each(|b| b.set_mode(mode));
        self.head.set_mode(mode);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Heavy-ball momentum; `None` for plain gradient descent.
    pub momentum: Option<f64>,
    /// Mini-batch size; `None` uses the whole dataset every step.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 0.05,
            momentum: Some(0.9),
            batch_size: None,
            seed: 0,
        }
    }
}

/// Per-step losses plus how many steps each parameter received a nonzero gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// `(parameter name, steps with a nonzero gradient)` over the first ten steps.
    pub early_activity: Vec<(String, usize)>,
}

const ACTIVITY_WINDOW: usize = 10;

/// SGD over all parameters. Each recorded loss is the one evaluated before that step's update.
pub fn train(model: &mut ToyModel, data: &[ToySample], cfg: &TrainConfig) -> Result<TrainLog> {
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be finite and ≥ 0, got {}",
            cfg.lr
        )));
    }
    if cfg.steps == 0 || data.is_empty() {
        return Err(Error::Config("training needs at least one step and one sample".into()));
    }
    let batch = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut velocity: HashMap<String, Vec<f64>> = HashMap::new();
    let mut activity: Vec<(String, usize)> = Vec::new();
    model.visit("", &mut |name, _| activity.push((name, 0)));
    let mut losses = Vec::with_capacity(cfg.steps);
    model.set_mode(Mode::Train);

    let full = (batch == data.len())
        .then(|| collate(&data.iter().collect::<Vec<_>>()))
        .transpose()?;
    for step in 0..cfg.steps {
        let owned;
        let (images, targets) = match &full {
            Some(b) => b,
            None => {
                if cursor + batch > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let picked: Vec<&ToySample> = order[cursor..cursor + batch].iter().map(|&i| &data[i]).collect();
                cursor += batch;
                owned = collate(&picked)?;
                &owned
            }
        };
        let loss = toy_loss(&model.forward(images)?, targets)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        losses.push(value);
        let grads = backward(&loss)?;
        let mut idx = 0;
        model.visit_mut("", &mut |name, p| {
            let g = grads.wrt(p);
            if step < ACTIVITY_WINDOW && g.data().iter().any(|v| *v != 0.0) {
                activity[idx].1 += 1;
            }
            idx += 1;
            let update: Vec<f64> = match cfg.momentum {
                Some(mu) => {
                    let v = velocity.entry(name).or_insert_with(|| vec![0.0; p.numel()]);
                    for (vi, gi) in v.iter_mut().zip(g.data()) {
                        *vi = mu * *vi + gi;
                    }
                    v.clone()
                }
                None => g.to_vec(),
            };
            let next: Vec<f64> = p.data().iter().zip(&update).map(|(w, u)| w - cfg.lr * u).collect();
            *p = p.with_values(next).expect("shape unchanged");
        });
    }
    Ok(TrainLog {
        losses,
        early_activity: activity,
    })
}
