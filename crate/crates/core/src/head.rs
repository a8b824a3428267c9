//! Decoupled detection heads: the YOLOv8 baseline and the instance-specific
//! asymmetric decoupled head (ISADH).
//!
//! Per feature level the baseline runs two parallel branches,
//!
//! ```text
//! cls: 3×3 CBS (cin→C3) → 3×3 CBS (C3→C3) → 1×1 conv (C3→nc)
//! box: 3×3 CBS (cin→C2) → 3×3 CBS (C2→C2) → 1×1 conv (C2→4·reg_max)
//! ```
//!
//! where CBS is Conv-BN-SiLU. ISADH shrinks both hidden box convs to 1×1
//! and gives each branch a parallel 1×1 Conv-IN-SiLU instance path whose
//! output is added to the branch's second hidden output before the final
//! predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{join, Conv2d, ConvNormAct, ConvSpec, Mode, NormKind, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub level_channels: Vec<usize>,
    pub nc: usize,
    pub reg_max: usize,
    /// Box-branch hidden width.
    pub c2: usize,
    /// Classification-branch hidden width.
    pub c3: usize,
    pub strides: Vec<usize>,
}

impl HeadConfig {
    /// Hidden widths from the YOLOv8 rule:
    /// `C2 = max(16, cin₀/4, 4·reg_max)`, `C3 = max(cin₀, min(nc, 100))`.
    pub fn yolov8(level_channels: Vec<usize>, nc: usize, reg_max: usize, strides: Vec<usize>) -> Result<HeadConfig> {
        let cin0 = *level_channels
            .first()
            .ok_or_else(|| Error::Config("head needs at least one level".into()))?;
        let cfg = HeadConfig {
            c2: 16.max(cin0 / 4).max(4 * reg_max),
            c3: cin0.max(nc.min(100)),
            level_channels,
            nc,
            reg_max,
            strides,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Three-level P3/P4/P5 head with strides 8, 16, 32.
    pub fn three_level(level_channels: [usize; 3], nc: usize, reg_max: usize) -> Result<HeadConfig> {
        HeadConfig::yolov8(level_channels.to_vec(), nc, reg_max, vec![8, 16, 32])
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_channels.is_empty() || self.level_channels.contains(&0) {
            return Err(Error::Config("level channels must be positive".into()));
        }
        if self.strides.len() != self.level_channels.len() || self.strides.contains(&0) {
            return Err(Error::Config("one positive stride per level required".into()));
        }
        if self.nc == 0 || self.reg_max == 0 || self.c2 == 0 || self.c3 == 0 {
            return Err(Error::Config("nc, reg_max, C2 and C3 must be positive".into()));
        }
        Ok(())
    }

    pub fn box_channels(&self) -> usize {
        4 * self.reg_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// YOLOv8 decoupled head.
    Baseline,
    /// 1×1 box branch, no instance paths.
    Asymmetric,
    /// 1×1 box branch plus instance-specific paths.
    Isadh,
}

impl HeadVariant {
    fn box_kernel(self) -> usize {
        match self {
            HeadVariant::Baseline => 3,
            HeadVariant::Asymmetric | HeadVariant::Isadh => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevelHead {
    pub cls: [ConvNormAct; 2],
    pub cls_pred: Conv2d,
    pub boxes: [ConvNormAct; 2],
    pub box_pred: Conv2d,
    pub cls_instance: Option<ConvNormAct>,
    pub box_instance: Option<ConvNormAct>,
}

#[derive(Debug, Clone)]
pub struct LevelOutput {
    /// `B×nc×H×W` logits.
    pub cls: Tensor,
    /// `B×(4·reg_max)×H×W` box distribution.
    pub boxes: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub levels: Vec<LevelOutput>,
}

#[derive(Debug, Clone)]
pub struct DetectHead {
    pub cfg: HeadConfig,
    pub variant: HeadVariant,
    pub levels: Vec<LevelHead>,
}

impl DetectHead {
    pub fn new<R: Rng + ?Sized>(cfg: HeadConfig, variant: HeadVariant, rng: &mut R) -> Result<DetectHead> {
        cfg.validate()?;
        let (c2, c3) = (cfg.c2, cfg.c3);
        let bk = variant.box_kernel();
        let levels = cfg
            .level_channels
            .iter()
            .map(|&cin| {
                let instance = variant == HeadVariant::Isadh;
                LevelHead {
                    cls: [
                        ConvNormAct::new(cin, c3, 3, NormKind::Batch, rng),
                        ConvNormAct::new(c3, c3, 3, NormKind::Batch, rng),
                    ],
                    cls_pred: Conv2d::new(ConvSpec::same(c3, cfg.nc, 1, true), rng),
                    boxes: [
                        ConvNormAct::new(cin, c2, bk, NormKind::Batch, rng),
                        ConvNormAct::new(c2, c2, bk, NormKind::Batch, rng),
                    ],
                    box_pred: Conv2d::new(ConvSpec::same(c2, cfg.box_channels(), 1, true), rng),
                    cls_instance: instance.then(|| ConvNormAct::new(cin, c3, 1, NormKind::Instance, rng)),
                    box_instance: instance.then(|| ConvNormAct::new(cin, c2, 1, NormKind::Instance, rng)),
                }
            })
            .collect();
        Ok(DetectHead { cfg, variant, levels })
    }

    pub fn forward(&self, features: &[Tensor]) -> Result<HeadOutput> {
        if features.len() != self.levels.len() {
            return shape_err(format!(
                "head has {} levels, got {} feature maps",
                self.levels.len(),
                features.len()
            ));
        }
        let mut levels = Vec::with_capacity(features.len());
        for (i, (x, level)) in features.iter().zip(&self.levels).enumerate() {
            let cin = self.cfg.level_channels[i];
            if x.rank() != 4 || x.shape()[1] != cin {
                return shape_err(format!("level {i} expects B×{cin}×H×W, got {:?}", x.shape()));
            }
            let mut cls = level.cls[1].forward(&level.cls[0].forward(x)?)?;
            if let Some(path) = &level.cls_instance {
                cls = cls.add(&path.forward(x)?)?;
            }
            let mut boxes = level.boxes[1].forward(&level.boxes[0].forward(x)?)?;
            if let Some(path) = &level.box_instance {
                boxes = boxes.add(&path.forward(x)?)?;
            }
            levels.push(LevelOutput {
                cls: level.cls_pred.forward(&cls)?,
                boxes: level.box_pred.forward(&boxes)?,
            });
        }
        Ok(HeadOutput { levels })
    }

    /// The same head with its instance paths removed: the asymmetric-only reduction.
    pub fn without_instance_paths(&self) -> DetectHead {
        let mut h = self.clone();
        for l in &mut h.levels {
            l.cls_instance = None;
            l.box_instance = None;
        }
        if h.variant == HeadVariant::Isadh {
            h.variant = HeadVariant::Asymmetric;
        }
        h
    }

    /// Zeroes the convolution weights of every instance path.
    pub fn zero_instance_paths(&mut self) {
        for l in &mut self.levels {
            for p in [&mut l.cls_instance, &mut l.box_instance].into_iter().flatten() {
                p.conv.zero_();
            }
        }
    }
}

/// Runs a baseline-variant head.
pub fn head_baseline(features: &[Tensor], head: &DetectHead) -> Result<HeadOutput> {
    if head.variant != HeadVariant::Baseline {
        return Err(Error::Contract(format!(
            "expected a baseline head, got {:?}",
            head.variant
        )));
    }
    head.forward(features)
}

/// Runs an ISADH-variant head.
pub fn head_isadh(features: &[Tensor], head: &DetectHead) -> Result<HeadOutput> {
    if head.variant != HeadVariant::Isadh {
        return Err(Error::Contract(format!(
            "expected an ISADH head, got {:?}",
            head.variant
        )));
    }
    head.forward(features)
}

/// Parameter count of a head, summed from closed-form per-layer terms.
pub fn head_param_closed_form(cfg: &HeadConfig, variant: HeadVariant) -> usize {
    let (c2, c3, nc, r4) = (cfg.c2, cfg.c3, cfg.nc, 4 * cfg.reg_max);
    let bk2 = variant.box_kernel().pow(2);
    cfg.level_channels
        .iter()
        .map(|&cin| {
            let cls = 9 * cin * c3 + 2 * c3 + 9 * c3 * c3 + 2 * c3 + c3 * nc + nc;
            let boxes = bk2 * cin * c2 + 2 * c2 + bk2 * c2 * c2 + 2 * c2 + c2 * r4 + r4;
            let instance = if variant == HeadVariant::Isadh {
                cin * c3 + 2 * c3 + cin * c2 + 2 * c2
            } else {
                0
            };
            cls + boxes + instance
        })
        .sum()
}

impl Params for LevelHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.cls[0].visit(&join(prefix, "cls.0"), f);
        self.cls[1].visit(&join(prefix, "cls.1"), f);
        self.cls_pred.visit(&join(prefix, "cls.pred"), f);
        self.boxes[0].visit(&join(prefix, "box.0"), f);
        self.boxes[1].visit(&join(prefix, "box.1"), f);
        self.box_pred.visit(&join(prefix, "box.pred"), f);
        if let Some(p) = &self.cls_instance {
            p.visit(&join(prefix, "cls.instance"), f);
        }
        if let Some(p) = &self.box_instance {
            p.visit(&join(prefix, "box.instance"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.cls[0].visit_mut(&join(prefix, "cls.0"), f);
        self.cls[1].visit_mut(&join(prefix, "cls.1"), f);
        self.cls_pred.visit_mut(&join(prefix, "cls.pred"), f);
        self.boxes[0].visit_mut(&join(prefix, "box.0"), f);
        self.boxes[1].visit_mut(&join(prefix, "box.1"), f);
        self.box_pred.visit_mut(&join(prefix, "box.pred"), f);
        if let Some(p) = &mut self.cls_instance {
            p.visit_mut(&join(prefix, "cls.instance"), f);
        }
        if let Some(p) = &mut self.box_instance {
            p.visit_mut(&join(prefix, "box.instance"), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        for b in self.cls.iter_mut().chain(self.boxes.iter_mut()) {
            b.set_mode(mode);
        }
        for p in [&mut self.cls_instance, &mut self.box_instance].into_iter().flatten() {
            p.set_mode(mode);
        }
    }
}

impl Params for DetectHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.levels.iter().enumerate() {
            l.visit(&join(prefix, &format!("level{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.levels.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("level{i}")), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.levels.iter_mut().for_each(|l| l.set_mode(mode));
    }
}
