//! Baseline bottleneck and the instance-specific bottleneck (ISB).
//!
//! The ISB adds a branch to the bottleneck input:
//!
//! ```text
//! x ─ 1×1 Conv-IN-SiLU (c→c₁) ─ reconstruct(K) ─ split Q,K,V ─ attention ─ reassemble ─ 3×3 Conv-IN-SiLU (c₂→c) ─┐
//! x ─ 3×3 Conv-BN-SiLU ─ 3×3 Conv-BN-SiLU ─ (+x) ───────────────────────────────────────────────────────────────(+)─ y
//! ```
//!
//! with `c₂ = ⌊c/s⌋` and `c₁ = 3·c₂`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, DEFAULT_PATCH};
use crate::error::{shape_err, Error, Result};
use crate::layers::{join, ConvNormAct, Mode, NormKind, Params};
use crate::tensor::Tensor;

pub const DEFAULT_RATIO: usize = 8;

/// Channel widths `(c₁, c₂, c₃)` of the instance-specific branch.
pub fn derive_channels(c: usize, s: usize) -> Result<(usize, usize, usize)> {
    if s == 0 {
        return Err(Error::Config("compression ratio must be positive".into()));
    }
    let c2 = c / s;
    if c2 == 0 {
        return Err(Error::Config(format!("⌊{c}/{s}⌋ = 0 leaves no attention channels")));
    }
    Ok((3 * c2, c2, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsbConfig {
    pub c: usize,
    pub s: usize,
    pub k: usize,
}

impl IsbConfig {
    pub fn new(c: usize, s: usize, k: usize) -> Result<IsbConfig> {
        derive_channels(c, s)?;
        if k == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(IsbConfig { c, s, k })
    }

    pub fn with_defaults(c: usize) -> Result<IsbConfig> {
        IsbConfig::new(c, DEFAULT_RATIO, DEFAULT_PATCH)
    }

    pub fn c1(&self) -> usize {
        3 * self.c2()
    }

    pub fn c2(&self) -> usize {
        self.c / self.s
    }

    pub fn c3(&self) -> usize {
        self.c
    }
}

/// The instance-specific branch: compression, patch attention, expansion (CIS).
#[derive(Debug, Clone)]
pub struct IsbBranch {
    pub cfg: IsbConfig,
    pub compress: ConvNormAct,
    pub expand: ConvNormAct,
}

/// One named stage of a forward pass and its output shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub stage: String,
    pub shape: Vec<usize>,
}

impl Stage {
    fn of(stage: &str, t: &Tensor) -> Stage {
        Stage {
            stage: stage.to_string(),
            shape: t.shape().to_vec(),
        }
    }
}

impl IsbBranch {
    pub fn new<R: Rng + ?Sized>(cfg: IsbConfig, rng: &mut R) -> IsbBranch {
        IsbBranch {
            cfg,
            compress: ConvNormAct::new(cfg.c, cfg.c1(), 1, NormKind::Instance, rng),
            expand: ConvNormAct::new(cfg.c2(), cfg.c3(), 3, NormKind::Instance, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None)
    }

    /// Forward pass that also records every intermediate shape.
    pub fn trace(&self, x: &Tensor) -> Result<(Tensor, Vec<Stage>)> {
        let mut stages = Vec::new();
        let y = self.run(x, Some(&mut stages))?;
        Ok((y, stages))
    }

    fn run(&self, x: &Tensor, mut log: Option<&mut Vec<Stage>>) -> Result<Tensor> {
        let tracing = log.is_some();
        let mut record = |name: &str, t: &Tensor| {
            if let Some(l) = log.as_deref_mut() {
                l.push(Stage::of(name, t));
            }
        };
        if x.rank() != 4 || x.shape()[1] != self.cfg.c {
            return shape_err(format!("ISB branch expects B×{}×H×W, got {:?}", self.cfg.c, x.shape()));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        record("input", x);
        let compressed = self.compress.forward(x)?;
        record("compress", &compressed);
        let patches = if tracing {
            let rec = attention::reconstruct_stages(&compressed, self.cfg.k)?;
            record("unfold", &rec.unfolded);
            record("reshape", &rec.split);
            rec.output
        } else {
            attention::reconstruct(&compressed, self.cfg.k)?
        };
        record("reconstruct", &patches);
        let (q, k, v) = attention::split_qkv(&patches)?;
        record("q", &q);
        record("k", &k);
        record("v", &v);
        let f = attention::fcgsa(&q, &k, &v)?;
        record("attention", &f);
        let maps = attention::reassemble(&f, self.cfg.k, h, w)?;
        record("reassemble", &maps);
        let y = self.expand.forward(&maps)?;
        record("expand", &y);
        Ok(y)
    }

    /// `c·c₁ + 9·c₂·c + 2c₁ + 2c`.
    pub fn closed_form_params(cfg: &IsbConfig) -> usize {
        let (c, c1, c2) = (cfg.c, cfg.c1(), cfg.c2());
        c * c1 + 9 * c2 * c + 2 * c1 + 2 * c
    }
}

impl Params for IsbBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.compress.visit(&join(prefix, "compress"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.compress.visit_mut(&join(prefix, "compress"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.compress.set_mode(mode);
        self.expand.set_mode(mode);
    }
}

/// YOLOv8-style bottleneck (two 3×3 Conv-BN-SiLU stages with optional
/// residual), optionally carrying an ISB branch fused by addition.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub channels: usize,
    pub cv1: ConvNormAct,
    pub cv2: ConvNormAct,
    pub shortcut: bool,
    pub isb: Option<IsbBranch>,
}

impl Bottleneck {
    pub fn baseline<R: Rng + ?Sized>(c: usize, shortcut: bool, rng: &mut R) -> Bottleneck {
        Bottleneck {
            channels: c,
            cv1: ConvNormAct::new(c, c, 3, NormKind::Batch, rng),
            cv2: ConvNormAct::new(c, c, 3, NormKind::Batch, rng),
            shortcut,
            isb: None,
        }
    }

    pub fn with_isb<R: Rng + ?Sized>(cfg: IsbConfig, shortcut: bool, rng: &mut R) -> Bottleneck {
        let mut b = Bottleneck::baseline(cfg.c, shortcut, rng);
        b.isb = Some(IsbBranch::new(cfg, rng));
        b
    }

    /// Main path only, ignoring any ISB branch.
    pub fn forward_baseline(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return shape_err(format!(
                "bottleneck expects B×{}×H×W, got {:?}",
                self.channels,
                x.shape()
            ));
        }
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.shortcut {
            x.add(&y)
        } else {
            Ok(y)
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_baseline(x)?;
        match &self.isb {
            Some(branch) => y.add(&branch.forward(x)?),
            None => Ok(y),
        }
    }
}

impl Params for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
        if let Some(b) = &self.isb {
            b.visit(&join(prefix, "isb"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
        if let Some(b) = &mut self.isb {
            b.visit_mut(&join(prefix, "isb"), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.cv1.set_mode(mode);
        self.cv2.set_mode(mode);
        if let Some(b) = &mut self.isb {
            b.set_mode(mode);
        }
    }
}
