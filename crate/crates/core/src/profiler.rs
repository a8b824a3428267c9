//! Analytic parameter and FLOP counting.
//!
//! Modules are described by a [`ModuleDesc`], expanded into a flat list of
//! layers, and costed layer by layer. Conventions:
//!
//! * convolution: `factor · k² · cin · cout · H' · W'` FLOPs, bias adds not counted
//! * attention: `factor · K² · 2 · c₂² · L + α · c₂² · K²` FLOPs per sample
//! * normalization affine terms count `2·c` parameters; normalization,
//!   activation and elementwise fusion cost no FLOPs
//!
//! With the default `α = 0` the attention count is exactly linear in `L`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::PatchGrid;
use crate::error::{shape_err, Error, Result};
use crate::head::{HeadConfig, HeadVariant};
use crate::isb::IsbConfig;
use crate::layers::{ConvSpec, DEFAULT_EPS, DEFAULT_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopConvention {
    /// FLOPs counted per multiply-add.
    pub macs_factor: u64,
    /// Softmax cost per attention weight.
    pub softmax_alpha: u64,
    /// Channel rounding multiple used by width scaling.
    pub channel_multiple: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
}

impl Default for FlopConvention {
    fn default() -> Self {
        FlopConvention {
            macs_factor: 2,
            softmax_alpha: 0,
            channel_multiple: 8,
            norm_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize) -> InputShape {
        InputShape {
            batch: 1,
            height,
            width,
        }
    }
}

/// A module to be costed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "module", rename_all = "snake_case")]
pub enum ModuleDesc {
    Conv {
        spec: ConvSpec,
    },
    Attention {
        k: usize,
        c2: usize,
    },
    IsbBranch {
        cfg: IsbConfig,
    },
    Bottleneck {
        c: usize,
        shortcut: bool,
        isb: Option<IsbConfig>,
    },
    Head {
        cfg: HeadConfig,
        variant: HeadVariant,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv(ConvSpec),
    Norm { channels: usize },
    Attention { k: usize, c2: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    name: String,
    kind: LayerKind,
    /// Spatial extent of the layer input, when known.
    hw: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub module: ModuleDesc,
    pub input: Option<InputShape>,
    pub convention: FlopConvention,
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

fn conv_layer(
    layers: &mut Vec<Layer>,
    name: String,
    spec: ConvSpec,
    hw: Option<(usize, usize)>,
) -> Result<Option<(usize, usize)>> {
    let out = hw.map(|(h, w)| spec.output_extent(h, w)).transpose()?;
    layers.push(Layer {
        name,
        kind: LayerKind::Conv(spec),
        hw,
    });
    Ok(out)
}

fn cna_layers(
    layers: &mut Vec<Layer>,
    name: &str,
    spec: ConvSpec,
    hw: Option<(usize, usize)>,
) -> Result<Option<(usize, usize)>> {
    let out = conv_layer(layers, format!("{name}.conv"), spec, hw)?;
    layers.push(Layer {
        name: format!("{name}.norm"),
        kind: LayerKind::Norm {
            channels: spec.out_channels,
        },
        hw: out,
    });
    Ok(out)
}

fn isb_layers(layers: &mut Vec<Layer>, prefix: &str, cfg: &IsbConfig, hw: Option<(usize, usize)>) -> Result<()> {
    let hw = cna_layers(
        layers,
        &format!("{prefix}compress"),
        ConvSpec::same(cfg.c, cfg.c1(), 1, false),
        hw,
    )?;
    layers.push(Layer {
        name: format!("{prefix}attention"),
        kind: LayerKind::Attention { k: cfg.k, c2: cfg.c2() },
        hw,
    });
    cna_layers(
        layers,
        &format!("{prefix}expand"),
        ConvSpec::same(cfg.c2(), cfg.c, 3, false),
        hw,
    )?;
    Ok(())
}

fn expand(desc: &ModuleDesc, input: Option<InputShape>) -> Result<Vec<Layer>> {
    let hw = input.map(|i| (i.height, i.width));
    let mut layers = Vec::new();
    match desc {
        ModuleDesc::Conv { spec } => {
            conv_layer(&mut layers, "conv".into(), *spec, hw)?;
        }
        ModuleDesc::Attention { k, c2 } => layers.push(Layer {
            name: "attention".into(),
            kind: LayerKind::Attention { k: *k, c2: *c2 },
            hw,
        }),
        ModuleDesc::IsbBranch { cfg } => isb_layers(&mut layers, "isb.", cfg, hw)?,
        ModuleDesc::Bottleneck { c, isb, .. } => {
            let mid = cna_layers(&mut layers, "cv1", ConvSpec::same(*c, *c, 3, false), hw)?;
            cna_layers(&mut layers, "cv2", ConvSpec::same(*c, *c, 3, false), mid)?;
            if let Some(cfg) = isb {
                if cfg.c != *c {
                    return Err(Error::Config(format!(
                        "ISB width {} differs from bottleneck width {c}",
                        cfg.c
                    )));
                }
                isb_layers(&mut layers, "isb.", cfg, hw)?;
            }
        }
        ModuleDesc::Head { cfg, variant } => {
            cfg.validate()?;
            let bk = if *variant == HeadVariant::Baseline { 3 } else { 1 };
            for (i, (&cin, &stride)) in cfg.level_channels.iter().zip(&cfg.strides).enumerate() {
                let lhw = match hw {
                    Some((h, w)) if h % stride == 0 && w % stride == 0 => Some((h / stride, w / stride)),
                    Some((h, w)) => {
                        return shape_err(format!("input {h}×{w} is not divisible by level stride {stride}"))
                    }
                    None => None,
                };
                let p = format!("level{i}");
                let m = cna_layers(
                    &mut layers,
                    &format!("{p}.cls.0"),
                    ConvSpec::same(cin, cfg.c3, 3, false),
                    lhw,
                )?;
                let m = cna_layers(
                    &mut layers,
                    &format!("{p}.cls.1"),
                    ConvSpec::same(cfg.c3, cfg.c3, 3, false),
                    m,
                )?;
                conv_layer(
                    &mut layers,
                    format!("{p}.cls.pred"),
                    ConvSpec::same(cfg.c3, cfg.nc, 1, true),
                    m,
                )?;
                let m = cna_layers(
                    &mut layers,
                    &format!("{p}.box.0"),
                    ConvSpec::same(cin, cfg.c2, bk, false),
                    lhw,
                )?;
                let m = cna_layers(
                    &mut layers,
                    &format!("{p}.box.1"),
                    ConvSpec::same(cfg.c2, cfg.c2, bk, false),
                    m,
                )?;
                conv_layer(
                    &mut layers,
                    format!("{p}.box.pred"),
                    ConvSpec::same(cfg.c2, cfg.box_channels(), 1, true),
                    m,
                )?;
                if *variant == HeadVariant::Isadh {
                    cna_layers(
                        &mut layers,
                        &format!("{p}.cls.instance"),
                        ConvSpec::same(cin, cfg.c3, 1, false),
                        lhw,
                    )?;
                    cna_layers(
                        &mut layers,
                        &format!("{p}.box.instance"),
                        ConvSpec::same(cin, cfg.c2, 1, false),
                        lhw,
                    )?;
                }
            }
        }
    }
    Ok(layers)
}

/// `factor · k² · cin · cout · H' · W'` for one sample.
pub fn conv_flops(spec: &ConvSpec, h: usize, w: usize, conv: &FlopConvention) -> Result<u64> {
    let (ho, wo) = spec.output_extent(h, w)?;
    Ok(conv.macs_factor * (spec.kernel * spec.kernel * spec.in_channels * spec.out_channels * ho * wo) as u64)
}

/// Attention FLOPs for one sample with `l` patches.
pub fn attention_flops(k: usize, c2: usize, l: usize, conv: &FlopConvention) -> u64 {
    let (k2, c2sq) = ((k * k) as u64, (c2 * c2) as u64);
    conv.macs_factor * k2 * 2 * c2sq * l as u64 + conv.softmax_alpha * c2sq * k2
}

fn cost_layer(layer: &Layer, input: Option<InputShape>, conv: &FlopConvention) -> Result<LayerCost> {
    let batch = input.map_or(0, |i| i.batch) as u64;
    let (params, flops) = match &layer.kind {
        LayerKind::Conv(spec) => {
            let f = match layer.hw {
                Some((h, w)) => conv_flops(spec, h, w, conv)?,
                None => 0,
            };
            (spec.param_count() as u64, f)
        }
        LayerKind::Norm { channels } => (2 * *channels as u64, 0),
        LayerKind::Attention { k, c2 } => {
            let f = match layer.hw {
                Some((h, w)) => attention_flops(*k, *c2, PatchGrid::new(h, w, *k)?.l(), conv),
                None => 0,
            };
            (0, f)
        }
    };
    Ok(LayerCost {
        name: layer.name.clone(),
        params,
        flops: flops * batch,
    })
}

fn report(desc: &ModuleDesc, input: Option<InputShape>, convention: &FlopConvention) -> Result<CostReport> {
    if convention.macs_factor == 0 {
        return Err(Error::Config("FLOP factor must be positive".into()));
    }
    let rows = expand(desc, input)?
        .iter()
        .map(|l| cost_layer(l, input, convention))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport {
        module: desc.clone(),
        input,
        convention: convention.clone(),
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    })
}

/// Per-layer parameter counts (FLOP columns are zero).
pub fn count_params(desc: &ModuleDesc) -> Result<CostReport> {
    report(desc, None, &FlopConvention::default())
}

/// Per-layer parameter and FLOP counts for a given input.
pub fn count_flops(desc: &ModuleDesc, input: InputShape, convention: &FlopConvention) -> Result<CostReport> {
    if input.batch == 0 || input.height == 0 || input.width == 0 {
        return shape_err("input extents must be positive");
    }
    report(desc, Some(input), convention)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub name: String,
    pub params_a: u64,
    pub params_b: u64,
    pub flops_a: u64,
    pub flops_b: u64,
    pub d_params: i64,
    pub d_flops: i64,
}

/// `b − a`, per layer (matched by name) and in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub a: CostReport,
    pub b: CostReport,
    pub rows: Vec<LayerDelta>,
    pub d_params: i64,
    pub d_flops: i64,
}

pub fn compare(a: &ModuleDesc, b: &ModuleDesc, input: InputShape, convention: &FlopConvention) -> Result<DeltaReport> {
    let ra = count_flops(a, input, convention)?;
    let rb = count_flops(b, input, convention)?;
    // union of layer names, in first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut costs: BTreeMap<String, [(u64, u64); 2]> = BTreeMap::new();
    for (side, r) in [&ra, &rb].into_iter().enumerate() {
        for row in &r.rows {
            let e = costs.entry(row.name.clone()).or_insert_with(|| {
                order.push(row.name.clone());
                [(0, 0); 2]
            });
            e[side] = (row.params, row.flops);
        }
    }
    let rows: Vec<LayerDelta> = order
        .into_iter()
        .map(|name| {
            let [(pa, fa), (pb, fb)] = costs[&name];
            LayerDelta {
                name,
                params_a: pa,
                params_b: pb,
                flops_a: fa,
                flops_b: fb,
                d_params: pb as i64 - pa as i64,
                d_flops: fb as i64 - fa as i64,
            }
        })
        .collect();
    Ok(DeltaReport {
        d_params: rb.total_params as i64 - ra.total_params as i64,
        d_flops: rb.total_flops as i64 - ra.total_flops as i64,
        a: ra,
        b: rb,
        rows,
    })
}

// ---------------------------------------------------------------------------
// compound scaling presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PresetName {
    N,
    S,
    M,
    L,
    X,
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<PresetName> {
        match s.to_ascii_lowercase().as_str() {
            "n" => Ok(PresetName::N),
            "s" => Ok(PresetName::S),
            "m" => Ok(PresetName::M),
            "l" => Ok(PresetName::L),
            "x" => Ok(PresetName::X),
            _ => Err(Error::Config(format!(
                "unknown preset '{s}' (expected n, s, m, l or x)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePreset {
    pub name: PresetName,
    pub depth: f64,
    pub width: f64,
    pub max_channels: usize,
}

pub const PRESETS: [ScalePreset; 5] = [
    ScalePreset {
        name: PresetName::N,
        depth: 0.33,
        width: 0.25,
        max_channels: 1024,
    },
    ScalePreset {
        name: PresetName::S,
        depth: 0.33,
        width: 0.50,
        max_channels: 1024,
    },
    ScalePreset {
        name: PresetName::M,
        depth: 0.67,
        width: 0.75,
        max_channels: 768,
    },
    ScalePreset {
        name: PresetName::L,
        depth: 1.00,
        width: 1.00,
        max_channels: 512,
    },
    ScalePreset {
        name: PresetName::X,
        depth: 1.00,
        width: 1.25,
        max_channels: 512,
    },
];

/// Unscaled P3/P4/P5 head input widths.
pub const BASE_LEVEL_CHANNELS: [usize; 3] = [256, 512, 1024];

impl ScalePreset {
    pub fn get(name: PresetName) -> ScalePreset {
        *PRESETS.iter().find(|p| p.name == name).expect("every preset is listed")
    }

    /// Repeat count for a stage with `n` base blocks.
    pub fn scale_depth(&self, n: usize) -> usize {
        if n > 1 {
            ((n as f64 * self.depth).round() as usize).max(1)
        } else {
            n
        }
    }

    /// Head configuration for the P3/P4/P5 levels under this preset.
    pub fn head_config(&self, nc: usize, reg_max: usize) -> Result<HeadConfig> {
        let ch = BASE_LEVEL_CHANNELS.map(|c| apply_scale(self, c));
        HeadConfig::three_level(ch, nc, reg_max)
    }
}

fn round_up(v: f64, multiple: usize) -> usize {
    let m = multiple.max(1);
    (v / m as f64).ceil() as usize * m
}

/// `min(max_channels, ⌈width · base⌉₈)`, rounding up to a multiple of 8.
pub fn apply_scale(preset: &ScalePreset, base_channels: usize) -> usize {
    apply_scale_with(preset, base_channels, FlopConvention::default().channel_multiple)
}

pub fn apply_scale_with(preset: &ScalePreset, base_channels: usize, multiple: usize) -> usize {
    preset
        .max_channels
        .min(round_up(preset.width * base_channels as f64, multiple))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_examples() {
        let r = count_params(&ModuleDesc::Conv {
            spec: ConvSpec::same(8, 8, 3, false),
        })
        .unwrap();
        assert_eq!(r.total_params, 576);
        assert_eq!(r.total_flops, 0);
    }

    #[test]
    fn pointwise_conv_flops() {
        let spec = ConvSpec::same(64, 24, 1, false);
        assert_eq!(
            conv_flops(&spec, 32, 32, &FlopConvention::default()).unwrap(),
            3_145_728
        );
    }

    #[test]
    fn scale_examples() {
        assert_eq!(apply_scale(&ScalePreset::get(PresetName::L), 1024), 512);
        assert_eq!(apply_scale(&ScalePreset::get(PresetName::N), 256), 64);
        assert_eq!(apply_scale(&ScalePreset::get(PresetName::S), 100), 56);
        assert_eq!(
            ScalePreset::get(PresetName::L)
                .head_config(80, 16)
                .unwrap()
                .level_channels,
            vec![256, 512, 512]
        );
    }

    #[test]
    fn preset_names_parse() {
        assert_eq!("L".parse::<PresetName>().unwrap(), PresetName::L);
        assert!("q".parse::<PresetName>().is_err());
    }

    #[test]
    fn head_input_must_divide_strides() {
        let cfg = HeadConfig::three_level([256, 512, 512], 80, 16).unwrap();
        let desc = ModuleDesc::Head {
            cfg,
            variant: HeadVariant::Baseline,
        };
        assert!(count_flops(&desc, InputShape::new(100, 100), &FlopConvention::default()).is_err());
    }
}
