use std::path::{Path, PathBuf};

use clap::ValueEnum;
use isdet_core::profiler::{PresetName, ScalePreset};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    Shapes,
    Gradcheck,
    Profile,
    Compare,
    Sweep,
    TrainToy,
}

impl CommandName {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandName::Shapes => "shapes",
            CommandName::Gradcheck => "gradcheck",
            CommandName::Profile => "profile",
            CommandName::Compare => "compare",
            CommandName::Sweep => "sweep",
            CommandName::TrainToy => "train-toy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    /// The ISB branch alone.
    Isb,
    /// Instance-specific asymmetric decoupled head.
    Isadh,
    /// Bottleneck carrying an ISB branch.
    Bottleneck,
    /// Baseline decoupled head.
    Head,
    /// Patch reconstruction, attention and reassembly.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// Aligned human-readable columns.
    #[default]
    Rows,
    /// One JSON object per line: header, one per row, totals.
    Records,
    /// A single JSON document.
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ToyModelKind {
    Baseline,
    InstanceSpecific,
    #[default]
    Both,
}

/// Settings from one source; unset fields fall through to the layer below.
#[derive(Debug, Clone, Default, Deserialize, clap::Args)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Overrides {
    /// Module to operate on.
    #[arg(long, value_enum)]
    pub module: Option<ModuleKind>,
    /// Compound scaling preset for head widths (n, s, m, l, x).
    #[arg(long)]
    pub preset: Option<String>,
    /// Input channels (ISB/bottleneck width, or attention input channels).
    #[arg(long)]
    pub channels: Option<usize>,
    /// ISB compression ratio s.
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Patch side K.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of classes.
    #[arg(long)]
    pub nc: Option<usize>,
    /// Regression bins per box side.
    #[arg(long)]
    pub reg_max: Option<usize>,
    /// Head level input channels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    /// Input size as HxW.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Floating-point width (32 or 64).
    #[arg(long)]
    pub precision: Option<u32>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training steps (train-toy).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Synthetic samples (train-toy).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Learning rate (train-toy).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Which toy model to train.
    #[arg(long, value_enum)]
    pub model: Option<ToyModelKind>,
    /// Smallest side of the sweep ladder.
    #[arg(long)]
    pub from: Option<usize>,
    /// Largest side of the sweep ladder.
    #[arg(long)]
    pub to: Option<usize>,
}

macro_rules! layer {
    ($top:ident, $bottom:ident, $($f:ident),*) => {
        Overrides { $($f: $top.$f.or($bottom.$f)),* }
    };
}

impl Overrides {
    /// Fields of `self` win over `below`.
    pub fn over(self, below: Overrides) -> Overrides {
        layer!(
            self, below, module, preset, channels, ratio, patch, nc, reg_max, levels, size, seed, precision, format,
            out, steps, samples, lr, model, from, to
        )
    }

    pub fn from_file(path: &Path) -> Result<Overrides, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Fully resolved settings, echoed in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandName,
    pub module: ModuleKind,
    pub preset: Option<PresetName>,
    pub channels: usize,
    pub ratio: usize,
    pub patch: usize,
    pub nc: usize,
    pub reg_max: usize,
    pub levels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub precision: u32,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub steps: usize,
    pub samples: usize,
    pub lr: f64,
    pub model: ToyModelKind,
    pub from: usize,
    pub to: usize,
}

/// Largest problem `gradcheck` accepts; central differences cost two forward
/// passes per scalar input.
pub const GRADCHECK_MAX_PIXELS: usize = 256;
pub const GRADCHECK_MAX_CHANNELS: usize = 32;
pub const GRADCHECK_MAX_CLASSES: usize = 16;
pub const GRADCHECK_MAX_REG: usize = 8;

const L_LEVELS: [usize; 3] = [256, 512, 512];

fn defaults(command: CommandName, module: Option<ModuleKind>) -> Overrides {
    let module = module.unwrap_or(match command {
        CommandName::Compare => ModuleKind::Head,
        CommandName::Sweep => ModuleKind::Attention,
        _ => ModuleKind::Isb,
    });
    let miniature = command == CommandName::Gradcheck;
    let channels = match (module, miniature) {
        (ModuleKind::Attention, false) => 24,
        (ModuleKind::Attention, true) => 9,
        (_, false) => 64,
        (_, true) => 8,
    };
    let size = match (command, module) {
        (CommandName::Gradcheck, ModuleKind::Attention) => "2x10",
        (CommandName::Gradcheck, _) => "4x4",
        (CommandName::Shapes | CommandName::TrainToy, _) => "32x32",
        _ => "640x640",
    };
    Overrides {
        module: Some(module),
        preset: None,
        channels: Some(channels),
        ratio: Some(8),
        patch: Some(if miniature { 2 } else { 4 }),
        nc: Some(if miniature { 2 } else { 80 }),
        reg_max: Some(if miniature { 2 } else { 16 }),
        levels: None,
        size: Some(size.into()),
        seed: Some(0),
        precision: Some(64),
        format: Some(Format::Rows),
        out: None,
        steps: Some(300),
        samples: Some(64),
        lr: Some(0.05),
        model: Some(ToyModelKind::Both),
        from: Some(64),
        to: Some(1024),
    }
}

pub fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("size must look like HxW with positive extents, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

impl RunConfig {
    /// Defaults < config file < command-line flags.
    pub fn resolve(command: CommandName, file: Option<Overrides>, flags: Overrides) -> Result<RunConfig, CliError> {
        let given = flags.over(file.unwrap_or_default());
        let module = given.module;
        let o = given.over(defaults(command, module));
        let preset = o
            .preset
            .as_deref()
            .map(|p| p.parse::<PresetName>().map_err(|e| CliError::Usage(e.to_string())))
            .transpose()?;
        let levels = match (o.levels, preset) {
            (Some(levels), _) => levels,
            (None, Some(p)) => {
                ScalePreset::get(p)
                    .head_config(1, 1)
                    .map_err(|e| CliError::Usage(e.to_string()))?
                    .level_channels
            }
            (None, None) if command == CommandName::Gradcheck => vec![o.channels.expect("defaulted")],
            (None, None) => L_LEVELS.to_vec(),
        };
        let (height, width) = parse_size(o.size.as_deref().expect("defaulted"))?;
        let precision = o.precision.expect("defaulted");
        if precision != 32 && precision != 64 {
            return Err(CliError::Usage(format!("precision must be 32 or 64, got {precision}")));
        }
        let cfg = RunConfig {
            command,
            module: o.module.expect("defaulted"),
            preset,
            channels: o.channels.expect("defaulted"),
            ratio: o.ratio.expect("defaulted"),
            patch: o.patch.expect("defaulted"),
            nc: o.nc.expect("defaulted"),
            reg_max: o.reg_max.expect("defaulted"),
            levels,
            height,
            width,
            seed: o.seed.expect("defaulted"),
            precision,
            format: o.format.expect("defaulted"),
            out: o.out,
            steps: o.steps.expect("defaulted"),
            samples: o.samples.expect("defaulted"),
            lr: o.lr.expect("defaulted"),
            model: o.model.expect("defaulted"),
            from: o.from.expect("defaulted"),
            to: o.to.expect("defaulted"),
        };
        if command == CommandName::Gradcheck {
            cfg.check_gradcheck_caps()?;
        }
        Ok(cfg)
    }

    fn check_gradcheck_caps(&self) -> Result<(), CliError> {
        let refuse = |what: String| {
            Err(CliError::Usage(format!(
                "gradcheck is limited to miniature problems: {what}"
            )))
        };
        if self.precision != 64 {
            return refuse("central differences need 64-bit precision".into());
        }
        if self.height * self.width > GRADCHECK_MAX_PIXELS {
            return refuse(format!(
                "{}×{} exceeds {GRADCHECK_MAX_PIXELS} pixels",
                self.height, self.width
            ));
        }
        let widest = self.levels.iter().copied().chain([self.channels]).max().unwrap_or(0);
        if widest > GRADCHECK_MAX_CHANNELS {
            return refuse(format!("{widest} channels exceeds {GRADCHECK_MAX_CHANNELS}"));
        }
        if self.nc > GRADCHECK_MAX_CLASSES || self.reg_max > GRADCHECK_MAX_REG {
            return refuse(format!(
                "nc ≤ {GRADCHECK_MAX_CLASSES} and reg-max ≤ {GRADCHECK_MAX_REG} required, got {} and {}",
                self.nc, self.reg_max
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("64x32").unwrap(), (64, 32));
        assert_eq!(parse_size("7X9").unwrap(), (7, 9));
        for bad in ["64", "0x4", "ax4", "4x"] {
            assert!(parse_size(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = Overrides {
            channels: Some(32),
            ratio: Some(4),
            ..Overrides::default()
        };
        let flags = Overrides {
            channels: Some(16),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(CommandName::Profile, Some(file), flags).unwrap();
        assert_eq!((cfg.channels, cfg.ratio, cfg.patch), (16, 4, 4));
    }

    #[test]
    fn module_specific_defaults_follow_the_chosen_module() {
        let flags = Overrides {
            module: Some(ModuleKind::Attention),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(CommandName::Gradcheck, None, flags).unwrap();
        assert_eq!((cfg.channels, cfg.height, cfg.width, cfg.patch), (9, 2, 10, 2));
    }

    #[test]
    fn preset_sets_head_levels() {
        let flags = Overrides {
            preset: Some("n".into()),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(CommandName::Compare, None, flags).unwrap();
        assert_eq!(cfg.levels, vec![64, 128, 256]);
        let bad = Overrides {
            preset: Some("xl".into()),
            ..Overrides::default()
        };
        assert!(matches!(
            RunConfig::resolve(CommandName::Compare, None, bad),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn gradcheck_refuses_large_problems() {
        let flags = Overrides {
            size: Some("640x640".into()),
            ..Overrides::default()
        };
        assert!(matches!(
            RunConfig::resolve(CommandName::Gradcheck, None, flags),
            Err(CliError::Usage(_))
        ));
        let flags = Overrides {
            precision: Some(32),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(CommandName::Gradcheck, None, flags).is_err());
    }

    #[test]
    fn config_files_reject_unknown_keys() {
        assert!(toml::from_str::<Overrides>("channels = 8\nreg-max = 4").is_ok());
        assert!(toml::from_str::<Overrides>("chanels = 8").is_err());
    }
}
