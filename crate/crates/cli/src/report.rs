use std::fmt::Write as _;

use isdet_core::profiler::FlopConvention;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Format, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Row {
    Stage {
        stage: String,
        shape: Vec<usize>,
    },
    Cost {
        name: String,
        params: i64,
        flops: i64,
    },
    Scale {
        name: String,
        pixels: u64,
        params: i64,
        flops: i64,
    },
    Grad {
        name: String,
        max_rel: f64,
        max_abs: f64,
        pass: bool,
    },
    Loss {
        model: String,
        step: usize,
        loss: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub rows: Vec<Row>,
    pub totals: Map<String, Value>,
    pub convention: Option<FlopConvention>,
    /// Whether every check in the command held.
    #[serde(skip)]
    pub pass: bool,
}

impl Report {
    pub fn new(config: &RunConfig) -> Report {
        Report {
            schema_version: SCHEMA_VERSION,
            command: config.command.as_str().into(),
            config: config.clone(),
            rows: Vec::new(),
            totals: Map::new(),
            convention: None,
            pass: true,
        }
    }

    pub fn total(&mut self, key: &str, value: impl Into<Value>) {
        self.totals.insert(key.into(), value.into());
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            Format::Records => self.records(),
            Format::Rows => self.table(),
        }
    }

    fn records(&self) -> String {
        let mut lines = vec![json!({
            "record": "header",
            "schema_version": self.schema_version,
            "command": self.command,
            "config": self.config,
            "convention": self.convention,
        })];
        for row in &self.rows {
            let mut v = serde_json::to_value(row).expect("row serializes");
            v.as_object_mut()
                .expect("rows are objects")
                .insert("record".into(), "row".into());
            lines.push(v);
        }
        lines.push(json!({ "record": "totals", "totals": self.totals }));
        lines.iter().map(|v| v.to_string() + "\n").collect()
    }

    fn table(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "# {} ({:?}), schema {}",
            self.command, c.module, self.schema_version
        );
        let cells: Vec<Vec<(String, String)>> = self.rows.iter().map(cells).collect();
        if let Some(first) = cells.first() {
            let names: Vec<&str> = first.iter().map(|(k, _)| k.as_str()).collect();
            let mut widths: Vec<usize> = names.iter().map(|n| n.chars().count()).collect();
            for row in &cells {
                for (w, (_, v)) in widths.iter_mut().zip(row) {
                    *w = (*w).max(v.chars().count());
                }
            }
            let line = |vals: Vec<&str>| -> String {
                let parts: Vec<String> = vals
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (v, &w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                    .collect();
                parts.join("  ").trim_end().to_string() + "\n"
            };
            out += &line(names.clone());
            for row in &cells {
                out += &line(row.iter().map(|(_, v)| v.as_str()).collect());
            }
        }
        for (k, v) in &self.totals {
            let shown = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k}: {shown}");
        }
        out
    }
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

fn cells(row: &Row) -> Vec<(String, String)> {
    let kv = |pairs: &[(&str, String)]| pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    match row {
        Row::Stage { stage, shape } => {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            kv(&[("stage", stage.clone()), ("shape", dims.join("×"))])
        }
        Row::Cost { name, params, flops } => kv(&[
            ("name", name.clone()),
            ("params", params.to_string()),
            ("flops", flops.to_string()),
        ]),
        Row::Scale {
            name,
            pixels,
            params,
            flops,
        } => kv(&[
            ("size", name.clone()),
            ("pixels", pixels.to_string()),
            ("params", params.to_string()),
            ("flops", flops.to_string()),
        ]),
        Row::Grad {
            name,
            max_rel,
            max_abs,
            pass,
        } => kv(&[
            ("input", name.clone()),
            ("max_rel", sci(*max_rel)),
            ("max_abs", sci(*max_abs)),
            ("result", if *pass { "pass" } else { "FAIL" }.into()),
        ]),
        Row::Loss { model, step, loss } => kv(&[
            ("model", model.clone()),
            ("step", step.to_string()),
            ("loss", format!("{loss:.6}")),
        ]),
    }
}
