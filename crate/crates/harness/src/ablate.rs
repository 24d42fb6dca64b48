//! Grids of training runs over dotted config keys.
//!
//! A grid file lists seeds, optional named variants (each a set of
//! overrides) and axes whose values are crossed:
//!
//! ```toml
//! seeds = [0, 1, 2]
//!
//! [axes]
//! "loss.clip" = [0.0, 0.5, 1.0]
//! "loss.frame" = [0.0, 0.5, 1.0]
//!
//! [[variant]]
//! name = "full"
//!
//! [[variant]]
//! name = "no gates"
//! set = { "interaction.gates" = "none" }
//! ```
//!
//! Runs are variants × axis product × seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{load_split, Split};
use crate::error::{HarnessError, Result};
use crate::evaluate::EvalReport;
use crate::train::{train, TrainOptions};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    /// Seeds per grid point; empty means the config's own seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default, rename = "variant")]
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: BTreeMap<String, toml::Value>,
}

/// One grid point before seeds are applied.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub config: RunConfig,
}

impl Grid {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Grid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Expands the grid against `base`, applying every override, so an
    /// unknown key or an invalid value fails before any run starts.
    pub fn points(&self, base: &RunConfig) -> Result<Vec<GridPoint>> {
        if let Some((k, _)) = self.axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(HarnessError::Grid(format!("axis `{k}` has no values")));
        }
        let default_variant = [Variant {
            name: String::new(),
            set: BTreeMap::new(),
        }];
        let variants = if self.variants.is_empty() {
            &default_variant[..]
        } else {
            &self.variants[..]
        };
        let mut points = Vec::new();
        for variant in variants {
            let mut cfg = base.clone();
            for (k, v) in &variant.set {
                cfg = cfg.with_override(k, v.clone())?;
            }
            let mut combos: Vec<Vec<(&String, &toml::Value)>> = vec![Vec::new()];
            for (key, values) in &self.axes {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| {
                            let mut c = c.clone();
                            c.push((key, v));
                            c
                        })
                    })
                    .collect();
            }
            for combo in combos {
                let mut c = cfg.clone();
                let mut parts = Vec::new();
                if !variant.name.is_empty() {
                    parts.push(variant.name.clone());
                }
                for (k, v) in combo {
                    c = c.with_override(k, v.clone())?;
                    parts.push(format!("{k}={v}"));
                }
                points.push(GridPoint {
                    label: if parts.is_empty() { "base".into() } else { parts.join(", ") },
                    config: c,
                });
            }
        }
        Ok(points)
    }

    pub fn seeds_for(&self, base: &RunConfig) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![base.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn run_count(&self, base: &RunConfig) -> Result<usize> {
        Ok(self.points(base)?.len() * self.seeds_for(base).len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub val: EvalReport,
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<RunResult>,
    pub r1_at_0_5: Stat,
    pub r1_at_0_7: Stat,
    pub map_avg: Stat,
    /// Absent when the validation split has no saliency labels.
    pub hd_map: Option<Stat>,
}

impl AblationRow {
    pub fn new(label: String, runs: Vec<RunResult>) -> Self {
        let pick = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(|r| f(&r.val)).collect() };
        let hd = pick(&|r| r.hd.as_ref().map(|h| h.map));
        Self {
            r1_at_0_5: Stat::of(&pick(&|r| r.mr.as_ref().map(|m| m.r1_at_0_5))),
            r1_at_0_7: Stat::of(&pick(&|r| r.mr.as_ref().map(|m| m.r1_at_0_7))),
            map_avg: Stat::of(&pick(&|r| r.mr.as_ref().map(|m| m.map_avg))),
            hd_map: (!hd.is_empty()).then(|| Stat::of(&hd)),
            label,
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const COLUMNS: [&'static str; 4] = ["R1@0.5", "R1@0.7", "mAP avg", "HD mAP"];

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Markdown with mean ± std over seeds, in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| run | seeds |");
        for c in Self::COLUMNS {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|---|---|---|---|---|\n");
        let cell = |st: &Stat| format!("{:.2} ± {:.2}", 100.0 * st.mean, 100.0 * st.std);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                r.label,
                r.runs.len(),
                cell(&r.r1_at_0_5),
                cell(&r.r1_at_0_7),
                cell(&r.map_avg),
                r.hd_map.as_ref().map_or_else(|| "n/a".to_string(), cell),
            );
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblateOptions {
    /// Each run writes under `out_dir/run_NNN`, and the table lands in
    /// `out_dir/ablation.{md,json}`.
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// Runs every grid point for every seed, reporting the final-epoch
/// validation metrics.
pub fn ablate(base: &RunConfig, grid: &Grid, opts: &AblateOptions) -> Result<AblationTable> {
    let points = grid.points(base)?;
    let seeds = grid.seeds_for(base);
    let mut rows = Vec::with_capacity(points.len());
    let mut run = 0usize;
    for point in points {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut cfg = point.config.clone();
            cfg.seed = seed;
            let train_set = load_split(&cfg, Split::Train, None)?;
            let val_set = load_split(&cfg, Split::Val, None)?;
            if opts.verbose {
                eprintln!("run {run}: {} seed {seed}", point.label);
            }
            let out = train(
                &cfg,
                &train_set,
                &val_set,
                &TrainOptions {
                    out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("run_{run:03}"))),
                    verbose: opts.verbose,
                    stop_when: None,
                },
            )?;
            let val = out
                .last_val()
                .cloned()
                .ok_or_else(|| HarnessError::Config("ablation needs a non-empty validation split".into()))?;
            runs.push(RunResult { seed, val });
            run += 1;
        }
        rows.push(AblationRow::new(point.label, runs));
    }
    let table = AblationTable { rows };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let md = dir.join("ablation.md");
        std::fs::write(&md, table.to_markdown()).map_err(|e| HarnessError::io(&md, e))?;
        crate::evaluate::write_report(&dir.join("ablation.json"), &table)?;
    }
    Ok(table)
}
