//! Cross-product benchmark sweeps over depth, width, total tokens,
//! temperature and method.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use poss_core::draft::SpecialistBank;
use poss_core::engine::{EngineConfig, Method};
use poss_core::metrics::{BenchRun, RunReport, SCHEMA_VERSION};
use poss_core::model::TargetModel;
use serde::{Deserialize, Serialize};

use crate::commands::{load_bank, load_prompts, method_pass, records, vanilla_pass};
use crate::config::{require, RunConfigFile};
use crate::error::CliError;

/// Slack allowed when checking that acceptance length grows with depth.
pub const TAU_NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub total_tokens: Vec<usize>,
    pub temperatures: Vec<f64>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read sweep spec {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("sweep spec {}: {e}", path.display())))
    }

    /// Engine configurations of the cross product in a fixed order, with
    /// duplicates removed. Plain decoding ignores the tree shape, so its
    /// cells collapse to one per temperature.
    pub fn cells(&self, base: &EngineConfig) -> Result<Vec<EngineConfig>, CliError> {
        for (name, empty) in [
            ("methods", self.methods.is_empty()),
            ("depths", self.depths.is_empty()),
            ("widths", self.widths.is_empty()),
            ("total_tokens", self.total_tokens.is_empty()),
            ("temperatures", self.temperatures.is_empty()),
        ] {
            if empty {
                return Err(CliError::Usage(format!("sweep.{name} must not be empty")));
            }
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for &method in &self.methods {
            for &temperature in &self.temperatures {
                for &depth in &self.depths {
                    for &width in &self.widths {
                        for &total_tokens in &self.total_tokens {
                            let mut c = EngineConfig {
                                method,
                                depth,
                                width,
                                total_tokens,
                                temperature,
                                ..base.clone()
                            };
                            c.validate().map_err(|e| {
                                CliError::Usage(format!(
                                    "sweep cell {method} depth {depth} width {width} total {total_tokens}: {e}"
                                ))
                            })?;
                            if method == Method::Vanilla {
                                (c.depth, c.width, c.total_tokens) = (1, 1, 1);
                            }
                            let key = (method, c.depth, c.width, c.total_tokens, temperature.to_bits());
                            if seen.insert(key) {
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Row {
    cell: EngineConfig,
    result: Result<(f64, f64, f64), String>,
}

fn row_key(c: &EngineConfig) -> (String, usize, u64, usize) {
    (c.method.to_string(), c.width, c.temperature.to_bits(), c.depth)
}

fn trend_key(c: &EngineConfig) -> (String, usize, u64, usize) {
    (c.method.to_string(), c.width, c.temperature.to_bits(), c.total_tokens)
}

/// Whether acceptance length is non-decreasing in depth (within
/// [`TAU_NOISE`]) for each group of cells differing only in depth.
fn depth_trends(rows: &[Row]) -> BTreeMap<(String, usize, u64, usize), Option<bool>> {
    let mut groups: BTreeMap<_, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        if let Ok((tau, _, _)) = r.result {
            groups.entry(trend_key(&r.cell)).or_default().push((r.cell.depth, tau));
        }
    }
    groups
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|x| x.0);
            let ok = (v.len() > 1).then(|| v.windows(2).all(|w| w[1].1 >= w[0].1 - TAU_NOISE));
            (k, ok)
        })
        .collect()
}

fn is_row_max(rows: &[Row], r: &Row, pick: fn(&(f64, f64, f64)) -> f64) -> bool {
    let Ok(mine) = &r.result else { return false };
    rows.iter()
        .filter(|o| row_key(&o.cell) == row_key(&r.cell))
        .filter_map(|o| o.result.as_ref().ok())
        .all(|o| pick(o) <= pick(mine))
}

pub fn run(cfg: &RunConfigFile, out: &Path, jobs: usize) -> Result<(), CliError> {
    let spec = cfg
        .bench
        .sweep
        .clone()
        .ok_or_else(|| CliError::Usage("bench.sweep is required (set it in the config or pass --spec)".into()))?;
    let cells = spec.cells(&cfg.engine)?;
    if cfg.bench.runs == 0 {
        return Err(CliError::Usage("bench.runs must be at least 1".into()));
    }
    let target: TargetModel<f32> = TargetModel::load(&require(&cfg.paths.target, "target", "--target")?)?;
    let needs = |m| cells.iter().any(|c| c.method == m);
    let poss_bank = match needs(Method::Poss) {
        true => Some(load_bank(&cfg.paths.bank, "bank", "--bank", &target)?),
        false => None,
    };
    let single_bank = match needs(Method::SingleDraft) {
        true => Some(load_bank(
            &cfg.paths.single_draft_bank,
            "single_draft_bank",
            "--single-draft-bank",
            &target,
        )?),
        false => None,
    };
    let max_new = cells.iter().map(|c| c.max_new_tokens).max().unwrap_or(0);
    let prompts_path = require(&cfg.paths.prompts, "prompts", "--prompts")?;
    let (prompts, skipped) = load_prompts(&prompts_path, target.config.max_seq_len, max_new)?;
    std::fs::create_dir_all(out)?;

    let mut baselines: Vec<(u64, Vec<BenchRun>)> = Vec::new();
    for c in &cells {
        let key = c.temperature.to_bits();
        if baselines.iter().all(|b| b.0 != key) {
            let runs = (0..cfg.bench.runs)
                .map(|_| vanilla_pass(&target, &prompts, c).map(|p| p.run))
                .collect::<Result<Vec<_>, _>>()?;
            baselines.push((key, runs));
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Row>>> = Mutex::new(vec![None; cells.len()]);
    let cell = |c: &EngineConfig| -> Result<(f64, f64, f64), CliError> {
        let bank: Option<&SpecialistBank<f32>> = match c.method {
            Method::Poss => poss_bank.as_ref(),
            Method::SingleDraft => single_bank.as_ref(),
            Method::Vanilla => None,
        };
        let mut runs = Vec::new();
        let mut recs = Vec::new();
        for i in 0..cfg.bench.runs {
            let pass = method_pass(&target, bank, &prompts, c)?;
            if i == 0 {
                recs = records(&pass, c.method);
            }
            runs.push(pass.run);
        }
        let vanilla = baselines
            .iter()
            .find(|b| b.0 == c.temperature.to_bits())
            .map(|b| b.1.clone())
            .unwrap_or_default();
        let depth = if c.method == Method::Vanilla { 0 } else { c.depth };
        let r = RunReport::new(serde_json::to_value(c).unwrap_or_default(), depth, &recs, runs, vanilla)?;
        Ok((r.tau, r.speedup, r.throughput))
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let result = cell(&cells[i]).map_err(|e| e.to_string());
                if let Err(e) = &result {
                    eprintln!("warning: sweep cell {i} failed: {e}");
                }
                results.lock().expect("results lock")[i] = Some(Row {
                    cell: cells[i].clone(),
                    result,
                });
            });
        }
    });
    let rows: Vec<Row> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();

    let trends = depth_trends(&rows);
    let path = out.join("sweep.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(
        w,
        "method,depth,width,total_tokens,temperature,tau,speedup,throughput,row_max_tau,row_max_speedup,depth_trend,status,error"
    )?;
    let mut violations = 0;
    for r in &rows {
        let c = &r.cell;
        let trend = match trends.get(&trend_key(c)).copied().flatten() {
            Some(true) => "ok",
            Some(false) => {
                violations += 1;
                "violated"
            }
            None => "NA",
        };
        match &r.result {
            Ok((tau, speedup, tput)) => writeln!(
                w,
                "{},{},{},{},{},{tau},{speedup},{tput},{},{},{trend},ok,",
                c.method,
                c.depth,
                c.width,
                c.total_tokens,
                c.temperature,
                u8::from(is_row_max(&rows, r, |x| x.0)),
                u8::from(is_row_max(&rows, r, |x| x.1)),
            )?,
            Err(e) => writeln!(
                w,
                "{},{},{},{},{},NA,NA,NA,0,0,{trend},error,\"{}\"",
                c.method,
                c.depth,
                c.width,
                c.total_tokens,
                c.temperature,
                e.replace('"', "'")
            )?,
        }
    }
    w.flush()?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if violations > 0 {
        eprintln!("warning: {violations} sweep rows break the depth trend by more than {TAU_NOISE}");
    }
    println!(
        "{} cells ({failed} failed, {skipped} prompts skipped); wrote {}",
        rows.len(),
        path.display()
    );
    Ok(())
}
