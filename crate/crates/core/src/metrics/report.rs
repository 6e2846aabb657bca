use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{avg_accept_length, pos_acc, AcceptCounters, RoundRecord};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const POS_ACC_HEADER: &str = "position,pos_acc,count_at_least";
const TIMING_HEADER: &str = "round,committed,draft_ms,verify_ms,commit_ms";

/// Tokens produced and wall time of one full pass over a prompt set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRun {
    pub tokens: usize,
    pub wall_ns: u64,
}

impl BenchRun {
    pub fn throughput(&self) -> Result<f64> {
        if self.wall_ns == 0 {
            return Err(Error::Measurement("run took zero time".into()));
        }
        Ok(self.tokens as f64 / (self.wall_ns as f64 * 1e-9))
    }

    /// The fastest run.
    pub fn best(runs: &[BenchRun]) -> Result<&BenchRun> {
        let mut best: Option<(&BenchRun, f64)> = None;
        for r in runs {
            let t = r.throughput()?;
            if best.is_none_or(|(_, b)| t > b) {
                best = Some((r, t));
            }
        }
        best.map(|b| b.0)
            .ok_or_else(|| Error::Measurement("no runs to compare".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosAccRow {
    pub position: usize,
    /// `None` when no round reached the previous position.
    pub pos_acc: Option<f64>,
    pub count_at_least: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub round: usize,
    pub committed: usize,
    pub draft_ms: f64,
    pub verify_ms: f64,
    pub commit_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingTotals {
    pub draft_ms: f64,
    pub verify_ms: f64,
    pub commit_ms: f64,
    pub wall_ms: f64,
    /// Smallest per-round share of wall time covered by the three phases.
    pub min_phase_coverage: f64,
}

/// Summary of a benchmark run of one method against vanilla decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: Value,
    pub tau: f64,
    /// `P(A_1)`.
    pub p_first: f64,
    /// Positions `2 ..= L`.
    pub pos_acc: Vec<PosAccRow>,
    pub counters: AcceptCounters,
    pub rounds: usize,
    pub total_tokens: usize,
    /// Tokens per second of the fastest run.
    pub throughput: f64,
    pub speedup: f64,
    pub timing: TimingTotals,
    pub per_round: Vec<TimingRow>,
    pub runs: Vec<BenchRun>,
    pub vanilla_runs: Vec<BenchRun>,
}

fn ms(ns: u64) -> f64 {
    ns as f64 * 1e-6
}

impl RunReport {
    /// Build a report from the round records of one pass and the raw runs
    /// of the method and of vanilla decoding.
    pub fn new(
        config: Value,
        depth: usize,
        records: &[RoundRecord],
        runs: Vec<BenchRun>,
        vanilla_runs: Vec<BenchRun>,
    ) -> Result<Self> {
        let mut counters = AcceptCounters::from_records(records);
        if counters.depth() < depth {
            counters.at_least.resize(depth, 0);
        }
        let pos = (2..=depth)
            .map(|i| {
                Ok(PosAccRow {
                    position: i,
                    pos_acc: pos_acc(&counters, i)?,
                    count_at_least: counters.count_at_least(i),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let per_round: Vec<TimingRow> = records
            .iter()
            .map(|r| TimingRow {
                round: r.round,
                committed: r.committed,
                draft_ms: ms(r.draft_ns),
                verify_ms: ms(r.verify_ns),
                commit_ms: ms(r.commit_ns),
            })
            .collect();
        let sum = |f: fn(&RoundRecord) -> u64| ms(records.iter().map(f).sum());
        let timing = TimingTotals {
            draft_ms: sum(|r| r.draft_ns),
            verify_ms: sum(|r| r.verify_ns),
            commit_ms: sum(|r| r.commit_ns),
            wall_ms: sum(|r| r.wall_ns),
            min_phase_coverage: records
                .iter()
                .map(RoundRecord::phase_coverage)
                .fold(1.0, f64::min),
        };
        let best = BenchRun::best(&runs)?;
        let throughput = best.throughput()?;
        let speedup = throughput / BenchRun::best(&vanilla_runs)?.throughput()?;
        Ok(RunReport {
            schema_version: SCHEMA_VERSION,
            config,
            tau: avg_accept_length(records)?,
            p_first: counters.p_all(1),
            pos_acc: pos,
            rounds: records.len(),
            total_tokens: records.iter().map(|r| r.committed).sum(),
            counters,
            throughput,
            speedup,
            timing,
            per_round,
            runs,
            vanilla_runs,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    PosAccCsv,
    TimingCsv,
}

/// Write `report` to `path`. CSV files start with a `# schema_version=N`
/// line followed by the column header.
pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut f, report)?;
            writeln!(f)?;
        }
        ReportFormat::PosAccCsv => {
            writeln!(f, "# schema_version={SCHEMA_VERSION}")?;
            writeln!(f, "{POS_ACC_HEADER}")?;
            for r in &report.pos_acc {
                let v = r.pos_acc.map_or("NA".to_string(), |v| v.to_string());
                writeln!(f, "{},{v},{}", r.position, r.count_at_least)?;
            }
        }
        ReportFormat::TimingCsv => {
            writeln!(f, "# schema_version={SCHEMA_VERSION}")?;
            writeln!(f, "{TIMING_HEADER}")?;
            for r in &report.per_round {
                writeln!(
                    f,
                    "{},{},{},{},{}",
                    r.round, r.committed, r.draft_ms, r.verify_ms, r.commit_ms
                )?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

fn csv_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix("# schema_version="))
        .ok_or_else(|| Error::Format(format!("{} lacks a schema line", path.display())))?;
    let found: u32 = version
        .parse()
        .map_err(|_| Error::Format(format!("bad schema line in {}", path.display())))?;
    if found != SCHEMA_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    if lines.next() != Some(header) {
        return Err(Error::Format(format!("{} has an unexpected header", path.display())));
    }
    Ok(lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn field<T: std::str::FromStr>(row: &[String], i: usize) -> Result<T> {
    row.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad CSV field {i} in {row:?}")))
}

pub fn read_pos_acc_csv(path: &Path) -> Result<Vec<PosAccRow>> {
    csv_rows(path, POS_ACC_HEADER)?
        .iter()
        .map(|r| {
            Ok(PosAccRow {
                position: field(r, 0)?,
                pos_acc: if r.get(1).map(String::as_str) == Some("NA") {
                    None
                } else {
                    Some(field(r, 1)?)
                },
                count_at_least: field(r, 2)?,
            })
        })
        .collect()
}

pub fn read_timing_csv(path: &Path) -> Result<Vec<TimingRow>> {
    csv_rows(path, TIMING_HEADER)?
        .iter()
        .map(|r| {
            Ok(TimingRow {
                round: field(r, 0)?,
                committed: field(r, 1)?,
                draft_ms: field(r, 2)?,
                verify_ms: field(r, 3)?,
                commit_ms: field(r, 4)?,
            })
        })
        .collect()
}
