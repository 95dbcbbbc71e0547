//! Report files and aggregate metrics.
//!
//! A report is a CSV body under a JSON header carried in `#`-prefixed
//! comment lines. The header records every hyperparameter of the run, so a
//! report is reproducible from its own file (wall-time columns aside).
//! Floats are written in shortest round-trip form; numeric columns parse
//! back bit-identical.

use crate::error::{Error, Result};
use crate::eval::{acr, certified_accuracy, ReportRow, RowStatus, RunMode};
use crate::solvers::SolverConfig;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const REPORT_VERSION: u32 = 1;

const COLUMNS: &str = "point_index,status,true_label,predicted,radius,p_a_lower,top_class,runner_up,n_a,n_a_effective,pm_upper,counts,iters_total,iters_saved,wall_time,gap";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrsHeaderInfo {
    pub srs_steps: usize,
    pub warmup_steps: usize,
    pub restart_interval: u64,
    pub holdout_k: u64,
    pub start_from_clean: bool,
}

/// Everything needed to rerun the certification that produced a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportHeader {
    pub version: u32,
    pub mode: RunMode,
    pub model_path: String,
    pub data_path: String,
    pub sigma: f64,
    pub n_samples: u64,
    pub batch_size: u64,
    pub alpha: f64,
    pub seed: u64,
    pub solver: SolverConfig,
    pub srs: Option<SrsHeaderInfo>,
    pub points: u64,
    pub gap_diagnostic: bool,
}

// commas and line breaks would corrupt the row; the message is diagnostic
// text, so flattening them is acceptable
fn sanitize(message: &str) -> String {
    message.replace([',', '\n', '\r'], ";")
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn row_to_line(row: &ReportRow) -> String {
    let status = match &row.status {
        RowStatus::Ok => "ok".to_string(),
        RowStatus::Failed(msg) => format!("failed:{}", sanitize(msg)),
    };
    let predicted = match row.predicted {
        Some(c) => c.to_string(),
        None => "abstain".to_string(),
    };
    let counts = row
        .counts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(";");
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.point_index,
        status,
        row.true_label,
        predicted,
        row.radius,
        row.p_a_lower,
        row.top_class,
        row.runner_up,
        fmt_opt(&row.n_a),
        fmt_opt(&row.n_a_effective),
        fmt_opt(&row.pm_upper),
        counts,
        row.iters_total,
        fmt_opt(&row.iters_saved),
        row.wall_time,
        fmt_opt(&row.gap),
    )
}

fn parse_opt<T: std::str::FromStr>(s: &str, what: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<T>()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad {what}: {s}")))
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Format(format!("bad {what}: {s}")))
}

fn line_to_row(line: &str, mode: RunMode) -> Result<ReportRow> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 16 {
        return Err(Error::Format(format!(
            "expected 16 columns, got {} in: {line}",
            fields.len()
        )));
    }
    let status = if fields[1] == "ok" {
        RowStatus::Ok
    } else if let Some(msg) = fields[1].strip_prefix("failed:") {
        RowStatus::Failed(msg.to_string())
    } else {
        return Err(Error::Format(format!("bad status: {}", fields[1])));
    };
    let predicted = if fields[3] == "abstain" {
        None
    } else {
        Some(parse_field::<usize>(fields[3], "predicted")?)
    };
    let counts = if fields[11].is_empty() {
        Vec::new()
    } else {
        fields[11]
            .split(';')
            .map(|c| parse_field::<u64>(c, "counts"))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(ReportRow {
        point_index: parse_field(fields[0], "point_index")?,
        status,
        mode,
        true_label: parse_field(fields[2], "true_label")?,
        predicted,
        radius: parse_field(fields[4], "radius")?,
        p_a_lower: parse_field(fields[5], "p_a_lower")?,
        top_class: parse_field(fields[6], "top_class")?,
        runner_up: parse_field(fields[7], "runner_up")?,
        n_a: parse_opt(fields[8], "n_a")?,
        n_a_effective: parse_opt(fields[9], "n_a_effective")?,
        pm_upper: parse_opt(fields[10], "pm_upper")?,
        counts,
        iters_total: parse_field(fields[12], "iters_total")?,
        iters_saved: parse_opt(fields[13], "iters_saved")?,
        wall_time: parse_field(fields[14], "wall_time")?,
        gap: parse_opt(fields[15], "gap")?,
    })
}

/// Streaming report writer; rows land on disk as they finish.
pub struct ReportWriter {
    out: BufWriter<std::fs::File>,
}

impl ReportWriter {
    pub fn create(path: &Path, header: &ReportHeader) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        let json = serde_json::to_string_pretty(header).expect("header serialization");
        for line in json.lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{COLUMNS}")?;
        Ok(ReportWriter { out })
    }

    pub fn write_row(&mut self, row: &ReportRow) -> Result<()> {
        writeln!(self.out, "{}", row_to_line(row))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_report(path: &Path, header: &ReportHeader, rows: &[ReportRow]) -> Result<()> {
    let mut w = ReportWriter::create(path, header)?;
    for row in rows {
        w.write_row(row)?;
    }
    w.finish()
}

pub fn read_report(path: &Path) -> Result<(ReportHeader, Vec<ReportRow>)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut header_json = String::new();
    let mut rows = Vec::new();
    let mut header: Option<ReportHeader> = None;
    let mut saw_columns = false;

    for line in reader.lines() {
        let line = line?;
        if let Some(stripped) = line.strip_prefix('#') {
            if header.is_some() {
                return Err(Error::Format("comment after header block".into()));
            }
            header_json.push_str(stripped.strip_prefix(' ').unwrap_or(stripped));
            header_json.push('\n');
            continue;
        }
        if header.is_none() {
            let parsed: ReportHeader = serde_json::from_str(&header_json)
                .map_err(|e| Error::Format(format!("bad report header: {e}")))?;
            if parsed.version != REPORT_VERSION {
                return Err(Error::Format(format!(
                    "report version {} not supported (expected {REPORT_VERSION})",
                    parsed.version
                )));
            }
            header = Some(parsed);
        }
        if !saw_columns {
            if line != COLUMNS {
                return Err(Error::Format(format!("unexpected column header: {line}")));
            }
            saw_columns = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        rows.push(line_to_row(&line, header.as_ref().unwrap().mode)?);
    }
    match header {
        Some(h) => Ok((h, rows)),
        None => Err(Error::Format("missing report header".into())),
    }
}

/// Two reports are comparable point by point only if they share the noise
/// stream and the statistical setup.
pub fn check_aligned(
    a: &(ReportHeader, Vec<ReportRow>),
    b: &(ReportHeader, Vec<ReportRow>),
) -> Result<()> {
    let (ha, ra) = a;
    let (hb, rb) = b;
    if ha.seed != hb.seed {
        return Err(Error::Alignment(format!("seeds differ: {} vs {}", ha.seed, hb.seed)));
    }
    if ha.sigma != hb.sigma {
        return Err(Error::Alignment(format!("sigmas differ: {} vs {}", ha.sigma, hb.sigma)));
    }
    if ha.n_samples != hb.n_samples {
        return Err(Error::Alignment(format!(
            "sample counts differ: {} vs {}",
            ha.n_samples, hb.n_samples
        )));
    }
    if ha.alpha != hb.alpha {
        return Err(Error::Alignment(format!("alphas differ: {} vs {}", ha.alpha, hb.alpha)));
    }
    if ra.len() != rb.len() {
        return Err(Error::Alignment(format!(
            "row counts differ: {} vs {}",
            ra.len(),
            rb.len()
        )));
    }
    for (x, y) in ra.iter().zip(rb.iter()) {
        if x.point_index != y.point_index || x.true_label != y.true_label {
            return Err(Error::Alignment(format!(
                "row mismatch at point {} vs {}",
                x.point_index, y.point_index
            )));
        }
    }
    Ok(())
}

/// Fixed-edge histogram; out-of-range values are counted separately rather
/// than silently clamped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, nbins: usize) -> Histogram {
    assert!(nbins >= 1 && hi > lo);
    let mut bins = vec![0u64; nbins];
    let mut below = 0;
    let mut above = 0;
    let width = (hi - lo) / nbins as f64;
    for &v in values {
        if v < lo {
            below += 1;
        } else if v > hi {
            above += 1;
        } else {
            let mut idx = ((v - lo) / width) as usize;
            if idx >= nbins {
                idx = nbins - 1; // v == hi lands in the top bin
            }
            bins[idx] += 1;
        }
    }
    Histogram { lo, hi, bins, below, above }
}

/// Aggregates for one report, plus paired columns when a second,
/// sample-aligned report is supplied (baseline first, serialized second).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub thresholds: Vec<f64>,
    pub certified_accuracy: Vec<f64>,
    pub acr: f64,
    pub rows: usize,
    pub abstained: usize,
    pub failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paired: Option<PairedMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedMetrics {
    pub certified_accuracy_second: Vec<f64>,
    pub acr_second: f64,
    /// Relative radius difference over pairs where the baseline certified a
    /// positive radius; 20 bins across [0, 1].
    pub rrd_histogram: Histogram,
    pub rrd_mean: f64,
    /// Fraction of positive-baseline pairs with RRD at most 0.1.
    pub rrd_within_tenth: f64,
    pub rrd_count: usize,
    /// Misalignment bounds of the serialized rows; 10 bins across [0, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pm_histogram: Option<Histogram>,
    /// Bound-minus-empirical gaps where recorded; 10 bins across [-1, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_histogram: Option<Histogram>,
}

pub fn compute_metrics(
    first: &[ReportRow],
    second: Option<&[ReportRow]>,
    thresholds: &[f64],
) -> Result<Metrics> {
    let ca = certified_accuracy(first, thresholds)?;
    let a = acr(first)?;
    let abstained = first
        .iter()
        .filter(|r| r.status == RowStatus::Ok && r.predicted.is_none())
        .count();
    let failed = first.iter().filter(|r| r.status != RowStatus::Ok).count();

    let paired = match second {
        None => None,
        Some(rows) => {
            if rows.len() != first.len() {
                return Err(Error::Alignment(format!(
                    "paired reports have {} vs {} rows",
                    first.len(),
                    rows.len()
                )));
            }
            let mut rrds = Vec::new();
            for (b, s) in first.iter().zip(rows.iter()) {
                if b.status == RowStatus::Ok && s.status == RowStatus::Ok && b.radius > 0.0 {
                    rrds.push(crate::eval::rrd(b.radius, s.radius)?);
                }
            }
            let rrd_mean = if rrds.is_empty() {
                0.0
            } else {
                rrds.iter().sum::<f64>() / rrds.len() as f64
            };
            let rrd_within_tenth = if rrds.is_empty() {
                0.0
            } else {
                rrds.iter().filter(|&&r| r <= 0.1).count() as f64 / rrds.len() as f64
            };

            let pms: Vec<f64> = rows.iter().filter_map(|r| r.pm_upper).collect();
            let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap).collect();

            Some(PairedMetrics {
                certified_accuracy_second: certified_accuracy(rows, thresholds)?,
                acr_second: acr(rows)?,
                rrd_histogram: histogram(&rrds, 0.0, 1.0, 20),
                rrd_mean,
                rrd_within_tenth,
                rrd_count: rrds.len(),
                pm_histogram: (!pms.is_empty()).then(|| histogram(&pms, 0.0, 1.0, 10)),
                gap_histogram: (!gaps.is_empty()).then(|| histogram(&gaps, -1.0, 1.0, 10)),
            })
        }
    };

    Ok(Metrics {
        thresholds: thresholds.to_vec(),
        certified_accuracy: ca,
        acr: a,
        rows: first.len(),
        abstained,
        failed,
        paired,
    })
}

pub fn write_metrics_json(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut s = serde_json::to_string_pretty(metrics).expect("metrics serialization");
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Plot-ready certified-accuracy table: threshold, baseline accuracy, and
/// the paired accuracy when present.
pub fn write_threshold_csv(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut out = String::new();
    match &metrics.paired {
        Some(p) => {
            out.push_str("threshold,certified_accuracy,certified_accuracy_second\n");
            for ((t, a), b) in metrics
                .thresholds
                .iter()
                .zip(metrics.certified_accuracy.iter())
                .zip(p.certified_accuracy_second.iter())
            {
                out.push_str(&format!("{t},{a},{b}\n"));
            }
        }
        None => {
            out.push_str("threshold,certified_accuracy\n");
            for (t, a) in metrics.thresholds.iter().zip(metrics.certified_accuracy.iter()) {
                out.push_str(&format!("{t},{a}\n"));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
