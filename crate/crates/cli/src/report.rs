//! Rendering of run, sweep and cost-check results.

use gradmesh::cost::{CostCheckLine, CostColumn, Deployment, Verdict};
use gradmesh::harness::ExperimentResult;
use gradmesh::substrate::SubstrateClass;
use gradmesh::Error;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Md => "md",
        }
    }
}

const TABLE_HEADER: &str = "| Framework | Total Time (s) | Peak RAM (MB) | Cost/Worker ($) | Total Cost ($) |";
const TABLE_RULE: &str = "|---|---:|---:|---:|---:|";

/// One per-epoch summary line in the layout of the cost comparison table,
/// taken from the final epoch.
fn table_cells(r: &ExperimentResult) -> String {
    let m = r.final_epoch();
    let ram = match m.cost.deployment {
        Deployment::Serverless => format!("{}", r.config.cost.ram_mb_assumed),
        Deployment::Gpu => "n/a".to_string(),
    };
    format!(
        "{} | {:.4} | {} | {:.6} | {:.6}",
        r.strategy, m.serial_epoch_s, ram, m.cost.cost_per_worker_usd, m.cost.total_usd
    )
}

pub fn run_markdown(r: &ExperimentResult) -> String {
    let mut out = format!("{TABLE_HEADER}\n{TABLE_RULE}\n| {} |\n", table_cells(r));
    out.push_str(&format!(
        "\nepochs: {}, final accuracy: {:.4}, digest: {}\n",
        r.epochs.len(),
        r.final_accuracy,
        r.params_digest
    ));
    if let Some(div) = r.oracle_divergence {
        out.push_str(&format!("oracle divergence: {div:e}\n"));
    }
    out
}

/// Summary of one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub key: String,
    pub value: String,
    pub strategy: String,
    pub workers: usize,
    pub tau: f64,
    pub epochs: usize,
    pub final_accuracy: f64,
    pub oracle_divergence: Option<f64>,
    pub params_digest: String,
    pub shared_db_bytes_written: u64,
    pub shared_db_bytes_read: u64,
    /// SharedDB payload read per worker per round.
    pub shared_db_read_per_worker_round: f64,
    pub local_db_bytes_written: u64,
    pub local_db_bytes_read: u64,
    pub local_db_peer_bytes_read: u64,
    pub object_store_bytes_written: u64,
    pub object_store_bytes_read: u64,
    pub sync_wait_s: f64,
    pub serial_time_s: f64,
    pub total_cost_usd: f64,
}

impl SweepRow {
    pub fn new(key: &str, value: &str, r: &ExperimentResult) -> Self {
        let t = &r.traffic_total;
        let shared = t.class(SubstrateClass::SharedDB);
        let local = t.class(SubstrateClass::LocalDB);
        let object = t.class(SubstrateClass::ObjectStore);
        let rounds: usize = r.epochs.iter().map(|m| m.rounds).sum();
        let workers = r.config.strategy.workers;
        SweepRow {
            key: key.to_string(),
            value: value.to_string(),
            strategy: r.strategy.clone(),
            workers,
            tau: r.config.strategy.tau,
            epochs: r.epochs.len(),
            final_accuracy: r.final_accuracy,
            oracle_divergence: r.oracle_divergence,
            params_digest: r.params_digest.clone(),
            shared_db_bytes_written: shared.bytes_written,
            shared_db_bytes_read: shared.bytes_read,
            shared_db_read_per_worker_round: shared.bytes_read as f64 / (rounds * workers) as f64,
            local_db_bytes_written: local.bytes_written,
            local_db_bytes_read: local.bytes_read,
            local_db_peer_bytes_read: local.peer_bytes_read,
            object_store_bytes_written: object.bytes_written,
            object_store_bytes_read: object.bytes_read,
            sync_wait_s: r.epochs.iter().map(|m| m.sync_wait_s).sum(),
            serial_time_s: r.epochs.iter().map(|m| m.serial_epoch_s).sum(),
            total_cost_usd: r.final_epoch().cumulative_cost_usd,
        }
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::contract(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn sweep_markdown(key: &str, rows: &[(String, ExperimentResult)]) -> String {
    let mut out = format!("| {key} {TABLE_HEADER} Accuracy |\n|---{TABLE_RULE}---:|\n");
    for (value, r) in rows {
        out.push_str(&format!("| {value} | {} | {:.4} |\n", table_cells(r), r.final_accuracy));
    }
    out
}

fn column_name(c: CostColumn) -> &'static str {
    match c {
        CostColumn::PerInvocation => "per-invocation",
        CostColumn::PerWorker => "per-worker",
        CostColumn::Total => "total",
    }
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Reproduced => "CONSISTENT",
        Verdict::Inconsistent => "INCONSISTENT",
        Verdict::Marginal => "MARGINAL",
    }
}

#[derive(Serialize)]
struct CostRow<'a> {
    framework: &'a str,
    model: &'a str,
    column: &'static str,
    formula_usd: f64,
    reference_usd: f64,
    rel_error: f64,
    verdict: &'static str,
    expected: &'static str,
    ok: bool,
}

fn cost_rows(lines: &[CostCheckLine]) -> Vec<CostRow<'_>> {
    lines
        .iter()
        .map(|l| CostRow {
            framework: &l.framework,
            model: &l.model,
            column: column_name(l.column),
            formula_usd: l.computed,
            reference_usd: l.reference,
            rel_error: l.rel_error,
            verdict: verdict_name(l.verdict),
            expected: verdict_name(l.expected),
            ok: l.passed,
        })
        .collect()
}

pub fn costcheck(lines: &[CostCheckLine], format: ReportFormat) -> Result<String, Error> {
    let rows = cost_rows(lines);
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n",
        ReportFormat::Csv => to_csv(&rows)?,
        ReportFormat::Md => {
            let mut out = String::from(
                "| Framework | Model | Column | Formula ($) | Reference ($) | Rel. error | Verdict |\n|---|---|---|---:|---:|---:|---|\n",
            );
            for r in &rows {
                out.push_str(&format!(
                    "| {} | {} | {} | {:.6} | {} | {:.4}% | {}{} |\n",
                    r.framework,
                    r.model,
                    r.column,
                    r.formula_usd,
                    r.reference_usd,
                    100.0 * r.rel_error,
                    r.verdict,
                    if r.ok { "" } else { " (unexpected)" }
                ));
            }
            out
        }
    })
}
