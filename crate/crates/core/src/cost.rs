//! Lambda GB-second and GPU hourly pricing, plus a regression check of the
//! reference per-epoch cost figures.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PricingConfig {
    pub lambda_gb_second_usd: f64,
    pub gpu_hourly_usd: f64,
    /// Megabytes per gigabyte when converting configured RAM.
    pub mb_per_gb: f64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        PricingConfig {
            lambda_gb_second_usd: 0.000_016_666_7,
            gpu_hourly_usd: 0.526,
            mb_per_gb: 1000.0,
        }
    }
}

impl PricingConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_gb_second_usd", self.lambda_gb_second_usd),
            ("gpu_hourly_usd", self.gpu_hourly_usd),
            ("mb_per_gb", self.mb_per_gb),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("pricing.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `duration × (ram_mb / mb_per_gb) × price per GB-second`.
pub fn lambda_invocation_cost(duration_s: f64, ram_mb: f64, pricing: &PricingConfig) -> Result<f64> {
    if !(duration_s >= 0.0) {
        return Err(Error::contract(format!("duration must be >= 0, got {duration_s}")));
    }
    if !(ram_mb > 0.0) {
        return Err(Error::contract(format!("ram_mb must be > 0, got {ram_mb}")));
    }
    Ok(duration_s * (ram_mb / pricing.mb_per_gb) * pricing.lambda_gb_second_usd)
}

pub fn worker_epoch_cost(per_invocation_usd: f64, invocations: u64) -> f64 {
    per_invocation_usd * invocations as f64
}

pub fn total_cost(per_worker_usd: f64, workers: u64) -> f64 {
    per_worker_usd * workers as f64
}

/// `instances × duration / 3600 × hourly price`.
pub fn gpu_cost(duration_s: f64, instances: u64, pricing: &PricingConfig) -> Result<f64> {
    if !(duration_s >= 0.0) {
        return Err(Error::contract(format!("duration must be >= 0, got {duration_s}")));
    }
    Ok(instances as f64 * duration_s / 3600.0 * pricing.gpu_hourly_usd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Deployment {
    Serverless,
    Gpu,
}

impl fmt::Display for Deployment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Deployment::Serverless => "serverless",
            Deployment::Gpu => "gpu",
        })
    }
}

/// Per-epoch cost breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub deployment: Deployment,
    pub per_invocation_usd: f64,
    pub invocations_per_worker: u64,
    pub cost_per_worker_usd: f64,
    pub workers: u64,
    pub total_usd: f64,
    /// Billed duration of one invocation (serverless) or of the epoch (gpu).
    pub duration_s: f64,
    pub ram_mb: Option<f64>,
}

impl CostRecord {
    /// Checks `per_worker = invocations × per_invocation` and
    /// `total = workers × per_worker` to 1e-12 relative.
    pub fn check_consistency(&self) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        if !close(
            self.cost_per_worker_usd,
            worker_epoch_cost(self.per_invocation_usd, self.invocations_per_worker),
        ) {
            return Err(Error::contract("cost per worker disagrees with invocations × per-invocation cost"));
        }
        if !close(self.total_usd, total_cost(self.cost_per_worker_usd, self.workers)) {
            return Err(Error::contract("total cost disagrees with workers × per-worker cost"));
        }
        Ok(())
    }
}

/// What an epoch consumed, as input to [`build_cost_report`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    /// Duration of every billed invocation in the epoch.
    pub invocation_durations_s: Vec<f64>,
    pub invocations_per_worker: u64,
    pub workers: u64,
    pub ram_mb: Option<f64>,
    /// Wall-clock length of the epoch (gpu billing).
    pub epoch_duration_s: Option<f64>,
}

/// Serverless cost bills the mean invocation duration, so the total equals
/// the sum of every invocation's own cost. GPU cost bills each instance for
/// the whole epoch.
pub fn build_cost_report(usage: &Usage, pricing: &PricingConfig, deployment: Deployment) -> Result<CostRecord> {
    pricing.validate()?;
    let record = match deployment {
        Deployment::Serverless => {
            let ram_mb = usage
                .ram_mb
                .ok_or_else(|| Error::contract("serverless cost needs ram_mb"))?;
            let (duration_s, per_invocation_usd) = if usage.invocations_per_worker == 0 || usage.workers == 0 {
                (0.0, 0.0)
            } else {
                if usage.invocation_durations_s.is_empty() {
                    return Err(Error::contract("no invocation durations recorded"));
                }
                let n = usage.invocation_durations_s.len() as f64;
                let mean = usage.invocation_durations_s.iter().sum::<f64>() / n;
                (mean, lambda_invocation_cost(mean, ram_mb, pricing)?)
            };
            let per_worker = worker_epoch_cost(per_invocation_usd, usage.invocations_per_worker);
            CostRecord {
                deployment,
                per_invocation_usd,
                invocations_per_worker: usage.invocations_per_worker,
                cost_per_worker_usd: per_worker,
                workers: usage.workers,
                total_usd: total_cost(per_worker, usage.workers),
                duration_s,
                ram_mb: Some(ram_mb),
            }
        }
        Deployment::Gpu => {
            let duration_s = usage
                .epoch_duration_s
                .ok_or_else(|| Error::contract("gpu cost needs the epoch duration"))?;
            let per_instance = gpu_cost(duration_s, 1, pricing)?;
            CostRecord {
                deployment,
                per_invocation_usd: per_instance,
                invocations_per_worker: 1,
                cost_per_worker_usd: per_instance,
                workers: usage.workers,
                total_usd: total_cost(per_instance, usage.workers),
                duration_s,
                ram_mb: None,
            }
        }
    };
    record.check_consistency()?;
    Ok(record)
}

/// Formats with 4 significant figures.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.3e}").parse().expect("float formats round-trip");
    let mag = rounded.abs().log10().floor() as i32;
    if mag >= 3 {
        format!("{rounded:.0}")
    } else {
        format!("{:.*}", (3 - mag) as usize, rounded)
    }
}

/// Tolerance for reproducing a reference figure.
pub const REPRODUCE_TOLERANCE: f64 = 0.005;
/// Minimum disagreement for a figure to count as inconsistent with the formula.
pub const INCONSISTENT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostColumn {
    PerInvocation,
    PerWorker,
    Total,
}

impl fmt::Display for CostColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostColumn::PerInvocation => "per_invocation",
            CostColumn::PerWorker => "per_worker",
            CostColumn::Total => "total",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// Within [`REPRODUCE_TOLERANCE`].
    Reproduced,
    /// Off by more than [`INCONSISTENT_THRESHOLD`].
    Inconsistent,
    /// In between: neither reproduced nor clearly inconsistent.
    Marginal,
}

/// One row of reference figures: a framework/model pair with its measured
/// duration, RAM and printed costs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub framework: &'static str,
    pub model: &'static str,
    pub deployment: Deployment,
    pub duration_s: f64,
    pub ram_mb: Option<f64>,
    pub invocations: u64,
    pub workers: u64,
    pub per_invocation_usd: Option<f64>,
    pub per_worker_usd: f64,
    pub total_usd: f64,
    /// Whether the per-invocation figure follows from duration and RAM.
    pub per_invocation_consistent: bool,
}

const fn lambda_row(
    framework: &'static str,
    model: &'static str,
    duration_s: f64,
    ram_mb: f64,
    figures: [f64; 3],
    consistent: bool,
) -> ReferenceRow {
    ReferenceRow {
        framework,
        model,
        deployment: Deployment::Serverless,
        duration_s,
        ram_mb: Some(ram_mb),
        invocations: 24,
        workers: 4,
        per_invocation_usd: Some(figures[0]),
        per_worker_usd: figures[1],
        total_usd: figures[2],
        per_invocation_consistent: consistent,
    }
}

const fn gpu_row(model: &'static str, duration_s: f64, per_worker: f64, total: f64) -> ReferenceRow {
    ReferenceRow {
        framework: "GPU",
        model,
        deployment: Deployment::Gpu,
        duration_s,
        ram_mb: None,
        invocations: 1,
        workers: 4,
        per_invocation_usd: None,
        per_worker_usd: per_worker,
        total_usd: total,
        per_invocation_consistent: true,
    }
}

/// Reference per-epoch figures: 4 workers, 24 invocations per worker.
pub const REFERENCE_ROWS: [ReferenceRow; 10] = [
    lambda_row("SPIRT", "MobileNet", 15.44, 2685.0, [0.000689, 0.0165, 0.0660], true),
    lambda_row("ScatterReduce", "MobileNet", 14.343, 2048.0, [0.000442, 0.0106, 0.0422], false),
    lambda_row("AllReduce", "MobileNet", 14.382, 2048.0, [0.000445, 0.0107, 0.0427], false),
    lambda_row("MLLess", "MobileNet", 69.425, 3024.0, [0.003496, 0.0839, 0.3356], true),
    gpu_row("MobileNet", 92.0, 0.01344, 0.0538),
    lambda_row("SPIRT", "ResNet-18", 28.55, 3200.0, [0.001523, 0.0365, 0.1460], true),
    lambda_row("ScatterReduce", "ResNet-18", 27.17, 2880.0, [0.001302, 0.0312, 0.1249], true),
    lambda_row("AllReduce", "ResNet-18", 26.79, 2986.0, [0.001382, 0.0332, 0.1328], false),
    lambda_row("MLLess", "ResNet-18", 78.39, 3630.0, [0.004737, 0.1137, 0.4548], true),
    gpu_row("ResNet-18", 139.0, 0.0203, 0.0812),
];

/// One checked figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCheckLine {
    pub framework: String,
    pub model: String,
    pub column: CostColumn,
    pub reference: f64,
    pub computed: f64,
    /// `|computed − reference| / |reference|`.
    pub rel_error: f64,
    pub verdict: Verdict,
    pub expected: Verdict,
    pub passed: bool,
}

fn verdict_for(rel_error: f64) -> Verdict {
    if rel_error <= REPRODUCE_TOLERANCE {
        Verdict::Reproduced
    } else if rel_error > INCONSISTENT_THRESHOLD {
        Verdict::Inconsistent
    } else {
        Verdict::Marginal
    }
}

fn line(row: &ReferenceRow, column: CostColumn, reference: f64, computed: f64, expected: Verdict) -> CostCheckLine {
    let rel_error = (computed - reference).abs() / reference.abs();
    let verdict = verdict_for(rel_error);
    CostCheckLine {
        framework: row.framework.to_string(),
        model: row.model.to_string(),
        column,
        reference,
        computed,
        rel_error,
        verdict,
        expected,
        passed: verdict == expected,
    }
}

/// Recomputes every reference figure from its own inputs, the way the
/// figures were derived: per-invocation from duration and RAM, per-worker
/// from the listed per-invocation cost, total from the listed per-worker
/// cost. GPU rows bill one and then all instances for the epoch.
pub fn check_reference_rows(pricing: &PricingConfig) -> Result<Vec<CostCheckLine>> {
    pricing.validate()?;
    let mut lines = Vec::new();
    for row in &REFERENCE_ROWS {
        match row.deployment {
            Deployment::Serverless => {
                let ram = row.ram_mb.expect("serverless rows list RAM");
                let listed = row.per_invocation_usd.expect("serverless rows list per-invocation cost");
                let expected = if row.per_invocation_consistent {
                    Verdict::Reproduced
                } else {
                    Verdict::Inconsistent
                };
                let computed = lambda_invocation_cost(row.duration_s, ram, pricing)?;
                lines.push(line(row, CostColumn::PerInvocation, listed, computed, expected));
                let per_worker = worker_epoch_cost(listed, row.invocations);
                lines.push(line(row, CostColumn::PerWorker, row.per_worker_usd, per_worker, Verdict::Reproduced));
            }
            Deployment::Gpu => {
                let per_worker = gpu_cost(row.duration_s, 1, pricing)?;
                lines.push(line(row, CostColumn::PerWorker, row.per_worker_usd, per_worker, Verdict::Reproduced));
            }
        }
        let total = match row.deployment {
            Deployment::Serverless => total_cost(row.per_worker_usd, row.workers),
            Deployment::Gpu => gpu_cost(row.duration_s, row.workers, pricing)?,
        };
        lines.push(line(row, CostColumn::Total, row.total_usd, total, Verdict::Reproduced));
    }
    Ok(lines)
}

/// Straight-through formula values for a row (per-invocation, per-worker,
/// total), without reusing any listed figure.
pub fn end_to_end(row: &ReferenceRow, pricing: &PricingConfig) -> Result<[f64; 3]> {
    match row.deployment {
        Deployment::Serverless => {
            let per_inv = lambda_invocation_cost(row.duration_s, row.ram_mb.unwrap_or(0.0), pricing)?;
            let per_worker = worker_epoch_cost(per_inv, row.invocations);
            Ok([per_inv, per_worker, total_cost(per_worker, row.workers)])
        }
        Deployment::Gpu => {
            let one = gpu_cost(row.duration_s, 1, pricing)?;
            Ok([one, one, gpu_cost(row.duration_s, row.workers, pricing)?])
        }
    }
}
