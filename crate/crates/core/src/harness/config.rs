use serde::{Deserialize, Serialize};

use crate::cost::PricingConfig;
use crate::error::{Error, Result};
use crate::sgd::Dims;
use crate::strategies::{ComputeModel, ProtocolConfig, SchedulerMode, StrategyKind, DEFAULT_POLL_BUDGET};
use crate::substrate::LatencyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyKind,
    pub workers: usize,
    /// MLLess significance threshold. `inf` filters every update.
    #[serde(with = "crate::float_serde")]
    pub tau: f64,
    /// SPIRT minibatches per round; other strategies always use one.
    pub minibatches_per_round: usize,
    pub scheduler: SchedulerMode,
    pub poll_budget: u64,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            kind: StrategyKind::AllReduce,
            workers: 4,
            tau: 0.0,
            minibatches_per_round: 1,
            scheduler: SchedulerMode::Deterministic,
            poll_budget: DEFAULT_POLL_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub classes: usize,
    pub features: usize,
    /// Example-parameter products per simulated second.
    pub compute_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            classes: 3,
            features: 16,
            compute_rate: ComputeModel::default().rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: 2048,
            separation: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub batches_per_worker: usize,
    pub seed: u64,
    pub early_stop: bool,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 5,
            lr: 0.5,
            batch_size: 32,
            batches_per_worker: 16,
            seed: 0,
            early_stop: false,
            patience: 3,
            min_delta: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    /// Memory allocated to each function, used for GB-second billing.
    pub ram_mb_assumed: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection { ram_mb_assumed: 2048.0 }
    }
}

/// Full experiment description. Every section and key is optional; missing
/// values fall back to the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: StrategySection,
    pub model: ModelSection,
    pub data: DataSection,
    pub training: TrainingSection,
    pub pricing: PricingConfig,
    pub cost: CostSection,
    pub latency: LatencyModel,
}

impl ExperimentConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(self.model.classes, self.model.features)
    }

    /// Minibatches each worker consumes per round.
    pub fn batches_per_round(&self) -> usize {
        if self.strategy.kind == StrategyKind::SpirtP2P {
            self.strategy.minibatches_per_round
        } else {
            1
        }
    }

    pub fn rounds_per_epoch(&self) -> usize {
        self.training.batches_per_worker / self.batches_per_round().max(1)
    }

    /// True when the run should match the single-node oracle exactly.
    pub fn is_exact(&self) -> bool {
        match self.strategy.kind {
            StrategyKind::MLLessPS => self.strategy.tau == 0.0,
            StrategyKind::SpirtP2P => self.strategy.minibatches_per_round == 1,
            _ => true,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            kind: self.strategy.kind,
            workers: self.strategy.workers,
            lr: self.training.lr,
            tau: self.strategy.tau,
            poll_budget: self.strategy.poll_budget,
            latency: self.latency,
            compute: ComputeModel {
                rate: self.model.compute_rate,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.strategy;
        let t = &self.training;
        if s.workers == 0 {
            return Err(Error::config("strategy.workers must be >= 1"));
        }
        if s.minibatches_per_round == 0 {
            return Err(Error::config("strategy.minibatches_per_round must be >= 1"));
        }
        if t.batch_size == 0 || t.batches_per_worker == 0 {
            return Err(Error::config(
                "training.batch_size and training.batches_per_worker must be >= 1",
            ));
        }
        if t.epochs == 0 {
            return Err(Error::config("training.epochs must be >= 1"));
        }
        if !t.batches_per_worker.is_multiple_of(self.batches_per_round()) {
            return Err(Error::config(format!(
                "training.batches_per_worker ({}) must be a multiple of strategy.minibatches_per_round ({})",
                t.batches_per_worker,
                self.batches_per_round()
            )));
        }
        if t.early_stop && t.patience == 0 {
            return Err(Error::config("training.patience must be >= 1"));
        }
        if !(t.min_delta >= 0.0) {
            return Err(Error::config("training.min_delta must be >= 0"));
        }
        self.dims().validate()?;
        let needed = s.workers * t.batches_per_worker * t.batch_size;
        if needed > self.data.n {
            return Err(Error::config(format!(
                "workers × batches_per_worker × batch_size = {needed} exceeds data.n = {}",
                self.data.n
            )));
        }
        if !(self.data.separation >= 0.0 && self.data.separation.is_finite()) {
            return Err(Error::config("data.separation must be finite and >= 0"));
        }
        if s.kind == StrategyKind::ScatterReduce && s.workers > self.dims().param_len() {
            return Err(Error::config(format!(
                "ScatterReduce needs workers <= parameter count ({})",
                self.dims().param_len()
            )));
        }
        if !(self.cost.ram_mb_assumed > 0.0) {
            return Err(Error::config("cost.ram_mb_assumed must be > 0"));
        }
        self.pricing.validate()?;
        self.protocol().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides. Values
    /// are read as TOML literals, falling back to a plain string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let given: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        let mut table = toml::Table::try_from(ExperimentConfig::default())
            .expect("default config serializes to TOML");
        merge(&mut table, given);
        for (key, raw) in overrides {
            apply_override(&mut table, key, raw)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string().trim_end().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Splits `key=value`.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{text}' is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::config(format!("override '{text}' has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Overlays `over` onto `base`, descending into nested tables so a partial
/// section keeps the defaults for keys it leaves out.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key '{key}'")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for part in path {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{key}': '{part}' is not a section")))?;
    }
    cursor.insert(last.to_string(), literal(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_typed_values() {
        let o = |s: &str| parse_override(s).unwrap();
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "[strategy]\nkind = \"spirt\"\n",
            &[
                o("strategy.workers=2"),
                o("strategy.kind=mlless"),
                o("strategy.tau=0.05"),
                o("training.lr = 0.25"),
                o("latency.queue.fixed_latency=0.5"),
            ],
        )
        .unwrap();
        assert_eq!(cfg.strategy.kind, StrategyKind::MLLessPS);
        assert_eq!(cfg.strategy.workers, 2);
        assert_eq!(cfg.strategy.tau, 0.05);
        assert_eq!(cfg.training.lr, 0.25);
        assert_eq!(cfg.latency.queue.fixed_latency, 0.5);
        assert_eq!(cfg.latency.queue.bandwidth, LatencyModel::default().queue.bandwidth);
    }

    #[test]
    fn infinite_tau_is_accepted() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "",
            &[parse_override("strategy.tau=inf").unwrap()],
        )
        .unwrap();
        assert!(cfg.strategy.tau.is_infinite());
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let cases = [
            "[strategy]\nkind = \"ringreduce\"\n",
            "[strategy]\nworkers = 0\n",
            "[training]\nlr = -1.0\n",
            "[strategy]\ntau = -0.1\n",
            "[training]\nepochs = 0\n",
            "[training]\nbatch_size = 0\n",
            "[strategy]\nwrokers = 4\n",
            "[model]\nclasses = \"three\"\n",
            "[training]\nbatches_per_worker = 100\n",
            "[strategy]\nkind = \"spirt\"\nminibatches_per_round = 3\n",
            "not toml at all [",
        ];
        for text in cases {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        assert!(parse_override("novalue").is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &[("strategy..kind".into(), "x".into())]).is_err());
    }

    #[test]
    fn exactness_and_rounds() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.is_exact());
        assert_eq!(cfg.rounds_per_epoch(), 16);
        cfg.strategy.kind = StrategyKind::SpirtP2P;
        cfg.strategy.minibatches_per_round = 4;
        assert!(!cfg.is_exact());
        assert_eq!(cfg.rounds_per_epoch(), 4);
        cfg.strategy.kind = StrategyKind::MLLessPS;
        cfg.strategy.tau = 0.01;
        assert!(!cfg.is_exact());
        assert_eq!(cfg.rounds_per_epoch(), 16);
    }
}
