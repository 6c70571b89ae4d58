//! Run configuration: JSON file, then `--set path=value` overrides, then
//! validation of every section.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tpa_core::dataset::{ParamRanges, ScalerKind};
use tpa_core::field::PulseSpec;
use tpa_core::lindblad::{MolecularParams, SolverSettings};
use tpa_core::pl::{beta_grid, PLScaling};
use tpa_core::simplex::FitSettings;
use tpa_nn::sweep::sweep_train_config;
use tpa_nn::{NetworkConfig, TrainConfig};

use crate::CliError;

/// A uniform control grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Axis {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        Ok(beta_grid(self.n, self.lo, self.hi)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grids {
    /// Chirp values of a trace and the dataset features (fs²).
    pub beta: Axis,
    /// Delays of the control surface (fs).
    pub tau: Axis,
    /// Delay at which β traces are taken (fs).
    pub trace_tau: f64,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            beta: Axis {
                n: 55,
                lo: -3000.0,
                hi: 3000.0,
            },
            tau: Axis {
                n: 21,
                lo: 0.0,
                hi: 200.0,
            },
            trace_tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub arch_ids: Vec<usize>,
    pub bags: usize,
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            arch_ids: (1..=18).collect(),
            bags: 10,
            train: sweep_train_config(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGridConfig {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for HyperGridConfig {
    fn default() -> Self {
        HyperGridConfig {
            batch_sizes: vec![64, 128, 256, 512],
            learning_rates: vec![1.0, 1e-1, 1e-2, 1e-3, 1e-4],
            epochs: 200,
            patience: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for sampling, splits, starts and training.
    pub seed: u64,
    pub molecular: MolecularParams,
    pub pulse: PulseSpec,
    pub scaling: PLScaling,
    pub solver: SolverSettings,
    pub grids: Grids,
    pub ranges: ParamRanges,
    pub dataset: DatasetConfig,
    pub fit: FitSettings,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub scaler: ScalerKind,
    pub sweep: SweepConfig,
    pub hyper_grid: HyperGridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            molecular: MolecularParams::default(),
            pulse: PulseSpec::default(),
            scaling: PLScaling::default(),
            solver: SolverSettings::default(),
            grids: Grids::default(),
            ranges: ParamRanges::default(),
            dataset: DatasetConfig::default(),
            fit: FitSettings::default(),
            network: NetworkConfig::new(vec![128, 64, 32]),
            train: TrainConfig::default(),
            scaler: ScalerKind::Standard,
            sweep: SweepConfig::default(),
            hyper_grid: HyperGridConfig::default(),
        }
    }
}

fn invalid(path: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {e}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.molecular.validate().map_err(|e| invalid("molecular", e))?;
        self.pulse.validate().map_err(|e| invalid("pulse", e))?;
        self.scaling.validate().map_err(|e| invalid("scaling", e))?;
        self.solver.validate().map_err(|e| invalid("solver", e))?;
        self.grids.beta.values().map_err(|e| invalid("grids.beta", e))?;
        self.grids.tau.values().map_err(|e| invalid("grids.tau", e))?;
        if !self.grids.trace_tau.is_finite() {
            return Err(invalid("grids.trace_tau", "must be finite"));
        }
        self.ranges.validate().map_err(|e| invalid("ranges", e))?;
        if self.dataset.n < 5 {
            return Err(invalid("dataset.n", "need at least 5 rows"));
        }
        self.fit.validate().map_err(|e| invalid("fit", e))?;
        if self.fit.n_starts == 0 {
            return Err(invalid("fit.n_starts", "must be at least 1"));
        }
        self.network.validate().map_err(|e| invalid("network", e))?;
        if self.network.input_width != self.grids.beta.n {
            return Err(invalid("network.input_width", "must equal grids.beta.n"));
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.sweep.train.validate().map_err(|e| invalid("sweep.train", e))?;
        if self.sweep.bags == 0 || self.sweep.arch_ids.is_empty() {
            return Err(invalid("sweep", "need at least one architecture and one bag"));
        }
        if let Some(id) = self.sweep.arch_ids.iter().find(|&&id| tpa_nn::sweep::architecture(id).is_none()) {
            return Err(invalid("sweep.arch_ids", format!("unknown id {id}")));
        }
        let g = &self.hyper_grid;
        if g.batch_sizes.is_empty() || g.learning_rates.is_empty() {
            return Err(invalid("hyper_grid", "axes must be non-empty"));
        }
        if g.batch_sizes.contains(&0) || g.learning_rates.iter().any(|&l| !(l > 0.0)) {
            return Err(invalid("hyper_grid", "batch sizes and learning rates must be positive"));
        }
        if g.epochs == 0 || g.patience > g.epochs {
            return Err(invalid("hyper_grid", "need epochs ≥ 1 and patience ≤ epochs"));
        }
        Ok(())
    }

    /// Lays `file` over the defaults, applies `overrides`
    /// (`dotted.path=value`), then parses and validates. Override values are
    /// read as JSON, falling back to a bare string.
    pub fn from_value(file: Value, overrides: &[String]) -> Result<Self, CliError> {
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, file);
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not of the form key.path=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut base, path.trim(), value)?;
        }
        let cfg: RunConfig =
            serde_path_to_error::deserialize(base).map_err(|e| invalid(&e.path().to_string(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: Option<&str>, overrides: &[String]) -> Result<Self, CliError> {
        let base = match text {
            Some(t) if !t.trim().is_empty() => {
                serde_json::from_str(t).map_err(|e| CliError::Config(format!("config file: {e}")))?
            }
            _ => Value::Object(Default::default()),
        };
        RunConfig::from_value(base, overrides)
    }

    /// Single-line JSON echo for artifact headers.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Recursive object merge; anything that is not an object replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (k, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::Usage(format!("empty segment in key path `{path}`")));
        }
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => return Err(invalid(path, format!("`{}` is not a section", keys[..k].join(".")))),
        };
        if k + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = RunConfig::parse(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.molecular.omega_2p, 531.0);
        assert_eq!(c.scaling.a, 742.88);
        assert_eq!(c.pulse.center_wavenumber, 12_987.0);
        assert_eq!(RunConfig::parse(Some("{}"), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_are_echoed() {
        let c = RunConfig::parse(None, &["molecular.gamma2=0.02".into()]).unwrap();
        assert_eq!(c.molecular.gamma2, 0.02);
        assert!(c.echo().contains("\"gamma2\":0.02"));
        let c = RunConfig::parse(Some(r#"{"scaler": "robust"}"#), &["scaler=robust_winsor".into()]).unwrap();
        assert_eq!(c.scaler, ScalerKind::RobustWinsor);
    }

    #[test]
    fn bad_values_name_their_key() {
        let e = RunConfig::parse(None, &["molecular.gamma2=-1".into()]).unwrap_err();
        assert!(e.to_string().contains("molecular"), "{e}");
        let e = RunConfig::parse(Some(r#"{"molecular": {"gama2": 1}}"#), &[]).unwrap_err();
        assert!(e.to_string().contains("molecular"), "{e}");
        assert!(e.to_string().contains("gama2"), "{e}");
        assert!(RunConfig::parse(None, &["nonsense".into()]).is_err());
        assert!(RunConfig::parse(None, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse(None, &["fit.n_starts=9".into(), "seed=4".into()]).unwrap();
        assert_eq!(RunConfig::parse(Some(&c.echo()), &[]).unwrap(), c);
    }
}
