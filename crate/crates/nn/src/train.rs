//! Mini-batch training with early stopping, metrics and inference.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tpa_core::dataset::{fit_scaler, PLDataset, ScalerKind, ScalerState, TARGET_COLUMNS};

use crate::adam::{adam_step, AdamState};
use crate::network::{batch_loss, draw_masks, gradient, init_network, predict, NetworkConfig, NetworkParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Seeds the per-epoch shuffles and the dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-4,
            patience: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.patience > self.epochs {
            return Err(Error::Config("patience may not exceed epochs".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses in scaled target space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean of the mini-batch losses over the epoch (dropout active).
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val(&self) -> f64 {
        self.val_mse.get(self.best_epoch).copied().unwrap_or(f64::INFINITY)
    }

    pub fn best_train(&self) -> f64 {
        self.train_mse.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_mse,val_mse")?;
        for (k, (t, v)) in self.train_mse.iter().zip(&self.val_mse).enumerate() {
            writeln!(out, "{k},{t},{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: NetworkConfig,
    pub params: NetworkParams,
    pub feature_scaler: ScalerState,
    pub target_scaler: ScalerState,
    pub train_config: TrainConfig,
    pub history: History,
}

/// Scaled copies of a split.
pub struct Scaled {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

pub fn scale_split(ds: &PLDataset, features: &ScalerState, targets: &ScalerState) -> Result<Scaled> {
    Ok(Scaled {
        x: features.transform(ds.features.view())?,
        y: targets.transform(ds.targets.view())?,
    })
}

/// Scalers of one kind, fitted on the training split only.
pub fn fit_scalers(train: &PLDataset, kind: ScalerKind) -> Result<(ScalerState, ScalerState)> {
    Ok((
        fit_scaler(kind, train.features.view())?,
        fit_scaler(kind, train.targets.view())?,
    ))
}

/// Trains on `train`, early-stopping on `val`; returns the snapshot with the
/// lowest validation loss.
pub fn train(
    train: &PLDataset,
    val: &PLDataset,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    kind: ScalerKind,
) -> Result<TrainedModel> {
    let (fs, ts) = fit_scalers(train, kind)?;
    let tr = scale_split(train, &fs, &ts)?;
    let va = scale_split(val, &fs, &ts)?;
    let (params, history) = train_scaled(&tr, &va, net, cfg)?;
    Ok(TrainedModel {
        config: net.clone(),
        params,
        feature_scaler: fs,
        target_scaler: ts,
        train_config: *cfg,
        history,
    })
}

/// Training loop on already-scaled data.
pub fn train_scaled(
    tr: &Scaled,
    va: &Scaled,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, History)> {
    cfg.validate()?;
    let n = tr.x.nrows();
    if n == 0 || va.x.nrows() == 0 {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut params = init_network(net)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = tr.x.select(Axis(0), batch);
            let y = tr.y.select(Axis(0), batch);
            let masks = (net.dropout_p > 0.0).then(|| draw_masks(&params, batch.len(), net.dropout_p, &mut dropout_rng));
            let (l, g) = gradient(&params, x.view(), y.view(), masks.as_ref())?;
            sum += l * batch.len() as f64;
            adam_step(&mut adam, &mut params, &g, cfg.learning_rate);
        }
        let train_mse = sum / n as f64;
        let val_mse = mse(&params, va.x.view(), va.y.view())?;
        if !train_mse.is_finite() || !val_mse.is_finite() || !params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.train_mse.push(train_mse);
        history.val_mse.push(val_mse);
        if val_mse < best.0 {
            best = (val_mse, params.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.1, history))
}

/// Dataset-mean squared error in inference mode.
pub fn mse(params: &NetworkParams, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let pred = predict(params, x)?;
    Ok(batch_loss(pred.view(), y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// Per-target metrics in scaled and in physical target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: ScalerKind,
    pub scaled: Vec<TargetMetrics>,
    pub physical: Vec<TargetMetrics>,
}

pub fn metrics(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<Vec<TargetMetrics>> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape {
            expected: truth.ncols(),
            actual: pred.ncols(),
        });
    }
    let n = truth.nrows() as f64;
    (0..truth.ncols())
        .map(|j| {
            let (p, t) = (pred.column(j), truth.column(j));
            let mean = t.sum() / n;
            let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
            let mae = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            if !(ss_tot > 0.0) {
                return Err(Error::UndefinedMetric { column: j });
            }
            Ok(TargetMetrics {
                target: TARGET_COLUMNS.get(j).map_or_else(|| format!("target_{j}"), |s| s.to_string()),
                rmse: (ss_res / n).sqrt(),
                mae,
                r2: 1.0 - ss_res / ss_tot,
            })
        })
        .collect()
}

pub fn evaluate(model: &TrainedModel, test: &PLDataset) -> Result<Evaluation> {
    let sc = scale_split(test, &model.feature_scaler, &model.target_scaler)?;
    let pred = predict(&model.params, sc.x.view())?;
    let physical = model.target_scaler.inverse_transform(pred.view())?;
    Ok(Evaluation {
        kind: model.feature_scaler.kind,
        scaled: metrics(pred.view(), sc.y.view())?,
        physical: metrics(physical.view(), test.targets.view())?,
    })
}

impl Evaluation {
    pub fn r2(&self, target: &str) -> Option<f64> {
        self.scaled.iter().find(|m| m.target == target).map(|m| m.r2)
    }

    /// `method, target, rmse, mae, r2`; physical rows carry a `_physical`
    /// suffix on the method.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let kind = serde_json::to_value(self.kind)?;
        let kind = kind.as_str().unwrap_or("unknown");
        writeln!(out, "method,target,rmse,mae,r2")?;
        for (method, rows) in [(kind.to_string(), &self.scaled), (format!("{kind}_physical"), &self.physical)] {
            for m in rows {
                writeln!(out, "{method},{},{},{},{}", m.target, m.rmse, m.mae, m.r2)?;
            }
        }
        Ok(())
    }
}

/// Scale a 55-value PL trace, run the network, and map back to
/// `[Ω2P cm⁻¹, γ2 fs⁻¹, Γ12 fs⁻¹]`.
pub fn predict_params(model: &TrainedModel, trace: &[f64]) -> Result<[f64; 3]> {
    let width = model.params.input_width();
    if trace.len() != width {
        return Err(Error::Shape {
            expected: width,
            actual: trace.len(),
        });
    }
    let x = Array2::from_shape_vec((1, width), model.feature_scaler.transform_row(trace)?).expect("row shape");
    let y = predict(&model.params, x.view())?;
    let q = model.target_scaler.inverse_row(y.slice(s![0, ..]).as_slice().expect("contiguous row"))?;
    Ok([q[0], q[1], q[2]])
}

#[derive(Serialize, Deserialize)]
struct ScalerPair {
    features: ScalerState,
    targets: ScalerState,
}

/// On-disk model layout.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    hidden_sizes: Vec<usize>,
    dropout_p: f64,
    seed: u64,
    input_width: usize,
    output_width: usize,
    /// Row-major `fan_in × fan_out` per layer.
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    scaler_states: ScalerPair,
    train_config: TrainConfig,
    history: History,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            hidden_sizes: self.config.hidden_sizes.clone(),
            dropout_p: self.config.dropout_p,
            seed: self.config.seed,
            input_width: self.config.input_width,
            output_width: self.config.output_width,
            weights: self
                .params
                .layers
                .iter()
                .map(|l| l.w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: self.params.layers.iter().map(|l| l.b.to_vec()).collect(),
            scaler_states: ScalerPair {
                features: self.feature_scaler.clone(),
                targets: self.target_scaler.clone(),
            },
            train_config: self.train_config,
            history: self.history.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        let config = NetworkConfig {
            hidden_sizes: f.hidden_sizes,
            dropout_p: f.dropout_p,
            seed: f.seed,
            input_width: f.input_width,
            output_width: f.output_width,
        };
        config.validate()?;
        let widths = config.widths();
        if f.weights.len() != widths.len() - 1 || f.biases.len() != widths.len() - 1 {
            return Err(Error::Config("layer count does not match hidden_sizes".into()));
        }
        let mut params = init_network(&config)?;
        for (k, layer) in params.layers.iter_mut().enumerate() {
            let (fan_in, fan_out) = (widths[k], widths[k + 1]);
            let rows = &f.weights[k];
            if rows.len() != fan_in || rows.iter().any(|r| r.len() != fan_out) || f.biases[k].len() != fan_out {
                return Err(Error::Config(format!("layer {k} has the wrong shape")));
            }
            for (i, r) in rows.iter().enumerate() {
                for (j, &v) in r.iter().enumerate() {
                    layer.w[[i, j]] = v;
                }
            }
            layer.b = ndarray::Array1::from(f.biases[k].clone());
        }
        Ok(TrainedModel {
            config,
            params,
            feature_scaler: f.scaler_states.features,
            target_scaler: f.scaler_states.targets,
            train_config: f.train_config,
            history: f.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Targets are a fixed linear map of the features plus a kink.
    fn synthetic(n: usize, seed: u64) -> PLDataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 55), || rng.gen_range(0.0f64..1.0));
        let y = Array2::from_shape_fn((n, 3), |(i, j)| {
            let r = x.row(i);
            match j {
                0 => 300.0 + 200.0 * r[0] + 50.0 * r[1],
                1 => 0.01 + 0.02 * r[2] * r[3],
                _ => 0.004 + 0.004 * (r[4] - 0.5).max(0.0),
            }
        });
        PLDataset::new(x, y, seed).unwrap()
    }

    fn small_cfg(epochs: usize, patience: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 1e-3,
            patience,
            seed: 5,
        }
    }

    #[test]
    fn training_reduces_validation_loss_and_keeps_best() {
        let (tr, va) = (synthetic(300, 1), synthetic(100, 2));
        let net = NetworkConfig::new(vec![16]);
        let m = train(&tr, &va, &net, &small_cfg(60, 0), ScalerKind::Standard).unwrap();
        let h = &m.history;
        assert_eq!(h.val_mse.len(), 60);
        assert!(!h.stopped_early);
        assert!(h.best_val() < h.val_mse[0] / 2.0);
        let best = h.val_mse.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val(), best);
        let sc = scale_split(&va, &m.feature_scaler, &m.target_scaler).unwrap();
        assert_eq!(mse(&m.params, sc.x.view(), sc.y.view()).unwrap(), best);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = (synthetic(120, 3), synthetic(40, 4));
        let net = NetworkConfig {
            dropout_p: 0.2,
            ..NetworkConfig::new(vec![8, 4])
        };
        let a = train(&tr, &va, &net, &small_cfg(5, 0), ScalerKind::Robust).unwrap();
        let b = train(&tr, &va, &net, &small_cfg(5, 0), ScalerKind::Robust).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patience_stops_early() {
        let (tr, va) = (synthetic(100, 5), synthetic(30, 6));
        let cfg = TrainConfig {
            learning_rate: 1.0,
            ..small_cfg(200, 3)
        };
        match train(&tr, &va, &NetworkConfig::new(vec![8]), &cfg, ScalerKind::Standard) {
            Ok(m) => assert!(m.history.val_mse.len() < 200),
            Err(Error::Divergence { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 600, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn metric_definitions() {
        let t = array![[1.0], [2.0], [3.0]];
        let m = &metrics(t.view(), t.view()).unwrap()[0];
        assert_eq!((m.rmse, m.mae, m.r2), (0.0, 0.0, 1.0));
        let mean = array![[2.0], [2.0], [2.0]];
        assert_eq!(metrics(mean.view(), t.view()).unwrap()[0].r2, 0.0);
        assert!(matches!(metrics(t.view(), mean.view()), Err(Error::UndefinedMetric { column: 0 })));
    }

    #[test]
    fn model_json_round_trip_and_prediction() {
        let (tr, va) = (synthetic(80, 7), synthetic(20, 8));
        let m = train(&tr, &va, &NetworkConfig::new(vec![6]), &small_cfg(3, 0), ScalerKind::RobustWinsor).unwrap();
        let text = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["hidden_sizes", "weights", "biases", "scaler_states", "train_config", "history"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back = TrainedModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        let row = tr.features.row(0).to_vec();
        let q = predict_params(&back, &row).unwrap();
        assert!(q.iter().all(|v| v.is_finite()));
        assert!(predict_params(&back, &row[..10]).is_err());
    }
}
