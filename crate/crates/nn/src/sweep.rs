//! Bagged bias–variance sweep over architectures and the batch-size ×
//! learning-rate grid.

use std::io::Write;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tpa_core::dataset::{PLDataset, ScalerKind};

use crate::network::{predict, NetworkConfig};
use crate::train::{fit_scalers, scale_split, train_scaled, Scaled, TrainConfig};
use crate::{Error, Result};

/// Hidden sizes of the complexity indices 1–18.
pub fn architecture(id: usize) -> Option<Vec<usize>> {
    let tail = |top: usize| -> Vec<usize> {
        std::iter::successors(Some(top), |&w| (w > 16).then_some(w / 2)).collect()
    };
    Some(match id {
        1..=7 => vec![4 + 4 * id],
        8 => vec![64, 32],
        9 => vec![76, 48],
        10 => vec![88, 60],
        11 => vec![128, 64],
        12 => vec![128, 64, 32],
        13 => vec![256, 128, 64, 32],
        14..=16 => tail(512 << (id - 14)),
        17 | 18 => {
            let mut v = tail(4096 << (id - 17));
            v.push(4);
            v
        }
        _ => return None,
    })
}

/// Exploratory sweep settings: δ 1e−3, Bs 256, 100 epochs, patience 30.
pub fn sweep_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 256,
        learning_rate: 1e-3,
        patience: 30,
        seed,
    }
}

/// Decomposition at one validation point, averaged over the target vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointDecomposition {
    pub bias2: f64,
    pub variance: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    pub arch_id: usize,
    pub hidden_sizes: Vec<usize>,
    pub bias2: f64,
    pub variance: f64,
    pub total: f64,
    pub points: Vec<PointDecomposition>,
    /// Bags that failed to train, with the reason; excluded from the ensemble.
    pub failures: Vec<(usize, String)>,
}

/// Per-point decomposition of `preds[bag, point, target]` against
/// `truth[point, target]`. Squared errors are summed over targets.
pub fn decompose(preds: &Array3<f64>, truth: &Array2<f64>) -> Vec<PointDecomposition> {
    let bags = preds.len_of(Axis(0)) as f64;
    let mean = preds.mean_axis(Axis(0)).expect("at least one bag");
    (0..truth.nrows())
        .map(|i| {
            let (m, y) = (mean.row(i), truth.row(i));
            let bias2 = m.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            let (mut variance, mut total) = (0.0, 0.0);
            for bag in preds.outer_iter() {
                let p = bag.row(i);
                variance += p.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                total += p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            PointDecomposition {
                bias2,
                variance: variance / bags,
                total: total / bags,
            }
        })
        .collect()
}

/// Resample rows with replacement to the same size.
pub fn bootstrap(data: &Scaled, seed: u64) -> Scaled {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.x.nrows();
    let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    Scaled {
        x: data.x.select(Axis(0), &rows),
        y: data.y.select(Axis(0), &rows),
    }
}

/// Trains `bags` bootstrap models per architecture and decomposes their
/// validation error in scaled target space. Bag `k` uses seed `seed + k` for
/// its bootstrap, initialization and shuffles.
pub fn bias_variance_sweep(
    arch_ids: &[usize],
    bags: usize,
    train: &PLDataset,
    val: &PLDataset,
    kind: ScalerKind,
    cfg: &TrainConfig,
) -> Result<Vec<BiasVariance>> {
    if bags == 0 || arch_ids.is_empty() {
        return Err(Error::Config("need at least one architecture and one bag".into()));
    }
    let hidden: Vec<Vec<usize>> = arch_ids
        .iter()
        .map(|&id| architecture(id).ok_or_else(|| Error::Config(format!("unknown architecture id {id}"))))
        .collect::<Result<_>>()?;
    let (fs, ts) = fit_scalers(train, kind)?;
    let tr = scale_split(train, &fs, &ts)?;
    let va = scale_split(val, &fs, &ts)?;
    let jobs: Vec<(usize, usize)> = (0..arch_ids.len()).flat_map(|a| (0..bags).map(move |b| (a, b))).collect();
    let outcomes: Vec<Result<Array2<f64>>> = jobs
        .par_iter()
        .map(|&(a, bag)| {
            let seed = cfg.seed.wrapping_add(bag as u64);
            let sample = bootstrap(&tr, seed);
            let net = NetworkConfig {
                seed,
                input_width: tr.x.ncols(),
                output_width: tr.y.ncols(),
                ..NetworkConfig::new(hidden[a].clone())
            };
            let (params, _) = train_scaled(&sample, &va, &net, &TrainConfig { seed, ..*cfg })?;
            predict(&params, va.x.view())
        })
        .collect();
    let mut outcomes = outcomes.into_iter();
    let mut report = Vec::with_capacity(arch_ids.len());
    for (a, &id) in arch_ids.iter().enumerate() {
        let mut kept = Vec::new();
        let mut failures = Vec::new();
        for bag in 0..bags {
            match outcomes.next().expect("one outcome per job") {
                Ok(p) => kept.push(p),
                Err(e) => failures.push((bag, e.to_string())),
            }
        }
        if kept.is_empty() {
            let first = failures.first().map_or(String::new(), |f| f.1.clone());
            return Err(Error::Config(format!("every bag failed for architecture {id}: {first}")));
        }
        let views: Vec<_> = kept.iter().map(|p| p.view()).collect();
        let preds = ndarray::stack(Axis(0), &views).expect("equal prediction shapes");
        let points = decompose(&preds, &va.y);
        let mean = |f: fn(&PointDecomposition) -> f64| points.iter().map(f).sum::<f64>() / points.len() as f64;
        report.push(BiasVariance {
            arch_id: id,
            hidden_sizes: hidden[a].clone(),
            bias2: mean(|p| p.bias2),
            variance: mean(|p| p.variance),
            total: mean(|p| p.total),
            points,
            failures,
        });
    }
    Ok(report)
}

pub fn write_sweep_csv<W: Write>(rows: &[BiasVariance], mut out: W) -> Result<()> {
    writeln!(out, "arch_id,bias2,variance,total")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.arch_id, r.bias2, r.variance, r.total)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `+∞` when the run diverged.
    pub best_val_mse: f64,
    pub best_train_mse: f64,
}

/// Best-epoch MSEs, `val[i][j]` for `batch_sizes[i]` and `learning_rates[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub val: Vec<Vec<f64>>,
    pub train: Vec<Vec<f64>>,
}

impl HyperGrid {
    /// `(batch_size, learning_rate)` of the lowest validation MSE.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, 0, f64::INFINITY);
        for (i, row) in self.val.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < best.2 {
                    best = (i, j, v);
                }
            }
        }
        (self.batch_sizes[best.0], self.learning_rates[best.1])
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for (i, &bs) in self.batch_sizes.iter().enumerate() {
            for (j, &lr) in self.learning_rates.iter().enumerate() {
                out.push(GridCell {
                    batch_size: bs,
                    learning_rate: lr,
                    best_val_mse: self.val[i][j],
                    best_train_mse: self.train[i][j],
                });
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bs,lr,best_val_mse,best_train_mse")?;
        for c in self.cells() {
            writeln!(out, "{},{},{},{}", c.batch_size, c.learning_rate, c.best_val_mse, c.best_train_mse)?;
        }
        Ok(())
    }
}

/// Trains `net` once per grid cell with `epochs` and `patience`; every cell
/// shares the seed so only the two swept settings differ.
#[allow(clippy::too_many_arguments)]
pub fn hyperparameter_grid(
    batch_sizes: &[usize],
    learning_rates: &[f64],
    train: &PLDataset,
    val: &PLDataset,
    net: &NetworkConfig,
    kind: ScalerKind,
    epochs: usize,
    patience: usize,
    seed: u64,
) -> Result<HyperGrid> {
    if batch_sizes.is_empty() || learning_rates.is_empty() {
        return Err(Error::Config("grid axes must be non-empty".into()));
    }
    let (fs, ts) = fit_scalers(train, kind)?;
    let tr = scale_split(train, &fs, &ts)?;
    let va = scale_split(val, &fs, &ts)?;
    let cells: Vec<(usize, f64)> = batch_sizes
        .iter()
        .flat_map(|&b| learning_rates.iter().map(move |&l| (b, l)))
        .collect();
    let results: Vec<Result<(f64, f64)>> = cells
        .par_iter()
        .map(|&(batch_size, learning_rate)| {
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate,
                patience,
                seed,
            };
            match train_scaled(&tr, &va, net, &cfg) {
                Ok((_, h)) => Ok((h.best_val(), h.best_train())),
                Err(Error::Divergence { .. }) => Ok((f64::INFINITY, f64::INFINITY)),
                Err(e) => Err(e),
            }
        })
        .collect();
    let nl = learning_rates.len();
    let mut val = vec![vec![0.0; nl]; batch_sizes.len()];
    let mut trn = val.clone();
    for (k, r) in results.into_iter().enumerate() {
        let (v, t) = r?;
        val[k / nl][k % nl] = v;
        trn[k / nl][k % nl] = t;
    }
    Ok(HyperGrid {
        batch_sizes: batch_sizes.to_vec(),
        learning_rates: learning_rates.to_vec(),
        val,
        train: trn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn architecture_table() {
        assert_eq!(architecture(1), Some(vec![8]));
        assert_eq!(architecture(7), Some(vec![32]));
        assert_eq!(architecture(12), Some(vec![128, 64, 32]));
        assert_eq!(architecture(14), Some(vec![512, 256, 128, 64, 32, 16]));
        assert_eq!(architecture(16), Some(vec![2048, 1024, 512, 256, 128, 64, 32, 16]));
        let deepest = architecture(18).unwrap();
        assert_eq!(deepest.len(), 11);
        assert_eq!((deepest[0], *deepest.last().unwrap()), (8192, 4));
        assert_eq!(architecture(17).unwrap().len(), 10);
        assert_eq!(architecture(0), None);
        assert_eq!(architecture(19), None);
    }

    #[test]
    fn decomposition_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let preds = Array3::from_shape_simple_fn((5, 40, 3), || rng.gen_range(-2.0..2.0));
        let truth = Array2::from_shape_simple_fn((40, 3), || rng.gen_range(-1.0..1.0));
        for p in decompose(&preds, &truth) {
            assert!((p.total - p.bias2 - p.variance).abs() <= 1e-10);
        }
    }

    #[test]
    fn identical_bags_have_no_variance() {
        let one = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let preds = ndarray::stack(Axis(0), &[one.view(), one.view(), one.view()]).unwrap();
        let truth = Array2::zeros((6, 3));
        for p in decompose(&preds, &truth) {
            assert!(p.variance.abs() < 1e-28);
            assert!((p.total - p.bias2).abs() < 1e-12);
        }
    }
}
