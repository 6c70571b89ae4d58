//! Parameter sampling, PL training data and feature scalers.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{csv_reader, csv_writer};
use crate::lindblad::MolecularParams;
use crate::pl::{ForwardModel, PLScaling};
use crate::{Error, Result};

/// E2 used whenever it is not a free parameter (cm⁻¹).
pub const FIXED_E2: f64 = 25_940.0;

/// Target column names, in dataset order.
pub const TARGET_COLUMNS: [&str; 3] = ["omega2p_cm1", "gamma2_fs1", "gamma12_fs1"];

/// Inclusive sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lo..=self.hi).contains(&x)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn at(&self, u: f64) -> f64 {
        self.lo + (self.hi - self.lo) * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamRanges {
    pub omega_2p: Range,
    pub gamma2: Range,
    pub gamma12: Range,
    pub e2: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            omega_2p: Range::new(200.0, 800.0),
            gamma2: Range::new(0.005, 0.05),
            gamma12: Range::new(0.002, 0.01),
            e2: Range::new(22_000.0, 30_000.0),
        }
    }
}

impl ParamRanges {
    /// Requires `lo ≤ hi` for every field; equal bounds pin a value.
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("omega_2p", self.omega_2p),
            ("gamma2", self.gamma2),
            ("gamma12", self.gamma12),
            ("e2", self.e2),
        ] {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(Error::param(name, format!("bad range [{}, {}]", r.lo, r.hi)));
            }
        }
        Ok(())
    }

    /// The three target ranges, in [`TARGET_COLUMNS`] order.
    pub fn targets(&self) -> [Range; 3] {
        [self.omega_2p, self.gamma2, self.gamma12]
    }
}

/// One candidate parameter set; `e2` is `None` when E2 is held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub omega_2p: f64,
    pub gamma2: f64,
    pub gamma12: f64,
    pub e2: Option<f64>,
}

impl ParamSet {
    /// Molecular parameters with the other levels at their MeLPPP values.
    pub fn to_molecular(&self) -> MolecularParams {
        MolecularParams {
            omega_2p: self.omega_2p,
            gamma2: self.gamma2,
            gamma12: self.gamma12,
            e2: self.e2.unwrap_or(FIXED_E2),
            ..MolecularParams::melppp()
        }
    }

    pub fn targets(&self) -> [f64; 3] {
        [self.omega_2p, self.gamma2, self.gamma12]
    }
}

/// `n` uniform draws; each set consumes its dimensions in the order
/// Ω2P, γ2, Γ12, then E2 when requested.
pub fn sample_initial_conditions(n: usize, ranges: &ParamRanges, include_e2: bool, seed: u64) -> Result<Vec<ParamSet>> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| ParamSet {
            omega_2p: ranges.omega_2p.at(rng.gen()),
            gamma2: ranges.gamma2.at(rng.gen()),
            gamma12: ranges.gamma12.at(rng.gen()),
            e2: include_e2.then(|| ranges.e2.at(rng.gen())),
        })
        .collect())
}

/// Features (PL, cps) and targets `[Ω2P, γ2, Γ12]` row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct PLDataset {
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
    pub seed: u64,
}

impl PLDataset {
    pub fn new(features: Array2<f64>, targets: Array2<f64>, seed: u64) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(Error::Shape {
                expected: features.nrows(),
                actual: targets.nrows(),
            });
        }
        if targets.ncols() != 3 {
            return Err(Error::Shape {
                expected: 3,
                actual: targets.ncols(),
            });
        }
        Ok(PLDataset { features, targets, seed })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> PLDataset {
        PLDataset {
            features: self.features.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
            seed: self.seed,
        }
    }

    pub fn header(n_features: usize) -> Vec<String> {
        (0..n_features)
            .map(|k| format!("pl_{k:03}"))
            .chain(TARGET_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    }

    /// The seed goes into a leading `# seed = N` comment.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# seed = {}", self.seed)?;
        let mut w = csv_writer(out);
        w.write_record(PLDataset::header(self.features.ncols()))?;
        for (f, t) in self.features.rows().into_iter().zip(self.targets.rows()) {
            w.write_record(f.iter().chain(t.iter()).map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let seed = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .find_map(|l| l.trim_start_matches('#').trim().strip_prefix("seed = "))
            .map(|v| v.trim().parse::<u64>())
            .transpose()
            .map_err(|e| Error::Config(format!("bad seed comment: {e}")))?
            .unwrap_or(0);
        let mut rd = csv_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        let n_features = header.len().saturating_sub(3);
        let expected = PLDataset::header(n_features);
        if header != expected {
            return Err(Error::Header {
                expected: expected.join(","),
                actual: header.join(","),
            });
        }
        let mut flat = Vec::new();
        let mut rows = 0;
        for rec in rd.records() {
            for f in rec?.iter() {
                flat.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad number {f:?}: {e}")))?,
                );
            }
            rows += 1;
        }
        let all = Array2::from_shape_vec((rows, header.len()), flat).map_err(|e| Error::Config(e.to_string()))?;
        let features = all.slice(ndarray::s![.., ..n_features]).to_owned();
        let targets = all.slice(ndarray::s![.., n_features..]).to_owned();
        PLDataset::new(features, targets, seed)
    }
}

/// Builds `n` rows: targets drawn uniformly from `ranges` with E2 fixed at
/// [`FIXED_E2`], features the PL trace of each draw under `model`.
///
/// The draws are made up front on one thread, so the result does not depend
/// on the worker count. A failing row is reported by its index (the lowest
/// one, if several fail).
pub fn generate_training_set(
    n: usize,
    ranges: &ParamRanges,
    model: &ForwardModel,
    scaling: &PLScaling,
    seed: u64,
) -> Result<PLDataset> {
    let draws = sample_initial_conditions(n, ranges, false, seed)?;
    let width = model.controls().len();
    let rows: Vec<Result<Vec<f64>>> = draws
        .par_iter()
        .map(|d| model.pl_values_serial(&d.to_molecular(), scaling))
        .collect();
    let mut features = Array2::zeros((n, width));
    for (row, (r, mut dst)) in rows.into_iter().zip(features.rows_mut()).enumerate() {
        let values = r.map_err(|e| Error::Generation {
            row,
            source: Box::new(e),
        })?;
        dst.assign(&ndarray::ArrayView1::from(&values));
    }
    let targets = Array2::from_shape_fn((n, 3), |(i, j)| draws[i].targets()[j]);
    PLDataset::new(features, targets, seed)
}

/// Shuffled 3/5, 1/5, remainder split.
pub fn split_dataset(ds: &PLDataset, seed: u64) -> Result<(PLDataset, PLDataset, PLDataset)> {
    let n = ds.len();
    if n < 5 {
        return Err(Error::param("dataset", "need at least 5 rows to split"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = 3 * n / 5;
    let n_val = n / 5;
    Ok((
        ds.select(&idx[..n_train]),
        ds.select(&idx[n_train..n_train + n_val]),
        ds.select(&idx[n_train + n_val..]),
    ))
}

/// Percentile of sorted data with linear interpolation between order
/// statistics (position `p/100 · (n − 1)`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted_column(data: &ArrayView2<f64>, j: usize) -> Vec<f64> {
    let mut col = data.column(j).to_vec();
    col.sort_by(f64::total_cmp);
    col
}

fn check_pcts(lo: f64, hi: f64) -> Result<()> {
    if !(0.0 <= lo && lo < hi && hi <= 100.0) {
        return Err(Error::param("percentiles", "require 0 ≤ lo < hi ≤ 100"));
    }
    Ok(())
}

/// Per-column `(lo, hi)` percentile bounds.
pub fn winsor_bounds(data: ArrayView2<f64>, lo_pct: f64, hi_pct: f64) -> Result<Vec<(f64, f64)>> {
    check_pcts(lo_pct, hi_pct)?;
    if data.nrows() == 0 {
        return Err(Error::param("data", "no rows"));
    }
    Ok((0..data.ncols())
        .map(|j| {
            let col = sorted_column(&data, j);
            (percentile(&col, lo_pct), percentile(&col, hi_pct))
        })
        .collect())
}

/// Clips every column to its `[lo_pct, hi_pct]` percentile range.
pub fn winsorize(data: ArrayView2<f64>, lo_pct: f64, hi_pct: f64) -> Result<Array2<f64>> {
    let bounds = winsor_bounds(data, lo_pct, hi_pct)?;
    let mut out = data.to_owned();
    for (mut col, (lo, hi)) in out.columns_mut().into_iter().zip(bounds) {
        col.mapv_inplace(|v| v.clamp(lo, hi));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    #[default]
    Standard,
    Robust,
    RobustWinsor,
}

impl std::str::FromStr for ScalerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ScalerKind::Standard),
            "robust" => Ok(ScalerKind::Robust),
            "robust_winsor" | "robust+winsor" => Ok(ScalerKind::RobustWinsor),
            other => Err(Error::Config(format!("unknown scaler kind `{other}`"))),
        }
    }
}

/// `stat1`/`stat2` are mean/std for the standard scaler and median/IQR for
/// the robust ones; clip bounds are set only with winsorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub stat1: f64,
    pub stat2: f64,
    pub clip_lo: Option<f64>,
    pub clip_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub kind: ScalerKind,
    pub columns: Vec<ColumnStats>,
}

/// Percentiles used by [`ScalerKind::RobustWinsor`].
pub const DEFAULT_WINSOR: (f64, f64) = (1.0, 99.0);

pub fn fit_scaler(kind: ScalerKind, data: ArrayView2<f64>) -> Result<ScalerState> {
    fit_scaler_with(kind, data, DEFAULT_WINSOR)
}

pub fn fit_scaler_with(kind: ScalerKind, data: ArrayView2<f64>, winsor: (f64, f64)) -> Result<ScalerState> {
    if data.nrows() < 2 {
        return Err(Error::param("data", "need at least 2 rows to fit a scaler"));
    }
    let degenerate = |column: usize, what: &str| Error::DegenerateColumn {
        column,
        reason: format!("zero {what}"),
    };
    let columns = match kind {
        ScalerKind::Standard => (0..data.ncols())
            .map(|j| {
                let col = data.column(j);
                let mean = col.mean().unwrap_or(0.0);
                let std = col.std(0.0);
                if !(std > 0.0) {
                    return Err(degenerate(j, "standard deviation"));
                }
                Ok(ColumnStats {
                    stat1: mean,
                    stat2: std,
                    clip_lo: None,
                    clip_hi: None,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        ScalerKind::Robust | ScalerKind::RobustWinsor => {
            let bounds = match kind {
                ScalerKind::RobustWinsor => Some(winsor_bounds(data, winsor.0, winsor.1)?),
                _ => None,
            };
            (0..data.ncols())
                .map(|j| {
                    let mut col = sorted_column(&data, j);
                    let clip = bounds.as_ref().map(|b| b[j]);
                    if let Some((lo, hi)) = clip {
                        col.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
                    }
                    let iqr = percentile(&col, 75.0) - percentile(&col, 25.0);
                    if !(iqr > 0.0) {
                        return Err(degenerate(j, "interquartile range"));
                    }
                    Ok(ColumnStats {
                        stat1: percentile(&col, 50.0),
                        stat2: iqr,
                        clip_lo: clip.map(|c| c.0),
                        clip_hi: clip.map(|c| c.1),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(ScalerState { kind, columns })
}

impl ScalerState {
    fn check_width(&self, ncols: usize) -> Result<()> {
        if ncols != self.columns.len() {
            return Err(Error::Shape {
                expected: self.columns.len(),
                actual: ncols,
            });
        }
        Ok(())
    }

    pub fn transform(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(data.ncols())?;
        let mut out = data.to_owned();
        for (mut col, c) in out.columns_mut().into_iter().zip(&self.columns) {
            col.mapv_inplace(|v| c.forward(v));
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, scaled: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(scaled.ncols())?;
        let mut out = scaled.to_owned();
        for (mut col, c) in out.columns_mut().into_iter().zip(&self.columns) {
            col.mapv_inplace(|v| c.backward(v));
        }
        Ok(out)
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_width(row.len())?;
        Ok(row.iter().zip(&self.columns).map(|(&v, c)| c.forward(v)).collect())
    }

    pub fn inverse_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_width(row.len())?;
        Ok(row.iter().zip(&self.columns).map(|(&v, c)| c.backward(v)).collect())
    }
}

impl ColumnStats {
    fn forward(&self, v: f64) -> f64 {
        let v = match (self.clip_lo, self.clip_hi) {
            (Some(lo), Some(hi)) => v.clamp(lo, hi),
            _ => v,
        };
        (v - self.stat1) / self.stat2
    }

    fn backward(&self, v: f64) -> f64 {
        v * self.stat2 + self.stat1
    }
}

/// Convenience wrapper matching the free-function form.
pub fn transform(state: &ScalerState, data: ArrayView2<f64>) -> Result<Array2<f64>> {
    state.transform(data)
}

pub fn inverse_transform(state: &ScalerState, scaled: ArrayView2<f64>) -> Result<Array2<f64>> {
    state.inverse_transform(scaled)
}
