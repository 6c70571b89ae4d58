//! Penalized least-squares recovery of molecular parameters from a PL
//! chirp trace by multi-start Nelder–Mead.
//!
//! The simplex works on coordinates mapped affinely from [`ParamRanges`] to
//! `[0, 1]`. Proposals outside the box are evaluated at the clamped point
//! plus a quadratic barrier on the excess. Coordinates whose range has zero
//! width are held fixed and left out of the simplex entirely.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ParamRanges, ParamSet, Range, FIXED_E2};
use crate::io::csv_writer;
use crate::pl::{ForwardModel, PLScaling, PLTrace};
use crate::{Error, Result};

/// Names of the fit coordinates, in vector order.
pub const PARAM_NAMES: [&str; 4] = ["omega_2p", "gamma2", "gamma12", "e2"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    /// Weight of `(E2 − 2ω0)²`, a bare number multiplying cm⁻².
    pub lambda: f64,
    pub maxiter: usize,
    /// Convergence when `max f − min f` over the simplex drops below this.
    pub ftol: f64,
    pub n_starts: usize,
    /// Initial simplex offset per coordinate, in scaled units.
    pub initial_step: f64,
    /// Weight of the squared out-of-box excess, in loss units per scaled unit².
    pub barrier: f64,
    /// Penalty center 2ω0 (cm⁻¹).
    pub two_omega0: f64,
    /// Four free parameters (E2 included) instead of three.
    pub free_e2: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            lambda: 1e-2,
            maxiter: 500,
            ftol: 1e-4,
            n_starts: 700,
            initial_step: 0.05,
            barrier: 1e6,
            two_omega0: FIXED_E2,
            free_e2: true,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if self.maxiter == 0 {
            return Err(Error::param("maxiter", "must be at least 1"));
        }
        if !(self.ftol > 0.0) {
            return Err(Error::param("ftol", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("lambda", "must be non-negative"));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::param("initial_step", "must be positive"));
        }
        if !(self.barrier >= 0.0) {
            return Err(Error::param("barrier", "must be non-negative"));
        }
        Ok(())
    }
}

/// Outcome of one simplex run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub start_index: usize,
    /// Best vertex in the problem's own coordinates.
    pub q_star: Vec<f64>,
    pub loss_star: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best loss before the first iteration and after each one.
    pub history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Nelder–Mead with reflection 1, expansion 2, contraction ½ and shrink ½.
///
/// `initial_step` offsets each coordinate of `x0` in turn to build the
/// starting simplex. Non-finite losses count as `+∞`.
pub fn nelder_mead<F>(f: F, x0: &[f64], settings: &FitSettings) -> Result<FitResult>
where
    F: Fn(&[f64]) -> f64,
{
    settings.validate()?;
    if x0.is_empty() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("x0", "must be a non-empty finite vector"));
    }
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += settings.initial_step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    order(&mut simplex);
    let mut history = vec![simplex[0].1];
    let mut iterations = 0;
    let mut converged = false;
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect() };

    while iterations < settings.maxiter {
        iterations += 1;
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let (f_best, f_second, f_worst) = (simplex[0].1, simplex[n - 1].1, simplex[n].1);
        let worst = simplex[n].0.clone();
        // x_r = c + (c − x_w)
        let xr = lerp(&centroid, &worst, -1.0);
        let fr = eval(&xr);
        let mut shrink = false;
        if fr < f_best {
            let xe = lerp(&centroid, &worst, -2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < f_second {
            simplex[n] = (xr, fr);
        } else if fr < f_worst {
            let xc = lerp(&centroid, &xr, 0.5);
            let fc = eval(&xc);
            if fc <= fr {
                simplex[n] = (xc, fc);
            } else {
                shrink = true;
            }
        } else {
            let xcc = lerp(&centroid, &worst, 0.5);
            let fcc = eval(&xcc);
            if fcc < f_worst {
                simplex[n] = (xcc, fcc);
            } else {
                shrink = true;
            }
        }
        if shrink {
            let best = simplex[0].0.clone();
            for v in simplex.iter_mut().skip(1) {
                v.0 = lerp(&best, &v.0, 0.5);
                v.1 = eval(&v.0);
            }
        }
        order(&mut simplex);
        history.push(simplex[0].1);
        if simplex[n].1 - simplex[0].1 < settings.ftol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        start_index: 0,
        q_star: simplex[0].0.clone(),
        loss_star: simplex[0].1,
        iterations,
        evaluations,
        converged,
        history,
        error: None,
    })
}

/// The observed trace, the forward model that reproduces its chirp grid, and
/// the loss definition.
pub struct FitProblem<'a> {
    pub observed: &'a PLTrace,
    pub model: &'a ForwardModel,
    pub scaling: PLScaling,
    pub ranges: ParamRanges,
    pub settings: FitSettings,
}

impl<'a> FitProblem<'a> {
    pub fn new(
        observed: &'a PLTrace,
        model: &'a ForwardModel,
        scaling: PLScaling,
        ranges: ParamRanges,
        settings: FitSettings,
    ) -> Result<Self> {
        observed.validate()?;
        if observed.is_empty() {
            return Err(Error::param("observed", "trace is empty"));
        }
        let controls = model.controls();
        if controls.len() != observed.len()
            || controls
                .iter()
                .zip(&observed.betas)
                .any(|(c, &b)| c.beta != b || c.tau != observed.tau)
        {
            return Err(Error::param("model", "controls do not match the observed trace"));
        }
        scaling.validate()?;
        ranges.validate()?;
        settings.validate()?;
        Ok(FitProblem {
            observed,
            model,
            scaling,
            ranges,
            settings,
        })
    }

    fn box_ranges(&self) -> Vec<Range> {
        let r = &self.ranges;
        let mut v = vec![r.omega_2p, r.gamma2, r.gamma12];
        if self.settings.free_e2 {
            v.push(r.e2);
        }
        v
    }

    /// Indices of coordinates that the simplex actually moves.
    fn free_coords(&self) -> Vec<usize> {
        self.box_ranges()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.width() > 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn param_set(&self, q: &[f64]) -> ParamSet {
        ParamSet {
            omega_2p: q[0],
            gamma2: q[1],
            gamma12: q[2],
            e2: self.settings.free_e2.then(|| q[3]),
        }
    }

    pub fn start_vector(&self, p: &ParamSet) -> Vec<f64> {
        let mut q = vec![p.omega_2p, p.gamma2, p.gamma12];
        if self.settings.free_e2 {
            q.push(p.e2.unwrap_or(FIXED_E2));
        }
        q
    }

    /// Mean squared residual (cps²) between the observed trace and the
    /// model at `q`.
    pub fn mse(&self, q: &[f64]) -> Result<f64> {
        let pl = self
            .model
            .pl_values_serial(&self.param_set(q).to_molecular(), &self.scaling)?;
        Ok(mse(&self.observed.values, &pl))
    }

    /// `mse + λ (E2 − 2ω0)²`; the penalty vanishes when E2 is fixed.
    pub fn total(&self, q: &[f64]) -> Result<f64> {
        Ok(self.mse(q)? + self.penalty(q))
    }

    fn penalty(&self, q: &[f64]) -> f64 {
        if self.settings.free_e2 {
            self.settings.lambda * (q[3] - self.settings.two_omega0).powi(2)
        } else {
            0.0
        }
    }

    /// Loss at scaled coordinates of the free subset, with clamping and the
    /// box barrier.
    fn scaled_loss(&self, x: &[f64], base: &[f64], free: &[usize], boxes: &[Range]) -> f64 {
        let mut q = base.to_vec();
        let mut excess = 0.0;
        for (&k, &xi) in free.iter().zip(x) {
            let clamped = xi.clamp(0.0, 1.0);
            excess += (xi - clamped).powi(2);
            q[k] = boxes[k].lo + boxes[k].width() * clamped;
        }
        match self.total(&q) {
            Ok(v) => v + self.settings.barrier * excess,
            Err(_) => f64::INFINITY,
        }
    }

    /// One simplex run from `start`; `q_star` is reported in physical units
    /// and inside the box.
    pub fn fit_one(&self, start: &ParamSet, start_index: usize) -> Result<FitResult> {
        let boxes = self.box_ranges();
        let free = self.free_coords();
        let mut base = self.start_vector(start);
        for (q, r) in base.iter_mut().zip(&boxes) {
            *q = q.clamp(r.lo, r.hi);
        }
        if free.is_empty() {
            let loss = self.total(&base)?;
            return Ok(FitResult {
                start_index,
                q_star: base,
                loss_star: loss,
                iterations: 0,
                evaluations: 1,
                converged: true,
                history: vec![loss],
                error: None,
            });
        }
        let x0: Vec<f64> = free.iter().map(|&k| (base[k] - boxes[k].lo) / boxes[k].width()).collect();
        let mut res = nelder_mead(|x| self.scaled_loss(x, &base, &free, &boxes), &x0, &self.settings)?;
        let mut q = base;
        for (&k, &xi) in free.iter().zip(&res.q_star) {
            q[k] = boxes[k].lo + boxes[k].width() * xi.clamp(0.0, 1.0);
        }
        res.q_star = q;
        res.start_index = start_index;
        Ok(res)
    }

    /// Every start, in start order. A start that fails is recorded with its
    /// error and an infinite loss.
    pub fn multi_start(&self, starts: &[ParamSet]) -> Result<Vec<FitResult>> {
        if starts.is_empty() {
            return Err(Error::param("starts", "need at least one start"));
        }
        Ok(starts
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                self.fit_one(s, i).unwrap_or_else(|e| FitResult {
                    start_index: i,
                    q_star: self.start_vector(s),
                    loss_star: f64::INFINITY,
                    iterations: 0,
                    evaluations: 0,
                    converged: false,
                    history: Vec::new(),
                    error: Some(e.to_string()),
                })
            })
            .collect())
    }
}

fn mse(observed: &[f64], model: &[f64]) -> f64 {
    observed
        .iter()
        .zip(model)
        .map(|(y, m)| (y - m).powi(2))
        .sum::<f64>()
        / observed.len() as f64
}

/// Mean squared residual between `observed` and the model at `q`.
pub fn mse_loss(q: &ParamSet, observed: &PLTrace, model: &ForwardModel, scaling: &PLScaling) -> Result<f64> {
    if observed.is_empty() {
        return Err(Error::param("observed", "trace is empty"));
    }
    let pl = model.pl_values(&q.to_molecular(), scaling)?;
    if pl.len() != observed.len() {
        return Err(Error::Shape {
            expected: observed.len(),
            actual: pl.len(),
        });
    }
    Ok(mse(&observed.values, &pl))
}

/// `mse_loss + λ (E2 − 2ω0)²`, with no penalty when `q.e2` is `None`.
pub fn total_loss(
    q: &ParamSet,
    observed: &PLTrace,
    model: &ForwardModel,
    scaling: &PLScaling,
    lambda: f64,
    two_omega0: f64,
) -> Result<f64> {
    let penalty = q.e2.map_or(0.0, |e2| lambda * (e2 - two_omega0).powi(2));
    Ok(mse_loss(q, observed, model, scaling)? + penalty)
}

/// Multi-start fit with the problem assembled from its parts.
pub fn multi_start_fit(
    observed: &PLTrace,
    starts: &[ParamSet],
    settings: &FitSettings,
    scaling: &PLScaling,
    model: &ForwardModel,
    ranges: &ParamRanges,
) -> Result<Vec<FitResult>> {
    FitProblem::new(observed, model, *scaling, *ranges, *settings)?.multi_start(starts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal-width bins over the data range; constant data fills one
    /// zero-width bin.
    pub fn new(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Histogram {
                edges: Vec::new(),
                counts: Vec::new(),
            };
        }
        if !(hi > lo) || bins <= 1 {
            return Histogram {
                edges: vec![lo, hi],
                counts: vec![values.len()],
            };
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * width }).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Statistics over one subset of the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub count: usize,
    pub params: Vec<ParamStats>,
}

impl Population {
    fn of(results: &[&FitResult], bins: usize) -> Self {
        let dims = results.first().map_or(0, |r| r.q_star.len());
        let params = (0..dims)
            .map(|k| {
                let vals: Vec<f64> = results.iter().map(|r| r.q_star[k]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                ParamStats {
                    name: PARAM_NAMES[k].to_string(),
                    mean,
                    std: var.sqrt(),
                    histogram: Histogram::new(&vals, bins),
                }
            })
            .collect();
        Population {
            count: results.len(),
            params,
        }
    }

    pub fn mean_of(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.mean)
    }

    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["param", "bin_lo", "bin_hi", "count"])?;
        for p in &self.params {
            for (k, c) in p.histogram.counts.iter().enumerate() {
                w.write_record([
                    p.name.clone(),
                    p.histogram.edges[k].to_string(),
                    p.histogram.edges[k + 1].to_string(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    /// Converged starts only.
    pub converged: Population,
    /// Every start that produced a finite loss.
    pub all: Population,
    /// No start converged.
    pub empty: bool,
    /// Mean best loss per iteration across all starts; finished runs hold
    /// their final value.
    pub mean_error: Vec<f64>,
}

pub fn ensemble_stats(results: &[FitResult], bins: usize) -> Result<EnsembleSummary> {
    if results.is_empty() {
        return Err(Error::param("results", "need at least one result"));
    }
    let finite: Vec<&FitResult> = results.iter().filter(|r| r.loss_star.is_finite()).collect();
    let converged: Vec<&FitResult> = finite.iter().copied().filter(|r| r.converged).collect();
    let len = finite.iter().map(|r| r.history.len()).max().unwrap_or(0);
    let mean_error = (0..len)
        .map(|i| {
            let sum: f64 = finite
                .iter()
                .map(|r| r.history[i.min(r.history.len() - 1)])
                .sum();
            sum / finite.len() as f64
        })
        .collect();
    Ok(EnsembleSummary {
        converged: Population::of(&converged, bins),
        all: Population::of(&finite, bins),
        empty: converged.is_empty(),
        mean_error,
    })
}

impl EnsembleSummary {
    pub fn write_iteration_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["iteration", "mean_error"])?;
        for (i, e) in self.mean_error.iter().enumerate() {
            w.write_record([i.to_string(), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fit report written as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub settings: FitSettings,
    pub ranges: ParamRanges,
    pub results: Vec<FitResult>,
    pub summary: EnsembleSummary,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(maxiter: usize) -> FitSettings {
        FitSettings {
            maxiter,
            ftol: 1e-12,
            initial_step: 0.5,
            ..FitSettings::default()
        }
    }

    #[test]
    fn quadratic_bowl() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2);
        let r = nelder_mead(f, &[0.0, 0.0], &settings(500)).unwrap();
        assert!(r.converged);
        assert!((r.q_star[0] - 1.0).abs() < 1e-3 && (r.q_star[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let r = nelder_mead(f, &[-1.2, 1.0], &settings(2000)).unwrap();
        assert!((r.q_star[0] - 1.0).abs() < 1e-2 && (r.q_star[1] - 1.0).abs() < 1e-2, "{:?}", r.q_star);
    }

    #[test]
    fn budget_exhaustion() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2);
        let r = nelder_mead(f, &[0.0, 0.0], &settings(1)).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.history.len(), 2);
    }

    #[test]
    fn best_loss_never_increases() {
        let f = |x: &[f64]| (x[0] * 3.0).sin() + x[0] * x[0] + (x[1] - 0.5).abs();
        let r = nelder_mead(f, &[2.0, -1.0], &settings(300)).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_is_infinite() {
        // NaN outside the unit disc must never be selected
        let f = |x: &[f64]| {
            if x[0] * x[0] + x[1] * x[1] > 1.0 {
                f64::NAN
            } else {
                (x[0] - 0.9).powi(2) + x[1] * x[1]
            }
        };
        let r = nelder_mead(f, &[0.0, 0.0], &settings(500)).unwrap();
        assert!(r.loss_star.is_finite());
        assert!((r.q_star[0] - 0.9).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = |x: &[f64]| x[0];
        assert!(nelder_mead(f, &[f64::NAN], &settings(10)).is_err());
        assert!(nelder_mead(f, &[], &settings(10)).is_err());
        assert!(nelder_mead(f, &[0.0], &settings(0)).is_err());
    }

    fn result(q: Vec<f64>, converged: bool, history: Vec<f64>) -> FitResult {
        FitResult {
            start_index: 0,
            loss_star: *history.last().unwrap(),
            q_star: q,
            iterations: history.len() - 1,
            evaluations: 0,
            converged,
            history,
            error: None,
        }
    }

    #[test]
    fn ensemble_of_identical_results() {
        let r = result(vec![500.0, 0.02, 0.005], true, vec![3.0, 1.0]);
        let s = ensemble_stats(&[r.clone(), r.clone(), r], 10).unwrap();
        let p = &s.converged.params[0];
        assert_eq!(p.std, 0.0);
        assert_eq!(p.histogram.counts, vec![3]);
        assert!(!s.empty);
    }

    #[test]
    fn ensemble_midpoint_filter_and_curve() {
        let a = result(vec![400.0, 0.01, 0.004], true, vec![4.0, 2.0, 1.0]);
        let b = result(vec![600.0, 0.03, 0.006], true, vec![6.0, 3.0]);
        let c = result(vec![900.0, 0.09, 0.009], false, vec![8.0, 8.0, 8.0, 8.0]);
        let s = ensemble_stats(&[a, b, c], 4).unwrap();
        assert_eq!(s.converged.mean_of("omega_2p"), Some(500.0));
        assert_eq!(s.all.count, 3);
        assert_eq!(s.converged.params[0].histogram.counts.iter().sum::<usize>(), 2);
        assert_eq!(s.mean_error, vec![6.0, 13.0 / 3.0, 4.0, 4.0]);
        let none = ensemble_stats(&[result(vec![1.0], false, vec![1.0])], 4).unwrap();
        assert!(none.empty && none.converged.count == 0);
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 0.99, 1.0], 2);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![2, 3]);
    }

    #[test]
    fn csv_headers() {
        let r = result(vec![1.0, 2.0], true, vec![1.0, 0.5]);
        let s = ensemble_stats(&[r], 3).unwrap();
        let mut buf = Vec::new();
        s.converged.write_histogram_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("param,bin_lo,bin_hi,count\n"));
        let mut buf = Vec::new();
        s.write_iteration_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,mean_error\n0,1\n1,0.5\n");
    }
}
