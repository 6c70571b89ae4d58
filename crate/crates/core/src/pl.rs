//! Photoluminescence forward model: `PL = A ρ11 + B` over control grids.
//!
//! A [`ForwardModel`] synthesizes and samples the pulses for a fixed list of
//! controls once, then evaluates any number of parameter sets against them.
//! Pulses of similar duration share a [`DriveBatch`].

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{FieldSynthesizer, FieldTable, PulseSpec};
use crate::io::{csv_writer, read_numeric_csv};
use crate::lindblad::{Drive, DriveBatch, DriveFrame, MolecularParams, SolverSettings, TimeGrid, BATCH_LANES};
use crate::{Error, Result};

/// Slack allowed on the population domain before [`pl_value`] rejects.
pub const DOMAIN_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PLScaling {
    /// cps per unit population.
    pub a: f64,
    /// Background (cps).
    pub b: f64,
}

impl Default for PLScaling {
    fn default() -> Self {
        PLScaling { a: 742.88, b: 43.73 }
    }
}

impl PLScaling {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::param("A", "must be positive"));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::param("B", "must be non-negative"));
        }
        Ok(())
    }

    /// Population that maps to `pl` (no domain check).
    pub fn invert(&self, pl: f64) -> f64 {
        (pl - self.b) / self.a
    }
}

pub fn pl_value(rho11: f64, scaling: &PLScaling) -> Result<f64> {
    if !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&rho11) {
        return Err(Error::Domain { value: rho11 });
    }
    Ok(scaling.a * rho11 + scaling.b)
}

/// `n` evenly spaced points on `[lo, hi]`, endpoints included exactly.
pub fn beta_grid(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::param("n", "need at least two points"));
    }
    if !(lo < hi) {
        return Err(Error::param("beta range", "require lo < hi"));
    }
    let last = (n - 1) as f64;
    Ok((0..n)
        .map(|k| match k {
            0 => lo,
            k if k == n - 1 => hi,
            k => {
                let x = lo + (hi - lo) * k as f64 / last;
                // keep the midpoint of a symmetric grid at exactly zero
                if x.abs() < 1e-12 * (hi - lo) {
                    0.0
                } else {
                    x
                }
            }
        })
        .collect())
}

/// The default 55-point chirp grid on ±3000 fs².
pub fn default_betas() -> Vec<f64> {
    beta_grid(55, -3000.0, 3000.0).expect("static grid")
}

/// PL as a function of chirp at fixed τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PLTrace {
    pub betas: Vec<f64>,
    pub values: Vec<f64>,
    pub tau: f64,
}

impl PLTrace {
    pub fn new(betas: Vec<f64>, values: Vec<f64>, tau: f64) -> Result<Self> {
        let t = PLTrace { betas, values, tau };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.len() != self.values.len() {
            return Err(Error::Shape {
                expected: self.betas.len(),
                actual: self.values.len(),
            });
        }
        if self.betas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("betas", "must be strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn peak_index(&self) -> usize {
        argmax(&self.values)
    }

    /// PL at the grid point nearest `beta`.
    pub fn value_near(&self, beta: f64) -> f64 {
        let k = self
            .betas
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - beta).abs().total_cmp(&(b.1 - beta).abs()))
            .map_or(0, |(k, _)| k);
        self.values[k]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["beta_fs2", "pl_cps"])?;
        for (b, v) in self.betas.iter().zip(&self.values) {
            w.write_record([b.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `beta_fs2, pl_cps`; τ is not stored in the file.
    pub fn read_csv<R: Read>(input: R, tau: f64) -> Result<Self> {
        let rows = read_numeric_csv(input, &["beta_fs2", "pl_cps"])?;
        let (betas, values) = rows.into_iter().map(|r| (r[0], r[1])).unzip();
        PLTrace::new(betas, values, tau)
    }
}

/// PL as a function of the mask period at fixed β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauTrace {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    pub beta: f64,
}

impl TauTrace {
    pub fn peak_index(&self) -> usize {
        argmax(&self.values)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["tau_fs", "pl_cps"])?;
        for (t, v) in self.taus.iter().zip(&self.values) {
            w.write_record([t.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `rho11[i][j]` is the population at `taus[i]`, `betas[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSurface {
    pub betas: Vec<f64>,
    pub taus: Vec<f64>,
    pub rho11: Vec<Vec<f64>>,
}

impl ControlSurface {
    /// `(tau index, beta index)` of the largest population.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.rho11.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > self.rho11[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["beta_fs2", "tau_fs", "rho11"])?;
        for (tau, row) in self.taus.iter().zip(&self.rho11) {
            for (beta, v) in self.betas.iter().zip(row) {
                w.write_record([beta.to_string(), tau.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &x)| if x > best.1 { (k, x) } else { best })
        .0
}

/// One pulse control setting: chirp β (fs²) and mask period τ (fs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub beta: f64,
    pub tau: f64,
}

enum Unit {
    Batch { slots: Vec<usize>, drive: DriveBatch },
    Single { slot: usize, drive: Drive },
}

/// Precomputed drives for a fixed control list.
pub struct ForwardModel {
    controls: Vec<Control>,
    settings: SolverSettings,
    units: Vec<Unit>,
}

impl ForwardModel {
    pub fn new(synth: &FieldSynthesizer, controls: &[Control], settings: &SolverSettings) -> Result<Self> {
        settings.validate()?;
        if controls.is_empty() {
            return Err(Error::param("controls", "need at least one control"));
        }
        let fields = controls
            .par_iter()
            .map(|c| synth.synthesize(c.beta, c.tau))
            .collect::<Result<Vec<FieldTable>>>()?;
        let carrier = synth.base_spec().center_omega();
        let units = match settings.frame {
            DriveFrame::Lab => {
                let windows = fields
                    .iter()
                    .map(|f| TimeGrid::for_field(f, settings))
                    .collect::<Result<Vec<_>>>()?;
                // group pulses of similar window length so little work is padded
                let mut order: Vec<usize> = (0..controls.len()).collect();
                order.sort_by(|&i, &j| {
                    let len = |k: usize| windows[k].t_pulse_end - windows[k].t_start;
                    len(i).total_cmp(&len(j)).then(i.cmp(&j))
                });
                order
                    .chunks(BATCH_LANES)
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|slots| {
                        let group: Vec<&FieldTable> = slots.iter().map(|&k| &fields[k]).collect();
                        Ok(Unit::Batch {
                            slots: slots.to_vec(),
                            drive: DriveBatch::lab(&group, settings)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            frame => fields
                .par_iter()
                .enumerate()
                .map(|(slot, f)| {
                    let grid = TimeGrid::for_field(f, settings)?;
                    Ok(Unit::Single {
                        slot,
                        drive: Drive::new(f, grid, frame, carrier)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(ForwardModel {
            controls: controls.to_vec(),
            settings: *settings,
            units,
        })
    }

    /// Chirp scan at fixed τ.
    pub fn for_betas(synth: &FieldSynthesizer, betas: &[f64], tau: f64, settings: &SolverSettings) -> Result<Self> {
        let controls: Vec<Control> = betas.iter().map(|&beta| Control { beta, tau }).collect();
        ForwardModel::new(synth, &controls, settings)
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    /// ρ11(t_final) for every control, in control order. Units run on the
    /// rayon pool.
    pub fn populations(&self, params: &MolecularParams) -> Result<Vec<f64>> {
        params.validate()?;
        let parts = self
            .units
            .par_iter()
            .map(|u| self.run_unit(u, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.scatter(parts))
    }

    /// Same as [`ForwardModel::populations`] on the calling thread only, for
    /// callers that already parallelize over parameter sets.
    pub fn populations_serial(&self, params: &MolecularParams) -> Result<Vec<f64>> {
        params.validate()?;
        let parts = self
            .units
            .iter()
            .map(|u| self.run_unit(u, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.scatter(parts))
    }

    fn run_unit(&self, unit: &Unit, params: &MolecularParams) -> Result<Vec<(usize, f64)>> {
        let tail = self.settings.tail;
        Ok(match unit {
            Unit::Batch { slots, drive } => slots
                .iter()
                .copied()
                .zip(drive.steady_populations(params, tail)?)
                .collect(),
            Unit::Single { slot, drive } => vec![(*slot, drive.steady_population(params, tail)?)],
        })
    }

    fn scatter(&self, parts: Vec<Vec<(usize, f64)>>) -> Vec<f64> {
        let mut out = vec![0.0; self.controls.len()];
        for (k, v) in parts.into_iter().flatten() {
            out[k] = v;
        }
        out
    }

    /// PL for every control.
    pub fn pl_values(&self, params: &MolecularParams, scaling: &PLScaling) -> Result<Vec<f64>> {
        to_pl(&self.populations(params)?, scaling)
    }

    pub fn pl_values_serial(&self, params: &MolecularParams, scaling: &PLScaling) -> Result<Vec<f64>> {
        to_pl(&self.populations_serial(params)?, scaling)
    }

    /// Interprets the controls as a chirp scan; fails if they do not share
    /// one τ or are not strictly increasing in β.
    pub fn beta_trace(&self, params: &MolecularParams, scaling: &PLScaling) -> Result<PLTrace> {
        let tau = self.controls[0].tau;
        if self.controls.iter().any(|c| c.tau != tau) {
            return Err(Error::param("controls", "chirp scan needs a single tau"));
        }
        let betas = self.controls.iter().map(|c| c.beta).collect();
        PLTrace::new(betas, self.pl_values(params, scaling)?, tau)
    }
}

fn to_pl(rho11: &[f64], scaling: &PLScaling) -> Result<Vec<f64>> {
    scaling.validate()?;
    rho11.iter().map(|&r| pl_value(r, scaling)).collect()
}

/// Synthesizer for `spec` on its default frequency grid.
fn synthesizer(spec: &PulseSpec) -> Result<FieldSynthesizer> {
    FieldSynthesizer::with_default_grid(spec)
}

/// PL over `betas` at τ = 0.
pub fn beta_trace(
    params: &MolecularParams,
    scaling: &PLScaling,
    betas: &[f64],
    spec: &PulseSpec,
    settings: &SolverSettings,
) -> Result<PLTrace> {
    ForwardModel::for_betas(&synthesizer(spec)?, betas, 0.0, settings)?.beta_trace(params, scaling)
}

/// PL over `taus` at β = 0.
pub fn tau_trace(
    params: &MolecularParams,
    scaling: &PLScaling,
    taus: &[f64],
    spec: &PulseSpec,
    settings: &SolverSettings,
) -> Result<TauTrace> {
    let controls: Vec<Control> = taus.iter().map(|&tau| Control { beta: 0.0, tau }).collect();
    let model = ForwardModel::new(&synthesizer(spec)?, &controls, settings)?;
    Ok(TauTrace {
        taus: taus.to_vec(),
        values: model.pl_values(params, scaling)?,
        beta: 0.0,
    })
}

/// Populations on the `taus × betas` grid, one chirp scan per τ row so that
/// each row matches [`beta_trace`] at that τ exactly.
pub fn control_surface(
    params: &MolecularParams,
    betas: &[f64],
    taus: &[f64],
    spec: &PulseSpec,
    settings: &SolverSettings,
) -> Result<ControlSurface> {
    let synth = synthesizer(spec)?;
    let rho11 = taus
        .iter()
        .map(|&tau| ForwardModel::for_betas(&synth, betas, tau, settings)?.populations(params))
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlSurface {
        betas: betas.to_vec(),
        taus: taus.to_vec(),
        rho11,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pl_value_endpoints() {
        let s = PLScaling::default();
        assert_relative_eq!(pl_value(0.0, &s).unwrap(), 43.73);
        assert_relative_eq!(pl_value(1.0, &s).unwrap(), 786.61, epsilon = 1e-9);
        assert!((pl_value(0.890, &s).unwrap() - 705.0).abs() < 1.0);
    }

    #[test]
    fn pl_value_domain() {
        let s = PLScaling::default();
        assert!(pl_value(1.0 + 5e-7, &s).is_ok());
        assert!(matches!(pl_value(1.0 + 1e-5, &s), Err(Error::Domain { .. })));
        assert!(pl_value(-1e-5, &s).is_err());
        assert!(pl_value(f64::NAN, &s).is_err());
    }

    #[test]
    fn pl_value_is_affine() {
        let s = PLScaling { a: 3.5, b: 1.25 };
        let (x1, x2) = (0.2, 0.7);
        let slope = (pl_value(x2, &s).unwrap() - pl_value(x1, &s).unwrap()) / (x2 - x1);
        assert_relative_eq!(slope, 3.5, epsilon = 1e-12);
    }

    #[test]
    fn beta_grid_examples() {
        let g = beta_grid(55, -3000.0, 3000.0).unwrap();
        assert_eq!(g.len(), 55);
        assert_relative_eq!(g[1] - g[0], 6000.0 / 54.0, epsilon = 1e-9);
        assert_eq!((g[0], g[27], g[54]), (-3000.0, 0.0, 3000.0));
        assert_eq!(beta_grid(2, 0.0, 1.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(beta_grid(3, -1.0, 1.0).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert!(beta_grid(1, 0.0, 1.0).is_err());
        assert!(beta_grid(4, 1.0, 1.0).is_err());
    }

    #[test]
    fn trace_validation() {
        assert!(PLTrace::new(vec![0.0, 1.0], vec![1.0], 0.0).is_err());
        assert!(PLTrace::new(vec![1.0, 0.0], vec![1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = PLTrace::new(vec![-1.5, 0.0, 2.25], vec![50.0, 700.125, 60.5], 0.0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("beta_fs2,pl_cps\n"));
        assert_eq!(PLTrace::read_csv(buf.as_slice(), 0.0).unwrap(), t);
    }

    #[test]
    fn surface_csv_is_long_format() {
        let s = ControlSurface {
            betas: vec![0.0, 1.0],
            taus: vec![0.0, 10.0],
            rho11: vec![vec![0.5, 0.25], vec![0.125, 0.0]],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "beta_fs2,tau_fs,rho11");
        assert_eq!(lines[3], "0,10,0.125");
        assert_eq!(lines.len(), 5);
        assert_eq!(s.argmax(), (0, 0));
    }
}
