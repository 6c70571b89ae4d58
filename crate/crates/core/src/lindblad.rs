//! Three-level Lindblad dynamics under a two-photon drive.
//!
//! `H(t) = diag(E0, E1, E2) − Ω2P Re{E²(t)} (|0⟩⟨2| + |2⟩⟨0|)` (rad/fs, ħ = 1).
//! Dissipation has two channels: relaxation `|2⟩ → |1⟩` with jump operator
//! `|1⟩⟨2|` at rate Γ12, and dephasing of `|2⟩` in the form
//! `(γ2/2)(ρ22 |2⟩⟨2| − ½{|2⟩⟨2|, ρ})`, which damps `ρ02` and `ρ12` at `γ2/4`.
//!
//! Integration is fixed-step RK4: `fine_dt` while the pulse is on, then
//! `coarse_dt` over the field-free relaxation tail. Both segments run in the
//! interaction picture of the diagonal Hamiltonian (the dissipator commutes
//! with that rotation), so the ≈ 4.9 rad/fs free precession of `ρ02` is
//! carried exactly by a phase factor instead of by the stepper.

use std::io::Write;

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::field::FieldTable;
use crate::units::to_angular_frequency;
use crate::{Error, Result};

const TRACE_TOL: f64 = 1e-8;
const HERMITIAN_TOL: f64 = 1e-10;
const POSITIVITY_TOL: f64 = 1e-8;

/// Molecular energies (cm⁻¹), two-photon coupling (cm⁻¹) and rates (fs⁻¹).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MolecularParams {
    pub e0: f64,
    pub e1: f64,
    pub e2: f64,
    pub omega_2p: f64,
    pub gamma2: f64,
    pub gamma12: f64,
}

impl Default for MolecularParams {
    fn default() -> Self {
        MolecularParams::melppp()
    }
}

impl MolecularParams {
    /// MeLPPP values: E1 = 22 000 cm⁻¹, E2 = 25 940 cm⁻¹, Ω2P = 531 cm⁻¹,
    /// γ2 = 1/61 fs⁻¹, Γ12 = 1/190 fs⁻¹.
    pub fn melppp() -> Self {
        MolecularParams {
            e0: 0.0,
            e1: 22_000.0,
            e2: 25_940.0,
            omega_2p: 531.0,
            gamma2: 1.0 / 61.0,
            gamma12: 1.0 / 190.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.e0, self.e1, self.e2, self.omega_2p, self.gamma2, self.gamma12];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("molecular", "all parameters must be finite"));
        }
        if !(self.e0 < self.e1 && self.e1 < self.e2) {
            return Err(Error::param("energies", "require E0 < E1 < E2"));
        }
        if self.omega_2p < 0.0 {
            return Err(Error::param("omega_2p", "must be non-negative"));
        }
        if self.gamma2 < 0.0 {
            return Err(Error::param("gamma2", "must be non-negative"));
        }
        if self.gamma12 < 0.0 {
            return Err(Error::param("gamma12", "must be non-negative"));
        }
        Ok(())
    }

    fn energies_rad(&self) -> [f64; 3] {
        [
            to_angular_frequency(self.e0),
            to_angular_frequency(self.e1),
            to_angular_frequency(self.e2),
        ]
    }
}

/// 3×3 density matrix over `{|0⟩, |1⟩, |2⟩}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix(pub Matrix3<Complex64>);

impl DensityMatrix {
    pub fn ground() -> Self {
        let mut m = Matrix3::zeros();
        m[(0, 0)] = Complex64::new(1.0, 0.0);
        DensityMatrix(m)
    }

    pub fn population(&self, i: usize) -> f64 {
        self.0[(i, i)].re
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    /// `max |ρ − ρ†|` over elements.
    pub fn hermiticity_defect(&self) -> f64 {
        let d = self.0 - self.0.adjoint();
        d.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (self.0 + self.0.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().min()
    }

    pub fn purity(&self) -> f64 {
        (self.0 * self.0).trace().re
    }

    /// Checks trace, Hermiticity and positivity at time `t`.
    pub fn check(&self, t: f64) -> Result<()> {
        let fail = |reason: String| Err(Error::Integration { time: t, reason });
        if self.0.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return fail("non-finite density matrix".into());
        }
        let tr = self.trace();
        if (tr - 1.0).norm() > TRACE_TOL {
            return fail(format!("trace drifted to {tr}"));
        }
        let herm = self.hermiticity_defect();
        if herm > HERMITIAN_TOL {
            return fail(format!("Hermiticity defect {herm:e}"));
        }
        let lam = self.min_eigenvalue();
        if lam < -POSITIVITY_TOL {
            return fail(format!("negative eigenvalue {lam:e}"));
        }
        Ok(())
    }
}

/// Hamiltonian in rad/fs for a given value of `Re{E²}`.
pub fn hamiltonian(params: &MolecularParams, re_e_sq: f64) -> Matrix3<Complex64> {
    let [e0, e1, e2] = params.energies_rad();
    let v = -to_angular_frequency(params.omega_2p) * re_e_sq;
    hamiltonian_with_coupling([e0, e1, e2], Complex64::new(v, 0.0))
}

fn hamiltonian_with_coupling(energies: [f64; 3], coupling: Complex64) -> Matrix3<Complex64> {
    let mut h = Matrix3::zeros();
    for (i, e) in energies.into_iter().enumerate() {
        h[(i, i)] = Complex64::new(e, 0.0);
    }
    h[(0, 2)] = coupling;
    h[(2, 0)] = coupling.conj();
    h
}

/// `dρ/dt = −i[H, ρ] + Γ12 (ρ22|1⟩⟨1| − ½{|2⟩⟨2|, ρ}) + (γ2/2)(ρ22|2⟩⟨2| − ½{|2⟩⟨2|, ρ})`.
pub fn lindblad_rhs(
    rho: &Matrix3<Complex64>,
    h: &Matrix3<Complex64>,
    params: &MolecularParams,
) -> Matrix3<Complex64> {
    let mi = Complex64::new(0.0, -1.0);
    let mut d = (h * rho - rho * h) * mi;
    let p22 = rho[(2, 2)];
    // ½{P2, ρ}: row 2 and column 2 of ρ, with ρ22 counted twice
    let mut anti = Matrix3::zeros();
    for k in 0..3 {
        anti[(2, k)] += rho[(2, k)] * 0.5;
        anti[(k, 2)] += rho[(k, 2)] * 0.5;
    }
    let g = params.gamma12;
    let deph = 0.5 * params.gamma2;
    d -= anti * Complex64::new(g + deph, 0.0);
    d[(1, 1)] += p22 * g;
    d[(2, 2)] += p22 * deph;
    d
}

/// Reference frame of the drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveFrame {
    /// Full oscillatory `Re{E²(t)}` coupling in the laboratory frame.
    #[default]
    Lab,
    /// Frame rotating at `2 ω0` on `|2⟩` with counter-rotating terms dropped.
    RotatingWave,
}

/// How ρ11 at `t_final` is obtained from the end of the pulse window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    #[default]
    Integrate,
    /// `ρ11 + ρ22 (1 − e^{−Γ12 (t_final − t_pulse_end)})`.
    Analytic,
}

/// Solver knobs shared by every simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Latest allowed start of the integration (fs).
    pub t_start: f64,
    /// Move the start earlier to the pulse onset (same threshold as the
    /// pulse end) when a chirped pulse is already on at `t_start`.
    pub start_at_onset: bool,
    pub t_final: f64,
    pub fine_dt: f64,
    pub coarse_dt: f64,
    /// Lower clamp for the end of the pulse window (fs).
    pub min_pulse_end: f64,
    /// Pulse window ends where `|E|` falls below this fraction of its peak.
    pub pulse_end_threshold: f64,
    pub frame: DriveFrame,
    pub tail: TailMode,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            t_start: -100.0,
            start_at_onset: true,
            t_final: 1000.0,
            fine_dt: 0.01,
            coarse_dt: 1.0,
            min_pulse_end: 300.0,
            pulse_end_threshold: 1e-6,
            frame: DriveFrame::Lab,
            tail: TailMode::Integrate,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.fine_dt > 0.0 && self.fine_dt <= 0.02) {
            return Err(Error::param("fine_dt", "must lie in (0, 0.02] fs"));
        }
        if !(self.coarse_dt > 0.0) {
            return Err(Error::param("coarse_dt", "must be positive"));
        }
        if !(self.t_start < self.min_pulse_end && self.min_pulse_end < self.t_final) {
            return Err(Error::param("time window", "require t_start < min_pulse_end < t_final"));
        }
        if !(self.pulse_end_threshold > 0.0 && self.pulse_end_threshold < 1.0) {
            return Err(Error::param("pulse_end_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Integration window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_pulse_end: f64,
    pub t_final: f64,
    pub fine_dt: f64,
    pub coarse_dt: f64,
}

impl TimeGrid {
    /// Window for `field`: the pulse segment ends where `|E|` drops below the
    /// threshold, clamped from below, then rounded up to a whole fine step.
    /// With `start_at_onset` the start is the earlier of `t_start` and the
    /// first time `|E|` reaches the threshold.
    pub fn for_field(field: &FieldTable, settings: &SolverSettings) -> Result<Self> {
        settings.validate()?;
        let raw_end = field
            .last_time_above(settings.pulse_end_threshold)
            .max(settings.min_pulse_end)
            .min(settings.t_final - settings.coarse_dt);
        let t_start = if settings.start_at_onset {
            field.first_time_above(settings.pulse_end_threshold).min(settings.t_start)
        } else {
            settings.t_start
        };
        let grid = TimeGrid {
            t_start,
            t_pulse_end: raw_end,
            t_final: settings.t_final,
            fine_dt: settings.fine_dt,
            coarse_dt: settings.coarse_dt,
        };
        grid.validate()?;
        Ok(grid.aligned())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_start < self.t_pulse_end && self.t_pulse_end < self.t_final) {
            return Err(Error::param("time grid", "require t_start < t_pulse_end < t_final"));
        }
        if !(self.fine_dt > 0.0 && self.fine_dt <= 0.02) {
            return Err(Error::param("fine_dt", "must lie in (0, 0.02] fs"));
        }
        if !(self.coarse_dt > 0.0) {
            return Err(Error::param("coarse_dt", "must be positive"));
        }
        Ok(())
    }

    pub fn fine_steps(&self) -> usize {
        ((self.t_pulse_end - self.t_start) / self.fine_dt - 1e-9).ceil() as usize
    }

    fn aligned(self) -> Self {
        let n = self.fine_steps();
        TimeGrid {
            t_pulse_end: self.t_start + n as f64 * self.fine_dt,
            ..self
        }
    }

    /// Number and size of the tail steps (the last step lands on `t_final`).
    pub fn coarse_steps(&self) -> (usize, f64) {
        let span = self.t_final - self.t_pulse_end;
        let n = ((span / self.coarse_dt) - 1e-9).ceil().max(1.0) as usize;
        (n, span / n as f64)
    }

    pub fn with_fine_dt(self, fine_dt: f64) -> Self {
        TimeGrid { fine_dt, ..self }.aligned()
    }
}

/// Coupling samples on the RK4 half-step lattice of the pulse window.
#[derive(Debug, Clone, PartialEq)]
enum Samples {
    /// `Re{E²(t)}`.
    Lab(Vec<f64>),
    /// `conj(E(t))² e^{−2iω0 t}`.
    Rotating { carrier: f64, values: Vec<Complex64> },
}

/// Sampled drive for one pulse on one time grid; reusable across parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Drive {
    grid: TimeGrid,
    samples: Samples,
}

impl Drive {
    /// `carrier` is the laser center ω0 in rad/fs, used only by the rotating frame.
    pub fn new(field: &FieldTable, grid: TimeGrid, frame: DriveFrame, carrier: f64) -> Result<Self> {
        grid.validate()?;
        let grid = grid.aligned();
        let half = 0.5 * grid.fine_dt;
        let n = 2 * grid.fine_steps() + 1;
        let time = |k: usize| grid.t_start + k as f64 * half;
        let samples = match frame {
            DriveFrame::Lab => Samples::Lab(
                (0..n)
                    .map(|k| {
                        let e = field.at(time(k));
                        e.re * e.re - e.im * e.im
                    })
                    .collect(),
            ),
            DriveFrame::RotatingWave => {
                let two_w = 2.0 * carrier;
                Samples::Rotating {
                    carrier: two_w,
                    values: (0..n)
                        .map(|k| {
                            let t = time(k);
                            let e = field.at(t).conj();
                            e * e * Complex64::from_polar(1.0, -two_w * t)
                        })
                        .collect(),
                }
            }
        };
        Ok(Drive { grid, samples })
    }

    /// Laboratory-frame drive with the default window rules.
    pub fn lab(field: &FieldTable, settings: &SolverSettings) -> Result<Self> {
        Drive::new(field, TimeGrid::for_field(field, settings)?, DriveFrame::Lab, 0.0)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn frame(&self) -> DriveFrame {
        match self.samples {
            Samples::Lab(_) => DriveFrame::Lab,
            Samples::Rotating { .. } => DriveFrame::RotatingWave,
        }
    }

    fn energies(&self, params: &MolecularParams) -> [f64; 3] {
        let [e0, e1, e2] = params.energies_rad();
        match self.samples {
            Samples::Lab(_) => [e0, e1, e2],
            Samples::Rotating { carrier, .. } => [e0, e1, e2 - carrier],
        }
    }

    fn coupling(&self, k: usize, params: &MolecularParams) -> Complex64 {
        let w = to_angular_frequency(params.omega_2p);
        match &self.samples {
            Samples::Lab(v) => Complex64::new(-w * v[k], 0.0),
            Samples::Rotating { values, .. } => values[k] * (-0.5 * w),
        }
    }

    /// Full density-matrix trajectory from `|0⟩⟨0|` at `t_start`.
    ///
    /// Stores every 1 fs in the pulse window and every 10 fs afterwards;
    /// every stored state is checked against the density-matrix invariants.
    pub fn evolve(&self, params: &MolecularParams) -> Result<Trajectory> {
        params.validate()?;
        let g = &self.grid;
        let energies = self.energies(params);
        let detuning = energies[0] - energies[2];
        let half = 0.5 * g.fine_dt;
        let rhs = |rho: &Matrix3<Complex64>, v: &Matrix3<Complex64>| lindblad_rhs(rho, v, params);
        let v_at = |k: usize| {
            let z = self.coupling(k, params) * Complex64::from_polar(1.0, detuning * k as f64 * half);
            hamiltonian_with_coupling([0.0; 3], z)
        };
        let lab = |rho: &Matrix3<Complex64>, t: f64| DensityMatrix(free_rotation(rho, energies, t - g.t_start));

        let mut rho = DensityMatrix::ground().0;
        let mut points = vec![TrajectoryPoint {
            t: g.t_start,
            rho: DensityMatrix(rho),
        }];
        let n_fine = g.fine_steps();
        let store_fine = ((1.0 / g.fine_dt).round() as usize).max(1);
        let mut v_lo = v_at(0);
        for step in 0..n_fine {
            let v_mid = v_at(2 * step + 1);
            let v_hi = v_at(2 * step + 2);
            rho = rk4(&rho, g.fine_dt, &v_lo, &v_mid, &v_hi, &rhs);
            v_lo = v_hi;
            if (step + 1) % store_fine == 0 || step + 1 == n_fine {
                let t = g.t_start + (step + 1) as f64 * g.fine_dt;
                let state = lab(&rho, t);
                state.check(t)?;
                points.push(TrajectoryPoint { t, rho: state });
            }
        }
        let (n_coarse, dt) = g.coarse_steps();
        let store_coarse = ((10.0 / dt).round() as usize).max(1);
        let zero = Matrix3::zeros();
        for step in 0..n_coarse {
            rho = rk4(&rho, dt, &zero, &zero, &zero, &rhs);
            if (step + 1) % store_coarse == 0 || step + 1 == n_coarse {
                let t = g.t_pulse_end + (step + 1) as f64 * dt;
                let state = lab(&rho, t);
                state.check(t)?;
                points.push(TrajectoryPoint { t, rho: state });
            }
        }
        Ok(Trajectory { points })
    }

    /// Reduced states at `t_pulse_end` and `t_final`.
    ///
    /// Integrates only `ρ00, ρ11, ρ22, ρ02`: with the ground-state initial
    /// condition `ρ01` and `ρ12` stay identically zero under this
    /// Hamiltonian and dissipator, so the reduced system is exact.
    pub fn reduced_evolution(&self, params: &MolecularParams) -> Result<(ReducedState, ReducedState)> {
        params.validate()?;
        let [e0, _, e2] = self.energies(params);
        let detuning = e0 - e2;
        let rates = Rates::new(params);
        let g = &self.grid;
        let half = 0.5 * g.fine_dt;
        let mut s = ReducedState::ground();
        integrate_reduced(&mut s, &rates, g.fine_dt, g.fine_steps(), |k| {
            self.coupling(k, params) * Complex64::from_polar(1.0, detuning * k as f64 * half)
        });
        finish_tail(s, &rates, g, detuning)
    }

    /// ρ11 at `t_final`.
    pub fn steady_population(&self, params: &MolecularParams, tail: TailMode) -> Result<f64> {
        let (end, fin) = self.reduced_evolution(params)?;
        Ok(match tail {
            TailMode::Integrate => fin.p1,
            TailMode::Analytic => {
                let span = self.grid.t_final - self.grid.t_pulse_end;
                end.p1 + end.p2 * (1.0 - (-params.gamma12 * span).exp())
            }
        })
    }
}

/// Number of pulses integrated in lockstep by a [`DriveBatch`].
pub const BATCH_LANES: usize = 8;

/// Laboratory-frame drives for up to [`BATCH_LANES`] pulses sampled on one
/// shared window, integrated together for throughput.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveBatch {
    grid: TimeGrid,
    active: usize,
    samples: Vec<[f64; BATCH_LANES]>,
}

impl DriveBatch {
    /// The shared window spans the windows of every field under `settings`.
    pub fn lab(fields: &[&FieldTable], settings: &SolverSettings) -> Result<Self> {
        if fields.is_empty() || fields.len() > BATCH_LANES {
            return Err(Error::param("fields", format!("batch holds 1 to {BATCH_LANES} pulses")));
        }
        let mut grid = TimeGrid::for_field(fields[0], settings)?;
        for f in &fields[1..] {
            let g = TimeGrid::for_field(f, settings)?;
            grid.t_start = grid.t_start.min(g.t_start);
            grid.t_pulse_end = grid.t_pulse_end.max(g.t_pulse_end);
        }
        let grid = grid.aligned();
        grid.validate()?;
        let half = 0.5 * grid.fine_dt;
        let samples = (0..2 * grid.fine_steps() + 1)
            .map(|k| {
                let t = grid.t_start + k as f64 * half;
                let mut row = [0.0; BATCH_LANES];
                for (slot, f) in row.iter_mut().zip(fields) {
                    let e = f.at(t);
                    *slot = e.re * e.re - e.im * e.im;
                }
                row
            })
            .collect();
        Ok(DriveBatch {
            grid,
            active: fields.len(),
            samples,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.active
    }

    pub fn is_empty(&self) -> bool {
        self.active == 0
    }

    /// Reduced states at `t_pulse_end` and `t_final`, one pair per pulse.
    pub fn reduced_evolution(&self, params: &MolecularParams) -> Result<Vec<(ReducedState, ReducedState)>> {
        params.validate()?;
        let [e0, _, e2] = params.energies_rad();
        let detuning = e0 - e2;
        let rates = Rates::new(params);
        let g = &self.grid;
        let scale = -to_angular_frequency(params.omega_2p);
        let states = integrate_lab_batch(&rates, g.fine_dt, g.fine_steps(), &self.samples, scale, detuning);
        states[..self.active]
            .iter()
            .map(|&s| finish_tail(s, &rates, g, detuning))
            .collect()
    }

    /// ρ11 at `t_final` for each pulse.
    pub fn steady_populations(&self, params: &MolecularParams, tail: TailMode) -> Result<Vec<f64>> {
        let span = self.grid.t_final - self.grid.t_pulse_end;
        let decay = 1.0 - (-params.gamma12 * span).exp();
        Ok(self
            .reduced_evolution(params)?
            .into_iter()
            .map(|(end, fin)| match tail {
                TailMode::Integrate => fin.p1,
                TailMode::Analytic => end.p1 + end.p2 * decay,
            })
            .collect())
    }
}

#[derive(Clone, Copy)]
struct Rates {
    gamma12: f64,
    coherence_decay: f64,
}

impl Rates {
    fn new(params: &MolecularParams) -> Self {
        Rates {
            gamma12: params.gamma12,
            coherence_decay: 0.5 * params.gamma12 + 0.25 * params.gamma2,
        }
    }
}

/// State of the reduced system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedState {
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub c02: Complex64,
}

impl ReducedState {
    fn ground() -> Self {
        ReducedState {
            p0: 1.0,
            p1: 0.0,
            p2: 0.0,
            c02: Complex64::new(0.0, 0.0),
        }
    }

    pub fn to_density_matrix(&self) -> DensityMatrix {
        let mut m = Matrix3::zeros();
        m[(0, 0)] = Complex64::new(self.p0, 0.0);
        m[(1, 1)] = Complex64::new(self.p1, 0.0);
        m[(2, 2)] = Complex64::new(self.p2, 0.0);
        m[(0, 2)] = self.c02;
        m[(2, 0)] = self.c02.conj();
        DensityMatrix(m)
    }

    fn check(&self, t: f64) -> Result<()> {
        let fail = |reason: String| Err(Error::Integration { time: t, reason });
        if ![self.p0, self.p1, self.p2, self.c02.re, self.c02.im]
            .iter()
            .all(|v| v.is_finite())
        {
            return fail("non-finite state".into());
        }
        let tr = self.p0 + self.p1 + self.p2;
        if (tr - 1.0).abs() > TRACE_TOL {
            return fail(format!("trace drifted to {tr}"));
        }
        // eigenvalues: p1 and those of [[p0, c], [c*, p2]]
        let half_tr = 0.5 * (self.p0 + self.p2);
        let disc = (0.25 * (self.p0 - self.p2).powi(2) + self.c02.norm_sqr()).sqrt();
        let lam = (half_tr - disc).min(self.p1);
        if lam < -POSITIVITY_TOL {
            return fail(format!("negative eigenvalue {lam:e}"));
        }
        Ok(())
    }
}

/// Runs the field-free tail from an interaction-picture state at
/// `t_pulse_end`; returns both ends rotated back to the lab frame.
fn finish_tail(mut s: ReducedState, r: &Rates, g: &TimeGrid, detuning: f64) -> Result<(ReducedState, ReducedState)> {
    let to_lab = |s: ReducedState, t: f64| ReducedState {
        c02: s.c02 * Complex64::from_polar(1.0, -detuning * (t - g.t_start)),
        ..s
    };
    let end = to_lab(s, g.t_pulse_end);
    end.check(g.t_pulse_end)?;
    let (n, dt) = g.coarse_steps();
    integrate_reduced(&mut s, r, dt, n, |_| Complex64::new(0.0, 0.0));
    let fin = to_lab(s, g.t_final);
    fin.check(g.t_final)?;
    Ok((end, fin))
}

#[derive(Clone, Copy)]
struct Deriv {
    p0: f64,
    p1: f64,
    p2: f64,
    c: Complex64,
}

/// Reduced right-hand side in the interaction picture; `g` is the rotated
/// coupling `H̃02`.
#[inline(always)]
fn reduced_rhs(p0: f64, p2: f64, c: Complex64, g: Complex64, r: &Rates) -> Deriv {
    // 2 Im(g c*)
    let transfer = 2.0 * (g.im * c.re - g.re * c.im);
    let relax = r.gamma12 * p2;
    let d = p2 - p0;
    Deriv {
        p0: transfer,
        p1: relax,
        p2: -transfer - relax,
        c: Complex64::new(g.im * d, -g.re * d) - c * r.coherence_decay,
    }
}

type Lanes = [f64; BATCH_LANES];

#[inline(always)]
fn lanes(f: impl Fn(usize) -> f64) -> Lanes {
    std::array::from_fn(f)
}

/// Lockstep RK4 over [`BATCH_LANES`] real lab-frame drives. The phasor
/// `e^{iΔτ}` is shared by all lanes and advanced by recurrence.
fn integrate_lab_batch(
    r: &Rates,
    h: f64,
    steps: usize,
    drive: &[Lanes],
    scale: f64,
    detuning: f64,
) -> [ReducedState; BATCH_LANES] {
    let (gam, kap) = (r.gamma12, r.coherence_decay);
    let mut p0: Lanes = [1.0; BATCH_LANES];
    let mut p1: Lanes = [0.0; BATCH_LANES];
    let mut p2: Lanes = [0.0; BATCH_LANES];
    let mut cr: Lanes = [0.0; BATCH_LANES];
    let mut ci: Lanes = [0.0; BATCH_LANES];
    let h2 = 0.5 * h;
    let h6 = h / 6.0;
    #[inline(always)]
    fn rhs(p0: &Lanes, p2: &Lanes, cr: &Lanes, ci: &Lanes, w: &Lanes, u: Complex64, gam: f64, kap: f64) -> [Lanes; 4] {
        let mut out = [[0.0; BATCH_LANES]; 4];
        for i in 0..BATCH_LANES {
            let (gr, gi) = (w[i] * u.re, w[i] * u.im);
            let transfer = 2.0 * (gi * cr[i] - gr * ci[i]);
            let d = p2[i] - p0[i];
            out[0][i] = transfer;
            out[1][i] = -transfer - gam * p2[i];
            out[2][i] = gi * d - kap * cr[i];
            out[3][i] = -gr * d - kap * ci[i];
        }
        out
    }
    let rot = Complex64::from_polar(1.0, detuning * h2);
    let mut u = Complex64::new(scale, 0.0);
    for (step, w) in drive[..2 * steps + 1].windows(3).step_by(2).enumerate() {
        if step % 4096 == 0 {
            // resynchronize so rounding in the recurrence cannot build up
            u = Complex64::from_polar(scale, detuning * h * step as f64);
        }
        let u_mid = u * rot;
        let u_hi = u_mid * rot;
        let k1 = rhs(&p0, &p2, &cr, &ci, &w[0], u, gam, kap);
        let a0 = lanes(|i| p0[i] + h2 * k1[0][i]);
        let a2 = lanes(|i| p2[i] + h2 * k1[1][i]);
        let ar = lanes(|i| cr[i] + h2 * k1[2][i]);
        let ai = lanes(|i| ci[i] + h2 * k1[3][i]);
        let k2 = rhs(&a0, &a2, &ar, &ai, &w[1], u_mid, gam, kap);
        let b0 = lanes(|i| p0[i] + h2 * k2[0][i]);
        let b2 = lanes(|i| p2[i] + h2 * k2[1][i]);
        let br = lanes(|i| cr[i] + h2 * k2[2][i]);
        let bi = lanes(|i| ci[i] + h2 * k2[3][i]);
        let k3 = rhs(&b0, &b2, &br, &bi, &w[1], u_mid, gam, kap);
        let c0 = lanes(|i| p0[i] + h * k3[0][i]);
        let c2 = lanes(|i| p2[i] + h * k3[1][i]);
        let cr3 = lanes(|i| cr[i] + h * k3[2][i]);
        let ci3 = lanes(|i| ci[i] + h * k3[3][i]);
        let k4 = rhs(&c0, &c2, &cr3, &ci3, &w[2], u_hi, gam, kap);
        for i in 0..BATCH_LANES {
            // dρ11/dt = Γ12 ρ22 on the same stages
            p1[i] += h6 * gam * (p2[i] + 2.0 * (a2[i] + b2[i]) + c2[i]);
            p0[i] += h6 * (k1[0][i] + 2.0 * (k2[0][i] + k3[0][i]) + k4[0][i]);
            p2[i] += h6 * (k1[1][i] + 2.0 * (k2[1][i] + k3[1][i]) + k4[1][i]);
            cr[i] += h6 * (k1[2][i] + 2.0 * (k2[2][i] + k3[2][i]) + k4[2][i]);
            ci[i] += h6 * (k1[3][i] + 2.0 * (k2[3][i] + k3[3][i]) + k4[3][i]);
        }
        u = u_hi;
    }
    std::array::from_fn(|i| ReducedState {
        p0: p0[i],
        p1: p1[i],
        p2: p2[i],
        c02: Complex64::new(cr[i], ci[i]),
    })
}

fn integrate_reduced<F: Fn(usize) -> Complex64>(s: &mut ReducedState, r: &Rates, h: f64, steps: usize, coupling: F) {
    let (mut p0, mut p1, mut p2, mut c) = (s.p0, s.p1, s.p2, s.c02);
    let h2 = 0.5 * h;
    let h6 = h / 6.0;
    let mut g_lo = coupling(0);
    for step in 0..steps {
        let g_mid = coupling(2 * step + 1);
        let g_hi = coupling(2 * step + 2);
        let k1 = reduced_rhs(p0, p2, c, g_lo, r);
        let k2 = reduced_rhs(p0 + h2 * k1.p0, p2 + h2 * k1.p2, c + k1.c * h2, g_mid, r);
        let k3 = reduced_rhs(p0 + h2 * k2.p0, p2 + h2 * k2.p2, c + k2.c * h2, g_mid, r);
        let k4 = reduced_rhs(p0 + h * k3.p0, p2 + h * k3.p2, c + k3.c * h, g_hi, r);
        p0 += h6 * (k1.p0 + 2.0 * (k2.p0 + k3.p0) + k4.p0);
        p1 += h6 * (k1.p1 + 2.0 * (k2.p1 + k3.p1) + k4.p1);
        p2 += h6 * (k1.p2 + 2.0 * (k2.p2 + k3.p2) + k4.p2);
        c += (k1.c + (k2.c + k3.c) * 2.0 + k4.c) * h6;
        g_lo = g_hi;
    }
    *s = ReducedState { p0, p1, p2, c02: c };
}

/// `e^{−iH0τ} ρ e^{iH0τ}` for diagonal `H0`.
fn free_rotation(rho: &Matrix3<Complex64>, energies: [f64; 3], tau: f64) -> Matrix3<Complex64> {
    Matrix3::from_fn(|j, k| rho[(j, k)] * Complex64::from_polar(1.0, -(energies[j] - energies[k]) * tau))
}

fn rk4<F>(
    rho: &Matrix3<Complex64>,
    h: f64,
    h_lo: &Matrix3<Complex64>,
    h_mid: &Matrix3<Complex64>,
    h_hi: &Matrix3<Complex64>,
    rhs: &F,
) -> Matrix3<Complex64>
where
    F: Fn(&Matrix3<Complex64>, &Matrix3<Complex64>) -> Matrix3<Complex64>,
{
    let c = |x: f64| Complex64::new(x, 0.0);
    let k1 = rhs(rho, h_lo);
    let k2 = rhs(&(rho + k1 * c(0.5 * h)), h_mid);
    let k3 = rhs(&(rho + k2 * c(0.5 * h)), h_mid);
    let k4 = rhs(&(rho + k3 * c(h)), h_hi);
    rho + (k1 + (k2 + k3) * c(2.0) + k4) * c(h / 6.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub rho: DensityMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectory always holds the initial state")
    }

    /// CSV `t_fs, rho00, rho11, rho22, re_rho02, im_rho02`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_fs", "rho00", "rho11", "rho22", "re_rho02", "im_rho02"])?;
        for p in &self.points {
            let m = &p.rho.0;
            w.write_record(&[
                p.t.to_string(),
                m[(0, 0)].re.to_string(),
                m[(1, 1)].re.to_string(),
                m[(2, 2)].re.to_string(),
                m[(0, 2)].re.to_string(),
                m[(0, 2)].im.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// ρ11 at `t_final` for one pulse, synthesized on the default frequency grid.
pub fn steady_population(
    params: &MolecularParams,
    spec: &crate::field::PulseSpec,
    settings: &SolverSettings,
) -> Result<f64> {
    let synth = crate::field::FieldSynthesizer::with_default_grid(spec)?;
    let field = synth.synthesize(spec.beta, spec.tau)?;
    let grid = TimeGrid::for_field(&field, settings)?;
    Drive::new(&field, grid, settings.frame, spec.center_omega())?.steady_population(params, settings.tail)
}

/// Full trajectory in the laboratory frame on `grid`.
pub fn evolve(params: &MolecularParams, field: &FieldTable, grid: &TimeGrid) -> Result<Trajectory> {
    Drive::new(field, *grid, DriveFrame::Lab, 0.0)?.evolve(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSynthesizer, PulseSpec};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn unit(i: usize, j: usize) -> Matrix3<Complex64> {
        let mut m = Matrix3::zeros();
        m[(i, j)] = c(1.0);
        m
    }

    fn paper_field() -> FieldTable {
        let spec = PulseSpec::new(12_987.0, 400.0).unwrap();
        FieldSynthesizer::with_default_grid(&spec).unwrap().synthesize(0.0, 0.0).unwrap()
    }

    #[test]
    fn field_free_hamiltonian_is_diagonal() {
        let p = MolecularParams::melppp();
        let h = hamiltonian(&p, 0.0);
        let e = p.energies_rad();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { e[i] } else { 0.0 };
                assert_eq!(h[(i, j)], c(want));
            }
        }
    }

    #[test]
    fn coupling_element() {
        let p = MolecularParams::melppp();
        let h = hamiltonian(&p, 1.0);
        // −531 cm⁻¹ in rad/fs
        assert!((h[(0, 2)].re + 0.100_021_9).abs() < 1e-6);
        assert_eq!(h[(0, 2)], h[(2, 0)]);
        assert_eq!(h[(0, 1)], c(0.0));
        assert_eq!(h[(1, 2)], c(0.0));
        let h = hamiltonian(&p, -0.37);
        assert_eq!(h, h.adjoint());
    }

    #[test]
    fn relaxation_channel() {
        let p = MolecularParams::melppp();
        let d = lindblad_rhs(&unit(2, 2), &Matrix3::zeros(), &p);
        assert!((d[(1, 1)].re - p.gamma12).abs() < 1e-15);
        // the dephasing term leaves populations alone
        assert!((d[(2, 2)].re + p.gamma12).abs() < 1e-15);
        assert!(d[(0, 0)].norm() < 1e-15);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert_eq!(d[(i, j)], c(0.0));
            assert_eq!(d[(j, i)], c(0.0));
        }
    }

    #[test]
    fn coherence_decays_at_quarter_gamma2() {
        let p = MolecularParams {
            gamma12: 0.0,
            ..MolecularParams::melppp()
        };
        let z = Complex64::new(0.3, -0.2);
        let mut rho = Matrix3::zeros();
        rho[(0, 2)] = z;
        rho[(2, 0)] = z.conj();
        let d = lindblad_rhs(&rho, &Matrix3::zeros(), &p);
        assert!((d[(0, 2)] + z * (0.25 * p.gamma2)).norm() < 1e-15);
    }

    #[test]
    fn ground_state_is_stationary() {
        let p = MolecularParams {
            gamma2: 0.0,
            gamma12: 0.0,
            ..MolecularParams::melppp()
        };
        let d = lindblad_rhs(&DensityMatrix::ground().0, &hamiltonian(&p, 0.0), &p);
        assert!(d.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn rhs_is_hermitian_and_traceless() {
        let p = MolecularParams::melppp();
        let mut rho = Matrix3::from_fn(|i, j| Complex64::new(0.1 * (i + j) as f64, 0.05 * i as f64 - 0.07 * j as f64));
        rho = (rho + rho.adjoint()) * c(0.5);
        let d = lindblad_rhs(&rho, &hamiltonian(&p, 0.8), &p);
        assert!(d.trace().norm() < 1e-14);
        assert!((d - d.adjoint()).iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn dark_molecule_stays_in_ground_state() {
        let p = MolecularParams {
            omega_2p: 0.0,
            ..MolecularParams::melppp()
        };
        let field = paper_field();
        let grid = TimeGrid::for_field(&field, &SolverSettings::default()).unwrap();
        let traj = evolve(&p, &field, &grid).unwrap();
        let ground = DensityMatrix::ground();
        assert!(traj.points.iter().all(|pt| pt.rho == ground));
    }

    #[test]
    fn dissipation_free_run_stays_pure_and_decoupled() {
        let p = MolecularParams {
            gamma2: 0.0,
            gamma12: 0.0,
            ..MolecularParams::melppp()
        };
        let field = paper_field();
        let grid = TimeGrid::for_field(&field, &SolverSettings::default()).unwrap();
        let traj = evolve(&p, &field, &grid).unwrap();
        for pt in &traj.points {
            assert!((pt.rho.purity() - 1.0).abs() < 1e-6, "t = {} purity {}", pt.t, pt.rho.purity());
            for (i, j) in [(0, 1), (1, 2)] {
                assert!(pt.rho.0[(i, j)].norm() < 1e-12);
            }
        }
        assert!(traj.last().rho.population(2) > 0.01);
    }

    #[test]
    fn reduced_system_matches_full_matrix() {
        let p = MolecularParams::melppp();
        let field = paper_field();
        let drive = Drive::lab(&field, &SolverSettings::default()).unwrap();
        let full = drive.evolve(&p).unwrap();
        let (_, fin) = drive.reduced_evolution(&p).unwrap();
        let rho = full.last().rho;
        assert_eq!(full.last().t, drive.grid().t_final);
        assert!((rho.population(1) - fin.p1).abs() < 1e-12);
        assert!((rho.population(2) - fin.p2).abs() < 1e-12);
        assert!((rho.0[(0, 2)] - fin.c02).norm() < 1e-10);
    }

    #[test]
    fn batch_matches_single_drive() {
        let spec = PulseSpec::new(12_987.0, 400.0).unwrap();
        let synth = FieldSynthesizer::with_default_grid(&spec).unwrap();
        let fields: Vec<_> = [0.0, 300.0, -300.0].iter().map(|&b| synth.synthesize(b, 0.0).unwrap()).collect();
        let refs: Vec<_> = fields.iter().collect();
        let settings = SolverSettings::default();
        let batch = DriveBatch::lab(&refs, &settings).unwrap();
        let p = MolecularParams::melppp();
        let got = batch.steady_populations(&p, TailMode::Integrate).unwrap();
        assert_eq!(got.len(), 3);
        for (f, g) in fields.iter().zip(got) {
            let single = Drive::lab(f, &settings).unwrap().steady_population(&p, TailMode::Integrate).unwrap();
            assert!((single - g).abs() < 1e-8, "{single} vs {g}");
        }
        assert!(DriveBatch::lab(&[], &settings).is_err());
    }

    #[test]
    fn analytic_tail_agrees_with_integration() {
        let p = MolecularParams::melppp();
        let drive = Drive::lab(&paper_field(), &SolverSettings::default()).unwrap();
        let full = drive.steady_population(&p, TailMode::Integrate).unwrap();
        let quick = drive.steady_population(&p, TailMode::Analytic).unwrap();
        assert!((full - quick).abs() < 1e-3);
    }

    #[test]
    fn window_rules() {
        let field = paper_field();
        let s = SolverSettings::default();
        let g = TimeGrid::for_field(&field, &s).unwrap();
        assert!(g.t_start <= -100.0);
        assert!(g.t_pulse_end >= 300.0 - 1e-9);
        let n = g.fine_steps() as f64;
        assert!((g.t_start + n * g.fine_dt - g.t_pulse_end).abs() < 1e-9);
        let (k, h) = g.coarse_steps();
        assert!((g.t_pulse_end + k as f64 * h - g.t_final).abs() < 1e-9);
        assert!(h <= s.coarse_dt + 1e-12);

        let fixed = SolverSettings {
            start_at_onset: false,
            ..s
        };
        assert_eq!(TimeGrid::for_field(&field, &fixed).unwrap().t_start, -100.0);
        let coarse = SolverSettings { fine_dt: 0.05, ..s };
        assert!(TimeGrid::for_field(&field, &coarse).is_err());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = MolecularParams {
            e2: 10_000.0,
            ..MolecularParams::melppp()
        };
        assert!(bad.validate().is_err());
        let bad = MolecularParams {
            gamma2: -1.0,
            ..MolecularParams::melppp()
        };
        assert!(bad.validate().is_err());
    }
}
