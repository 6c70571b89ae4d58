//! Spectral pulse shaping and time-domain field synthesis.
//!
//! The field is built in the frequency domain as `A(ω) M(ω, τ) e^{iφ(ω, τ, β)}`
//! and brought to the time domain with one FFT. `A(ω)` is the spectral field
//! amplitude whose power spectrum `|A|²` has the quoted FWHM. The chirp phase
//! is `½ β (ω − ω0)²`; the cosine mask pair is `|cos(½(ω − ω0)τ)|` with phase
//! `π/2 · sgn cos(½(ω − ω0)τ)`.
//!
//! All pulses from one [`FieldSynthesizer`] share the normalization of the
//! unmodulated pulse, whose peak `|E(t)|` is exactly 1.

use std::f64::consts::{FRAC_PI_2, LN_2, PI};
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::units::to_angular_frequency;
use crate::{Error, Result};

/// Largest time step that still resolves the `2 ω0` oscillation of `E²`.
pub const MAX_TABLE_DT: f64 = 0.05;
/// Default FFT length (time span `len · dt` ≈ 6.5 ps at `dt = 0.05 fs`).
pub const DEFAULT_FFT_LEN: usize = 1 << 17;

/// Laser spectrum and modulation controls.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseSpec {
    /// Spectral center ω0 in cm⁻¹.
    pub center_wavenumber: f64,
    /// Power-spectrum FWHM in cm⁻¹.
    pub fwhm_wavenumber: f64,
    /// Quadratic chirp in fs².
    pub beta: f64,
    /// Cosine-mask delay in fs.
    pub tau: f64,
}

/// ω0 = 12 987 cm⁻¹, 400 cm⁻¹ FWHM, unmodulated.
impl Default for PulseSpec {
    fn default() -> Self {
        PulseSpec {
            center_wavenumber: 12_987.0,
            fwhm_wavenumber: 400.0,
            beta: 0.0,
            tau: 0.0,
        }
    }
}

impl PulseSpec {
    pub fn new(center_wavenumber: f64, fwhm_wavenumber: f64) -> Result<Self> {
        let spec = PulseSpec {
            center_wavenumber,
            fwhm_wavenumber,
            beta: 0.0,
            tau: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_beta(self, beta: f64) -> Self {
        PulseSpec { beta, ..self }
    }

    pub fn with_tau(self, tau: f64) -> Self {
        PulseSpec { tau, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center_wavenumber > 0.0 && self.center_wavenumber.is_finite()) {
            return Err(Error::param("center_wavenumber", "must be positive and finite"));
        }
        if !(self.fwhm_wavenumber > 0.0 && self.fwhm_wavenumber.is_finite()) {
            return Err(Error::param("fwhm_wavenumber", "must be positive and finite"));
        }
        if !self.beta.is_finite() {
            return Err(Error::param("beta", "must be finite"));
        }
        if !self.tau.is_finite() {
            return Err(Error::param("tau", "must be finite"));
        }
        Ok(())
    }

    /// ω0 in rad/fs.
    pub fn center_omega(&self) -> f64 {
        to_angular_frequency(self.center_wavenumber)
    }

    /// Power-spectrum FWHM in rad/fs.
    pub fn fwhm_omega(&self) -> f64 {
        to_angular_frequency(self.fwhm_wavenumber)
    }

    /// Standard deviation of the Gaussian power spectrum in rad/fs.
    pub fn sigma_omega(&self) -> f64 {
        self.fwhm_omega() / (2.0 * (2.0 * LN_2).sqrt())
    }

    /// Intensity FWHM of the transform-limited pulse, `4 ln2 / Δω`, in fs.
    pub fn transform_limited_fwhm(&self) -> f64 {
        4.0 * LN_2 / self.fwhm_omega()
    }
}

/// Uniform angular-frequency grid `ω_k = omega_start + k · d_omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid {
    pub omega_start: f64,
    pub d_omega: f64,
    pub len: usize,
}

impl FrequencyGrid {
    /// Grid of `len` points whose FFT time step is `time_step`, aligned so
    /// that ω0 falls exactly on a node.
    pub fn for_pulse(spec: &PulseSpec, len: usize, time_step: f64) -> Result<Self> {
        if !len.is_power_of_two() || len < 4 {
            return Err(Error::Config(format!(
                "frequency grid length {len} must be a power of two"
            )));
        }
        if !(time_step > 0.0) {
            return Err(Error::Config("time step must be positive".into()));
        }
        let d_omega = 2.0 * PI / (len as f64 * time_step);
        let w0 = spec.center_omega();
        let omega_start = w0 - (w0 / d_omega).floor() * d_omega;
        let grid = FrequencyGrid {
            omega_start,
            d_omega,
            len,
        };
        grid.validate(spec)?;
        Ok(grid)
    }

    /// Default grid: 2¹⁷ points at a 0.05 fs time step.
    pub fn default_for(spec: &PulseSpec) -> Result<Self> {
        Self::for_pulse(spec, DEFAULT_FFT_LEN, MAX_TABLE_DT)
    }

    pub fn validate(&self, spec: &PulseSpec) -> Result<()> {
        if !(self.d_omega > 0.0) || self.len < 2 {
            return Err(Error::Config("frequency grid must be increasing".into()));
        }
        let dt = self.time_step();
        if dt > MAX_TABLE_DT * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "frequency grid too coarse: time step {dt:.4} fs exceeds {MAX_TABLE_DT} fs \
                 needed to resolve the 2ω0 oscillation"
            )));
        }
        let w0 = spec.center_omega();
        let half = 10.0 * spec.sigma_omega();
        if self.omega_start > w0 - half || self.omega(self.len - 1) < w0 + half {
            return Err(Error::Config(format!(
                "frequency grid [{:.4}, {:.4}] rad/fs does not cover ω0 ± 10σ",
                self.omega_start,
                self.omega(self.len - 1)
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn omega(&self, k: usize) -> f64 {
        self.omega_start + k as f64 * self.d_omega
    }

    pub fn omegas(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |k| self.omega(k))
    }

    /// Time step of the transformed field, `2π / (len · dω)`.
    pub fn time_step(&self) -> f64 {
        2.0 * PI / (self.len as f64 * self.d_omega)
    }
}

/// Spectral field amplitude `A(ω) = exp(−2 ln2 (ω − ω0)² / Δω²)`.
///
/// Peaks at 1 on ω0; `|A|²` is one half at `ω0 ± Δω/2`.
pub fn gaussian_spectrum(grid: &FrequencyGrid, spec: &PulseSpec) -> Vec<f64> {
    let w0 = spec.center_omega();
    let fwhm = spec.fwhm_omega();
    grid.omegas()
        .map(|w| spectral_amplitude(w - w0, fwhm))
        .collect()
}

#[inline]
fn spectral_amplitude(detuning: f64, fwhm: f64) -> f64 {
    (-2.0 * LN_2 * detuning * detuning / (fwhm * fwhm)).exp()
}

/// Quadratic chirp `φ(ω) = ½ β (ω − ω0)²` in rad (β in fs², ω in rad/fs).
pub fn chirp_phase(grid: &FrequencyGrid, spec: &PulseSpec) -> Vec<f64> {
    let w0 = spec.center_omega();
    grid.omegas()
        .map(|w| 0.5 * spec.beta * (w - w0) * (w - w0))
        .collect()
}

/// Amplitude and phase of the cosine mask.
///
/// `sgn(x)` is +1 for `x ≥ 0`, so the phase at the mask zeros is `+π/2`.
pub fn cosine_masks(grid: &FrequencyGrid, spec: &PulseSpec) -> (Vec<f64>, Vec<f64>) {
    let w0 = spec.center_omega();
    grid.omegas()
        .map(|w| {
            let c = (0.5 * (w - w0) * spec.tau).cos();
            (c.abs(), if c >= 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 })
        })
        .unzip()
}

/// Sampled complex field on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTable {
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<Complex64>,
}

impl FieldTable {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }

    /// Index of the node closest to `t`, if inside the table.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = ((t - self.t0) / self.dt).round();
        (x >= 0.0 && (x as usize) < self.len()).then_some(x as usize)
    }

    /// Four-point cubic (Lagrange) interpolation; zero outside the span.
    pub fn at(&self, t: f64) -> Complex64 {
        let n = self.len();
        if n == 0 || t < self.t0 || t > self.t_end() {
            return Complex64::new(0.0, 0.0);
        }
        let x = (t - self.t0) / self.dt;
        // times computed as t0 + j·dt land a rounding error away from node j
        let nearest = x.round();
        if (x - nearest).abs() < 1e-9 {
            return self.samples[(nearest as usize).min(n - 1)];
        }
        let j = (x.floor() as usize).min(n - 1);
        let s = x - j as f64;
        let get = |k: isize| -> Complex64 {
            if k < 0 || k as usize >= n {
                Complex64::new(0.0, 0.0)
            } else {
                self.samples[k as usize]
            }
        };
        let j = j as isize;
        let (pm, p0, p1, p2) = (get(j - 1), get(j), get(j + 1), get(j + 2));
        let wm = -s * (s - 1.0) * (s - 2.0) / 6.0;
        let w0 = (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0;
        let w1 = -(s + 1.0) * s * (s - 2.0) / 2.0;
        let w2 = (s + 1.0) * s * (s - 1.0) / 6.0;
        pm * wm + p0 * w0 + p1 * w1 + p2 * w2
    }

    pub fn peak_magnitude(&self) -> f64 {
        self.samples.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Index of the global intensity maximum.
    pub fn peak_index(&self) -> usize {
        self.samples
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, z)| {
                let v = z.norm_sqr();
                if v > best.1 {
                    (j, v)
                } else {
                    best
                }
            })
            .0
    }

    /// Intensity FWHM (fs) of the lobe containing the global maximum.
    pub fn intensity_fwhm(&self) -> f64 {
        let p = self.peak_index();
        let half = 0.5 * self.samples[p].norm_sqr();
        let intensity = |j: usize| self.samples[j].norm_sqr();

        let mut r = p;
        while r + 1 < self.len() && intensity(r + 1) >= half {
            r += 1;
        }
        let mut l = p;
        while l > 0 && intensity(l - 1) >= half {
            l -= 1;
        }
        let cross = |inside: usize, outside: usize| {
            let (a, b) = (intensity(inside), intensity(outside));
            let frac = if a == b { 0.0 } else { (a - half) / (a - b) };
            self.time(inside) + frac * (self.time(outside) - self.time(inside))
        };
        let t_r = if r + 1 < self.len() { cross(r, r + 1) } else { self.time(r) };
        let t_l = if l > 0 { cross(l, l - 1) } else { self.time(l) };
        t_r - t_l
    }

    /// Largest time at which `|E| ≥ rel · peak`.
    pub fn last_time_above(&self, rel: f64) -> f64 {
        let thr = rel * self.peak_magnitude();
        self.samples
            .iter()
            .rposition(|z| z.norm() >= thr)
            .map_or(self.t0, |j| self.time(j))
    }

    /// Smallest time at which `|E| ≥ rel · peak`.
    pub fn first_time_above(&self, rel: f64) -> f64 {
        let thr = rel * self.peak_magnitude();
        self.samples
            .iter()
            .position(|z| z.norm() >= thr)
            .map_or(self.t0, |j| self.time(j))
    }

    /// Maximum `|E|` and its time within `[t_lo, t_hi]`.
    pub fn peak_in(&self, t_lo: f64, t_hi: f64) -> Option<(f64, f64)> {
        (0..self.len())
            .filter(|&j| (t_lo..=t_hi).contains(&self.time(j)))
            .map(|j| (self.time(j), self.samples[j].norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// CSV dump `t_fs, re_E, im_E, intensity` of the nodes inside `[t_lo, t_hi]`.
    pub fn write_csv<W: Write>(&self, out: W, t_lo: f64, t_hi: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_fs", "re_E", "im_E", "intensity"])?;
        for (j, z) in self.samples.iter().enumerate() {
            let t = self.time(j);
            if t < t_lo || t > t_hi {
                continue;
            }
            w.write_record(&[
                t.to_string(),
                z.re.to_string(),
                z.im.to_string(),
                z.norm_sqr().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reusable synthesizer for pulses sharing one spectrum.
///
/// Holds the FFT plan and the normalization constant of the unmodulated
/// pulse.
#[derive(Clone)]
pub struct FieldSynthesizer {
    spec: PulseSpec,
    grid: FrequencyGrid,
    spectrum: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    norm: f64,
}

impl std::fmt::Debug for FieldSynthesizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FieldSynthesizer")
            .field("spec", &self.spec)
            .field("grid", &self.grid)
            .field("norm", &self.norm)
            .finish()
    }
}

impl FieldSynthesizer {
    /// `spec.beta` and `spec.tau` are ignored; only the spectrum is used.
    pub fn new(spec: &PulseSpec, grid: FrequencyGrid) -> Result<Self> {
        spec.validate()?;
        grid.validate(spec)?;
        let base = PulseSpec {
            beta: 0.0,
            tau: 0.0,
            ..*spec
        };
        let spectrum = gaussian_spectrum(&grid, &base);
        let fft = FftPlanner::new().plan_fft_forward(grid.len);
        let mut synth = FieldSynthesizer {
            spec: base,
            grid,
            spectrum,
            fft,
            norm: 1.0,
        };
        let reference = synth.transform(synth.spectrum.iter().map(|&a| Complex64::new(a, 0.0)).collect());
        let peak = reference.peak_magnitude();
        if !(peak > 0.0) {
            return Err(Error::Config("reference pulse has zero amplitude".into()));
        }
        synth.norm = 1.0 / peak;
        Ok(synth)
    }

    pub fn with_default_grid(spec: &PulseSpec) -> Result<Self> {
        Self::new(spec, FrequencyGrid::default_for(spec)?)
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn base_spec(&self) -> &PulseSpec {
        &self.spec
    }

    /// Scale factor applied to every synthesized pulse.
    pub fn normalization(&self) -> f64 {
        self.norm
    }

    /// Modulated spectral field `A · M · e^{iφ}` on the grid.
    pub fn modulated_spectrum(&self, beta: f64, tau: f64) -> Vec<Complex64> {
        let spec = self.spec.with_beta(beta).with_tau(tau);
        let mut s: Vec<Complex64> = self.spectrum.iter().map(|&a| Complex64::new(a, 0.0)).collect();
        if beta != 0.0 {
            for (v, phi) in s.iter_mut().zip(chirp_phase(&self.grid, &spec)) {
                *v *= Complex64::from_polar(1.0, phi);
            }
        }
        if tau != 0.0 {
            let (amp, phase) = cosine_masks(&self.grid, &spec);
            for ((v, m), phi) in s.iter_mut().zip(amp).zip(phase) {
                *v *= Complex64::from_polar(m, phi);
            }
        }
        s
    }

    /// Time-domain pulse for chirp `beta` (fs²) and mask delay `tau` (fs).
    pub fn synthesize(&self, beta: f64, tau: f64) -> Result<FieldTable> {
        if !beta.is_finite() || !tau.is_finite() {
            return Err(Error::param("beta/tau", "must be finite"));
        }
        Ok(self.transform(self.modulated_spectrum(beta, tau)))
    }

    /// `E(t_j) = norm · dω/√(2π) · Σ_k S_k e^{−iω_k t_j}` on the symmetric
    /// grid `t_j = (j − len/2) dt`.
    fn transform(&self, mut s: Vec<Complex64>) -> FieldTable {
        let len = self.grid.len;
        let dt = self.grid.time_step();
        let t0 = -((len / 2) as f64) * dt;
        // e^{−i k dω t0} = (−1)^k for t0 = −(len/2) dt
        for (k, v) in s.iter_mut().enumerate() {
            if k % 2 == 1 {
                *v = -*v;
            }
        }
        self.fft.process(&mut s);
        let scale = self.norm * self.grid.d_omega / (2.0 * PI).sqrt();
        let ws = self.grid.omega_start;
        for (j, v) in s.iter_mut().enumerate() {
            let t = t0 + j as f64 * dt;
            *v *= Complex64::from_polar(scale, -ws * t);
        }
        FieldTable { t0, dt, samples: s }
    }
}

/// One-shot synthesis of `spec` on `grid`, normalized to the unmodulated pulse.
pub fn synthesize_field(spec: &PulseSpec, grid: &FrequencyGrid) -> Result<FieldTable> {
    FieldSynthesizer::new(spec, *grid)?.synthesize(spec.beta, spec.tau)
}
