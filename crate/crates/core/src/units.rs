//! Unit bridge between spectroscopic wavenumbers and angular frequency.
//!
//! Energies and couplings are quoted in cm⁻¹; the dynamics run in rad/fs
//! with ħ = 1.

use std::f64::consts::PI;

/// Speed of light in cm/fs.
pub const SPEED_OF_LIGHT_CM_PER_FS: f64 = 2.997_924_58e-5;

/// Convert a wavenumber in cm⁻¹ to angular frequency in rad/fs (2π c ν̃).
#[inline]
pub fn to_angular_frequency(wavenumber: f64) -> f64 {
    2.0 * PI * SPEED_OF_LIGHT_CM_PER_FS * wavenumber
}

/// Inverse of [`to_angular_frequency`].
#[inline]
pub fn to_wavenumber(omega: f64) -> f64 {
    omega / (2.0 * PI * SPEED_OF_LIGHT_CM_PER_FS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_maps_to_zero() {
        assert_eq!(to_angular_frequency(0.0), 0.0);
    }

    #[test]
    fn laser_center_and_two_photon_level() {
        // 2π · 2.99792458e-5 · ν̃ evaluated by hand
        assert!((to_angular_frequency(12_987.0) - 2.4463).abs() < 5e-5);
        assert!((to_angular_frequency(25_940.0) - 4.88619).abs() < 5e-5);
    }

    #[test]
    fn round_trip() {
        let w = 531.0;
        assert!((to_wavenumber(to_angular_frequency(w)) - w).abs() < 1e-10);
    }
}
