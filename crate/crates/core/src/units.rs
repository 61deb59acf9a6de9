//! Unit conventions.
//!
//! Energies and frequencies enter and leave the crate in wavenumbers
//! (cm⁻¹). Propagation runs in angular frequency units of rad/ps with
//! ħ = 1, so a rate in ps⁻¹ and an energy in rad/ps share one scale.

use crate::Real;

/// 1 cm⁻¹ expressed in rad/ps (2πc with c in cm/ps).
pub const CM_TO_RAD_PER_PS: f64 = 0.188_365_156_7;

/// Boltzmann constant in cm⁻¹/K.
pub const KB_CM_PER_K: f64 = 0.695_034_8;

#[inline]
pub fn cm_to_rad_ps<T: Real>(x: T) -> T {
    x * T::lit(CM_TO_RAD_PER_PS)
}

#[inline]
pub fn rad_ps_to_cm<T: Real>(x: T) -> T {
    x / T::lit(CM_TO_RAD_PER_PS)
}

/// Thermal energy k_B T in cm⁻¹.
#[inline]
pub fn thermal_energy_cm<T: Real>(temperature: T) -> T {
    temperature * T::lit(KB_CM_PER_K)
}
