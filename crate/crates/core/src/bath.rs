//! Ohmic bath with exponential cutoff: spectral density, correlation
//! function and the time-dependent second-order decoherence rates.
//!
//! Public functions take and return wavenumbers (cm⁻¹), picoseconds and
//! ps⁻¹. Internally everything is converted to rad/ps with ħ = 1.
//!
//! The bath correlator used throughout is
//!
//! ```text
//! C(t) = ∫₀^∞ dω J(ω) [(n(ω) + 1) e^{iωt} + n(ω) e^{-iωt}] = S(t) + i χ(t)/2
//! ```
//!
//! which is the convention under which `γ(t, ω) = 2 Re ∫₀^t e^{-iωs} C(s) ds`
//! reproduces the closed-form rate integral, with ω > 0 emission.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::Quadrature;
use crate::units::{cm_to_rad_ps, thermal_energy_cm};
use crate::Real;

/// Upper integration limit in units of the cutoff frequency.
const CUTOFF_MULTIPLE: f64 = 40.0;

/// J(ω) = (λ/ω_c) ω exp(-ω/ω_c), parameters in cm⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralDensity<T: Real> {
    /// Reorganization energy λ (cm⁻¹).
    pub reorganization: T,
    /// Cutoff frequency ω_c (cm⁻¹).
    pub cutoff: T,
}

impl<T: Real> SpectralDensity<T> {
    pub fn new(reorganization: T, cutoff: T) -> Result<Self> {
        let j = Self { reorganization, cutoff };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reorganization >= T::zero()) || !self.reorganization.is_finite() {
            return Err(Error::InvalidInput(format!(
                "reorganization energy must be >= 0, got {}",
                self.reorganization.as_f64()
            )));
        }
        if !(self.cutoff > T::zero()) || !self.cutoff.is_finite() {
            return Err(Error::InvalidInput(format!(
                "cutoff must be > 0, got {}",
                self.cutoff.as_f64()
            )));
        }
        Ok(())
    }

    /// J(ω) in cm⁻¹ for ω ≥ 0 in cm⁻¹.
    pub fn value(&self, omega: T) -> Result<T> {
        if omega < T::zero() {
            return Err(Error::InvalidInput(format!(
                "spectral density is defined for omega >= 0, got {}",
                omega.as_f64()
            )));
        }
        Ok(self.reorganization / self.cutoff * omega * (-omega / self.cutoff).exp())
    }
}

/// Free-function form of [`SpectralDensity::value`].
pub fn spectral_density<T: Real>(j: &SpectralDensity<T>, omega: T) -> Result<T> {
    j.value(omega)
}

/// Spectral density and temperature in rad/ps.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ThermalBath<T: Real> {
    /// λ/ω_c (dimensionless).
    ratio: T,
    cutoff: T,
    /// k_B T in rad/ps.
    kt: T,
}

impl<T: Real> ThermalBath<T> {
    pub(crate) fn new(j: &SpectralDensity<T>, temperature: T) -> Result<Self> {
        j.validate()?;
        if !(temperature >= T::zero()) || !temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature must be >= 0 K, got {}",
                temperature.as_f64()
            )));
        }
        Ok(Self {
            ratio: j.reorganization / j.cutoff,
            cutoff: cm_to_rad_ps(j.cutoff),
            kt: cm_to_rad_ps(thermal_energy_cm(temperature)),
        })
    }

    fn require_positive_temperature(&self) -> Result<()> {
        if self.kt > T::zero() {
            Ok(())
        } else {
            Err(Error::InvalidInput("temperature must be > 0 K".into()))
        }
    }

    #[inline]
    pub(crate) fn j(&self, x: T) -> T {
        self.ratio * x * (-x / self.cutoff).exp()
    }

    /// J(x) n(x), continuous at x = 0 where it tends to (λ/ω_c) k_B T.
    #[inline]
    pub(crate) fn j_n(&self, x: T) -> T {
        if self.kt <= T::zero() {
            return T::zero();
        }
        let y = x / self.kt;
        let y_over_expm1 = if y < T::lit(1e-8) { T::one() - y * T::lit(0.5) } else { y / y.exp_m1() };
        self.ratio * self.kt * (-x / self.cutoff).exp() * y_over_expm1
    }

    /// J(x) coth(x / 2k_BT) = J (2n + 1).
    #[inline]
    pub(crate) fn j_coth(&self, x: T) -> T {
        T::lit(2.0) * self.j_n(x) + self.j(x)
    }

    fn upper(&self) -> T {
        self.cutoff * T::lit(CUTOFF_MULTIPLE)
    }

    /// Panel width min(ω_c/8, π/(4t)); resolves the e^{±iωt} oscillations.
    fn panel_width(&self, t: T) -> T {
        let w = self.cutoff / T::lit(8.0);
        if t > T::zero() {
            w.min(T::pi() / (T::lit(4.0) * t))
        } else {
            w
        }
    }

    /// (S(t), χ(t)) in ps⁻².
    pub(crate) fn correlator(&self, t: T, quad: &Quadrature) -> Result<(T, T)> {
        let [s, chi] = quad.integrate(
            |x| {
                let (sin, cos) = (x * t).sin_cos();
                [self.j_coth(x) * cos, T::lit(2.0) * self.j(x) * sin]
            },
            T::zero(),
            self.upper(),
            &[],
            self.panel_width(t),
        )?;
        Ok((s, chi))
    }

    pub(crate) fn relaxation_rate(&self, omega: T, t: T, quad: &Quadrature) -> Result<T> {
        if t == T::zero() {
            return Ok(T::zero());
        }
        let [v] = quad.integrate(
            |x| {
                let jn = self.j_n(x);
                [jn * sinc_t(omega + x, t) + (jn + self.j(x)) * sinc_t(omega - x, t)]
            },
            T::zero(),
            self.upper(),
            &[omega.abs()],
            self.panel_width(t),
        )?;
        Ok(T::lit(2.0) * v)
    }

    pub(crate) fn dephasing_rate(&self, t: T, quad: &Quadrature) -> Result<T> {
        if t == T::zero() {
            return Ok(T::zero());
        }
        let [v] = quad.integrate(
            |x| [self.j_coth(x) * sinc_t(x, t)],
            T::zero(),
            self.upper(),
            &[],
            self.panel_width(t),
        )?;
        Ok(T::lit(2.0) * v)
    }

    pub(crate) fn lamb_shift(&self, omega: T, t: T, quad: &Quadrature) -> Result<T> {
        if t == T::zero() {
            return Ok(T::zero());
        }
        let [v] = quad.integrate(
            |x| {
                let jn = self.j_n(x);
                [(jn + self.j(x)) * versin_t(omega - x, t) + jn * versin_t(omega + x, t)]
            },
            T::zero(),
            self.upper(),
            &[omega.abs()],
            self.panel_width(t),
        )?;
        Ok(-v)
    }

    pub(crate) fn markovian_rate(&self, omega: T) -> T {
        let two_pi = T::two_pi();
        if omega > T::zero() {
            two_pi * (self.j_n(omega) + self.j(omega))
        } else if omega < T::zero() {
            two_pi * self.j_n(-omega)
        } else {
            two_pi * self.ratio * self.kt
        }
    }
}

/// sin(d t)/d, equal to t at d = 0.
#[inline]
fn sinc_t<T: Real>(d: T, t: T) -> T {
    let x = d * t;
    if x.abs() < T::lit(1e-4) {
        t * (T::one() - x * x / T::lit(6.0))
    } else {
        x.sin() / d
    }
}

/// (1 - cos(d t))/d, equal to 0 at d = 0.
#[inline]
fn versin_t<T: Real>(d: T, t: T) -> T {
    let x = d * t;
    if x.abs() < T::lit(1e-4) {
        d * t * t * T::lit(0.5)
    } else {
        let s = (x * T::lit(0.5)).sin();
        T::lit(2.0) * s * s / d
    }
}

/// Symmetrized correlation function S(t) and response function χ(t) in
/// ps⁻², for t in ps.
pub fn correlator<T: Real>(j: &SpectralDensity<T>, temperature: T, t: T) -> Result<(T, T)> {
    let bath = ThermalBath::new(j, temperature)?;
    bath.require_positive_temperature()?;
    bath.correlator(t, &Quadrature::for_scalar::<T>())
}

/// Time-dependent rate γ(t, ω) in ps⁻¹ by direct quadrature; ω in cm⁻¹,
/// positive for emission.
pub fn relaxation_rate<T: Real>(j: &SpectralDensity<T>, temperature: T, omega: T, t: T) -> Result<T> {
    check_time(t)?;
    let bath = ThermalBath::new(j, temperature)?;
    bath.require_positive_temperature()?;
    bath.relaxation_rate(cm_to_rad_ps(omega), t, &Quadrature::for_scalar::<T>())
}

/// Pure dephasing rate γ^φ(t) in ps⁻¹.
pub fn dephasing_rate<T: Real>(j: &SpectralDensity<T>, temperature: T, t: T) -> Result<T> {
    check_time(t)?;
    let bath = ThermalBath::new(j, temperature)?;
    bath.require_positive_temperature()?;
    bath.dephasing_rate(t, &Quadrature::for_scalar::<T>())
}

/// Lamb shift L(t, ω) = Im ∫₀^t e^{-iωs} C(s) ds in ps⁻¹.
pub fn lamb_shift<T: Real>(j: &SpectralDensity<T>, temperature: T, omega: T, t: T) -> Result<T> {
    check_time(t)?;
    let bath = ThermalBath::new(j, temperature)?;
    bath.require_positive_temperature()?;
    bath.lamb_shift(cm_to_rad_ps(omega), t, &Quadrature::for_scalar::<T>())
}

/// t → ∞ rate in ps⁻¹: 2πJ(ω)(n+1) for emission, 2πJ(|ω|)n(|ω|) for
/// absorption and 2π(λ/ω_c)k_BT for pure dephasing.
pub fn markovian_rate<T: Real>(j: &SpectralDensity<T>, temperature: T, omega: T) -> Result<T> {
    let bath = ThermalBath::new(j, temperature)?;
    Ok(bath.markovian_rate(cm_to_rad_ps(omega)))
}

fn check_time<T: Real>(t: T) -> Result<()> {
    if t >= T::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("time must be >= 0, got {}", t.as_f64())))
    }
}

/// Samples of S(t) and χ(t) on a time grid.
#[derive(Debug, Clone)]
pub struct BathCorrelator<T: Real> {
    pub temperature: T,
    pub times: Vec<T>,
    pub s_values: Vec<T>,
    pub chi_values: Vec<T>,
}

impl<T: Real> BathCorrelator<T> {
    /// Evaluates the correlator at every grid time, in parallel; the result
    /// does not depend on the thread count.
    pub fn sample(j: &SpectralDensity<T>, temperature: T, times: &[T]) -> Result<Self> {
        use rayon::prelude::*;
        let bath = ThermalBath::new(j, temperature)?;
        bath.require_positive_temperature()?;
        let quad = Quadrature::for_scalar::<T>();
        let values = times
            .par_iter()
            .map(|&t| bath.correlator(t, &quad))
            .collect::<Result<Vec<_>>>()?;
        let (s_values, chi_values) = values.into_iter().unzip();
        Ok(Self { temperature, times: times.to_vec(), s_values, chi_values })
    }

    /// C(t_k) = S + iχ/2.
    pub fn complex_value(&self, k: usize) -> Complex<T> {
        Complex::new(self.s_values[k], self.chi_values[k] * T::lit(0.5))
    }
}

/// Rates tabulated on a uniform time grid, one column per channel frequency.
#[derive(Debug, Clone)]
pub struct RateTable<T: Real> {
    /// Column frequencies in cm⁻¹; the first is 0 (dephasing).
    pub frequencies: Vec<T>,
    /// Grid times in ps, `times[k] = k * dt`.
    pub times: Vec<T>,
    pub dt: T,
    /// `gamma[k][c]` = γ(t_k, frequencies[c]) in ps⁻¹.
    pub gamma: Vec<Vec<T>>,
    /// Lamb shift L(t_k, ω) in ps⁻¹, when requested.
    pub lamb: Option<Vec<Vec<T>>>,
    /// γ(∞, ω) per column.
    pub markovian_gamma: Vec<T>,
    pub markovian: bool,
}

/// Relative tolerance for matching a channel frequency to a table column.
const COLUMN_MATCH_TOL: f64 = 1e-9;

impl<T: Real> RateTable<T> {
    pub fn t_max(&self) -> T {
        *self.times.last().expect("rate table has at least one row")
    }

    /// Index of the column for `omega` (cm⁻¹).
    pub fn column_of(&self, omega: T) -> Option<usize> {
        let tol = T::lit(COLUMN_MATCH_TOL) * omega.abs().max(T::one());
        self.frequencies.iter().position(|f| (*f - omega).abs() <= tol)
    }

    fn locate(&self, t: T) -> Result<(usize, T)> {
        let last = self.times.len() - 1;
        let slack = (self.dt * T::lit(1e-6)).max(self.t_max() * T::eps() * T::lit(16.0));
        if t < -slack || t > self.t_max() + slack || !t.is_finite() {
            return Err(Error::RateTableRange { covered: self.t_max().as_f64(), requested: t.as_f64() });
        }
        if last == 0 {
            return Ok((0, T::zero()));
        }
        let pos = (t / self.dt).max(T::zero());
        let idx = pos.floor().as_f64() as usize;
        if idx >= last {
            return Ok((last - 1, T::one()));
        }
        let frac = (pos - T::from_count(idx as u64)).min(T::one());
        // snap to a grid point so RK substages that hit it read exact samples
        let snap = T::lit(1e-9).max(pos * T::eps() * T::lit(16.0));
        if frac < snap {
            return Ok((idx, T::zero()));
        }
        if frac > T::one() - snap {
            return Ok((idx + 1, T::zero()));
        }
        Ok((idx, frac))
    }

    fn interp(rows: &[Vec<T>], idx: usize, frac: T, out: &mut [T]) {
        if frac == T::zero() {
            out.copy_from_slice(&rows[idx]);
        } else {
            for ((o, a), b) in out.iter_mut().zip(&rows[idx]).zip(&rows[idx + 1]) {
                *o = *a + (*b - *a) * frac;
            }
        }
    }

    /// Rates at time `t`, linearly interpolated between grid rows.
    pub fn rates_at(&self, t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.frequencies.len()];
        self.rates_into(t, &mut out)?;
        Ok(out)
    }

    pub fn rates_into(&self, t: T, out: &mut [T]) -> Result<()> {
        let (idx, frac) = self.locate(t)?;
        Self::interp(&self.gamma, idx, frac, out);
        Ok(())
    }

    /// Lamb shifts at time `t`, if the table carries them.
    pub fn lamb_at(&self, t: T) -> Result<Option<Vec<T>>> {
        match &self.lamb {
            None => Ok(None),
            Some(rows) => {
                let (idx, frac) = self.locate(t)?;
                let mut out = vec![T::zero(); self.frequencies.len()];
                Self::interp(rows, idx, frac, &mut out);
                Ok(Some(out))
            }
        }
    }

    /// Column of γ(t, ω) over the whole grid.
    pub fn column(&self, c: usize) -> Vec<T> {
        self.gamma.iter().map(|row| row[c]).collect()
    }
}

/// Options for [`build_rate_table`].
#[derive(Debug, Clone, Copy)]
pub struct RateTableOptions {
    pub markovian: bool,
    pub lamb_shift: bool,
}

/// Tabulates γ(t, ω) for the given frequencies (cm⁻¹; 0 is inserted first
/// if absent) on the grid `0, dt, ..., ≥ t_final`.
///
/// In non-Markovian mode C(t) is sampled once per grid point and
/// `∫₀^t e^{-iωs} C(s) ds` is accumulated interval by interval with C
/// linearly interpolated and the exponential integrated exactly.
pub fn build_rate_table<T: Real>(
    j: &SpectralDensity<T>,
    temperature: T,
    frequencies: &[T],
    dt: T,
    t_final: T,
    options: RateTableOptions,
) -> Result<RateTable<T>> {
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("dt must be > 0, got {}", dt.as_f64())));
    }
    if !(t_final >= T::zero()) || !t_final.is_finite() {
        return Err(Error::InvalidInput(format!("t_final must be >= 0, got {}", t_final.as_f64())));
    }
    let bath = ThermalBath::new(j, temperature)?;
    bath.require_positive_temperature()?;

    let mut freqs = vec![T::zero()];
    for &f in frequencies {
        if f != T::zero() && !freqs.contains(&f) {
            freqs.push(f);
        }
    }
    let steps = {
        let r = (t_final / dt).as_f64();
        let n = r.round();
        if (r - n).abs() < 1e-9 { n as usize } else { r.ceil() as usize }
    };
    let times: Vec<T> = (0..=steps).map(|k| dt * T::from_count(k as u64)).collect();
    let markovian_gamma: Vec<T> = freqs.iter().map(|&f| bath.markovian_rate(cm_to_rad_ps(f))).collect();

    if options.markovian {
        if options.lamb_shift {
            return Err(Error::InvalidInput(
                "the Lamb shift is only tabulated for time-dependent rates".into(),
            ));
        }
        let gamma = vec![markovian_gamma.clone(); times.len()];
        return Ok(RateTable { frequencies: freqs, times, dt, gamma, lamb: None, markovian_gamma, markovian: true });
    }

    let corr = BathCorrelator::sample(j, temperature, &times)?;
    let cvals: Vec<Complex<T>> = (0..times.len()).map(|k| corr.complex_value(k)).collect();
    let zero = Complex::new(T::zero(), T::zero());
    let mut gamma = vec![vec![T::zero(); freqs.len()]; times.len()];
    let mut lamb = options.lamb_shift.then(|| vec![vec![T::zero(); freqs.len()]; times.len()]);
    for (c, &f) in freqs.iter().enumerate() {
        let w = cm_to_rad_ps(f);
        let (i0, i1, i2) = filon_moments(w, dt);
        let (half, inv2) = (T::lit(0.5) / dt, T::lit(0.5) / (dt * dt));
        let mut acc = zero;
        for k in 0..steps {
            // quadratic through k-1, k, k+1 (k, k+1, k+2 on the first panel)
            let (c0, d1, d2) = if k == 0 {
                let (a, b) = (cvals[0], cvals[1]);
                let c = cvals.get(2).copied().unwrap_or(b * T::lit(2.0) - a);
                (a, (b * T::lit(4.0) - a * T::lit(3.0) - c) * half, (a - b * T::lit(2.0) + c) * inv2)
            } else {
                let (m, a, b) = (cvals[k - 1], cvals[k], cvals[k + 1]);
                (a, (b - m) * half, (b - a * T::lit(2.0) + m) * inv2)
            };
            let a = dt * T::from_count(k as u64);
            let (s, co) = (w * a).sin_cos();
            let phase = Complex::new(co, -s);
            acc += phase * (c0 * i0 + d1 * i1 + d2 * i2);
            gamma[k + 1][c] = T::lit(2.0) * acc.re;
            if let Some(l) = lamb.as_mut() {
                l[k + 1][c] = acc.im;
            }
        }
    }
    Ok(RateTable { frequencies: freqs, times, dt, gamma, lamb, markovian_gamma, markovian: false })
}

/// ∫₀^h uᵐ e^{-iωu} du for m = 0, 1, 2.
fn filon_moments<T: Real>(w: T, h: T) -> (Complex<T>, Complex<T>, Complex<T>) {
    let z = Complex::new(T::zero(), -w * h);
    let one = Complex::new(T::one(), T::zero());
    let (m0, m1, m2) = if (w * h).abs() < T::one() {
        // Σ zⁿ/(n!(n+m+1))
        let mut term = one;
        let mut s = [Complex::new(T::zero(), T::zero()); 3];
        for n in 0..30u64 {
            let nf = T::from_count(n);
            for (m, acc) in s.iter_mut().enumerate() {
                *acc += term / (nf + T::from_count(m as u64 + 1));
            }
            term = term * z / (nf + T::one());
        }
        (s[0], s[1], s[2])
    } else {
        let ez = Complex::new((-(w * h)).cos(), (-(w * h)).sin());
        let two = one + one;
        (
            (ez - one) / z,
            (ez * (z - one) + one) / (z * z),
            (ez * (z * z - z * two + two) - two) / (z * z * z),
        )
    };
    (m0 * h, m1 * h * h, m2 * h * h * h)
}

/// Thermal-equilibrium ratio of the Markovian absorption to emission rate,
/// exp(-ω/k_BT), ω in cm⁻¹.
pub fn boltzmann_factor<T: Real>(omega: T, temperature: T) -> T {
    (-omega / thermal_energy_cm(temperature)).exp()
}
