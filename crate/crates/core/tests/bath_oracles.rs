//! Bath rates against brute-force quadrature written out independently here.

use approx::assert_relative_eq;
use nmqj_core::bath::*;
use nmqj_core::units::{thermal_energy_cm, CM_TO_RAD_PER_PS};
use proptest::prelude::*;
use std::f64::consts::PI;

/// Ohmic bath in rad/ps.
struct Brute {
    ratio: f64,
    wc: f64,
    kt: f64,
}

impl Brute {
    fn new(lambda: f64, cutoff: f64, temp: f64) -> Self {
        Self { ratio: lambda / cutoff, wc: cutoff * CM_TO_RAD_PER_PS, kt: thermal_energy_cm(temp) * CM_TO_RAD_PER_PS }
    }

    fn j(&self, x: f64) -> f64 {
        self.ratio * x * (-x / self.wc).exp()
    }

    /// J(x) n(x), with the x → 0 limit filled in.
    fn jn(&self, x: f64) -> f64 {
        if x == 0.0 {
            return self.ratio * self.kt;
        }
        self.j(x) / (x / self.kt).exp_m1()
    }

    /// Composite Simpson on [0, 40 ω_c].
    fn simpson(&self, f: impl Fn(f64) -> f64, n: usize) -> f64 {
        let b = 40.0 * self.wc;
        let h = b / n as f64;
        let mut acc = f(0.0) + f(b);
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        acc * h / 3.0
    }

    /// γ(t, ω) = 2∫ J [(n+1) sin((ω−x)t)/(ω−x) + n sin((ω+x)t)/(ω+x)] dx.
    fn gamma(&self, w: f64, t: f64) -> f64 {
        let sinc = |y: f64| if y.abs() < 1e-12 { t } else { (y * t).sin() / y };
        2.0 * self.simpson(|x| (self.j(x) + self.jn(x)) * sinc(w - x) + self.jn(x) * sinc(w + x), 400_000)
    }

    /// L(t, ω) = −∫ J [n c(ω+x) + (n+1) c(ω−x)] dx with c(y) = (1 − cos yt)/y.
    fn lamb(&self, w: f64, t: f64) -> f64 {
        let c = |y: f64| if y.abs() < 1e-12 { 0.0 } else { (1.0 - (y * t).cos()) / y };
        -self.simpson(|x| self.jn(x) * c(w + x) + (self.j(x) + self.jn(x)) * c(w - x), 400_000)
    }

    fn s0(&self) -> f64 {
        self.simpson(|x| self.j(x) + 2.0 * self.jn(x), 200_000)
    }
}

fn fig1() -> SpectralDensity<f64> {
    SpectralDensity::new(30.0, 30.0).unwrap()
}

#[test]
fn correlator_at_zero_matches_brute_force() {
    for (lam, wc, temp) in [(30.0, 30.0, 300.0), (35.0, 150.0, 77.0), (120.0, 20.0, 150.0)] {
        let j = SpectralDensity::new(lam, wc).unwrap();
        let (s, _) = correlator(&j, temp, 0.0).unwrap();
        assert_relative_eq!(s, Brute::new(lam, wc, temp).s0(), max_relative = 1e-6);
    }
}

#[test]
fn direct_rates_match_brute_force() {
    let b = Brute::new(30.0, 30.0, 300.0);
    for w_cm in [200.0, -200.0, 50.0] {
        for t in [0.1, 0.5, 1.0, 2.0] {
            let got = relaxation_rate(&fig1(), 300.0, w_cm, t).unwrap();
            let want = b.gamma(w_cm * CM_TO_RAD_PER_PS, t);
            let scale = want.abs().max(1e-3 * markovian_rate(&fig1(), 300.0, w_cm).unwrap());
            assert!((got - want).abs() <= 1e-6 * scale, "ω {w_cm} t {t}: {got} vs {want}");
        }
    }
    for t in [0.1, 0.5, 1.0] {
        let got = dephasing_rate(&fig1(), 300.0, t).unwrap();
        assert_relative_eq!(got, b.gamma(0.0, t), max_relative = 1e-6);
    }
}

#[test]
fn lamb_shift_matches_brute_force() {
    let b = Brute::new(30.0, 30.0, 300.0);
    for w_cm in [200.0, -200.0, 0.0] {
        for t in [0.1, 0.5, 2.0] {
            let got = lamb_shift(&fig1(), 300.0, w_cm, t).unwrap();
            let want = b.lamb(w_cm * CM_TO_RAD_PER_PS, t);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-2), "ω {w_cm} t {t}: {got} vs {want}");
        }
    }
}

#[test]
fn cumulative_table_matches_direct_quadrature() {
    let freqs = [200.0, -200.0, 141.421356];
    let opts = RateTableOptions { markovian: false, lamb_shift: true };
    let table = build_rate_table(&fig1(), 300.0, &freqs, 0.001, 2.0, opts).unwrap();
    for t in [0.1, 0.5, 1.0, 2.0] {
        let rates = table.rates_at(t).unwrap();
        let lamb = table.lamb_at(t).unwrap().unwrap();
        for (c, &w) in table.frequencies.iter().enumerate() {
            let direct = relaxation_rate(&fig1(), 300.0, w, t).unwrap();
            let scale = direct.abs().max(1e-2 * table.markovian_gamma[c]);
            assert!((rates[c] - direct).abs() <= 1e-4 * scale, "ω {w} t {t}: {} vs {direct}", rates[c]);
            let l = lamb_shift(&fig1(), 300.0, w, t).unwrap();
            assert!((lamb[c] - l).abs() <= 1e-4 * l.abs().max(1e-2), "L ω {w} t {t}: {} vs {l}", lamb[c]);
        }
    }
}

#[test]
fn fig1_rate_turns_negative_before_one_ps() {
    let opts = RateTableOptions { markovian: false, lamb_shift: false };
    let table = build_rate_table(&fig1(), 300.0, &[200.0], 0.001, 1.0, opts).unwrap();
    let c = table.column_of(200.0).unwrap();
    let col = table.column(c);
    assert!(col.iter().zip(&table.times).any(|(g, t)| *g < 0.0 && *t < 1.0));
    let dephasing = table.column(0);
    let limit = table.markovian_gamma[0];
    assert!(dephasing.iter().all(|g| *g < limit));
}

#[test]
fn markovian_rates_match_closed_form() {
    let b = Brute::new(30.0, 30.0, 300.0);
    let w = 200.0 * CM_TO_RAD_PER_PS;
    let emission = 2.0 * PI * (b.j(w) + b.jn(w));
    let absorption = 2.0 * PI * b.jn(w);
    assert_relative_eq!(markovian_rate(&fig1(), 300.0, 200.0).unwrap(), emission, max_relative = 1e-12);
    assert_relative_eq!(markovian_rate(&fig1(), 300.0, -200.0).unwrap(), absorption, max_relative = 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn detailed_balance_of_rate_pairs(w in 0.5f64..800.0, temp in 5.0f64..400.0, lam in 1.0f64..200.0, wc in 5.0f64..300.0) {
        let j = SpectralDensity::new(lam, wc).unwrap();
        let down = markovian_rate(&j, temp, w).unwrap();
        let up = markovian_rate(&j, temp, -w).unwrap();
        let boltzmann = boltzmann_factor(w, temp);
        prop_assume!(down > 1e-250 && boltzmann > 1e-250);
        prop_assert!(((up / down) - boltzmann).abs() <= 1e-12 * boltzmann);
    }

    #[test]
    fn table_rates_finite_and_start_at_zero(
        lam in 0.0f64..200.0, wc in 5.0f64..200.0, temp in 1.0f64..400.0, w in 1.0f64..600.0,
    ) {
        let j = SpectralDensity::new(lam, wc).unwrap();
        let opts = RateTableOptions { markovian: false, lamb_shift: true };
        let table = build_rate_table(&j, temp, &[w, -w], 0.01, 1.0, opts).unwrap();
        prop_assert!(table.gamma[0].iter().all(|g| *g == 0.0));
        prop_assert!(table.gamma.iter().flatten().all(|g| g.is_finite()));
        prop_assert!(table.lamb.as_ref().unwrap().iter().flatten().all(|g| g.is_finite()));
    }
}
