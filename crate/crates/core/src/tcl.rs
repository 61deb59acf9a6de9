//! Deterministic RK4 integration of the secular TCL master equation
//!
//! ```text
//! dρ/dt = -i[H_S, ρ] + Σ_{m,ω} γ(t,ω) (A ρ A† − ½{A†A, ρ})
//! ```
//!
//! The state is propagated in the exciton basis, where H_S is diagonal and
//! relaxation generators have a single entry, and handed out in the site
//! basis.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex;

use crate::bath::RateTable;
use crate::error::{Error, Result};
use crate::scalar::creal;
use crate::system::ExcitonSystem;
use crate::Real;

/// Largest trace change accepted in one step before the step is halved;
/// single precision is held to 64 ε instead.
pub const TRACE_DRIFT_LIMIT: f64 = 1e-8;
const MAX_HALVINGS: u32 = 8;

/// Density matrix in the site basis at a given time (ps).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    pub entries: DMatrix<Complex<T>>,
    pub time: T,
}

impl<T: Real> DensityMatrix<T> {
    pub fn new(entries: DMatrix<Complex<T>>, time: T) -> Self {
        Self { entries, time }
    }

    pub fn trace(&self) -> Complex<T> {
        self.entries.trace()
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Largest entry of |ρ − ρ†|.
    pub fn hermiticity_error(&self) -> T {
        let d = &self.entries - self.entries.adjoint();
        d.iter().fold(T::zero(), |a, z| a.max(z.norm_sqr().sqrt()))
    }

    pub fn populations(&self) -> Vec<T> {
        (0..self.dim()).map(|i| self.entries[(i, i)].re).collect()
    }
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue<T: Real>(rho: &DMatrix<Complex<T>>) -> T {
    let h = (rho + rho.adjoint()) * creal(T::lit(0.5));
    let eig = SymmetricEigen::new(h);
    eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Sampled TCL trajectory.
#[derive(Debug, Clone)]
pub struct TclTrajectory<T: Real> {
    pub times: Vec<T>,
    /// ρ(t) in the site basis.
    pub site: Vec<DMatrix<Complex<T>>>,
    /// ρ(t) in the exciton basis.
    pub exciton: Vec<DMatrix<Complex<T>>>,
    /// Smallest eigenvalue of ρ at each sample.
    pub min_eigs: Vec<T>,
}

impl<T: Real> TclTrajectory<T> {
    /// ⟨M|ρ(t)|M⟩ over the trajectory.
    pub fn exciton_population(&self, m: usize) -> Vec<T> {
        self.exciton.iter().map(|r| r[(m, m)].re).collect()
    }

    pub fn min_eigenvalue(&self) -> T {
        self.min_eigs.iter().copied().fold(T::max_value().unwrap(), |a, b| a.min(b))
    }
}

/// RK4 propagator for the master equation of an [`ExcitonSystem`].
#[derive(Debug, Clone, Copy)]
pub struct TclPropagator<'a, T: Real> {
    system: &'a ExcitonSystem<T>,
    table: &'a RateTable<T>,
    lamb_shift: bool,
}

impl<'a, T: Real> TclPropagator<'a, T> {
    pub fn new(system: &'a ExcitonSystem<T>, table: &'a RateTable<T>) -> Self {
        Self { system, table, lamb_shift: false }
    }

    /// Adds the Lamb-shift Hamiltonian Σ L(t,ω) A†A; needs a table built
    /// with Lamb shifts.
    pub fn with_lamb_shift(mut self, on: bool) -> Self {
        self.lamb_shift = on;
        self
    }

    fn rhs(&self, rho: &DMatrix<Complex<T>>, t: T, rates: &mut [T]) -> Result<DMatrix<Complex<T>>> {
        let sys = self.system;
        let n = sys.dim();
        self.table.rates_into(t, rates)?;
        let lamb = if self.lamb_shift {
            Some(self.table.lamb_at(t)?.ok_or_else(|| {
                Error::InvalidInput("Lamb shift requested but the rate table has none".into())
            })?)
        } else {
            None
        };
        let i = Complex::new(T::zero(), T::one());
        let mut out = if sys.is_diagonal() {
            let k = sys.k_diagonal(rates, lamb.as_deref());
            DMatrix::from_fn(n, n, |a, b| -i * (k[a] * rho[(a, b)] - rho[(a, b)] * k[b].conj()))
        } else {
            let k = sys.k_matrix(rates, lamb.as_deref());
            (&k * rho - rho * k.adjoint()) * (-i)
        };
        for (idx, ch) in sys.channels().iter().enumerate() {
            let g = rates[sys.column(idx)];
            if g == T::zero() {
                continue;
            }
            let e = ch.entries();
            for &(r1, c1, v1) in e {
                let left = v1 * creal(g);
                for &(r2, c2, v2) in e {
                    out[(r1, r2)] += left * rho[(c1, c2)] * v2.conj();
                }
            }
        }
        Ok(out)
    }

    fn rk4(&self, rho: &DMatrix<Complex<T>>, t: T, dt: T) -> Result<DMatrix<Complex<T>>> {
        let mut rates = vec![T::zero(); self.table.frequencies.len()];
        let half = T::lit(0.5);
        let hdt = creal(dt * half);
        let fdt = creal(dt);
        let k1 = self.rhs(rho, t, &mut rates)?;
        let k2 = self.rhs(&(rho + &k1 * hdt), t + dt * half, &mut rates)?;
        let k3 = self.rhs(&(rho + &k2 * hdt), t + dt * half, &mut rates)?;
        let k4 = self.rhs(&(rho + &k3 * fdt), t + dt, &mut rates)?;
        let sixth = creal(dt / T::lit(6.0));
        Ok(rho + (k1 + (k2 + k3) * creal(T::lit(2.0)) + k4) * sixth)
    }

    fn step_exciton(&self, rho: &DMatrix<Complex<T>>, t: T, dt: T, depth: u32) -> Result<DMatrix<Complex<T>>> {
        let next = self.rk4(rho, t, dt)?;
        let drift = (next.trace() - rho.trace()).norm_sqr().sqrt();
        if drift.as_f64() <= TRACE_DRIFT_LIMIT.max(64.0 * T::eps().as_f64()) {
            return Ok(next);
        }
        if depth >= MAX_HALVINGS {
            return Err(Error::Step {
                time: t.as_f64(),
                reason: format!("trace drift {:.3e} persists after {depth} step halvings", drift.as_f64()),
            });
        }
        let h = dt * T::lit(0.5);
        let mid = self.step_exciton(rho, t, h, depth + 1)?;
        self.step_exciton(&mid, t + h, h, depth + 1)
    }

    /// One RK4 step of `dt` from `rho.time`; input and output in the site basis.
    pub fn step(&self, rho: &DensityMatrix<T>, dt: T) -> Result<DensityMatrix<T>> {
        let basis = self.system.basis();
        let exc = basis.to_exciton(&rho.entries);
        let next = self.step_exciton(&exc, rho.time, dt, 0)?;
        Ok(DensityMatrix::new(basis.to_site(&next), rho.time + dt))
    }

    /// Integrates from `rho0.time` to `t_final`, sampling every step.
    pub fn evolve(&self, rho0: &DensityMatrix<T>, t_final: T, dt: T) -> Result<TclTrajectory<T>> {
        check_initial(rho0)?;
        if !(dt > T::zero()) {
            return Err(Error::InvalidInput("dt must be > 0".into()));
        }
        let basis = self.system.basis();
        let steps = step_count(t_final - rho0.time, dt)?;
        let mut rho = basis.to_exciton(&rho0.entries);
        let mut out = TclTrajectory {
            times: Vec::with_capacity(steps + 1),
            site: Vec::with_capacity(steps + 1),
            exciton: Vec::with_capacity(steps + 1),
            min_eigs: Vec::with_capacity(steps + 1),
        };
        let mut push = |t: T, rho: &DMatrix<Complex<T>>| {
            out.times.push(t);
            out.min_eigs.push(min_eigenvalue(rho));
            out.site.push(basis.to_site(rho));
            out.exciton.push(rho.clone());
        };
        push(rho0.time, &rho);
        for k in 0..steps {
            let t = rho0.time + dt * T::from_count(k as u64);
            rho = self.step_exciton(&rho, t, dt, 0).map_err(|e| match e {
                Error::Step { .. } | Error::RateTableRange { .. } => e,
                other => Error::Step { time: t.as_f64(), reason: other.to_string() },
            })?;
            push(t + dt, &rho);
        }
        Ok(out)
    }
}

pub(crate) fn step_count<T: Real>(span: T, dt: T) -> Result<usize> {
    if !(span >= T::zero()) {
        return Err(Error::InvalidInput("t_final precedes the start time".into()));
    }
    let r = (span / dt).as_f64();
    let n = r.round();
    if (r - n).abs() < 1e-6 {
        Ok(n as usize)
    } else {
        Ok(r.ceil() as usize)
    }
}

fn check_initial<T: Real>(rho: &DensityMatrix<T>) -> Result<()> {
    let tr = rho.trace();
    if (tr.re - T::one()).abs().as_f64() > 1e-8 || tr.im.abs().as_f64() > 1e-8 {
        return Err(Error::InvalidInput(format!("initial density matrix has trace {}", tr.re.as_f64())));
    }
    if rho.hermiticity_error().as_f64() > 1e-10 {
        return Err(Error::InvalidInput("initial density matrix is not Hermitian".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{build_rate_table, RateTableOptions, SpectralDensity};
    use crate::model::{build_channels, diagonalize, dimer, DEFAULT_DEGENERACY_TOL_CM};
    use nalgebra::DVector;

    fn setup(markovian: bool, lam: f64) -> (ExcitonSystem<f64>, RateTable<f64>) {
        let basis = diagonalize(&dimer(50.0, 100.0));
        let ch = build_channels(&basis, DEFAULT_DEGENERACY_TOL_CM);
        let freqs: Vec<f64> = ch.iter().map(|c| c.frequency).collect();
        let j = SpectralDensity::new(lam, 30.0).unwrap();
        let opts = RateTableOptions { markovian, lamb_shift: false };
        let table = build_rate_table(&j, 300.0, &freqs, 0.0005, 1.0, opts).unwrap();
        (ExcitonSystem::new(basis, ch, &table).unwrap(), table)
    }

    fn pure_site(n: usize, site: usize) -> DensityMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        m[(site, site)] = Complex::new(1.0, 0.0);
        DensityMatrix::new(m, 0.0)
    }

    #[test]
    fn min_eigenvalue_examples() {
        let psi = DVector::from_vec(vec![Complex::new(0.6, 0.0), Complex::new(0.0, 0.8)]);
        let pure = &psi * psi.adjoint();
        assert!(min_eigenvalue::<f64>(&pure).abs() < 1e-12);
        let mixed = DMatrix::<Complex<f64>>::identity(2, 2) * Complex::new(0.5, 0.0);
        assert!((min_eigenvalue(&mixed) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_rates_are_unitary() {
        let (sys, _) = setup(false, 0.0);
        let table = {
            let j = SpectralDensity::new(0.0, 30.0).unwrap();
            let freqs: Vec<f64> = sys.frequencies().to_vec();
            build_rate_table(&j, 300.0, &freqs, 0.001, 0.5, RateTableOptions { markovian: false, lamb_shift: false })
                .unwrap()
        };
        let prop = TclPropagator::new(&sys, &table);
        let traj = prop.evolve(&pure_site(2, 0), 0.5, 0.001).unwrap();
        let p0 = traj.exciton_population(0);
        assert!(p0.iter().all(|p| (p - p0[0]).abs() < 1e-12));
        // site populations do oscillate
        let s: Vec<f64> = traj.site.iter().map(|r| r[(0, 0)].re).collect();
        assert!(s.iter().cloned().fold(1.0, f64::min) < 0.7);
    }

    #[test]
    fn maximally_mixed_is_stationary_under_dephasing() {
        let (sys, table) = setup(false, 30.0);
        let prop = TclPropagator::new(&sys, &table);
        let dephase_only = {
            let mut t = table.clone();
            for row in &mut t.gamma {
                for g in row.iter_mut().skip(1) {
                    *g = 0.0;
                }
            }
            t
        };
        let prop_d = TclPropagator::new(&sys, &dephase_only);
        let rho0 = DensityMatrix::new(DMatrix::identity(2, 2) * Complex::new(0.5, 0.0), 0.0);
        let traj = prop_d.evolve(&rho0, 0.5, 0.001).unwrap();
        for r in &traj.site {
            assert!((r - &rho0.entries).camax() < 1e-12);
        }
        let _ = prop;
    }

    #[test]
    fn step_matches_evolve() {
        let (sys, table) = setup(false, 30.0);
        let prop = TclPropagator::new(&sys, &table);
        let rho0 = pure_site(2, 0);
        let traj = prop.evolve(&rho0, 0.01, 0.001).unwrap();
        let mut rho = rho0;
        for _ in 0..10 {
            rho = prop.step(&rho, 0.001).unwrap();
        }
        assert!((rho.entries - traj.site.last().unwrap()).camax() < 1e-13);
        assert!((rho.time - 0.01).abs() < 1e-15);
    }

    #[test]
    fn secular_populations_ignore_coherences() {
        let (sys, table) = setup(false, 30.0);
        let prop = TclPropagator::new(&sys, &table);
        let full = prop.evolve(&pure_site(2, 0), 0.5, 0.001).unwrap();
        let exc0 = sys.basis().to_exciton(&pure_site(2, 0).entries);
        let diag = DMatrix::from_fn(2, 2, |i, j| if i == j { exc0[(i, j)] } else { Complex::new(0.0, 0.0) });
        let rho_diag = DensityMatrix::new(sys.basis().to_site(&diag), 0.0);
        let dephased = prop.evolve(&rho_diag, 0.5, 0.001).unwrap();
        for (a, b) in full.exciton.iter().zip(&dephased.exciton) {
            for m in 0..2 {
                assert!((a[(m, m)].re - b[(m, m)].re).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_initial_state() {
        let (sys, table) = setup(true, 30.0);
        let prop = TclPropagator::new(&sys, &table);
        let bad = DensityMatrix::new(DMatrix::identity(2, 2) * Complex::new(1.0, 0.0), 0.0);
        assert!(prop.evolve(&bad, 0.1, 0.001).is_err());
        // beyond the table
        assert!(prop.evolve(&pure_site(2, 0), 2.0, 0.001).is_err());
    }
}
