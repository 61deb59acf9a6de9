//! Channels bound to rate-table columns, in propagation units (rad/ps).

use nalgebra::DMatrix;
use num_complex::Complex;

use crate::bath::RateTable;
use crate::error::{Error, Result};
use crate::model::{ExcitonBasis, JumpChannel};
use crate::scalar::creal;
use crate::units::cm_to_rad_ps;
use crate::Real;

/// Exciton basis, jump channels and the per-column Σ_m A†A operators shared
/// by the deterministic and stochastic propagators.
#[derive(Debug, Clone)]
pub struct ExcitonSystem<T: Real> {
    basis: ExcitonBasis<T>,
    channels: Vec<JumpChannel<T>>,
    frequencies: Vec<T>,
    /// Rate-table column of each channel.
    columns: Vec<usize>,
    /// Exciton energies in rad/ps.
    energies: Vec<T>,
    /// Σ over the channels of a column of A†A.
    column_dag_a: Vec<DMatrix<Complex<T>>>,
    /// All `column_dag_a` are diagonal.
    diagonal: bool,
}

impl<T: Real> ExcitonSystem<T> {
    /// Binds `channels` to the columns of a table built for `frequencies`.
    pub fn new(basis: ExcitonBasis<T>, channels: Vec<JumpChannel<T>>, table: &RateTable<T>) -> Result<Self> {
        let n = basis.dim();
        let mut columns = Vec::with_capacity(channels.len());
        let mut column_dag_a = vec![DMatrix::zeros(n, n); table.frequencies.len()];
        for ch in &channels {
            let col = table.column_of(ch.frequency).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "rate table has no column for channel frequency {} cm⁻¹",
                    ch.frequency.as_f64()
                ))
            })?;
            columns.push(col);
            column_dag_a[col] += ch.dagger_a();
        }
        let diagonal = column_dag_a.iter().all(|m| {
            (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == Complex::new(T::zero(), T::zero())))
        });
        let energies = basis.energies().iter().map(|e| cm_to_rad_ps(*e)).collect();
        Ok(Self {
            basis,
            channels,
            frequencies: table.frequencies.clone(),
            columns,
            energies,
            column_dag_a,
            diagonal,
        })
    }

    pub fn basis(&self) -> &ExcitonBasis<T> {
        &self.basis
    }

    pub fn channels(&self) -> &[JumpChannel<T>] {
        &self.channels
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn column(&self, channel: usize) -> usize {
        self.columns[channel]
    }

    pub fn frequencies(&self) -> &[T] {
        &self.frequencies
    }

    pub(crate) fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// Generator of the non-Hermitian part: K = H_S + H_LS − (i/2) Σ_c γ_c B_c,
    /// in rad/ps, exciton basis.
    pub(crate) fn k_matrix(&self, rates: &[T], lamb: Option<&[T]>) -> DMatrix<Complex<T>> {
        let n = self.dim();
        let mut k = DMatrix::from_fn(n, n, |i, j| if i == j { creal(self.energies[i]) } else { creal(T::zero()) });
        let half = T::lit(0.5);
        for (c, b) in self.column_dag_a.iter().enumerate() {
            let g = rates[c];
            let l = lamb.map_or(T::zero(), |l| l[c]);
            if g == T::zero() && l == T::zero() {
                continue;
            }
            let coef = Complex::new(l, -half * g);
            k += b * coef;
        }
        k
    }

    /// Diagonal of [`Self::k_matrix`]; only meaningful when the system is
    /// diagonal.
    pub(crate) fn k_diagonal(&self, rates: &[T], lamb: Option<&[T]>) -> Vec<Complex<T>> {
        let n = self.dim();
        let half = T::lit(0.5);
        (0..n)
            .map(|i| {
                let mut z = creal(self.energies[i]);
                for (c, b) in self.column_dag_a.iter().enumerate() {
                    let l = lamb.map_or(T::zero(), |l| l[c]);
                    z += b[(i, i)] * Complex::new(l, -half * rates[c]);
                }
                z
            })
            .collect()
    }
}
