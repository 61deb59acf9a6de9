//! System Hamiltonians, the exciton basis and the secular jump channels.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{creal, norm_sqr};
use crate::Real;

/// Transition frequencies closer than this (cm⁻¹) share one channel.
pub const DEFAULT_DEGENERACY_TOL_CM: f64 = 0.01;

const BUNDLED_FMO7: &str = include_str!("../data/fmo7.txt");

/// Tight-binding Hamiltonian of the single-exciton manifold, in cm⁻¹.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteHamiltonian<T: Real> {
    site_energies: Vec<T>,
    couplings: DMatrix<T>,
}

impl<T: Real> SiteHamiltonian<T> {
    /// Builds a Hamiltonian from site energies and a symmetric coupling
    /// matrix with zero diagonal. Energies are stored relative to the lowest
    /// site energy.
    pub fn new(site_energies: Vec<T>, couplings: DMatrix<T>) -> Result<Self> {
        let n = site_energies.len();
        if n == 0 {
            return Err(Error::InvalidInput("Hamiltonian needs at least one site".into()));
        }
        if couplings.nrows() != n || couplings.ncols() != n {
            return Err(Error::InvalidInput(format!(
                "coupling matrix is {}x{}, expected {n}x{n}",
                couplings.nrows(),
                couplings.ncols()
            )));
        }
        for i in 0..n {
            if couplings[(i, i)] != T::zero() {
                return Err(Error::InvalidInput(format!("coupling diagonal entry {i} is nonzero")));
            }
            for j in 0..i {
                if couplings[(i, j)] != couplings[(j, i)] {
                    return Err(Error::InvalidInput(format!(
                        "coupling matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if site_energies.iter().chain(couplings.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("Hamiltonian entries must be finite".into()));
        }
        let min = site_energies.iter().copied().fold(site_energies[0], |a, b| a.min(b));
        let site_energies = site_energies.into_iter().map(|e| e - min).collect();
        Ok(Self { site_energies, couplings })
    }

    /// Splits a full symmetric matrix into site energies and couplings.
    pub fn from_matrix(h: &DMatrix<T>) -> Result<Self> {
        if h.nrows() != h.ncols() {
            return Err(Error::InvalidInput("Hamiltonian must be square".into()));
        }
        let n = h.nrows();
        let energies = (0..n).map(|i| h[(i, i)]).collect();
        let mut couplings = h.clone();
        couplings.fill_diagonal(T::zero());
        Self::new(energies, couplings)
    }

    pub fn n_sites(&self) -> usize {
        self.site_energies.len()
    }

    pub fn site_energies(&self) -> &[T] {
        &self.site_energies
    }

    pub fn couplings(&self) -> &DMatrix<T> {
        &self.couplings
    }

    /// Full matrix H_S in the site basis.
    pub fn matrix(&self) -> DMatrix<T> {
        let mut h = self.couplings.clone();
        for (i, e) in self.site_energies.iter().enumerate() {
            h[(i, i)] = *e;
        }
        h
    }
}

/// Two-site Hamiltonian with ε₁ = 0.
pub fn dimer<T: Real>(v12: T, eps2: T) -> SiteHamiltonian<T> {
    let mut couplings = DMatrix::zeros(2, 2);
    couplings[(0, 1)] = v12;
    couplings[(1, 0)] = v12;
    SiteHamiltonian { site_energies: vec![T::zero(), eps2], couplings }
}

/// Seven-site FMO Hamiltonian from a full 7×7 matrix in cm⁻¹.
pub fn fmo7<T: Real>(data: &DMatrix<T>) -> Result<SiteHamiltonian<T>> {
    if data.nrows() != 7 || data.ncols() != 7 {
        return Err(Error::InvalidInput(format!(
            "FMO Hamiltonian must be 7x7, got {}x{}",
            data.nrows(),
            data.ncols()
        )));
    }
    SiteHamiltonian::from_matrix(data)
}

/// The FMO Hamiltonian shipped with the crate.
pub fn bundled_fmo7<T: Real>() -> SiteHamiltonian<T> {
    let m = parse_matrix(BUNDLED_FMO7).expect("bundled FMO file parses");
    fmo7(&m.map(T::lit)).expect("bundled FMO matrix is valid")
}

/// Parses a whitespace separated square matrix; `#` starts a comment.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse("matrix file holds no rows".into()));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != n) {
        return Err(Error::Parse(format!(
            "row {} has {} entries, expected {n}",
            bad + 1,
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Eigen-decomposition of H_S: energies ascending, eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitonBasis<T: Real> {
    energies: Vec<T>,
    coefficients: DMatrix<T>,
}

impl<T: Real> ExcitonBasis<T> {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// Exciton energies E_M in cm⁻¹, ascending.
    pub fn energies(&self) -> &[T] {
        &self.energies
    }

    /// Orthogonal matrix with entry (m, M) = c_m(M).
    pub fn coefficients(&self) -> &DMatrix<T> {
        &self.coefficients
    }

    pub fn c(&self, site: usize, exciton: usize) -> T {
        self.coefficients[(site, exciton)]
    }

    /// U diag(E) Uᵀ.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let d = DMatrix::from_diagonal(&DVector::from_vec(self.energies.clone()));
        &self.coefficients * d * self.coefficients.transpose()
    }

    fn unitary(&self) -> DMatrix<Complex<T>> {
        self.coefficients.map(creal)
    }

    /// Site-basis operator → exciton basis (Uᵀ X U).
    pub fn to_exciton(&self, site_op: &DMatrix<Complex<T>>) -> DMatrix<Complex<T>> {
        let u = self.unitary();
        u.transpose() * site_op * u
    }

    /// Exciton-basis operator → site basis (U X Uᵀ).
    pub fn to_site(&self, exciton_op: &DMatrix<Complex<T>>) -> DMatrix<Complex<T>> {
        let u = self.unitary();
        &u * exciton_op * u.transpose()
    }

    /// Site-basis state vector → exciton basis.
    pub fn state_to_exciton(&self, site_state: &DVector<Complex<T>>) -> DVector<Complex<T>> {
        self.unitary().transpose() * site_state
    }

    /// Exciton-basis state vector → site basis.
    pub fn state_to_site(&self, exciton_state: &DVector<Complex<T>>) -> DVector<Complex<T>> {
        self.unitary() * exciton_state
    }
}

/// Diagonalizes H_S. Each eigenvector is signed so that its
/// largest-magnitude component (first one on ties) is positive.
pub fn diagonalize<T: Real>(h: &SiteHamiltonian<T>) -> ExcitonBasis<T> {
    let n = h.n_sites();
    let eig = SymmetricEigen::new(h.matrix());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("eigenvalues are finite")
    });
    let energies = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let tie = T::lit(1e-12);
    let coefficients = DMatrix::from_fn(n, n, |r, col| eig.eigenvectors[(r, order[col])]);
    let mut coefficients = coefficients;
    for col in 0..n {
        let mut best = 0;
        for r in 1..n {
            if coefficients[(r, col)].abs() > coefficients[(best, col)].abs() + tie {
                best = r;
            }
        }
        if coefficients[(best, col)] < T::zero() {
            for r in 0..n {
                coefficients[(r, col)] = -coefficients[(r, col)];
            }
        }
    }
    ExcitonBasis { energies, coefficients }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// ω > 0: moves population down in energy.
    Relaxation,
    /// ω < 0: moves population up in energy.
    Absorption,
    /// ω = 0: diagonal in the exciton basis.
    Dephasing,
}

/// Secular jump operator A_m(ω) of one site at one transition frequency,
/// stored in the exciton basis.
#[derive(Debug, Clone)]
pub struct JumpChannel<T: Real> {
    pub site: usize,
    /// Signed transition frequency in cm⁻¹.
    pub frequency: T,
    pub kind: ChannelKind,
    pub generator: DMatrix<Complex<T>>,
    /// Nonzero entries (row, col, value) of `generator`.
    entries: Vec<(usize, usize, Complex<T>)>,
}

impl<T: Real> JumpChannel<T> {
    fn new(site: usize, frequency: T, kind: ChannelKind, generator: DMatrix<Complex<T>>) -> Self {
        // row-major so `weight` can fold rows without a buffer
        let mut entries = Vec::new();
        for r in 0..generator.nrows() {
            for c in 0..generator.ncols() {
                let v = generator[(r, c)];
                if v != Complex::new(T::zero(), T::zero()) {
                    entries.push((r, c, v));
                }
            }
        }
        Self { site, frequency, kind, generator, entries }
    }

    pub fn entries(&self) -> &[(usize, usize, Complex<T>)] {
        &self.entries
    }

    /// A ψ.
    pub fn apply(&self, psi: &DVector<Complex<T>>) -> DVector<Complex<T>> {
        let mut out = DVector::zeros(psi.len());
        self.apply_into(psi, &mut out);
        out
    }

    pub(crate) fn apply_into(&self, psi: &DVector<Complex<T>>, out: &mut DVector<Complex<T>>) {
        out.fill(Complex::new(T::zero(), T::zero()));
        for &(r, c, v) in &self.entries {
            out[r] += v * psi[c];
        }
    }

    /// ⟨ψ|A†A|ψ⟩ = ‖Aψ‖².
    pub fn weight(&self, psi: &DVector<Complex<T>>) -> T {
        let zero = Complex::new(T::zero(), T::zero());
        let mut total = T::zero();
        let mut row = usize::MAX;
        let mut acc = zero;
        for &(r, c, v) in &self.entries {
            if r != row {
                total += norm_sqr(acc);
                acc = zero;
                row = r;
            }
            acc += v * psi[c];
        }
        total + norm_sqr(acc)
    }

    /// ⟨ψ|A|ψ⟩.
    pub(crate) fn overlap(&self, psi: &DVector<Complex<T>>) -> Complex<T> {
        self.entries.iter().fold(Complex::new(T::zero(), T::zero()), |acc, &(r, c, v)| acc + psi[r].conj() * v * psi[c])
    }

    /// A†A as a dense matrix.
    pub fn dagger_a(&self) -> DMatrix<Complex<T>> {
        self.generator.adjoint() * &self.generator
    }
}

/// Signed transition frequencies grouped within `degeneracy_tol`.
///
/// Returns the positive group representatives (ascending) and, for each,
/// the (upper, lower) exciton pairs it contains. Pairs closer than the
/// tolerance are returned separately as the zero-frequency group.
fn group_transitions<T: Real>(
    basis: &ExcitonBasis<T>,
    degeneracy_tol: T,
) -> (Vec<(T, Vec<(usize, usize)>)>, Vec<(usize, usize)>) {
    let e = basis.energies();
    let n = e.len();
    let mut gaps = Vec::new();
    let mut zero = Vec::new();
    for upper in 0..n {
        for lower in 0..n {
            if upper == lower {
                continue;
            }
            let gap = e[upper] - e[lower];
            if gap.abs() <= degeneracy_tol {
                zero.push((upper, lower));
            } else if gap > T::zero() {
                gaps.push((gap, upper, lower));
            }
        }
    }
    gaps.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite gaps"));
    let mut groups: Vec<(T, T, Vec<(usize, usize)>)> = Vec::new();
    for (gap, upper, lower) in gaps {
        match groups.last_mut() {
            Some((first, sum, pairs)) if gap - *first <= degeneracy_tol => {
                *sum += gap;
                pairs.push((upper, lower));
            }
            _ => groups.push((gap, gap, vec![(upper, lower)])),
        }
    }
    let groups = groups
        .into_iter()
        .map(|(_, sum, pairs)| {
            let mean = sum / T::from_count(pairs.len() as u64);
            (mean, pairs)
        })
        .collect();
    (groups, zero)
}

/// Builds every nonzero secular channel A_m(ω).
///
/// Ordering: dephasing channels first, then absorption frequencies
/// ascending (most negative first), then relaxation frequencies ascending;
/// within a frequency, by site.
pub fn build_channels<T: Real>(basis: &ExcitonBasis<T>, degeneracy_tol: T) -> Vec<JumpChannel<T>> {
    let n = basis.dim();
    let (groups, zero_pairs) = group_transitions(basis, degeneracy_tol);
    let mut channels = Vec::new();
    let cutoff = T::lit(1e-12);
    let is_zero = |g: &DMatrix<Complex<T>>| g.iter().all(|z| norm_sqr(*z) <= cutoff * cutoff);

    for m in 0..n {
        let mut g = DMatrix::zeros(n, n);
        for mm in 0..n {
            g[(mm, mm)] = creal(basis.c(m, mm) * basis.c(m, mm));
        }
        for &(a, b) in &zero_pairs {
            g[(a, b)] = creal(basis.c(m, a) * basis.c(m, b));
        }
        channels.push(JumpChannel::new(m, T::zero(), ChannelKind::Dephasing, g));
    }
    // Absorption (raising) generators are the adjoints of the relaxation ones.
    for (omega, pairs) in groups.iter().rev() {
        for m in 0..n {
            let mut g = DMatrix::zeros(n, n);
            for &(upper, lower) in pairs {
                g[(upper, lower)] = creal(basis.c(m, upper) * basis.c(m, lower));
            }
            if !is_zero(&g) {
                channels.push(JumpChannel::new(m, -*omega, ChannelKind::Absorption, g));
            }
        }
    }
    for (omega, pairs) in groups.iter() {
        for m in 0..n {
            let mut g = DMatrix::zeros(n, n);
            for &(upper, lower) in pairs {
                g[(lower, upper)] = creal(basis.c(m, lower) * basis.c(m, upper));
            }
            if !is_zero(&g) {
                channels.push(JumpChannel::new(m, *omega, ChannelKind::Relaxation, g));
            }
        }
    }
    channels
}

/// Distinct channel frequencies: 0 first, then the signed nonzero
/// frequencies in ascending order.
pub fn channel_frequencies<T: Real>(channels: &[JumpChannel<T>]) -> Vec<T> {
    let mut freqs = vec![T::zero()];
    let mut nonzero: Vec<T> = Vec::new();
    for ch in channels {
        if ch.kind != ChannelKind::Dephasing && !nonzero.contains(&ch.frequency) {
            nonzero.push(ch.frequency);
        }
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).expect("finite frequencies"));
    freqs.extend(nonzero);
    freqs
}
