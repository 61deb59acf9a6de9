//! Exciton transfer in light-harvesting complexes coupled to a phonon bath.
//!
//! The crate computes time-dependent relaxation and dephasing rates of an
//! Ohmic bath, propagates the secular time-convolutionless master equation
//! with RK4, and unravels the same equation with an ensemble of
//! non-Markovian quantum jumps that detects positivity violations.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar type. Scenario runners and file output use `f64`.
//!
//! ```
//! use nmqj_core::scenarios::{transport_dimer, transport_measure, Scenario};
//!
//! let cfg = transport_dimer();
//! let traj = Scenario::new(&cfg)?.run()?;
//! let pbar = transport_measure(&traj, 0, 1.0)?;
//! assert!((pbar - 0.44).abs() < 0.02);
//! # Ok::<(), nmqj_core::Error>(())
//! ```

pub mod bath;
pub mod error;
pub mod model;
pub mod nmqj;
pub mod output;
pub mod quadrature;
pub mod scalar;
pub mod scenarios;
pub mod system;
pub mod tcl;
pub mod units;

pub use error::{Error, PositivityViolation, Result};
pub use scalar::Real;

pub type SpectralDensity64 = bath::SpectralDensity<f64>;
pub type RateTable64 = bath::RateTable<f64>;
pub type SiteHamiltonian64 = model::SiteHamiltonian<f64>;
pub type ExcitonBasis64 = model::ExcitonBasis<f64>;
pub type JumpChannel64 = model::JumpChannel<f64>;
pub type ExcitonSystem64 = system::ExcitonSystem<f64>;
pub type DensityMatrix64 = tcl::DensityMatrix<f64>;
pub type TclPropagator64<'a> = tcl::TclPropagator<'a, f64>;
pub type EnsembleRegistry64 = nmqj::EnsembleRegistry<f64>;
pub type NmqjEngine64<'a> = nmqj::NmqjEngine<'a, f64>;

pub type SpectralDensity32 = bath::SpectralDensity<f32>;
pub type RateTable32 = bath::RateTable<f32>;
pub type SiteHamiltonian32 = model::SiteHamiltonian<f32>;
pub type ExcitonBasis32 = model::ExcitonBasis<f32>;
pub type JumpChannel32 = model::JumpChannel<f32>;
pub type ExcitonSystem32 = system::ExcitonSystem<f32>;
pub type DensityMatrix32 = tcl::DensityMatrix<f32>;
pub type TclPropagator32<'a> = tcl::TclPropagator<'a, f32>;
pub type EnsembleRegistry32 = nmqj::EnsembleRegistry<f32>;
pub type NmqjEngine32<'a> = nmqj::NmqjEngine<'a, f32>;
