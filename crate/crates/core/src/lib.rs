//! Tensor-train solver for advection–diffusion PDEs with rank-reducing
//! linear coordinate flows.
//!
//! The solver integrates Liouville (`∂u/∂t = f·∇u`) and Fokker–Planck
//! equations on low-rank tensor-train (TT) manifolds. Solution rank is
//! controlled by a time-dependent change of coordinates `y = Γ(t)x` whose
//! generator `Σ(t)` (with `Γ̇ = ΣΓ`) is chosen at every step by minimizing a
//! convex quadratic functional of the transformed dynamics. The modules are
//! layered bottom-up:
//!
//! - [`grid`] — periodic uniform grids, spectral differentiation matrices,
//!   trigonometric interpolation, quadrature.
//! - [`tt`] — tensor-train values: arithmetic, orthogonalization, rounding,
//!   inner products, point evaluation.
//! - [`pde_ops`] — separated (CP-form) operators, builders for Liouville and
//!   Fokker–Planck generators, and their transformation under `y = Γx`.
//! - [`tangent`] — tangent/normal projections on the fixed-rank TT manifold.
//! - [`flowgen`] — the variational generator: `c_ij` fields, the symmetric
//!   `d²×d²` system `A vec(Σ) = b`, minimal-norm solves, and the `Γ` flow.
//! - [`integrator`] — rank-adaptive step-truncation time stepping coupled
//!   with the coordinate flow.
//! - [`reference`] — dense full-grid pseudo-spectral benchmark solver and
//!   error evaluation.
//! - [`snapshot`] — binary serialization of TT and full-grid states.

// Pull in the BLAS backend so dependents link against a single provider.
extern crate blas_src;

pub mod error;
pub mod flowgen;
pub mod grid;
pub mod integrator;
pub mod pde_ops;
pub mod reference;
pub mod snapshot;
pub mod tangent;
pub mod tt;

pub use error::CoreError;
