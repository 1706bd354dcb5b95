//! Reconstruction of local interaction potentials (real and optical) from
//! scattering phase-shift and inelasticity data.
//!
//! The workflow is a two-step inversion. A unitary partial-wave S-matrix is
//! represented by a diagonal Pade approximant fitted to the phase-shift
//! curve; the rational form makes the Marchenko integral equation degenerate
//! and solvable radius by radius as a small linear system, yielding a local
//! real potential. A second step determines the imaginary part of an optical
//! potential of the form `(1 + i alpha) V` from measured inelasticities via
//! the variable phase equation.
//!
//! Modules mirror the stages: [`specfun`] (Riccati-Bessel/Hankel machinery
//! and the closed-form overlap integrals), [`smatrix`] (rational S-matrix
//! fitting and spectral decomposition), [`marchenko1`] / [`marchenko2`]
//! (single and coupled-channel inversion), [`forward`] (direct and
//! variable-phase solvers plus bound states), [`optical`] (imaginary-part
//! scaling), and [`pipeline`] (CLI orchestration, kinematics and I/O).

pub mod forward;
pub mod interp;
pub mod marchenko1;
pub mod marchenko2;
pub mod optical;
pub mod pipeline;
pub mod quad;
pub mod smatrix;
pub mod specfun;

pub use num_complex::Complex64;
