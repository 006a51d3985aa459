use num_complex::Complex64;
use thiserror::Error;

use crate::fixedpoint::IterationReport;
use crate::liouville::Superoperator;

pub type Result<T> = std::result::Result<T, QmeError>;

#[derive(Debug, Clone, Error)]
pub enum QmeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not diagonalizable (eigenvector condition number {condition:.3e})")]
    NonDiagonalizable { condition: f64 },
    #[error("basis vectors are linearly dependent (condition number {condition:.3e})")]
    SingularBasis { condition: f64 },
    #[error("exponential overflow: norm {norm:.3e} exceeds scaling budget")]
    Overflow { norm: f64 },
    #[error("frequency {e} hits a pole at {pole}")]
    PoleHit { e: Complex64, pole: Complex64 },
    #[error("transform vanishes at E = {0}")]
    TransformZero(Complex64),
    #[error("t = {t} lies within the guard of singular time {tn}")]
    SingularTime { t: f64, tn: f64 },
    #[error("wrong regime: {0}")]
    WrongRegime(&'static str),
    #[error("frequency {0} outside the convergence region of the Laplace integral")]
    ConvergenceRegion(Complex64),
    #[error("argument outside domain: {0}")]
    DomainError(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("kernel quadrature does not converge: {0}")]
    DivergentQuadrature(String),
    #[error("no convergence after {} iterations (oscillating: {})", report.iters, report.oscillating)]
    MaxIterExceeded {
        report: IterationReport,
        last: Box<Superoperator>,
    },
    #[error("branch switch near E = {e} (overlap {overlap:.3})")]
    BranchSwitch { e: Complex64, overlap: f64 },
    #[error("sampling violated at eigenvalue index {index}: {reason}")]
    SamplingViolation { index: usize, reason: String },
    #[error("higher-order pole at {0} (slope too close to one)")]
    HigherOrderPole(Complex64),
    #[error("resolvent is singular at E = {0}")]
    SingularResolvent(Complex64),
    #[error("explicit coefficient formula disagrees with recursion at n={n}, p={p:?}")]
    ConventionMismatch { n: usize, p: Vec<usize> },
    #[error("derivative order {0} exceeds the cap")]
    DerivativeOrderTooHigh(usize),
    #[error("self-consistency loop did not converge (residual {0:.3e})")]
    NoConvergence(f64),
    #[error("unmasked singular generator at t = {0}")]
    SingularNode(f64),
    #[error("serialization: {0}")]
    Serialization(String),
}
