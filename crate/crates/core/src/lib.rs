//! Time-local and time-nonlocal quantum master equations for small open systems:
//! Liouville-space algebra, two exactly solvable models, the fixed-point relation
//! between memory kernel and time-local generator, pole analysis, memory expansions
//! and forward solvers.

pub mod error;
pub mod evolve;
pub mod fixedpoint;
pub mod liouville;
pub mod memexp;
pub mod model_jc;
pub mod model_rlm;
pub mod quad;
pub mod special;
pub mod spectral;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{QmeError, Result};
pub use evolve::{solve_timelocal, solve_timenonlocal, GeneratorFn, StateTrajectory, TimeLocalGenerator};
pub use fixedpoint::{
    anti_time_ordered_exp, khat_functional, khat_functional_trajectory, khat_of_superop,
    stationary_iterate, transient_iterate, IterationReport, KernelSplit, StationaryRoute,
    SuperopTrajectory, TimeGrid,
};
pub use liouville::{OperatorVec, SpectralDecomp, Superoperator};
pub use memexp::{fcoeff_explicit, fcoeff_recursive, fk_superop, gradient_expansion_stationary, perturbative_g, FCoeffTable};
pub use num_complex::Complex64 as C64;
