//! Two-step generalized method of moments in envelope coordinates.

pub mod fit;
pub mod moments;
pub mod nelder_mead;
pub mod pls;

pub use fit::{fit_ehr, fit_env_ls, fit_envelope, FitOptions, FitResult, StartingSubspace};
pub use moments::{
    gmm_objective, moment_dim, moment_g, moment_matrix, sample_moment, sample_moment_rows, weight_matrix,
    MomentVector, WeightMatrix,
};
pub use nelder_mead::{nelder_mead, nelder_mead_with_offsets, nelder_mead_with_steps, NelderMeadOptions, OptimizerMeta, StopReason};
pub use pls::{coefficient_krylov_start, eigen_signal_start, pls_initializer, PlsStart};
