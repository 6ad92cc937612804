//! Candidate libraries and sparse regression solvers shared by the diffusion
//! fit and the BSDE discovery.

mod library;
mod solvers;

pub use library::{build_library, Factor, Features, LibraryMatrix, LibrarySpec, Term};
pub use solvers::{
    best_subset, bic_score, denormalize_coefficients, lstsq, normalize_columns, sr3, sr3_scan, stlsq,
    Criterion, Diagnostics, Normalized, Regularizer, ScanOptions, ScanPoint, ScanResult, Selection, SparseModel,
    Sr3Options, StlsqOptions, MAX_EXHAUSTIVE_TERMS,
};
