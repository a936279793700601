//! Density-based topology optimization of Stokes flow with multiple local
//! minima: a BDM1 x DG0 discretization, a block preconditioner with a
//! multigrid momentum solver, the Benson-Munson active-set method and a
//! deflated barrier continuation.

pub mod assembly;
pub mod bm_solver;
pub mod deflated_barrier;
pub mod error;
pub mod fem_spaces;
pub mod linalg;
pub mod mesh;
pub mod multigrid;
pub mod preconditioner;

pub use error::{Error, Result};
