//! Dense linear algebra, reverse-mode differentiation, a symmetric
//! eigensolver, scalar special functions and the Adam optimizer.

mod adam;
mod eig;
mod gradcheck;
mod sparse;
pub mod special;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use eig::{sym_eig, SymEig, SYMMETRY_TOL};
pub use gradcheck::finite_difference_check;
pub use sparse::SparseMatrix;
pub use special::{normal_cdf, normal_pdf, sigmoid, softplus};
pub use tape::{cv_squared, kth_largest_excluding, top_k_indices, Tape, Var, MIN_NOISE_SCALE};
pub use tensor::{dot, Tensor2};
