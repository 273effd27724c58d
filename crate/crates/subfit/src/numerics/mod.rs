//! Dense linear algebra, streaming statistics, and seeded randomness.

pub mod decomp;
pub mod io;
pub mod matrix;
pub mod rng;
pub mod welford;

pub use decomp::{eig_sym, psd_sqrt_and_invsqrt, qr_thin, svd, QrResult, SvdResult, SymEigResult};
pub use io::{read_matrix, write_matrix};
pub use matrix::Matrix;
pub use rng::{standard_normal, SeededRng};
pub use welford::WelfordState;
