//! Numerical primitives: matrices, log-space reductions, seeded randomness and
//! finite-difference gradient checking.

mod gradcheck;
mod ops;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, BlockReport, GradCheckReport, MIN_PROBES_PER_BLOCK,
};
pub(crate) use ops::logsumexp_unchecked;
pub use ops::{
    argmax, argmin, entropy, log_softmax, log_softmax_in_place, log_softmax_rows, logsumexp,
    softmax, sq_dist, sq_dist_matrix, sq_norm, Decimal,
};
pub use params::{Param, ParamSet};
pub use rng::{gumbel_from_uniform, gumbel_noise, Rng, RngState, GUMBEL_U_CLAMP, RNG_ALGORITHM};
pub use tensor::{Op, Real, Tensor2};
