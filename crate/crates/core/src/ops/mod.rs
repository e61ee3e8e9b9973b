//! Differentiable tensor operations, implemented as methods on [`Var`](crate::autograd::Var).

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
mod shape;

pub use norm::LAYERNORM_EPS;
pub use shape::PAD;

#[cfg(test)]
pub(crate) use elementwise::softplus_f;
