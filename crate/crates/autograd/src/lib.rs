//! Tape-based reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! All model code in this workspace runs at 64-bit precision on small
//! tensors, so the engine favors correctness and checkability over
//! throughput: every op stores the values its backward pass needs and
//! contributes dense gradients. Matrix products go through `ndarray`'s
//! `matrixmultiply` backend.
//!
//! A forward pass builds nodes on a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse, accumulating gradients. Parameters live outside the
//! tape in a [`ParamStore`] and are bound per-pass through a [`Binder`],
//! which also maps gradients back to parameter names.

mod bind;
mod conv;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;

pub use bind::{Binder, LinearHook};
pub use conv::conv2d_shape;
pub use gradcheck::{finite_diff_grads, max_rel_error, GradCheckReport};
pub use optim::Adam;
pub use params::ParamStore;
pub use tape::{Arr, Grads, Tape, Var};

/// Scalar extraction helper: a 0-d or single-element array as f64.
pub fn scalar(a: &Arr) -> f64 {
    assert_eq!(a.len(), 1, "scalar() on array with {} elements", a.len());
    *a.iter().next().unwrap()
}
