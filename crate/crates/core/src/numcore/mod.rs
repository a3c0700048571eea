//! Dense tensors, a tape-based reverse-mode gradient engine and Adam.
//!
//! Everything is 64-bit and single-threaded. Parameters live in a
//! [`ParamStore`]; a [`Tape`] records one forward pass that may read from
//! several stores, and [`Tape::backward`] returns [`Gradients`] keyed by
//! parameter, which each store pulls in with [`ParamStore::accumulate`].

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::Adam;
pub use rng::SplitRng;
pub use tape::{bce_loss, sigmoid, Bags, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
