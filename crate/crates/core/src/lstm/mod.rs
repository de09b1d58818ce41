//! Two-layer stateless LSTM with a softmax output layer.
//!
//! Per step and layer, with `z = W x + U h_prev + b` split into four gates:
//!
//! ```text
//! i, f, o = σ(z_i), σ(z_f), σ(z_o)
//! g       = tanh(z_g)
//! c       = f ⊙ c_prev + i ⊙ g
//! h       = o ⊙ tanh(c)
//! ```
//!
//! Layer 1 consumes the feature rows, layer 2 consumes layer 1's outputs at
//! every step, and only layer 2's final `h` feeds the dense softmax. State
//! starts at zero for every window and padding rows are not masked.

mod adam;
mod gradcheck;
mod net;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, max_relative_error, random_instance, FD_EPS};
pub use net::{loss, softmax_in_place, Forward, LayerTrace, Model};
pub use params::{Dense, LstmLayer, ModelConfig, Params, Scalar, TENSOR_NAMES};
