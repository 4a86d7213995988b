//! Layers with hand-written backward passes, a finite-difference gradient
//! checker and first-order optimizers.

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod pool;
pub mod softmax;

pub use activation::{activation, activation_backward, softplus, Activation};
pub use conv::{conv2d, conv2d_backward, Conv2d, ConvGrads};
pub use gradcheck::grad_check;
pub use optim::{sgd_step, Adam, Sgd};
pub use pool::{pool2x, pool2x_backward, upsample2x, upsample2x_backward};
pub use softmax::{softmax_in_place, softmax_vec};
