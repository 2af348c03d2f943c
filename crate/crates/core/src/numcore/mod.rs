//! Minimal reverse-mode autodiff, dense layers, losses and optimizers.

pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use nn::{dense, dense_forward, Binding, Dense, Mlp};
pub use optim::{sgd_step, Sgd};
pub use params::ParameterSet;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Mean over the batch of `-log softmax(logits)[label]`, tape-free.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> crate::Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss)?.item())
}

/// Mean absolute difference, tape-free.
pub fn l1_loss(x: &Tensor, y: &Tensor) -> crate::Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(y.clone());
    let loss = tape.l1_loss(a, b)?;
    Ok(tape.value(loss)?.item())
}
