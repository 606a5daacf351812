//! Dense networks, cross-entropy, and Adam.

mod adam;
mod loss;
mod matrix;
mod network;

pub use adam::{AdamConfig, OptimizerState};
pub use loss::{accuracy, argmax, cross_entropy, softmax};
pub use matrix::Matrix;
pub use network::{
    backward, forward, predict_logits, Activation, Gradients, LayerView, NetworkSpec, Tape,
    WeightSet,
};

use crate::error::Result;

/// A featurizer composed with a classifier head, evaluated on one batch.
#[derive(Debug, Clone)]
pub struct CompositeGrad {
    pub loss: f64,
    pub featurizer: WeightSet,
    pub classifier: WeightSet,
}

/// Cross-entropy of `classifier(featurizer(x))` and its gradients with respect
/// to both parameter sets.
pub fn composite_cross_entropy(
    featurizer: &WeightSet,
    classifier: &WeightSet,
    x: &Matrix,
    labels: &[usize],
) -> Result<CompositeGrad> {
    let (feats, f_tape) = forward(featurizer.spec(), featurizer, x)?;
    let (logits, c_tape) = forward(classifier.spec(), classifier, &feats)?;
    let (loss, d_logits) = cross_entropy(&logits, labels)?;
    let c_grad = backward(classifier.spec(), classifier, &c_tape, &d_logits)?;
    let f_grad = backward(featurizer.spec(), featurizer, &f_tape, &c_grad.input)?;
    Ok(CompositeGrad {
        loss,
        featurizer: f_grad.weights,
        classifier: c_grad.weights,
    })
}
