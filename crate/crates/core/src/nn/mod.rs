//! Seeded dense-network numerics: matrices, dropout masks, stochastic
//! forward passes, softmax and backpropagation.

mod matrix;
mod network;
mod rng;

pub use matrix::Matrix;
pub use network::{
    argmax, sample_mask, Activation, Dense, DropoutConfig, DropoutMask, NetworkParams, ParamGrads,
    PredictiveSamples, ProbVector, Trace,
};
pub use rng::{RngState, Stream};
