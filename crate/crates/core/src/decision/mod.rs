//! Bayesian decision layer: utilities, conditional gains, optimal
//! predictions and their evaluation.

mod gain;
mod utility;

pub(crate) use gain::shape_gain;
pub use gain::{
    class_gains, confusion_matrix, expected_utility, gain_given_probs, gain_map, mc_gain,
    optimal_for_probs, optimal_prediction, ConfusionMatrix, GainGrid, GainMap, Prediction,
};
pub use utility::{
    builtin_utility, transform_utility, UtilityMatrix, UtilityRows, CAMVID_CLASSES,
    DIABETES_CLASSES,
};
