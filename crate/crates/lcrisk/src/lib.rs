//! Long-COVID risk modeling over temporally ordered diagnosis-code histories.
//!
//! The crate covers the full pipeline: encoding raw diagnosis events into
//! fixed-length token sequences over pre-trained concept embeddings, training
//! recurrent/convolutional classifiers with a reproducible recipe, scoring
//! them with ROC/AUC and Youden-threshold accuracy, and attributing
//! predictions back to individual diagnoses with GradCAM. A synthetic-cohort
//! generator with a planted, analytically characterized risk signal makes the
//! whole stack testable without access to restricted clinical data.

pub mod attribution;
pub mod autodiff;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod synth;
pub mod train;
