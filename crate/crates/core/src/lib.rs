//! Image quality assessment with predicted score distributions.
//!
//! A model maps an image to a probability distribution over discrete rating
//! buckets and is trained by minimizing the squared earth mover's distance
//! between cumulative distributions. Around it sit a maximum-entropy fitter
//! that turns (mean, std) labels into distributions, correlation and
//! classification metrics, dataset I/O, and a tuner that picks enhancement
//! parameters by maximizing the predicted mean score.

pub mod cli;
pub mod data;
pub mod dist;
pub mod error;
pub mod image;
pub mod maxent;
pub mod metrics;
pub mod model;
pub mod tuner;

pub use dist::{emd, BucketScale, ScoreDistribution};
pub use error::{Error, ErrorCategory, Result};
