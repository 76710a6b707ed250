//! Software fingerprint liveness detection.
//!
//! The pipeline has four phases: optional preprocessing of the grayscale
//! image ([`imageproc`]), texture feature extraction with local binary
//! patterns ([`lbp`]) or a random-filter convolutional network
//! ([`convnet`]), standardization plus randomized PCA with whitening
//! ([`transform`]), and an RBF-kernel SVM ([`svm`]). Training data can be
//! enlarged with crops and mirror images ([`augment`]); hyper-parameters
//! are chosen by 5x2 cross-validation with stage-output caching
//! ([`modelsel`]). [`pipeline`] ties the phases into a persistable model
//! and [`cli`] exposes the command implementations used by the binary.

pub mod augment;
pub mod cli;
pub mod codec;
pub mod config;
pub mod convnet;
pub mod error;
pub mod imageproc;
pub mod lbp;
pub mod modelsel;
pub mod pipeline;
pub mod seed;
pub mod svm;
pub mod synth;
pub mod transform;

pub use error::{Error, Result};
pub use imageproc::Image;

/// Flat feature vector produced by an extractor.
pub type FeatureVector = Vec<f64>;

/// Class label. Live samples are `+1`, fakes are `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Live,
    Fake,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Live => 1.0,
            Label::Fake => -1.0,
        }
    }

    /// Score-to-label rule; a score of exactly zero counts as live.
    pub fn from_score(score: f64) -> Self {
        if score >= 0.0 {
            Label::Live
        } else {
            Label::Fake
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Fake => "fake",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
