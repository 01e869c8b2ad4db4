//! Contrast-enhancement forensics toolkit.
//!
//! * [`imagecore`]: grayscale patches, PGM I/O, histograms, synthetic patches
//! * [`enhance`]: gamma correction, its closed-form footprint, gap-bin statistics
//!   and the gap-count threshold detector
//! * [`jpegsim`]: JPEG quantization roundtrip
//! * [`nn`]: the CNN engine
//! * [`models`]: pixel-domain (P-CNN) and histogram-domain (H-CNN) detectors
//! * [`dataset`]: scenario construction, manifests, splits and batching
//! * [`trainer`]: training, evaluation, detection and the data-scale study

pub mod dataset;
pub mod enhance;
pub mod error;
pub mod imagecore;
pub mod jpegsim;
pub mod models;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};

/// Binary class of a patch. The discriminant is the network class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Original = 0,
    Enhanced = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Original
        } else {
            Label::Enhanced
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Original => "original",
            Label::Enhanced => "enhanced",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Label::Original),
            "enhanced" => Ok(Label::Enhanced),
            other => Err(Error::InvalidManifest(format!("unknown label {other:?}"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
