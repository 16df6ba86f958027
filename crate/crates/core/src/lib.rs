//! On-implant neural signal processing for movement-intention decoding.
//!
//! The crate follows one spike from the electrode to the decoder:
//!
//! - [`synthdata`]: labelled synthetic extracellular traces and center-out
//!   reach sessions, plus the on-disk dataset formats.
//! - [`detect`]: absolute-threshold detection with non-overlapping 32-sample
//!   windows and two-sample feature extraction.
//! - [`sort_online`]: unsupervised histogram-valley boundaries with a
//!   CAM-tracked cluster status per grid partition.
//! - [`sort_offline`]: supervised decision-tree sorter over the eleven
//!   segmentation patterns, and the L1 template baseline.
//! - [`decode`]: standard and ensemble-observation Kalman filters, the
//!   implant-side accumulator and the operation counters.
//! - [`sim`]: cycle-driven model of the detector/sorter/decoder hardware.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decode;
pub mod detect;
pub mod metrics;
pub mod sim;
pub mod sort_offline;
pub mod sort_online;
pub mod synthdata;

pub use detect::{FeatureSpec, SpikeToken, SpikeWindow, WINDOW_LEN};
pub use synthdata::{GroundTruthLabels, LabelEvent, RawTrace, ReachSession};

/// A spike after sorting: the channel it was detected on, the detection
/// timestamp and the unit (cluster) the sorter assigned it to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SortedEvent {
    #[serde(rename = "t")]
    pub t: u64,
    #[serde(rename = "ch")]
    pub channel: u16,
    pub unit: u8,
}

/// Identifies one sorted neuron: a channel and the unit index on it.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct NeuronId {
    pub channel: u16,
    pub unit: u8,
}

impl NeuronId {
    pub fn new(channel: u16, unit: u8) -> Self {
        Self { channel, unit }
    }
}
