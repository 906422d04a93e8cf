//! Budget-aware semi-supervised segmentation toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`budget`] prices annotation effort per supervision kind and plans
//!   allocations of strong and weak labels under a time budget.
//! * [`synthdata`] generates a deterministic multi-instance shapes dataset and
//!   derives every supervision signal from its full masks.
//! * [`autodiff`] is a small dense reverse-mode engine used to train the
//!   stand-in networks in [`models`].
//! * [`matching`] and [`losses`] implement sIoU, (class-masked) Hungarian
//!   assignment and the sequence training objectives.
//! * [`pipeline`] wires an annotation network, pseudo-labelling and a
//!   segmentation network into repeatable experiments scored by [`metrics`].

pub mod autodiff;
pub mod budget;
pub mod error;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod synthdata;

pub use budget::{Allocation, CostModel, SupervisionKind};
pub use error::{Error, Result};
pub use matching::{Assignment, CostMatrix};
pub use models::{ModelConfig, SequencePrediction};
pub use pipeline::{AnnotatorVariant, ExperimentConfig};
pub use synthdata::{DataConfig, LabelSet, Scene};
