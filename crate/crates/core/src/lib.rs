//! Stratified organ-at-risk segmentation for head-and-neck CT.
//!
//! Organs are split into three strata. A large-organ branch segments the
//! high-contrast anchors; a mid-level branch segments the next tier conditioned on
//! the anchor probabilities; small, hard organs are first localized by a heat-map
//! detector and then segmented inside a crop around each detection. Every branch
//! shares one four-block backbone whose per-block operator can be chosen by a
//! differentiable architecture search.
//!
//! The network stack in [`nn`] is a self-contained CPU implementation with
//! hand-written gradients, generic over `f32`/`f64`.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nas;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod seed;
pub mod sliding;

pub use backbone::{Backbone, BackboneSpec, CandidateKind};
pub use error::{Error, Result};
pub use metrics::{MetricReport, OrganMetrics};
pub use model::{HeatMapSet, LabelMap, OarCatalog, OrganEntry, ProbMaps, Stratum, Voi, Volume};
pub use nas::{Genotype, SearchSchedule};
pub use pipeline::{BranchRole, Pipeline, PipelineSpec, Trainer, TrainingPlan};
pub use sliding::SlidingSpec;
