//! Hierarchical segment grouping at desk scale.
//!
//! Unsupervised pixel-feature learning driven by multiview cosegmentation and
//! hierarchy-consistent clustering transformers, together with everything
//! needed to run it end to end on a bundled synthetic corpus: a small
//! reverse-mode tensor engine, a convolutional pixel encoder, spherical
//! k-means oversegmentation, gradient-watershed coherent regions, view
//! augmentation with exact label warping, grouping losses (pixel-segment
//! contrast, modularity, collapse, centroid separation), segmentation
//! metrics, and a deterministic scene generator with netpbm IO.

pub mod corpus;
pub mod encoder;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod multiview;
pub mod oversegment;
pub mod pipeline;
pub mod rngstream;
pub mod tensor;
pub mod transformer;

pub use label::LabelMap;
pub use tensor::{Graph, NodeId, Tensor};
