//! Uncertainty-guided zoom-in refinement for GUI grounding backends that
//! answer with a click coordinate.
//!
//! A greedy answer is checked with a visual self-verification query. When it
//! fails, several sampled answers are turned into anisotropic Gaussian
//! kernels whose spread follows each axis' token perplexity; the resulting
//! field yields crop proposals, each crop is re-grounded at higher
//! magnification, and the backend picks the best of the marked candidates.

pub mod backend;
pub mod config;
pub mod coord_parser;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod mock_world;
pub mod pipeline;
pub mod proposals;
pub mod uncertainty;

pub use backend::{
    BackendError, Completion, Decoding, GroundingRequest, GroundingResponse, MarkerStyle,
    VisionModel, VisionPrompt,
};
pub use coord_parser::{CoordinateGrammar, GrammarStyle, TokenScore};
pub use field::{FieldMoments, GaussianKernel};
pub use geometry::{BBox, ImageSize, Point, ResizePolicy};
pub use pipeline::{run, Backends, PipelineConfig, Trace, Variant};
pub use proposals::{ProposalConfig, RegionProposal};
pub use uncertainty::{CoordinateSample, UncertaintyConfig};
