//! Parsing images into posterior samples of type, token and render latents.
//!
//! Images are thinned to a skeleton graph, random walks over the graph
//! propose stroke segmentations, each segmentation's stroke order and
//! directions are searched under the type prior, and the best few parses are
//! refined by gradient ascent on the joint density.

mod optimize;
mod proposals;
mod search;
mod skeleton;

use thiserror::Error;

use crate::autodiff::AdError;
use crate::geometry::GeometryError;
use crate::render::RenderError;
use crate::token::TokenError;
use crate::type_prior::TypeError;

pub use optimize::{
    build_posterior, joint_log_density, normalize, optimize_parse, parse_candidates, refit_token, render_log_prior,
    select_top_k, InferenceConfig, JointParts, LatentSplit, OptimizeMode, Parse, Posterior, Refit, ScoredCandidate,
};
pub use proposals::{propose_parses, CandidateParse, WalkConfig};
pub use search::{all_configurations, search_order_directions, Configuration, SearchResult, TIE_TOLERANCE};
pub use skeleton::{extract_skeleton, thin_image, NodeKind, Pixel, SkeletonConfig, SkeletonEdge, SkeletonGraph, SkeletonNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("empty image: no ink pixels")]
    EmptyImage,
    #[error("no valid parse: {0}")]
    NoParse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}
