//! Token-level activation maps for multimodal language model outputs.
//!
//! A [`FeatureDump`] holds the hidden states and readout weights exported
//! for one conversation. [`Explainer`] turns it into one map per answer
//! token: raw class activation, subtraction of the interference inherited
//! from earlier tokens, rank-weighted Gaussian denoising and a joint
//! normalization with the textual relevance of the context. [`metrics`]
//! scores the maps against object masks.

pub mod activation;
pub mod causal;
pub mod dump;
pub mod filter;
pub mod fuse;
pub mod metrics;
pub mod render;
pub mod synth;

pub use activation::{ActivationError, ActivationMap, RelevanceVector, Stage};
pub use causal::{CausalConfig, CausalError, ScaleMode};
pub use dump::{load_dump, save_dump, DumpError, FeatureDump, Grid, Layout, Mask, Matrix, Role, TokenRecord};
pub use filter::{FilterConfig, FilterError, FilterKind};
pub use fuse::{explain_all, explain_token, ExplainConfig, Explainer, MultimodalMap, PipelineError, PipelineStage};
pub use metrics::{EvalError, EvalOptions, EvalReport, MetricsError};
pub use render::{Colormap, RenderConfig, RenderError};
