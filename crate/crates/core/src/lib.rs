//! Silicon-sample polling from social-media traces.
//!
//! The pipeline runs pool acquisition, an exclusion cascade with quota
//! sampling, prompt-driven feature annotation, frame construction, a
//! hierarchical multinomial MrP model fitted by NUTS, post-stratification and
//! evaluation against known results.

pub mod annotator;
pub mod domain;
pub mod eval;
pub mod filters;
pub mod frame_builder;
pub mod mrp;
pub mod pipeline;
pub mod pool;
pub mod prompts;
pub mod sim;

pub use domain::*;
