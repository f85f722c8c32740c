//! Graph-prompted causal language model for member/job marketplace graphs.

pub mod diagnostics;
pub mod eval;
pub mod hetgraph;
pub mod nn;
pub mod prompts;
pub mod seed;
pub mod synth;
pub mod train;
pub mod vocab;
