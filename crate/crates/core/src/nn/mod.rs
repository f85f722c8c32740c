//! Dense tensors, a reverse-mode tape, and the decoder-only transformer.

pub mod attention;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod loss;
pub mod model;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionBias, BiasEntry, MASK_VALUE};
pub use gradcheck::{gradient_check, GradCheckReport, TensorCheck};
pub use loss::{restricted_log_softmax, restricted_softmax};
pub use model::{
    BiasScope, InputToken, Model, ModelInput, OutputSpace, Target, TransformerConfig,
};
pub use params::{Gradients, Param, ParamGroup, ParamId, ParamStore};
pub use real::{Dtype, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("loss has no targets")]
    EmptyTargets,
    #[error("allowed token range is empty")]
    EmptyAllowed,
    #[error("sequence of {len} tokens exceeds the context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("hop distance {hop} exceeds the maximum depth {max}")]
    HopOutOfRange { hop: usize, max: usize },
    #[error("unknown node task {0}")]
    UnknownTask(String),
}
