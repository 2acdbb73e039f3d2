//! Toy decoder-only transformer with residual-stream tracing and hidden-state
//! substitution.

mod model;
mod trace;
mod train;

pub use model::{Block, Bound, GraphHook, LayerVars, LmArch, TransformerLm};
pub use trace::{softmax, ForwardTrace, SubstitutionHook};
pub use train::{
    batch_loss_and_grads, train_lm, train_lm_resume, triple_recall, EpochStat, LmTrainConfig, LmTrainReport,
    LmTrainState,
};
