//! Knowledge-editing lab on a toy transformer: a synthetic knowledge graph,
//! a small language model that memorizes it, a representation disentangler,
//! closed-form rank-one editors, and the evaluation protocol.

pub mod dke;
pub mod error;
pub mod eval;
pub mod krd;
pub mod lm;
pub mod util;
pub mod world;

pub use error::{CoreError, Result};
pub use kedit_numerics as numerics;
