//! Network layers as tape operations, parameter containers with sensible
//! initialization, and declarative architecture specs with exact
//! receptive-field bookkeeping.

mod arch;
mod conv;
mod linear;
mod loss;
mod norm;
mod params;
mod pool;

pub use arch::{ArchitectureSpec, DenseBlockSpec, LayerSpec};
pub use conv::ConvSpec;
pub use norm::{update_running_stats, BatchStats};
pub use params::{BnParams, ConvParams, LinearParams, VisitParams};
