//! A small CPU neural-network engine: parameter storage, a reverse-mode
//! tape over per-image activations, and the Adam optimizer.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::{Adam, AdamState};
pub use layers::{Conv2d, Linear};
pub use params::{Grads, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{LeafGrads, Tape, Var};
