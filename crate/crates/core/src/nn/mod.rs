//! Parameter storage and the layers built from graph primitives.

mod layers;
mod param;

pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};
pub use param::{Init, Param, ParamId, ParamStore};
