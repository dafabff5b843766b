//! Minimal neural-network toolkit: autodiff graph, parameters, Adam.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{ConvGeom, Grads, Graph, Var};
pub use layers::{LayerNorm, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{clip_global_norm, global_norm, Binder, ParamId, ParamStore};
