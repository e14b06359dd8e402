//! Raw forward/backward kernels over flat `f64` buffers.
//!
//! These know nothing about the tape; `autodiff` wires them into the graph.

pub mod conv;
pub mod deform;
pub mod norm;
pub mod resize;
