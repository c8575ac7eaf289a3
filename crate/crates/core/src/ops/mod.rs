//! Raw forward/backward kernels behind the graph operators.

pub mod conv;
pub mod sampling;
