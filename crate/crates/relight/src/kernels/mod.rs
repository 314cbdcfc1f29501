//! Raw numeric kernels: pure functions over tensors, no tape involvement.

pub mod attn;
pub mod conv;
pub mod norm;
pub mod scan;
