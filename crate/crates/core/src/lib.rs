//! A Forth interpreter with a discrete reference machine and a differentiable
//! counterpart whose program sketches contain trainable slots.

pub mod autodiff;
pub mod executor;
pub mod forth;
pub mod machine;
pub mod sketch;
pub mod sketches;
pub mod training;
