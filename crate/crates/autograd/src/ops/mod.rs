mod conv;
mod elementwise;
mod pool;
mod reduce;
mod shape;

pub use elementwise::{sigmoid, BinaryOp, UnaryOp};
pub use pool::WindowKind;
pub use reduce::ReduceKind;
pub use shape::concat;
