pub mod error;
pub mod numerics;

pub use error::{Result, SsnnError};
pub mod generative;
pub mod oracle;
pub mod inference;
pub mod model;
pub mod training;
pub mod data;
pub mod eval;
pub mod init;
pub mod checkpoint;
