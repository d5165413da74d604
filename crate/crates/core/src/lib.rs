pub mod baseline;
pub mod bict;
pub mod error;
pub mod evaltheory;
pub mod gallery;
pub mod gradsuite;
pub mod lifelong;
pub mod losses;
pub mod numkernel;
pub mod synthdata;

pub use error::{Error, Result};
