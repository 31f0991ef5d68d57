#![no_std]

extern crate alloc;

pub mod dualloop;
pub mod error;
pub mod irl;
pub mod linalg;
pub mod lyap;
pub mod model;
pub mod robust;
pub mod stabilizer;

pub use error::{Error, Result};
pub use linalg::Mat;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
