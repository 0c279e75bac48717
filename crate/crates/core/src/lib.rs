#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod diffcore;
pub mod error;
pub mod hash;
pub mod rng;

pub use error::{Error, Result};
pub mod synthgen;
pub mod verbalizer;
pub mod reasoner;
pub mod metrics;
pub mod qerec;
pub mod bestofn;
pub mod align;
