pub mod attention;
pub mod augment;
pub mod cli;
pub mod error;
pub mod fsutil;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod skeldata;
pub mod trainer;

pub use error::{Error, Result};
