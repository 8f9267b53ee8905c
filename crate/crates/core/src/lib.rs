pub mod adaptation;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod formats;
pub mod fsutil;
pub mod inference;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod textbank;

pub use error::{Error, Result};
