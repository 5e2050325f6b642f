pub mod autodiff;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ot;
pub mod table;
pub mod train;

pub use error::{Error, Result};
