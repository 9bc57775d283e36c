pub mod error;
pub mod graphopt;
pub mod linproto;
pub mod netsim;
pub mod network;
pub mod quant;
pub mod report;
pub mod ring;
pub mod scenario;
pub mod winograd;

pub use error::{Error, Result};
