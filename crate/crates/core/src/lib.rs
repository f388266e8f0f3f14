pub mod bench;
pub mod checker;
pub mod client;
pub mod cluster;
pub mod cost;
pub mod daemon;
pub mod error;
pub mod kcache;
pub mod lockorder;
pub mod manager;
pub mod probe;
pub mod storage;
pub mod tcp;
pub mod transport;
pub mod types;
pub mod wire;

pub use error::{Error, Result};
