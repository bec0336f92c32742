pub mod cli;
pub mod config;
pub mod error;
pub mod gat;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod rss;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
