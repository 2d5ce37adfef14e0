pub mod error;
pub mod numkit;
pub mod toyenv;
pub mod datagen;
pub mod ivae;
pub mod agents;
pub mod augment;
pub mod evaluate;
pub mod config;
pub mod pipeline;
pub mod cli;

pub use error::{Error, Result};
