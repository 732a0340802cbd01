//! Command-line tools and HTTP service for the generative retrieval engine.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod service;

pub use config::Config;
