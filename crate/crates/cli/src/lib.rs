//! Command-line tools and HTTP session service for adaptive paired comparisons.

pub mod commands;
pub mod service;
