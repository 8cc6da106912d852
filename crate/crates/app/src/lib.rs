//! Command-line front end and HTTP inference service.

pub mod cli;
pub mod service;
