//! Command-line front end and HTTP session service for stemflow.

pub mod cli;
pub mod config;
pub mod error;
pub mod service;
pub mod session;
