//! Command-line interface and HTTP service for crewforge sessions.

pub mod commands;
pub mod feedback;
pub mod server;
pub mod view;
