pub mod api;
pub mod bench;
pub mod cli;
pub mod config;
pub mod server;
