//! Local DNS proxy that spreads queries over a pool of DNS-over-HTTPS
//! recursors, keyed on the registrable domain of the page being loaded.

pub mod analysis;
pub mod assignment;
pub mod attribution;
pub mod bench;
pub mod cache;
pub mod cli;
pub mod config;
pub mod doh;
pub mod mock;
pub mod proxy;
pub mod querylog;
pub mod server;
pub mod suffix;
pub mod wire;
