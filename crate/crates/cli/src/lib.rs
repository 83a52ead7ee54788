//! Command-line and HTTP front ends for zerostyle.

pub mod pipeline;
pub mod server;
