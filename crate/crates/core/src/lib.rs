//! Adaptive model streaming: a server continually distills a teacher into a
//! small student model on samples uploaded by an edge client, and streams
//! sparse parameter deltas back over a simulated network.

pub mod buffer;
pub mod codec;
pub mod controllers;
pub mod edge;
pub mod harness;
pub mod optimizer;
pub mod server;
pub mod sim;
pub mod simnet;
pub mod workload;
