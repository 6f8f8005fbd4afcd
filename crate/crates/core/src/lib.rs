//! Cycle-approximate simulator of row-buffer timing channels in a
//! processing-in-memory capable DRAM subsystem.

pub mod cache;
pub mod channel;
pub mod config;
pub mod dram;
pub mod error;
pub mod experiments;
pub mod mitigation;
pub mod noise;
pub mod pim;
pub mod sidechannel;

pub use error::{Result, SimError};
