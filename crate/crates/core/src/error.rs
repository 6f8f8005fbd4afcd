use thiserror::Error;

use crate::dram::ProcessId;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    /// A process touched a bank outside its partition (memory partitioning blocked it).
    #[error("process {process} may not access bank {bank} under the active partition map")]
    PartitionViolation { process: ProcessId, bank: usize },

    #[error("bank {bank} out of range (device has {n_banks} banks)")]
    BankOutOfRange { bank: usize, n_banks: usize },

    /// The RowClone mask selects a bank the address ranges do not cover.
    #[error("RowClone mask selects bank {bank}, which is outside the source/destination ranges")]
    MaskRangeMismatch { bank: usize },

    #[error("invalid RowClone request: {0}")]
    InvalidRowClone(String),

    /// Hit and conflict latencies are not separable; the timing channel is closed.
    #[error("threshold calibration failed: hit mean {hit_mean:.1}, conflict mean {conflict_mean:.1}")]
    CalibrationFailed { hit_mean: f64, conflict_mean: f64 },

    #[error("synchronization deadlock: {0}")]
    SyncDeadlock(String),

    #[error("entry size {entry_size} does not divide row size {row_size}")]
    SizeMismatch { entry_size: u64, row_size: u64 },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

pub type Result<T> = std::result::Result<T, SimError>;
