//! Standard-library companion to `capsroute-core`: MNIST IDX loading, weight
//! checkpoints, the timing harness, the training loop and the JSON
//! verification report used by the `capsroute` binary.

pub mod bench;
pub mod checkpoint;
pub mod idx;
pub mod report;
pub mod train;

pub use capsroute_core as core;

/// Process exit codes used by the binary.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
}
