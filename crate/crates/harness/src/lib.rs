pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod protocol;
pub mod report;
pub mod synth;
pub mod train;
