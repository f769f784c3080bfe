pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prune;
pub mod tensor;
pub mod train;
