pub mod clock;
pub mod experiment;
pub mod harness;
pub mod probe;
pub mod sampler;
pub mod store;
pub mod report;
pub mod cli;
