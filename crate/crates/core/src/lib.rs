pub mod arbiter;
pub mod bci;
pub mod config;
pub mod env;
pub mod expert;
pub mod obs;
pub mod pipeline;
pub mod policy;
pub mod train;
pub mod eval;
pub mod learnloop;
