pub mod coordinator;
pub mod evaluators;
pub mod latency;
pub mod optimizer;
pub mod report;
pub mod sampler;
pub mod search_space;
