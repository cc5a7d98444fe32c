pub mod error;
pub mod geometry;
pub mod parsing;
pub mod rewards;
pub mod policy;
pub mod datakit;
pub mod trainer;
pub mod evaluator;
pub mod experiment;
