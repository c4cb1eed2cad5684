//! Graph-attention communication for multi-agent policy gradients, regularized by
//! the normalized tensor nuclear norm of the attention tensor.

pub mod adjacency;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod run;
pub mod selftest;
pub mod training;
