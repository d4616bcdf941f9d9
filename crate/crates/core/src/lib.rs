pub mod attention;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod seed;
pub mod tensor;
pub mod train;
