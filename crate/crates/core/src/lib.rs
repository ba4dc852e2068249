pub mod dataset;
pub mod rng;
pub mod stats;
pub mod neural_net;
pub mod ensemble;
pub mod evaluation;
pub mod hpo;
pub mod agents;
pub mod cli;
