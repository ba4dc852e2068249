#![allow(dead_code)]

use std::path::Path;

use autoduct::agents::{PipelineRecipe, ProjectContext, Workspace};
use autoduct::dataset::{generate_synthetic, Dataset, SyntheticConfig};
use autoduct::neural_net::Activation;

pub fn small_dataset(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig { n, seed, ..SyntheticConfig::default() }).unwrap()
}

/// A recipe that trains in well under a second per member.
pub fn small_recipe(members: usize, seed: u64, epochs: usize) -> PipelineRecipe {
    let mut r = PipelineRecipe::baseline(members, seed);
    for m in &mut r.members {
        m.mlp.hidden_layers = 2;
        m.mlp.hidden_units = 16;
        m.mlp.activation = Activation::GELU;
        m.mlp.dropout_rate = 0.0;
    }
    r.train.epochs = epochs;
    r.train.patience = epochs;
    r.train.batch_size = 64;
    r.train.learning_rate = 5e-3;
    r
}

pub fn workspace(root: &Path, data: &Dataset) -> ProjectContext {
    Workspace::init(root, "test-run", data).unwrap()
}
