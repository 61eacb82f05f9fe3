//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use groundnc::scorer::{train_scorers, TrainConfig};
use groundnc::{Condition, GroundedExample, ScorerSet, WorldModel, WorldSpec};

/// Default-shaped world with n-gram scorers and a small test split.
pub struct Fixture {
    pub world: Arc<WorldModel>,
    pub scorers: ScorerSet,
    pub test: Vec<GroundedExample>,
}

impl Fixture {
    pub fn new(spec: WorldSpec, train_size: usize, test_size: usize) -> Self {
        let world = Arc::new(WorldModel::build(&spec).expect("valid spec"));
        let train = world.sample_dataset(train_size, 1).expect("sampling");
        let test = world.sample_dataset(test_size, 2).expect("sampling");
        let scorers = train_scorers(&train, &TrainConfig::default(), world.vocab())
            .expect("training")
            .into_set();
        Self { world, scorers, test }
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.test
            .iter()
            .map(|ex| Condition::direct(ex.context.clone(), ex.document.clone(), ex.control.clone()))
            .collect()
    }
}
