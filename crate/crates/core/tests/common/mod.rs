#![allow(dead_code)]

use std::sync::Arc;

use groundnc::data::Turn;
use groundnc::seed::rng_for;
use groundnc::{Condition, WorldModel, WorldSpec};
use rand::Rng;

/// Small enumerable world number `i`; sizes vary with `i`.
pub fn small_world(i: u64) -> Arc<WorldModel> {
    let mut rng = rng_for(i, "test-world-spec");
    let spec = WorldSpec {
        vocab_size: rng.gen_range(2..=6),
        num_documents: rng.gen_range(1..=4),
        num_contexts: rng.gen_range(1..=4),
        max_context_len: 2,
        max_doc_len: 3,
        max_response_len: rng.gen_range(1..=4),
        grounding_strength: rng.gen_range(0.0..=1.0),
        identifying_contexts: false,
        seed: 1000 + i,
    };
    Arc::new(WorldModel::build(&spec).expect("valid spec"))
}

/// Every (context, document) pair with positive probability.
pub fn supported_conditions(world: &WorldModel) -> Vec<Condition> {
    let mut out = Vec::new();
    for (c, ctx) in world.contexts().iter().enumerate() {
        for (d, doc) in world.documents().iter().enumerate() {
            if world.retrieval_posterior()[c][d] > 0.0 {
                out.push(Condition::direct(vec![Turn::user(ctx.clone())], doc.clone(), None));
            }
        }
    }
    out
}

/// `n` conditions drawn uniformly over contexts and documents.
pub fn random_conditions(world: &WorldModel, n: usize, seed: u64) -> Vec<Condition> {
    let mut rng = rng_for(seed, "test-conditions");
    (0..n)
        .map(|_| {
            let c = rng.gen_range(0..world.contexts().len());
            let d = rng.gen_range(0..world.documents().len());
            Condition::direct(
                vec![Turn::user(world.contexts()[c].clone())],
                world.documents()[d].clone(),
                None,
            )
        })
        .collect()
}
