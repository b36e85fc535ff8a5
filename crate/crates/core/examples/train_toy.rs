//! Trains on the built-in composition graph and prints filtered metrics.
//!
//! cargo run --release -p hyperkg --example train_toy [seed]

use hyperkg::data::{Dataset, FilterIndex, Split};
use hyperkg::eval::{evaluate, ModelScorer, TiePolicy};
use hyperkg::model::ModelConfig;
use hyperkg::toy;
use hyperkg::train::{train_with, TrainConfig};

fn main() -> hyperkg::Result<()> {
    let raw = toy::composition_kg();
    let dataset = Dataset::build(&raw.train, &raw.valid, &raw.test).add_reciprocals()?;
    let model = ModelConfig {
        entity_dim: 32,
        relation_dim: 16,
        filter_length: 3,
        num_filters: 8,
        input_dropout: 0.0,
        feature_map_dropout: 0.0,
        hidden_dropout: 0.0,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        learning_rate: 0.01,
        lr_decay: 1.0,
        batch_size: 16,
        epochs: 200,
        label_smoothing: 0.0,
        seed: std::env::args()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(1),
        valid_every: 0,
    };
    let start = std::time::Instant::now();
    let out = train_with(&dataset, &model, &config, |e| {
        if e.epoch % 20 == 0 {
            println!("{}", e.log_line());
        }
    })?;
    let filter = FilterIndex::build(&dataset);
    let scorer = ModelScorer::new(&out.params, &model);
    for split in [Split::Train, Split::Test] {
        let (r, _) = evaluate(&scorer, &dataset, split, &filter, TiePolicy::Optimistic)?;
        println!("{}:\n{}", split.name(), r.table());
    }
    println!("elapsed {:?}", start.elapsed());
    Ok(())
}
