//! Generates crystals from a checkpoint, or trains a quick model first
//! when no checkpoint is given. Atom counts vary from sample to sample
//! because placeholder slots materialize or vanish along the way.
//!
//! ```text
//! cargo run --release --example sample_crystals -- [checkpoint-path] [count]
//! ```

use mirage::engine::{sample, train_epochs, TrainConfig, Trainer};
use mirage::eval::atom_count_histogram;
use mirage::io::{load_checkpoint, synthetic_dataset, DatasetRecord};
use mirage::net::{ModelConfig, ModelParams};
use mirage::schedule::ScheduleConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_trainer() -> Trainer {
    let dataset = synthetic_dataset(200, 5);
    let model = ModelConfig {
        hidden_dim: 32,
        num_layers: 2,
        num_freqs: 8,
        n_types: 3,
        max_atoms: 16,
    };
    let train = TrainConfig {
        n_m: Some(10),
        t_max: 40,
        batch_size: 16,
        epochs: 12,
        learning_rate: 3e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let params = ModelParams::init(model, &mut rng).expect("init");
    let mut trainer = Trainer::new(params, train, ScheduleConfig::default(), 8).expect("trainer");
    println!("no checkpoint given; training a small model first...");
    train_epochs(&mut trainer, &dataset).expect("training");
    trainer
}

fn main() {
    let ckpt = std::env::args().nth(1);
    let count: usize = std::env::args()
        .nth(2)
        .map_or(100, |s| s.parse().expect("count is an integer"));

    let trainer = match ckpt {
        Some(path) => load_checkpoint(path.as_ref())
            .expect("checkpoint loads")
            .into_trainer(1)
            .expect("checkpoint restores"),
        None => quick_trainer(),
    };

    let outcome = sample(&trainer.params, count, trainer.n_m, &trainer.schedule, 1)
        .expect("sampling");
    println!(
        "{} trajectories: {} crystals, {} discarded (reduced to nothing or diverged)",
        count,
        outcome.crystals.len(),
        outcome.discarded
    );

    println!("\natom counts after reduction (started from {} slots each):", trainer.n_m);
    for (n, c) in atom_count_histogram(&outcome.crystals) {
        println!("  {n:2} atoms: {c:4}  {}", "#".repeat(c * 60 / count.max(1)));
    }

    println!("\nfirst three records in the output schema:");
    for (i, crystal) in outcome.crystals.iter().take(3).enumerate() {
        let record = DatasetRecord::from_crystal(crystal, Some(format!("sample-{i:06}")));
        println!("{}", serde_json::to_string(&record).expect("serializes"));
    }
}
