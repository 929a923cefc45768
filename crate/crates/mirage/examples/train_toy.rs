//! Trains a small model on a synthetic corpus of cubic crystals and
//! writes a checkpoint other examples (and the `sample` subcommand) can
//! pick up.
//!
//! ```text
//! cargo run --release --example train_toy -- [epochs] [checkpoint-path]
//! ```

use mirage::engine::{loss_balance_report, train_epochs, TrainConfig, Trainer};
use mirage::io::{save_checkpoint, synthetic_dataset};
use mirage::net::{ModelConfig, ModelParams};
use mirage::schedule::ScheduleConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(12, |s| s.parse().expect("epochs is an integer"));
    let out: PathBuf = std::env::args()
        .nth(2)
        .map_or_else(|| std::env::temp_dir().join("mirage-toy.ckpt.json"), Into::into);

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
        epochs,
        learning_rate: 3e-3,
        seed: 7,
        ..TrainConfig::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let params = ModelParams::init(model, &mut rng).expect("init");
    println!(
        "training {} parameters on {} crystals for {} epochs",
        params.n_params(),
        dataset.len(),
        epochs
    );

    let mut trainer = Trainer::new(params, train, ScheduleConfig::default(), 8).expect("trainer");
    let steps_per_epoch = dataset.len().div_ceil(trainer.config.batch_size);
    let clock = Instant::now();
    train_epochs(&mut trainer, &dataset).expect("training");

    let first = trainer.history.first().expect("history").total();
    for epoch in 0..epochs {
        if epoch % 4 == 0 || epoch + 1 == epochs {
            let span = &trainer.history[epoch * steps_per_epoch..(epoch + 1) * steps_per_epoch];
            let report = loss_balance_report(span).expect("report");
            println!(
                "  epoch {epoch:3}: loss {:9.4}  shares L {:4.1}% F {:4.1}% A {:4.1}%",
                report.total(),
                report.shares[0],
                report.shares[1],
                report.shares[2]
            );
        }
    }
    let tail = &trainer.history[trainer.history.len() - steps_per_epoch..];
    let last = loss_balance_report(tail).expect("report").total();
    println!(
        "{} steps in {:.1}s; loss {:.2} -> {:.2} ({:.1}% of start)",
        trainer.step,
        clock.elapsed().as_secs_f64(),
        first,
        last,
        100.0 * last / first
    );

    save_checkpoint(&trainer, &out).expect("save checkpoint");
    println!("checkpoint written to {}", out.display());
}
