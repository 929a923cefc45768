//! Walks the configuration surface at toy scale: the slot-count axis,
//! the placeholder-definition variants, and the loss-weight balance.
//! Each cell trains briefly, samples, and reports the same metrics, so
//! rows are directly comparable.
//!
//! ```text
//! cargo run --release --example ablation_grid
//! ```

use mirage::crystal::MirageInit;
use mirage::engine::{loss_balance_report, sample, train_epochs, TrainConfig, Trainer};
use mirage::io::{evaluate, synthetic_dataset, EvalSection};
use mirage::net::{ModelConfig, ModelParams};
use mirage::schedule::ScheduleConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run_cell(dataset: &[mirage::crystal::Crystal], cfg: TrainConfig) -> (Trainer, String) {
    let model = ModelConfig {
        hidden_dim: 16,
        num_layers: 1,
        num_freqs: 8,
        n_types: 3,
        max_atoms: 16,
    };
    let data_max = dataset.iter().map(|c| c.n_atoms()).max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(model, &mut rng).expect("init");
    let mut trainer = Trainer::new(params, cfg, ScheduleConfig::default(), data_max)
        .expect("trainer");
    train_epochs(&mut trainer, dataset).expect("training");
    let outcome =
        sample(&trainer.params, 40, trainer.n_m, &trainer.schedule, 2).expect("sampling");
    let report = evaluate(
        &outcome.crystals,
        dataset,
        &EvalSection::default(),
        outcome.discarded,
    )
    .expect("metrics");
    let row = format!(
        "n {:2}  unique {:.2}  novel {:.2}  valid {:.2}  counts {:?}",
        outcome.crystals.len(),
        report.uniqueness,
        report.novelty,
        report.validity_rate,
        report.histogram.keys().collect::<Vec<_>>()
    );
    (trainer, row)
}

fn main() {
    let dataset = synthetic_dataset(60, 9);
    let data_max = dataset.iter().map(|c| c.n_atoms()).max().unwrap();
    let base = TrainConfig {
        t_max: 12,
        batch_size: 16,
        epochs: 3,
        learning_rate: 3e-3,
        seed: 13,
        ..TrainConfig::default()
    };

    println!("slot-count axis (padding target per crystal):");
    for n_m in [Some(data_max), Some(data_max + 4), Some(data_max + 8)] {
        let cfg = TrainConfig { n_m, ..base.clone() };
        let (_, row) = run_cell(&dataset, cfg);
        println!("  n_m {:2}: {row}", n_m.unwrap());
    }

    println!("\nplaceholder definition (initial position x coordinate-loss masking):");
    for (init, masked) in [
        (MirageInit::Uniform, true),
        (MirageInit::Uniform, false),
        (MirageInit::Center, true),
        (MirageInit::Center, false),
    ] {
        let cfg = TrainConfig {
            mirage_init: init,
            mask_mirage_coords: masked,
            ..base.clone()
        };
        let (_, row) = run_cell(&dataset, cfg);
        let mask_label = if masked { "masked" } else { "unmasked" };
        println!("  {init:?} / {mask_label:<8}: {row}");
    }

    println!("\nloss-weight balance (share of total attributed to the type term):");
    for factor in [1.0, 2.0, 4.0] {
        let cfg = TrainConfig {
            kappa_types: factor,
            ..base.clone()
        };
        let (trainer, _) = run_cell(&dataset, cfg);
        let report = loss_balance_report(&trainer.history).expect("report");
        println!(
            "  kappa_types {factor:3.1}: shares L {:5.2}% F {:5.2}% A {:5.2}%",
            report.shares[0], report.shares[1], report.shares[2]
        );
    }
}
