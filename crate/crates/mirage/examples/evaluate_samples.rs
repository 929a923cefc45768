//! Scores a sample set against a reference set: uniqueness inside the
//! samples, novelty against the reference, a minimum-distance validity
//! screen, and the atom-count histogram.
//!
//! ```text
//! cargo run --release --example evaluate_samples -- [samples.jsonl reference.jsonl]
//! ```
//!
//! Without arguments a small model is trained and sampled in place.

use mirage::engine::{sample, train_epochs, TrainConfig, Trainer};
use mirage::io::{evaluate, load_dataset, synthetic_dataset, EvalSection};
use mirage::net::{ModelConfig, ModelParams};
use mirage::schedule::ScheduleConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (samples, reference, discards) = match args.as_slice() {
        [_, s, r] => {
            let samples = load_dataset(s.as_ref()).expect("samples load");
            let reference = load_dataset(r.as_ref()).expect("reference loads");
            (samples.crystals, reference.crystals, 0)
        }
        _ => generated_pair(),
    };

    let section = EvalSection::default();
    println!(
        "scoring {} samples against {} reference crystals \
         (cutoff {} A, bin {} A, min distance {} A)",
        samples.len(),
        reference.len(),
        section.cutoff,
        section.delta_d,
        section.min_dist
    );

    let report = evaluate(&samples, &reference, &section, discards).expect("metrics");
    println!("\n{}", serde_json::to_string_pretty(&report).expect("serializes"));
    println!(
        "\nuniqueness: fraction of samples whose fingerprint appears exactly once in the set"
    );
    println!("novelty: fraction whose fingerprint matches nothing in the reference");
    println!("validity_rate: fraction with all periodic pair distances above the threshold");
}

fn generated_pair() -> (Vec<mirage::crystal::Crystal>, Vec<mirage::crystal::Crystal>, usize) {
    let dataset = synthetic_dataset(150, 5);
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
        epochs: 10,
        learning_rate: 3e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let params = ModelParams::init(model, &mut rng).expect("init");
    let mut trainer = Trainer::new(params, train, ScheduleConfig::default(), 8).expect("trainer");
    println!("no files given; training a small model and sampling 80 crystals...");
    train_epochs(&mut trainer, &dataset).expect("training");
    let outcome =
        sample(&trainer.params, 80, trainer.n_m, &trainer.schedule, 1).expect("sampling");
    (outcome.crystals, dataset, outcome.discarded)
}
