//! Thin command-line front end over the library: `train`, `sample`,
//! `eval`, and `verify`. All logic lives in the library crate; this
//! binary only parses flags, wires files to functions, and maps
//! failures to exit codes (2 for usage errors via the parser, 1 for
//! anything that fails while running).

use anyhow::Context;
use clap::{Parser, Subcommand};
use mirage::engine::{loss_balance_report, sample, train_epochs, Trainer};
use mirage::io::{
    load_checkpoint, load_config, load_dataset, read_sample_meta, save_checkpoint, write_report,
    write_samples, EvalSection, LoadedDataset,
};
use mirage::net::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mirage", version, about = "Joint diffusion over periodic crystals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSONL dataset and write a checkpoint.
    Train {
        /// JSON run configuration; `{}` uses every default.
        #[arg(long)]
        config: PathBuf,
        /// JSONL dataset, one crystal per line.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate crystals from a checkpoint.
    Sample {
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of trajectories to run.
        #[arg(long, default_value_t = 100)]
        num: usize,
        /// Root seed; equal seeds give byte-identical output files.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample JSONL output path; metadata lands beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated samples against a reference dataset.
    Eval {
        /// Sample JSONL, e.g. the output of `sample`.
        #[arg(long)]
        samples: PathBuf,
        /// Reference JSONL the novelty leg compares against.
        #[arg(long)]
        reference: PathBuf,
        /// JSON report output path; a CSV histogram lands beside it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the property suite and print one line per check.
    Verify,
}

fn load_logged(path: &Path, what: &str) -> anyhow::Result<LoadedDataset> {
    let loaded = load_dataset(path).with_context(|| format!("loading {what}"))?;
    for r in &loaded.rejected {
        log::warn!("{}:{} rejected: {}", path.display(), r.line, r.reason);
    }
    if !loaded.rejected.is_empty() {
        eprintln!(
            "{}: {} line(s) rejected, {} crystal(s) loaded",
            path.display(),
            loaded.rejected.len(),
            loaded.crystals.len()
        );
    }
    Ok(loaded)
}

fn run_train(config: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let run = load_config(config).context("loading run configuration")?;
    let dataset = load_logged(data, "training data")?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let params = ModelParams::init(run.model, &mut rng).context("initializing parameters")?;
    let mut trainer = Trainer::new(params, run.train, run.schedule, dataset.max_atoms())
        .context("building trainer")?;
    train_epochs(&mut trainer, &dataset.crystals).context("training")?;
    save_checkpoint(&trainer, out).context("saving checkpoint")?;
    let balance = loss_balance_report(&trainer.history).context("summarizing loss history")?;
    println!(
        "trained {} steps on {} crystals; mean loss {:.4} \
         (lattice {:.1}%, coords {:.1}%, types {:.1}%); checkpoint at {}",
        trainer.step,
        dataset.crystals.len(),
        balance.total(),
        balance.shares[0],
        balance.shares[1],
        balance.shares[2],
        out.display()
    );
    Ok(())
}

fn run_sample(ckpt: &Path, num: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint(ckpt).context("loading checkpoint")?;
    let trainer = checkpoint
        .into_trainer(1)
        .context("restoring model state")?;
    let outcome = sample(&trainer.params, num, trainer.n_m, &trainer.schedule, seed)
        .context("sampling")?;
    write_samples(out, &outcome, seed).context("writing samples")?;
    println!(
        "produced {} crystals ({} all-mirage trajectories discarded) at {}",
        outcome.crystals.len(),
        outcome.discarded,
        out.display()
    );
    Ok(())
}

fn run_eval(samples: &Path, reference: &Path, report_path: &Path) -> anyhow::Result<()> {
    let sample_set = load_logged(samples, "samples")?;
    let reference_set = load_logged(reference, "reference data")?;
    let discards = read_sample_meta(samples).map_or(0, |m| m.discarded);
    let report = mirage::io::evaluate(
        &sample_set.crystals,
        &reference_set.crystals,
        &EvalSection::default(),
        discards,
    )
    .context("computing metrics")?;
    write_report(&report, report_path).context("writing report")?;
    println!(
        "uniqueness {:.4}, novelty {:.4}, validity {:.4} over {} samples; report at {}",
        report.uniqueness,
        report.novelty,
        report.validity_rate,
        sample_set.crystals.len(),
        report_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, data, out } => run_train(config, data, out),
        Command::Sample {
            ckpt,
            num,
            seed,
            out,
        } => run_sample(ckpt, *num, *seed, out),
        Command::Eval {
            samples,
            reference,
            report,
        } => run_eval(samples, reference, report),
        Command::Verify => {
            let reports = mirage::verify::run_all(0);
            print!("{}", mirage::verify::render(&reports));
            return if mirage::verify::all_passed(&reports) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
