//! Contract checks for the command-line surface: subcommand wiring,
//! exit codes, and reproducibility of the files it writes.

use mirage::engine::TrainConfig;
use mirage::io::{load_dataset, synthetic_dataset, write_crystals, RunConfig};
use mirage::net::ModelConfig;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mirage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mirage"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("temp paths are valid unicode")
}

#[test]
fn verify_exits_zero_with_a_line_per_property() {
    let out = mirage(&["verify"]);
    assert!(
        out.status.success(),
        "verify failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = String::from_utf8(out.stdout).expect("utf8");
    let ok_lines = text.lines().filter(|l| l.starts_with("ok ")).count();
    assert_eq!(ok_lines, 13, "one ok line per property:\n{text}");
    assert!(text.trim_end().ends_with("13 checks, 0 failed"), "{text}");
}

#[test]
fn unknown_flags_exit_two_with_usage_text() {
    let out = mirage(&["sample", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "no usage text in: {err}");

    let out = mirage(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("data.jsonl");
    write_crystals(&data, &synthetic_dataset(20, 4), "data").expect("write dataset");

    let config = dir.path().join("run.json");
    let run = RunConfig {
        model: ModelConfig {
            hidden_dim: 16,
            num_layers: 1,
            num_freqs: 8,
            n_types: 3,
            max_atoms: 16,
        },
        train: TrainConfig {
            t_max: 8,
            batch_size: 10,
            epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    fs::write(&config, serde_json::to_vec(&run).expect("config json")).expect("write config");

    let ckpt = dir.path().join("model.ckpt.json");
    let out = mirage(&[
        "train",
        "--config",
        path_str(&config),
        "--data",
        path_str(&data),
        "--out",
        path_str(&ckpt),
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(ckpt.exists());

    // Equal seeds must give byte-identical sample files.
    let s1 = dir.path().join("s1.jsonl");
    let s2 = dir.path().join("s2.jsonl");
    for s in [&s1, &s2] {
        let out = mirage(&[
            "sample",
            "--ckpt",
            path_str(&ckpt),
            "--num",
            "10",
            "--seed",
            "7",
            "--out",
            path_str(s),
        ]);
        assert!(
            out.status.success(),
            "sample failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        fs::read(&s1).expect("bytes"),
        fs::read(&s2).expect("bytes"),
        "seeded sampling must be reproducible"
    );

    // Sample output feeds straight back into the dataset loader.
    let reloaded = load_dataset(&s1).expect("samples parse as a dataset");
    assert!(reloaded.rejected.is_empty());
    assert!(!reloaded.crystals.is_empty());

    // Evaluating samples against themselves leaves nothing novel.
    let report_path = dir.path().join("self.report.json");
    let out = mirage(&[
        "eval",
        "--samples",
        path_str(&s1),
        "--reference",
        path_str(&s1),
        "--report",
        path_str(&report_path),
    ]);
    assert!(
        out.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).expect("report"))
            .expect("report json");
    assert_eq!(report["novelty"].as_f64(), Some(0.0));
    assert_eq!(report["metric"], "U&N");
    assert!(report_path.with_extension("hist.csv").exists());
}
