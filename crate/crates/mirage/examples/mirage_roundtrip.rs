//! Mirage padding mechanics: pad a crystal to a fixed slot count,
//! inspect which slots are real, and strip the padding back out.
//!
//! ```text
//! cargo run --example mirage_roundtrip
//! ```

use mirage::crystal::{infuse_with, mirage_mask, reduce, Crystal, MirageInit};
use mirage::engine::prior_state;
use mirage::linalg::Mat3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let crystal = Crystal::new(
        Mat3::cubic(4.6),
        vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.25, 0.75, 0.5]],
        vec![1, 2, 2],
    )
    .expect("valid crystal");
    println!(
        "original: {} atoms, types {:?}",
        crystal.n_atoms(),
        crystal.atom_types
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for init in [MirageInit::Uniform, MirageInit::Center] {
        let expanded = infuse_with(&crystal, 8, init, &mut rng).expect("fits in 8 slots");
        println!(
            "\ninfused ({init:?}): {} slots, {} real",
            expanded.n_slots(),
            expanded.n_real()
        );
        for (i, (f, t)) in expanded
            .frac_coords
            .iter()
            .zip(&expanded.atom_types)
            .enumerate()
        {
            let role = if *t == 0 { "mirage" } else { "real" };
            println!(
                "  slot {i}: type {t} ({role:<6}) at [{:.3}, {:.3}, {:.3}]",
                f[0], f[1], f[2]
            );
        }
        println!("  real-slot mask: {:?}", mirage_mask(&expanded));

        let back = reduce(&expanded).expect("real atoms remain");
        assert_eq!(back, crystal);
        println!("  reduce(infuse(c)) == c  (bitwise)");
    }

    // Generation starts every trajectory from slots drawn uniformly over
    // all classes including mirage, so the number of real atoms is
    // random from the first step. With 100 real species and 25 slots the
    // chance that no slot starts as mirage is (100/101)^25.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 20_000;
    let mut all_real = 0;
    for _ in 0..draws {
        let (_, _, a) = prior_state(25, 101, &mut rng);
        if a.iter().all(|&t| t != 0) {
            all_real += 1;
        }
    }
    println!(
        "\nprior trajectories starting with zero mirage slots: {:.3} observed, {:.3} closed form",
        all_real as f64 / draws as f64,
        (100.0f64 / 101.0).powi(25)
    );
}
