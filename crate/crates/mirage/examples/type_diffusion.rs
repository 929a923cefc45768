//! Categorical type diffusion: the forward chain forgets the starting
//! class at a controlled rate, and the exact posterior runs it
//! backwards. The mirage class takes part like any other, which is what
//! lets atoms appear and disappear.
//!
//! ```text
//! cargo run --example type_diffusion
//! ```

use mirage::categorical::{forward_marginal, type_backward_step, type_posterior, TypeDistribution};
use mirage::schedule::{make_schedule, ScheduleConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let k_total = 4; // mirage + three real species
    let t_max = 10;
    let schedule = make_schedule(t_max, &ScheduleConfig::default()).expect("schedule");

    println!("forward marginal of a type-2 atom (classes 0..=3, class 0 = mirage):");
    for t in [1, 3, 5, 8, t_max] {
        let marginal = forward_marginal(2, schedule.q_alpha_bar(t), k_total).expect("marginal");
        let cells: Vec<String> = marginal.probs().iter().map(|p| format!("{p:.3}")).collect();
        println!("  t {t:2}: [{}]", cells.join(", "));
    }
    println!("  at t = {t_max} every class sits at 1/{k_total}: the chain has no memory left.");

    // The reverse direction needs a belief about the clean type. With a
    // confident belief the posterior snaps back quickly; with a uniform
    // one it stays spread out.
    let t = 5;
    let a_t = 3;
    let confident = TypeDistribution::new(vec![0.01, 0.01, 0.97, 0.01]).expect("distribution");
    let vague = TypeDistribution::uniform(k_total);
    let p_conf = type_posterior(a_t, &confident, t, &schedule).expect("posterior");
    let p_vague = type_posterior(a_t, &vague, t, &schedule).expect("posterior");
    println!("\nposterior of a_(t-1) given a_t = {a_t} at t = {t}:");
    println!("  confident a0 belief: {:?}", rounded(p_conf.probs()));
    println!("  uniform a0 belief:   {:?}", rounded(p_vague.probs()));

    // A full backward chain with logits pinned on class 2 lands there
    // almost always, regardless of where the prior started.
    let logits = [0.0, 0.0, 6.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let runs = 10_000;
    let mut hits = 0;
    for _ in 0..runs {
        let mut a = rand::Rng::random_range(&mut rng, 0..k_total);
        for t in (1..=t_max).rev() {
            a = type_backward_step(a, &logits, t, &schedule, &mut rng).expect("step");
        }
        if a == 2 {
            hits += 1;
        }
    }
    println!(
        "\nbackward chains guided toward class 2: {:.1}% of {runs} runs ended there",
        100.0 * hits as f64 / runs as f64
    );
}

fn rounded(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| (p * 1000.0).round() / 1000.0).collect()
}
