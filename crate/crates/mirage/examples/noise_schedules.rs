//! The three coupled noise schedules side by side: cosine retention for
//! the lattice, geometric spread for coordinates, linear mixing for
//! types, all sharing one step axis.
//!
//! ```text
//! cargo run --example noise_schedules [t_max]
//! ```

use mirage::schedule::{make_schedule, wrapped_normal_tv_to_uniform, ScheduleConfig};

fn main() {
    let t_max: usize = std::env::args()
        .nth(1)
        .map_or(12, |s| s.parse().expect("t_max is an integer"));
    let cfg = ScheduleConfig::default();
    let schedule = make_schedule(t_max, &cfg).expect("valid schedule");

    println!(
        "{:>3}  {:>9}  {:>11}  {:>8}  {:>8}  {:>11}",
        "t", "beta", "alpha_bar", "sigma", "q_beta", "q_alpha_bar"
    );
    for t in 1..=t_max {
        println!(
            "{:3}  {:9.6}  {:11.8}  {:8.5}  {:8.5}  {:11.8}",
            t,
            schedule.beta(t),
            schedule.alpha_bar(t),
            schedule.sigma(t),
            schedule.q_beta(t),
            schedule.q_alpha_bar(t)
        );
    }

    // Terminal states must be memoryless: the type chain mixes to the
    // exact uniform distribution because q_beta(T) is pinned to 1, and
    // the coordinate marginal is indistinguishable from uniform on the
    // torus once sigma_T is wide enough.
    println!("\nq_beta(T) = {} (exactly 1, so A_T carries no signal)", schedule.q_beta(t_max));
    let tv = wrapped_normal_tv_to_uniform(schedule.sigma(t_max));
    println!(
        "wrapped normal at sigma_T = {:.3}: total variation distance to uniform = {:.3e}",
        schedule.sigma(t_max),
        tv
    );
    println!(
        "lattice retention alpha_bar(T) = {:.3e} (prior is almost pure noise)",
        schedule.alpha_bar(t_max)
    );
}
