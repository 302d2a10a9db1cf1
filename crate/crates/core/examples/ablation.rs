//! Trains with and without the image reward over several seeds and prints held-out results.
//!
//! `cargo run --release -p mirg-core --example ablation -- [seeds] [iterations]`

use mirg_core::env::{train_loop, EnvConfig};
use mirg_core::grpo::GrpoConfig;

fn main() {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let env = EnvConfig::default();
    for seed in 0..seeds {
        let mut row = format!("seed {seed}:");
        for image_reward in [true, false] {
            let cfg = GrpoConfig {
                seed,
                iterations,
                image_reward,
                ..GrpoConfig::default()
            };
            let report = train_loop(&cfg, &env).expect("default config trains");
            let (i, f) = (&report.initial_eval, &report.final_eval);
            row += &format!(
                "  [img={image_reward}] acc {:.3}->{:.3} greedy {:.3}->{:.3} r_img {:.3} r_obj {:.3}",
                i.accuracy, f.accuracy, i.greedy_accuracy, f.greedy_accuracy, f.mean_r_img, f.mean_r_obj
            );
        }
        println!("{row}");
    }
}
