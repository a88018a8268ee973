//! Prints shifted-domain top-1 accuracy for each component row, averaged over seeds.
//!
//! `cargo run --release --example ladder -- seeds=10 tau_vv=0.05 beta=0.6 ...`
//!
//! Keys other than `seeds`, `first`, `tau_vv`, `alpha`, `theta` and `quiet` go to the synthetic generator.

use tata::adaptation::{process_stream, Resources};
use tata::synthetic::{toggle_ladder, SyntheticBenchmark, SyntheticParams};
use tata::RunConfig;

fn main() -> tata::Result<()> {
    let mut seeds = 10u64;
    let mut first = 0u64;
    let mut base = RunConfig::default();
    let mut params = SyntheticParams::default();
    let mut quiet = false;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((arg.as_str(), ""));
        match k {
            "seeds" => seeds = v.parse().expect("seeds"),
            "first" => first = v.parse().expect("first"),
            "tau_vv" => base.tau_vv = v.parse().expect("tau_vv"),
            "alpha" => base.alpha = v.parse().expect("alpha"),
            "theta" => base.theta = v.parse().expect("theta"),
            "quiet" => quiet = true,
            _ => params.set(k, v)?,
        }
    }
    let ladder = toggle_ladder();
    let mut totals = vec![0.0; ladder.len()];
    for seed in first..first + seeds {
        let bench = SyntheticBenchmark::generate(params.clone(), seed, base.n_attr)?;
        let res = Resources {
            class_names: bench.class_names(),
            nouns: Some(&bench.nouns),
            attributes: Some(&bench.attributes),
            encoder: &bench.prompts,
        };
        let mut row = Vec::new();
        for (i, (_, toggles)) in ladder.iter().enumerate() {
            let config = RunConfig {
                toggles: *toggles,
                seed,
                ..base.clone()
            };
            let acc = process_stream(&bench.shifted, &res, &config)?
                .summary
                .top1_accuracy
                .unwrap_or(0.0);
            totals[i] += acc;
            row.push(format!("{:5.1}", 100.0 * acc));
        }
        if !quiet {
            println!("seed {seed:2}: {}", row.join(" "));
        }
    }
    let means: Vec<String> = totals
        .iter()
        .map(|t| format!("{:6.2}", 100.0 * t / seeds as f64))
        .collect();
    println!("{}", means.join(" "));
    Ok(())
}
