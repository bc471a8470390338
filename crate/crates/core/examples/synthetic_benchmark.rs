//! Runs Gaussian alignment on synthetic instances and reports how often the
//! covariance refinement changes retrieval accuracy.
//!
//! ```text
//! cargo run --release --example synthetic_benchmark -- \
//!     [n] [d] [sigma] [mode] [seeds] [batch] [iters] [epochs] [sinkhorn-iters]
//! ```

use std::time::Instant;

use gauss_align::aligner::{align_gaussian, AlignConfig};
use gauss_align::synthgen::{generate, score_map, VarianceMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let n: usize = arg(0, "1000").parse()?;
    let d: usize = arg(1, "20").parse()?;
    let sigma: f64 = arg(2, "0.01").parse()?;
    let mode: VarianceMode = arg(3, "informative").parse()?;
    let seeds: u64 = arg(4, "3").parse()?;
    let cfg = AlignConfig {
        initial_batch: arg(5, "125").parse()?,
        initial_iters: arg(6, "256").parse()?,
        epochs: arg(7, "4").parse()?,
        sinkhorn_max_iter: arg(8, "200").parse()?,
        train_top_k: n,
        convex_sample: n,
        ..Default::default()
    };

    let (mut wins, mut losses) = (0, 0);
    for seed in 0..seeds {
        let inst = generate(n, d, sigma, mode, seed)?;
        let start = Instant::now();
        let result = align_gaussian(&inst.source, &inst.target, &AlignConfig { seed, ..cfg.clone() })?;
        let elapsed = start.elapsed().as_secs_f64();
        let stage1 = score_map(result.means_only_map.as_ref().expect("refinement run"), &inst)?;
        let stage2 = score_map(&result.map, &inst)?;
        if stage2.match_accuracy > stage1.match_accuracy {
            wins += 1;
        } else if stage2.match_accuracy < stage1.match_accuracy {
            losses += 1;
        }
        println!(
            "seed {seed}: stage1 acc {:.4} err {:.4} | stage2 acc {:.4} err {:.4} | {elapsed:.1}s",
            stage1.match_accuracy, stage1.map_error, stage2.match_accuracy, stage2.map_error
        );
    }
    println!("stage 2 better on {wins}, worse on {losses} of {seeds} seeds");
    Ok(())
}
