//! The sampler against an analytic denoiser, with and without guidance.

use guidesim::diffusion::{sample, GaussianOracle, Guidance, GuidanceConfig, NoiseSchedule, Quadratic};

fn mean(x: &[Vec<f64>]) -> f64 {
    let n = x.iter().map(Vec::len).sum::<usize>() as f64;
    x.iter().flatten().sum::<f64>() / n
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mu, s, n, k) = (1.0, 1.0, 256, 8);
    let oracle = GaussianOracle {
        mean: vec![vec![mu; k]; n],
        std: s,
    };
    let schedule = NoiseSchedule::default();
    let (x, _) = sample(&oracle, &schedule, 0, None)?;
    println!("unguided mean {:.4} (target {mu})", mean(&x));
    let target = 3.0;
    let q = Quadratic {
        target: vec![vec![target; k]; n],
        weight: 1.0,
    };
    for lambda in [0.05, 0.1, 0.2] {
        let g = Guidance {
            config: GuidanceConfig {
                lambda,
                ..Default::default()
            },
            objective: &q,
        };
        let (x, stats) = sample(&oracle, &schedule, 0, Some(&g))?;
        let post = (mu / (s * s) + 2.0 * lambda * target) / (1.0 / (s * s) + 2.0 * lambda);
        println!(
            "lambda {lambda}: mean {:.4}, posterior {post:.4}, max |guidance| {:.3}",
            mean(&x),
            stats.max_abs_guidance
        );
    }
    Ok(())
}
