//! Conditional simulation and program guidance with a trained denoiser.
//!
//! `cargo run --release --example guided_simulation -- <ckpt>`; without a
//! checkpoint a small model is trained first.

use guidesim::costdsl::builtin;
use guidesim::denoiser::{Denoiser, DenoiserConfig};
use guidesim::diffusion::{build_training_set, fit_basis, simulate, train, SimConfig, TrainConfig};
use guidesim::llmguide::success_checker;
use guidesim::metrics::ade_fde_scenarios;
use guidesim::synth::{gen_dataset, gen_fixture, DatasetSpec, FixtureKind};

fn quick_model() -> Result<Denoiser, Box<dyn std::error::Error>> {
    let (data, _) = gen_dataset(&DatasetSpec::default(), 300, 0)?;
    let base = DenoiserConfig::desk();
    let (pca, sigma_data) = fit_basis(&data, base.k)?;
    let config = DenoiserConfig { sigma_data, ..base };
    let items = build_training_set(&data, &pca, &config)?;
    let mut den = Denoiser::new(config, pca, 0);
    let cfg = TrainConfig {
        steps: 1000,
        ..TrainConfig::default()
    };
    train(&mut den, &items, &cfg, |_, _| {})?;
    Ok(den)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let den = match std::env::args().nth(1) {
        Some(p) => Denoiser::load(std::path::Path::new(&p))?,
        None => quick_model()?,
    };
    // history plus recorded endpoints
    let (held, _) = gen_dataset(&DatasetSpec::default(), 5, 1_000_000)?;
    for (i, s) in held.iter().enumerate() {
        let cfg = SimConfig {
            seed: i as u64,
            endpoints: s.agents.iter().map(|a| a.states.last().map(|st| st.position())).collect(),
            ..SimConfig::default()
        };
        let (sim, report) = simulate(&den, s, None, &cfg)?;
        let (ade, fde) = ade_fde_scenarios(&sim, s)?;
        println!("scene {i}: ADE {ade:.3} FDE {fde:.3}, {} plan(s)", report.plans);
    }
    // behavior programs on labeled fixtures
    for (kind, name) in [(FixtureKind::CutIn, "cut_in"), (FixtureKind::Rightmost, "rightmost")] {
        let program = builtin(name).unwrap().program();
        let check = success_checker(kind)?;
        let mut hits = 0;
        for seed in 0..5 {
            let f = gen_fixture(kind, 1000 + seed)?;
            let cfg = SimConfig {
                seed,
                ..SimConfig::default()
            };
            let (sim, _) = simulate(&den, &f.scenario, Some(&program), &cfg)?;
            hits += check(&sim).success as usize;
        }
        println!("{name}: {hits}/5 fixtures succeed");
    }
    Ok(())
}
