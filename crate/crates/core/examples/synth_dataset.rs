//! Generate a small synthetic dataset and the labeled fixtures.

use guidesim::metrics::collision_offroad;
use guidesim::synth::{gen_dataset, gen_fixture, DatasetSpec, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (scenes, manifest) = gen_dataset(&DatasetSpec::default(), 20, 0)?;
    let agents: usize = scenes.iter().map(|s| s.agents.len()).sum();
    println!("{} scenes, {agents} agents, {} seeds in the manifest", scenes.len(), manifest.seeds.len());
    let (coll, off, scr) = collision_offroad(&scenes);
    println!("collision {coll:.3}, off-road {off:.3}, scene collision rate {scr:.3}");
    for kind in FixtureKind::ALL {
        let f = gen_fixture(kind, 0)?;
        println!(
            "{:12} {} agents, actor a{}, other {:?}, lanes {}",
            kind.name(),
            f.scenario.agents.len(),
            f.actor,
            f.other,
            f.scenario.driving_lanes().count()
        );
    }
    Ok(())
}
