//! Metrics of a constant-velocity rollout against the recorded futures.

use guidesim::metrics::evaluate;
use guidesim::scene::Scenario;
use guidesim::synth::{gen_dataset, DatasetSpec};

fn constant_velocity(s: &Scenario) -> Scenario {
    let mut out = s.clone();
    let t0 = s.t_now;
    for a in &mut out.agents {
        let (p, q) = (a.states[t0 - 1], a.states[t0]);
        for (k, st) in a.states[t0..].iter_mut().enumerate() {
            st.x = q.x + (q.x - p.x) * k as f64;
            st.y = q.y + (q.y - p.y) * k as f64;
            st.heading = q.heading;
        }
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (real, _) = gen_dataset(&DatasetSpec::default(), 30, 0)?;
    let cv: Vec<Scenario> = real.iter().map(constant_velocity).collect();
    println!("recorded vs itself:\n{}", evaluate(&real, &real)?.table());
    println!("constant velocity:\n{}", evaluate(&real, &cv)?.table());
    Ok(())
}
