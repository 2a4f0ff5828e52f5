mod common;

use common::scenario_for;
use guidesim::costdsl::{builtin_library, future_trajectories, gradient, EvalContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn builtins_are_finite_on_perturbed_futures() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in builtin_library() {
        let p = t.program();
        let s = scenario_for(&p).unwrap();
        let ctx0 = EvalContext::from_scenario(&p, &s).unwrap();
        for _ in 0..20 {
            let scale = rng.gen_range(0.0..30.0);
            let trajs = future_trajectories(&s)
                .into_iter()
                .map(|tr| tr.into_iter().map(|q| [q[0] + scale * rng.gen_range(-1.0..1.0), q[1] + scale * rng.gen_range(-1.0..1.0)]).collect())
                .collect();
            let ctx = EvalContext { trajectories: trajs, ..ctx0.clone() };
            let (v, g) = gradient(&p, &ctx).unwrap();
            assert!(v.total.is_finite() && v.total >= 0.0, "{}: {}", t.name, v.total);
            assert!(g.iter().flatten().flatten().all(|x| x.is_finite()), "{}", t.name);
        }
    }
}
