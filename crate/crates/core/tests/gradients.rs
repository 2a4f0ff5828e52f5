mod common;

use common::{check_op, check_program, op_specs, scenario_for};
use guidesim::costdsl::builtin_library;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_tape_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for spec in op_specs() {
        let r = check_op(&spec, 100, 1e-4, &mut rng);
        assert_eq!(r.cases, 100);
        assert!(r.failures.is_empty(), "{}: {:?}", spec.name, &r.failures[..r.failures.len().min(3)]);
    }
}

#[test]
fn every_builtin_program_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in builtin_library() {
        let program = t.program();
        let scenario = scenario_for(&program).unwrap_or_else(|| panic!("{} resolves nowhere", t.name));
        let r = check_program(&program, &scenario, 100, 4, 1e-4, &mut rng);
        assert!(r.compared >= 100, "{}: only {} coordinates compared", t.name, r.compared);
        assert!(r.failures.is_empty(), "{}: {:?}", t.name, &r.failures[..r.failures.len().min(3)]);
    }
}
