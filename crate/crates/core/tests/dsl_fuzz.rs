mod common;

use common::{mutate, MUTATIONS};
use guidesim::costdsl::{parse, print, random_program};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn print_parse_round_trip(seed in any::<u64>(), agents in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_program(&mut rng, agents);
        let text = print(&p);
        let q = parse(&text).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(print(&q), text);
    }

    #[test]
    fn mutations_are_rejected_with_a_location(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = print(&random_program(&mut rng, 3));
        let lines = text.lines().count();
        for m in MUTATIONS {
            if let Some(bad) = mutate(&text, m, &mut rng) {
                let e = parse(&bad).expect_err(m);
                prop_assert!(e.line >= 1 && e.col >= 1 && e.line <= lines + 1, "{} {:?}", m, e);
            }
        }
    }

    #[test]
    fn arbitrary_text_never_panics(text in "[()a-z0-9_ .;\n-]{0,200}") {
        let _ = parse(&text);
    }
}
