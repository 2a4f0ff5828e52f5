mod common;

use common::{arc_path, max_round_trip_error, straight_path};
use guidesim::frenet::FrenetCoord;
use proptest::prelude::*;

proptest! {
    #[test]
    fn straight_round_trip(th in -3.1f64..3.1, s in 0.5f64..99.5, d in -30.0f64..30.0) {
        let b = [100.0 * th.cos(), 100.0 * th.sin()];
        let path = straight_path([0.0, 0.0], b, 4);
        let p = [s * th.cos() - d * th.sin(), s * th.sin() + d * th.cos()];
        prop_assert!(max_round_trip_error(&path, &[p]) < 1e-9);
        let c = path.project(p);
        prop_assert!((c.s - s).abs() < 1e-9 && (c.d - d).abs() < 1e-9);
    }

    #[test]
    fn arc_round_trip_error_is_bounded_by_segment_turn(th in 0.05f64..1.45, d in -25.0f64..25.0) {
        // a polyline arc has piecewise-constant normals; outside a vertex the
        // round trip loses at most |d| times the turn between segments
        let (r, segments) = (50.0, 400);
        let turn = 1.5 / segments as f64;
        let path = arc_path(r, 1.5, segments);
        let p = [(r + d) * th.cos(), (r + d) * th.sin()];
        prop_assert!(max_round_trip_error(&path, &[p]) <= d.abs() * turn + 1e-9);
    }
}

#[test]
fn left_of_travel_is_positive() {
    let path = straight_path([0.0, 0.0], [10.0, 0.0], 2);
    assert_eq!(path.project([3.0, 2.0]), FrenetCoord { s: 3.0, d: 2.0 });
    assert_eq!(path.project([3.0, -2.0]), FrenetCoord { s: 3.0, d: -2.0 });
    assert!(path.to_cartesian(FrenetCoord { s: 11.0, d: 0.0 }).is_err());
}
