//! Project points onto a lane centerline and map them back.

use guidesim::frenet::{FrenetCoord, RefPath};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pts: Vec<[f64; 2]> = (0..=90)
        .map(|i| {
            let th = (i as f64).to_radians();
            [40.0 * th.sin(), 40.0 * (1.0 - th.cos())]
        })
        .collect();
    let path = RefPath::from_points(&pts)?;
    println!("path length {:.3} m (quarter circle {:.3} m)", path.length(), 20.0 * std::f64::consts::PI);
    for p in [[10.0, 0.5], [30.0, 12.0], [20.0, 10.0]] {
        let c = path.project(p);
        let back = path.to_cartesian(c)?;
        println!("{p:?} -> s {:.3}, d {:+.3} -> ({:.3}, {:.3})", c.s, c.d, back[0], back[1]);
    }
    let q = path.to_cartesian(FrenetCoord { s: 15.0, d: -1.85 })?;
    println!("right edge of a 3.7 m lane at s = 15: ({:.3}, {:.3})", q[0], q[1]);
    Ok(())
}
