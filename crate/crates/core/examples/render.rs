//! Write SVG drawings of each fixture kind.

use guidesim::render::{render_svg, RenderOptions};
use guidesim::synth::{gen_fixture, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "renders".into());
    std::fs::create_dir_all(&dir)?;
    for kind in FixtureKind::ALL {
        let s = gen_fixture(kind, 0)?.scenario;
        let opts = RenderOptions {
            comment: Some(format!("fixture {}", kind.name())),
            ..RenderOptions::default()
        };
        let path = format!("{dir}/{}.svg", kind.name());
        std::fs::write(&path, render_svg(&s, &opts))?;
        println!("wrote {path}");
    }
    Ok(())
}
