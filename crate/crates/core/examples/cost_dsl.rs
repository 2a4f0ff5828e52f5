//! Parse a cost program, evaluate it on a fixture and inspect gradients.

use guidesim::costdsl::{builtin, evaluate, gradient, parse, print, EvalContext};
use guidesim::synth::{gen_fixture, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = gen_fixture(FixtureKind::CutIn, 0)?;
    let gold = builtin("cut_in").unwrap().program();
    println!("{}", print(&gold));
    let ctx = EvalContext::from_scenario(&gold, &f.scenario)?;
    let value = evaluate(&gold, &ctx)?;
    println!("ground-truth future: total {:.4}", value.total);
    for (name, v) in &value.terms {
        println!("  {name:8} {v:.4}");
    }
    let (_, g) = gradient(&gold, &ctx)?;
    let norm: f64 = g[0].iter().map(|p| p[0].hypot(p[1])).sum();
    println!("gradient mass on a0: {norm:.4}");

    let src = "(refpath r (current_lane a0))\n(term fast 1.0 (mean_t (sq (relu (sub 25.0 (speed a0))))))";
    let p = parse(src)?;
    println!("{:.3}", evaluate(&p, &EvalContext::from_scenario(&p, &f.scenario)?)?.total);
    match parse("(term bad 1.0\n  (mean_t (frob a0)))") {
        Ok(_) => unreachable!(),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
