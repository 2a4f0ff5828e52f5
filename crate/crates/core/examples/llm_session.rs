//! A guidance session against a scripted chat client: the first program
//! misses, the refinement round fixes it.

use std::collections::BTreeMap;

use guidesim::costdsl::{builtin, print, Program};
use guidesim::llmguide::{run_session, success_checker, MockClient, MockReply, Rollout, Verdict};
use guidesim::scene::Scenario;
use guidesim::synth::{gen_fixture, FixtureKind};

fn answer(program: &str) -> String {
    format!("EVENT 1: a0 moves right\nAGENTS 1: a0\nBEHAVIOR a0: lane change\nMAP 1: yes\nQUERY: rightmost lane of a0\n```\n{program}\n```\n")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = gen_fixture(FixtureKind::Rightmost, 0)?;
    let gold = print(&builtin("rightmost").unwrap().program());
    let wrong = gold.replace("rightmost_lane", "right_lane");
    let script = BTreeMap::from([(String::new(), MockReply::Seq(vec![answer(&wrong), answer(&gold)]))]);
    let mut client = MockClient::new(script)?;
    // stand-in sampler: the recorded future, so the session logic is visible
    // without a trained model
    let scenario = f.scenario.clone();
    let mut sampler = |_: &Program| -> Result<Rollout, String> {
        Ok(Rollout {
            scenario: scenario.clone(),
            term_trace: Vec::new(),
        })
    };
    let check = success_checker(FixtureKind::Rightmost)?;
    // the stand-in rollout already succeeds, so fail the first attempt
    let attempts = std::cell::Cell::new(0);
    let gate = |s: &Scenario| -> Verdict {
        attempts.set(attempts.get() + 1);
        if attempts.get() == 1 {
            Verdict {
                success: false,
                detail: "ended one lane short".into(),
            }
        } else {
            check(s)
        }
    };
    let session = run_session(
        "vehicle 1 moves to the rightmost lane",
        &f.scenario,
        &mut sampler,
        &gate,
        &mut client,
        3,
    );
    for (i, it) in session.iterations.iter().enumerate() {
        println!("iteration {}: success {} ({})\n{}", i + 1, it.verdict.success, it.verdict.detail, it.dsl);
    }
    println!("outcome {:?}, {} exchanges, prompts seen {:?}", session.outcome, session.exchanges.len(), client.seen);
    Ok(())
}
