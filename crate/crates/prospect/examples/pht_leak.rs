//! Runs the bounds-check-bypass gadget under both rule sets with two secret
//! values and reports whether the attacker can tell the runs apart.
//!
//! ```text
//! cargo run -p prospect --example pht_leak
//! ```

use prospect::corpus::get_gadget;
use prospect::hardware::Mode;
use prospect::microctx::StrategySpec;
use prospect::security::{compare_pair, ExperimentSpec};

fn main() {
    let g = get_gadget("spectre-pht").expect("catalogued");
    let scenario = g.scenario();
    let (a, b) = (scenario.instantiate(&[7]), scenario.instantiate(&[42]));
    let attack = StrategySpec::Scripted(g.attack.clone().expect("the gadget ships an attack"));
    for mode in [Mode::InsecureBaseline, Mode::Prospect] {
        let machine = ExperimentSpec::for_gadget(&g, mode).machine();
        match compare_pair(&machine, &a, &b, &attack, g.steps, false) {
            Some(step) => println!("{mode}: attacker logs diverge at step {step}"),
            None => println!("{mode}: attacker logs agree for {} steps", g.steps),
        }
    }
}
