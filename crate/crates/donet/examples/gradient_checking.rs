//! Finite-difference verification of the layer zoo: every layer and both
//! training losses are checked against central differences in f64.
//!
//!     cargo run --release --example gradient_checking -- [cases]

use donet::gradcheck::run_unit_suite;

fn main() {
    let cases: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    println!("running {cases} randomized cases per item at tol 1e-4 (f64)...");
    let outcomes = run_unit_suite(cases, 42, 1e-4, None);
    let mut ok = true;
    for o in &outcomes {
        println!("{}", o.line());
        ok &= o.pass;
    }
    println!("{}", if ok { "all items passed" } else { "FAILURES PRESENT" });
}
