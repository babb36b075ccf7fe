//! Runs the ten acceptance criteria and prints one line per criterion.
//! Criteria 7 and 8 are expected to fail; see the README.

use laminate_core::suite;

fn main() {
    let results = suite::run_all();
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    // Both known failures come from the determinant integral being preserved by
    // lamination; everything else must hold.
    if results.len() != 10 || failed != [7, 8] {
        eprintln!("acceptance: unexpected outcome, failing criteria {failed:?}");
        std::process::exit(1);
    }
}
