#[path = "support/criteria.rs"]
mod criteria;

#[test]
fn every_operator_matches_finite_differences() {
    println!("{}", criteria::gradient_checks().unwrap());
}
