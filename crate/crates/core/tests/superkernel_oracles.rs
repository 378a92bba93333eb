#[path = "support/criteria.rs"]
mod criteria;

#[test]
fn forced_block_matches_plain_block() {
    let detail = criteria::masking_equivalence().unwrap();
    println!("{detail}");
}

#[test]
fn soft_latency_equals_table_lookup_with_unique_unit_product() {
    let (lookup, partition) = criteria::latency_oracle(500);
    println!("{}", lookup.unwrap());
    println!("{}", partition.unwrap());
}

#[test]
fn gated_loss_is_silent_below_target() {
    println!("{}", criteria::gated_loss_property().unwrap());
}
