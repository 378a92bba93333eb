#[path = "support/criteria.rs"]
mod criteria;

#[test]
fn analytical_model_tracks_simulator() {
    let mape = criteria::latency_model_consistency(100).unwrap();
    println!("mape {mape:.4}%");
    assert!(mape <= 2.0, "mape {mape}%");
}
