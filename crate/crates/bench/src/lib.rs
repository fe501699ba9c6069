//! Benchmark fixtures.

use stockobs::{simulate, Family, SimDesign, SimOutput, StockModel};

/// The standard design for `family`, simulated with `seed`, and its model.
pub fn standard_case(family: Family, seed: u64) -> (StockModel, SimOutput) {
    let design = SimDesign::standard(family);
    let sim = simulate(&design, seed).expect("standard design simulates");
    let model = StockModel::new(design.spec, sim.dataset.clone()).expect("simulated data fit the design");
    (model, sim)
}
