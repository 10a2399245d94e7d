//! Finite-difference check of every parameter gradient on a tiny model.

use std::time::Instant;

use fusioncc::runner::{check_model_gradients, TrainConfig};

fn main() -> fusioncc::Result<()> {
    let config = TrainConfig {
        seed: 5,
        ..TrainConfig::gradcheck()
    };
    let started = Instant::now();
    let report = check_model_gradients(&config, 1e-5, 0.3)?;
    println!(
        "checked {} gradients: max relative error {:.3e}, max absolute error {:.3e} ({:.1}s)",
        report.checked,
        report.max_rel_error,
        report.max_abs_error,
        started.elapsed().as_secs_f64()
    );
    println!("worst element: {:?}", report.worst);
    Ok(())
}
