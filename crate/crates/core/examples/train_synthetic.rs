//! Trains the desk-scale model on a generated four-class set and clusters
//! it. Pass an epoch count to shorten or lengthen the run.

use fusioncc::pipeline::{gen_synthetic, SyntheticSpec};
use fusioncc::runner::{evaluate, resolve_features, train_with, TrainConfig};

fn main() -> fusioncc::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(10, |s| s.parse().expect("epoch count"));
    let data = gen_synthetic(&SyntheticSpec::new(4, 64, 32, 0.05), 1)?;

    let mut config = TrainConfig::desk();
    config.epochs = epochs;
    config.depth = 2;
    config.seed = 1;

    let features = resolve_features(&config, &data)?;
    let outcome = train_with(&config, &data, features.as_ref(), |log| {
        println!(
            "epoch {:>3}: total {:.4} (instance {:.4}/{:.4}, cluster {:.4}/{:.4}, penalty {:.2e}) {:.1}s",
            log.epoch, log.total, log.instance_a, log.instance_b, log.cluster_a, log.cluster_b, log.penalty, log.seconds
        );
    })?;
    println!("best epoch {} of {}", outcome.best_epoch, outcome.log.len());

    let report = evaluate(&outcome.best, &data, features.as_ref())?;
    print!("{}", report.to_text());
    print!("{}", report.contingency_csv());
    Ok(())
}
