//! ACC with optimal cluster-to-class matching, NMI and ARI on a small
//! labelled example, plus the degenerate single-cluster case.

use fusioncc::metrics::{ari_detailed, MetricsReport};

fn main() -> fusioncc::Result<()> {
    let truth = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
    // Cluster ids are arbitrary; ACC matches 2->0, 0->1, 1->2.
    let pred = [2, 2, 2, 0, 0, 0, 0, 0, 1, 1, 1, 2];

    let report = MetricsReport::compute(&pred, &truth)?;
    print!("{}", report.to_text());
    println!("contingency (rows = predicted cluster):");
    print!("{}", report.contingency_csv());

    let relabelled: Vec<usize> = pred.iter().map(|&p| (p + 1) % 3).collect();
    let again = MetricsReport::compute(&relabelled, &truth)?;
    println!("after relabelling clusters: acc={:.6} nmi={:.6} ari={:.6}", again.acc, again.nmi, again.ari);

    let one = ari_detailed(&[0; 6], &[0; 6])?;
    println!("single cluster vs single class: ari={} degenerate={}", one.value, one.degenerate);
    Ok(())
}
