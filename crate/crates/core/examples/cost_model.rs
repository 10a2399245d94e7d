//! Attention work and memory of the two-branch baseline against the fused
//! encoder at full ViT-small geometry, under both counting conventions.

use fusioncc::runner::{CostComparison, Geometry};

fn main() {
    let geometry = Geometry::full();
    for once in [false, true] {
        let cmp = CostComparison::new(geometry, once);
        println!("{}", cmp.to_text());
    }
    match CostComparison::matching_convention(geometry) {
        Some(once) => println!("count_shared_once={once} reproduces the target +25%"),
        None => println!("no counting convention reproduces the target +25%"),
    }

    // Token count scaling: the fused blocks see 2T tokens, so memory grows as 4T².
    for tokens in [50, 98, 198, 394] {
        let cmp = CostComparison::new(Geometry { tokens, ..geometry }, true);
        println!(
            "T={tokens:>3}: overhead {:.2}%, extra memory {:.3} GiB",
            100.0 * cmp.overhead_ratio(),
            cmp.extra_fused_memory as f64 / (1u64 << 30) as f64
        );
    }
}
