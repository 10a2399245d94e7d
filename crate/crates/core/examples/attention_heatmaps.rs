//! Final-block attention maps of a briefly trained fused model with a CLIP
//! anchor: both branch maps and the cross-view fused map, as CSV and PGM.

use std::path::PathBuf;

use fusioncc::pipeline::{gen_synthetic, SyntheticSpec};
use fusioncc::runner::{export_attention, final_block_attention, resolve_features, train, TrainConfig};

fn main() -> fusioncc::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("fusioncc-attn"), PathBuf::from);
    let data = gen_synthetic(&SyntheticSpec::new(2, 16, 16, 0.05), 4)?;
    let config = TrainConfig::parse("side=16\nembed=32\nheads=2\ndepth=2\nclusters=2\nbatch=16\nepochs=5\nclip_fusion=true\nseed=4\n")?;
    let features = resolve_features(&config, &data)?.expect("fusion is on");
    let outcome = train(&config, &data, Some(&features))?;

    let item = &data.items[0];
    let maps = final_block_attention(&outcome.best, &item.image, features.get(&item.id), 9)?;
    for map in &maps {
        // quadrants of the fused map: rows from view a/b attending to view a/b
        let q = map.quadrant_mass();
        println!("{} ({} tokens): quadrant row mass {:.3?}", map.name, map.tokens, q);
    }
    for path in export_attention(&outcome.best, &item.image, Some((&features, &item.id)), &out, 9)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
