//! Two augmented views of a synthetic image, a masked copy, and the
//! resize-only evaluation view, written as PPM files.

use std::path::PathBuf;

use fusioncc::pipeline::augment::resize;
use fusioncc::pipeline::{
    augment_pair, class_template, gen_synthetic, mask_image, write_ppm, AugmentationConfig, SyntheticSpec,
};
use fusioncc::rng::SeedStream;

fn main() -> fusioncc::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("fusioncc-aug"), PathBuf::from);
    std::fs::create_dir_all(&out).expect("create output directory");

    let spec = SyntheticSpec::new(4, 1, 64, 0.05);
    let data = gen_synthetic(&spec, 7)?;
    let config = AugmentationConfig::new(32);

    for (i, item) in data.items.iter().enumerate() {
        let (a, b) = augment_pair(&item.image, &config, SeedStream::new(7).derive(i as u64))?;
        write_ppm(out.join(format!("class{i}_template.ppm")), &class_template(&spec, i))?;
        write_ppm(out.join(format!("class{i}_view_a.ppm")), &a)?;
        write_ppm(out.join(format!("class{i}_view_b.ppm")), &b)?;
        write_ppm(out.join(format!("class{i}_eval.ppm")), &resize(&item.image, 32))?;

        let masked = mask_image(&item.image, 0.4, &mut SeedStream::new(7).tagged("mask").derive(i as u64).rng())?;
        let black = masked.plane(0).iter().zip(masked.plane(1)).zip(masked.plane(2));
        let black = black.filter(|((r, g), b)| **r == 0.0 && **g == 0.0 && **b == 0.0).count();
        println!(
            "class {i}: masked {:.1}% of pixels",
            100.0 * black as f64 / (masked.height() * masked.width()) as f64
        );
        write_ppm(out.join(format!("class{i}_masked.ppm")), &masked)?;
    }
    println!("images written to {}", out.display());
    Ok(())
}
