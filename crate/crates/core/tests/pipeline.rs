use fusioncc::diffcore::{ParamStore, Tape, Tensor};
use fusioncc::pipeline::augment::{resize, solarize};
use fusioncc::pipeline::dataset::decode_ppm;
use fusioncc::pipeline::{
    add_positional, augment_pair, class_template, conv_stem, gen_synthetic, load_dataset, mask_image, mask_region,
    write_ppm, AugmentationConfig, ImageRgb, StemConfig, StemParams, SyntheticSpec, TokenSequence,
};
use fusioncc::rng::SeedStream;
use fusioncc::Error;

fn gradient_image(side: usize) -> ImageRgb {
    ImageRgb::from_fn(side, side, |c, y, x| ((c * 7 + y * 3 + x) % 17) as f32 / 16.0)
}

fn l2(a: &ImageRgb, b: &ImageRgb) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn augment_pair_is_deterministic_per_stream() {
    let img = gradient_image(24);
    let cfg = AugmentationConfig::new(16);
    let s = SeedStream::new(9).derive(3);
    let first = augment_pair(&img, &cfg, s).unwrap();
    assert_eq!(first, augment_pair(&img, &cfg, s).unwrap());
    assert_ne!(first, augment_pair(&img, &cfg, SeedStream::new(9).derive(4)).unwrap());
}

#[test]
fn identity_pipeline_returns_the_resized_original() {
    let img = gradient_image(20);
    let cfg = AugmentationConfig::identity(12);
    for seed in 0..5 {
        let (a, b) = augment_pair(&img, &cfg, SeedStream::new(seed)).unwrap();
        let want = resize(&img, 12);
        assert_eq!(a, want);
        assert_eq!(b, want);
    }
}

#[test]
fn tiny_images_are_rejected() {
    let img = ImageRgb::filled(1, 5, 0.5);
    let r = augment_pair(&img, &AugmentationConfig::new(4), SeedStream::new(0));
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn solarize_inverts_bright_pixels_only() {
    let mut img = ImageRgb::new(1, 2, vec![0.8, 0.3, 0.8, 0.3, 0.8, 0.3]).unwrap();
    solarize(&mut img, 0.5);
    for c in 0..3 {
        assert!((img.get(c, 0, 0) - 0.2).abs() <= 1e-6);
        assert_eq!(img.get(c, 0, 1), 0.3);
    }
}

fn zero_pixels(img: &ImageRgb) -> usize {
    (0..img.height() * img.width()).filter(|&i| (0..3).all(|c| img.plane(c)[i] == 0.0)).count()
}

#[test]
fn mask_area_accounting() {
    let ones = ImageRgb::filled(10, 10, 1.0);
    let square = ImageRgb::filled(32, 32, 0.6);
    for seed in 0..30 {
        let half = mask_image(&ones, 0.5, &mut SeedStream::new(seed).rng()).unwrap();
        let mean = half.data().iter().sum::<f32>() / half.data().len() as f32;
        assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");

        let m = mask_image(&square, 0.3, &mut SeedStream::new(seed).rng()).unwrap();
        let zeros = zero_pixels(&m);
        assert!((zeros as i64 - 307).abs() <= 20, "{zeros}");
    }
    let untouched = mask_region(&square, 1e-6, &mut SeedStream::new(1).rng());
    assert_eq!(untouched, square);
    assert!(mask_image(&square, 0.25, &mut SeedStream::new(1).rng()).is_err());
}

fn stem_tokens(cfg: StemConfig, batch: usize, seed: u64) -> (Vec<f64>, [usize; 3], Vec<f64>) {
    let mut store = ParamStore::<f64>::new();
    let params = StemParams::init(cfg, &mut store, &mut SeedStream::new(seed).rng()).unwrap();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros([batch, 3, cfg.side, cfg.side]));
    let t = conv_stem(&mut tape, &bind, &params, x).unwrap();
    (tape.value(t.var).to_vec(), t.shape(), store.get(params.cls).data().to_vec())
}

#[test]
fn stem_shapes() {
    let (_, shape, _) = stem_tokens(StemConfig { side: 32, convs: 3, embed: 64 }, 3, 1);
    assert_eq!(shape, [3, 17, 64]);

    let big = StemConfig { side: 224, convs: 4, embed: 512 };
    assert_eq!(big.patches() + 1, 197);
    assert_eq!(big.channels(), vec![16, 32, 64, 128]);
    let (_, shape, _) = stem_tokens(big, 1, 2);
    assert_eq!(shape, [1, 197, 512]);
    assert!(StemConfig { side: 36, convs: 3, embed: 8 }.validate().is_err());
}

#[test]
fn zero_images_give_zero_patches_and_the_cls_row() {
    let e = 16;
    let (v, [b, t, _], cls) = stem_tokens(StemConfig { side: 16, convs: 2, embed: e }, 2, 5);
    for i in 0..b {
        let seq = &v[i * t * e..(i + 1) * t * e];
        assert_eq!(&seq[..e], &cls[..]);
        assert!(seq[e..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn positional_table_cases() {
    let (b, t, e) = (3, 5, 4);
    let mut tape = Tape::<f64>::new();
    let x = Tensor::from_fn([b, t, e], |i| i as f64 * 0.1);
    let vx = tape.leaf(x.clone(), false);
    let seq = TokenSequence::from_var(&tape, vx).unwrap();
    let zero = tape.constant(Tensor::zeros([t, e]));
    let same = add_positional(&mut tape, zero, seq).unwrap();
    assert_eq!(tape.value(same.var), x.data());

    let table = Tensor::from_fn([t + 2, e], |i| (i as f64).sin());
    let vt = tape.leaf(table.clone(), true);
    let vz = tape.constant(Tensor::zeros([b, t, e]));
    let zs = TokenSequence::from_var(&tape, vz).unwrap();
    let out = add_positional(&mut tape, vt, zs).unwrap();
    for i in 0..b {
        assert_eq!(&tape.value(out.var)[i * t * e..(i + 1) * t * e], &table.data()[..t * e]);
    }
    let loss = tape.sum_all(out.var).unwrap();
    let g = tape.backward(loss).unwrap();
    let gt = g.wrt(vt);
    assert!(gt.data()[..t * e].iter().all(|&v| v == b as f64));
    assert!(gt.data()[t * e..].iter().all(|&v| v == 0.0));
}

#[test]
fn synthetic_counts_and_noiseless_classes() {
    let data = gen_synthetic(&SyntheticSpec::new(4, 128, 32, 0.05), 3).unwrap();
    assert_eq!(data.len(), 512);
    let labels = data.labels().unwrap();
    assert!((0..4).all(|c| labels.iter().filter(|&&l| l == c).count() == 128));

    let clean = gen_synthetic(&SyntheticSpec::new(3, 5, 16, 0.0), 3).unwrap();
    for item in &clean.items {
        let c = item.image.label().unwrap();
        assert_eq!(item.image.data(), class_template(&SyntheticSpec::new(3, 5, 16, 0.0), c).data());
    }
}

#[test]
fn class_templates_are_far_apart_relative_to_noise() {
    let spec = SyntheticSpec::new(4, 16, 32, 0.05);
    let data = gen_synthetic(&spec, 11).unwrap();
    let templates: Vec<ImageRgb> = (0..4).map(|c| class_template(&spec, c)).collect();
    let mut inter = Vec::new();
    for a in 0..4 {
        for b in a + 1..4 {
            inter.push(l2(&templates[a], &templates[b]));
        }
    }
    // noise distance: each sample against its own clean template
    let intra: Vec<f64> = data
        .items
        .iter()
        .map(|i| l2(&i.image, &templates[i.image.label().unwrap()]))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = mean(&inter) / mean(&intra);
    assert!(ratio > 10.0, "inter/intra distance ratio {ratio}");
}

fn write_tree(root: &std::path::Path) {
    for (c, dir) in ["beta", "alpha"].iter().enumerate() {
        for i in [2, 0, 1] {
            let img = ImageRgb::filled(4, 4, (c * 3 + i) as f32 / 10.0);
            std::fs::create_dir_all(root.join(dir)).unwrap();
            write_ppm(root.join(dir).join(format!("im{i}.ppm")), &img).unwrap();
        }
    }
    std::fs::write(root.join("alpha").join("notes.txt"), b"ignored").unwrap();
}

#[test]
fn load_dataset_layout_and_order() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let data = load_dataset(dir.path()).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(data.class_names, vec!["alpha", "beta"]);
    assert_eq!(data.labels().unwrap(), vec![0, 0, 0, 1, 1, 1]);
    assert_eq!(data.items[0].id, "alpha/im0.ppm");
    assert_eq!(data.items[5].id, "beta/im2.ppm");
    assert_eq!(load_dataset(dir.path()).unwrap(), data);

    std::fs::create_dir(dir.path().join("empty")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
}

#[test]
fn ppm_header_and_exact_values() {
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    let raster: Vec<u8> = vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 255, 254, 1];
    bytes.extend(&raster);
    let img = decode_ppm(&bytes).unwrap();
    for (p, px) in raster.chunks(3).enumerate() {
        for c in 0..3 {
            assert_eq!(img.get(c, p / 2, p % 2), px[c] as f32 / 255.0);
        }
    }
    assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_ppm(b"P5\n2 2\n255\n").is_err());
}
