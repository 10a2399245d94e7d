//! One forward pass through the fusing blocks, showing the token layout:
//! CLS and CLIP anchor ahead of the patches, T tokens per branch, 2T in the
//! fused blocks, and rows of every attention map summing to one.

use fusioncc::diffcore::{Tape, Tensor};
use fusioncc::encoder::{cat_tokens, split_tokens};
use fusioncc::pipeline::TokenSequence;
use fusioncc::runner::{Model, TrainConfig};

fn main() -> fusioncc::Result<()> {
    let config = TrainConfig::parse("side=16\nembed=16\nheads=2\ndepth=2\nclusters=3\nbatch=2\nclip_fusion=true\n")?;
    let model = Model::<f64>::init(&config)?;
    println!("{} parameters in {} tensors", model.store.scalar_count(), model.store.len());
    println!("patches P={}, tokens T={}", config.stem().patches(), config.tokens());

    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let images = tape.constant(Tensor::from_fn([2, 3, 16, 16], |i| (i as f64 * 0.013).sin().abs()));
    let clip = tape.constant(Tensor::from_fn([2, 512], |i| ((i % 7) as f64 - 3.0) / 40.0));
    let fwd = model.forward(&mut tape, &bind, images, images, Some(clip), true, true)?;

    for map in &fwd.encoded.attention {
        println!(
            "layer {} {:?}: {} heads over {} tokens, max |row sum - 1| = {:.1e}",
            map.layer,
            map.kind,
            map.heads(),
            map.tokens(),
            map.max_row_error()
        );
    }
    let loss = fwd.loss.expect("loss requested");
    println!("total loss {:.6}", tape.scalar(loss.total));
    println!("summary shape {:?} (anchor token)", tape.shape(fwd.encoded.h_a));

    // cat then split returns both halves unchanged
    let a = fwd.encoded.tokens_a;
    let b = fwd.encoded.tokens_b;
    let joined = cat_tokens(&mut tape, a, b)?;
    let (a2, b2) = split_tokens(&mut tape, joined)?;
    let same = |x: TokenSequence, y: TokenSequence| tape.value(x.var) == tape.value(y.var);
    println!("joined shape {:?}; split round trip exact: {}", joined.shape(), same(a, a2) && same(b, b2));
    Ok(())
}
