//! Synthetic CLIP-like features: class-separated rows, the binary table
//! round trip, row normalization, and batch gathering.

use fusioncc::clipfeat::{read_table, synthetic_features, write_table, CLIP_DIM};
use fusioncc::heads::cosine_sim;

fn mean_cosine(rows: &[Vec<f64>], pairs: impl Iterator<Item = (usize, usize)>) -> f64 {
    let sims: Vec<f64> = pairs.map(|(i, j)| cosine_sim(&rows[i], &rows[j]).value).collect();
    sims.iter().sum::<f64>() / sims.len() as f64
}

fn main() -> fusioncc::Result<()> {
    let ids: Vec<String> = (0..8).map(|i| format!("class{:02}/{i:05}.ppm", i % 2)).collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();

    for sep in [0.0, 1.0] {
        let table = synthetic_features(&ids, &labels, CLIP_DIM, sep, 0.05, 3)?;
        let rows: Vec<Vec<f64>> = (0..table.len())
            .map(|i| table.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        let same = mean_cosine(&rows, (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).filter(|&(i, j)| i < j && labels[i] == labels[j]));
        let diff = mean_cosine(&rows, (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).filter(|&(i, j)| labels[i] != labels[j]));
        println!("class_sep={sep}: mean cosine within class {same:.3}, across classes {diff:.3}");
    }

    let table = synthetic_features(&ids, &labels, CLIP_DIM, 1.0, 0.05, 3)?;
    let path = std::env::temp_dir().join("fusioncc-example.clft");
    write_table(&path, &table)?;
    let back = read_table(&path, false)?;
    println!("round trip of {} bytes is exact: {}", table.encode().len(), back == table);

    let scaled: Vec<f32> = table.rows().iter().map(|v| v * 3.0).collect();
    let mut raw = fusioncc::clipfeat::FeatureTable::new(CLIP_DIM, ids.clone(), scaled)?;
    raw.normalize();
    let norm = raw.row(0).iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("row norm after normalize: {norm:.6}");

    let batch = table.gather::<f32>(&[ids[3].as_str(), ids[0].as_str()])?;
    println!("gathered batch shape {:?}", batch.shape());
    Ok(())
}
