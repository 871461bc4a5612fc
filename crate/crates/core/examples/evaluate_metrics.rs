//! kNN accuracy, k-means and V-measure for an embedding CSV, or for a
//! noisy two-cluster layout when no file is given.
//!
//! `cargo run --release --example evaluate_metrics -- [embedding.csv]`

use gdr::data::{read_embedding, EmbeddingRecord};
use gdr::metrics::{evaluate, kmeans, knn_accuracy, v_score, MetricsConfig, VMean};
use gdr::GdrError;

fn main() -> gdr::Result<()> {
    let (emb, labels) = match std::env::args().nth(1) {
        Some(path) => {
            let (emb, labels) = read_embedding(&path)?;
            (emb, labels.ok_or(GdrError::MissingLabels)?)
        }
        None => {
            let mut coords = Vec::new();
            let mut labels = Vec::new();
            for i in 0..400u32 {
                let c = i % 2;
                let t = i as f64 * 0.61;
                coords.push(c as f64 * 4.0 + t.sin());
                coords.push(t.cos());
                labels.push(c);
            }
            (EmbeddingRecord::new(coords, 400, 2)?, labels)
        }
    };

    let report = evaluate(&emb, &labels, &MetricsConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    println!("kNN accuracy at k = 5, 20: {:.2}%, {:.2}%", knn_accuracy(&emb, &labels, 5)?, knn_accuracy(&emb, &labels, 20)?);
    let km = kmeans(&emb, 2, 5, 1)?;
    let harmonic = v_score(&labels, &km.labels, VMean::Harmonic)?;
    println!("harmonic V-measure with 2 clusters: {:.4}", harmonic.v);
    Ok(())
}
