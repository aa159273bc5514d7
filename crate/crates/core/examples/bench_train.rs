//! Quick pipeline feasibility benchmark (not part of the test suite).

use std::time::Instant;

use subnetscope::data::{generate_shapes, to_batch, ShapesConfig};
use subnetscope::model::{build_reference_cnn, evaluate, train_base, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let ds = generate_shapes(&ShapesConfig::default()).unwrap();
    println!("dataset: {:?} ({} train)", t0.elapsed(), ds.train.len());

    let spec = build_reference_cnn([1, 32, 32], 10).unwrap();
    let (train_x, train_y) = to_batch(&ds.train).unwrap();
    let (val_x, val_y) = to_batch(&ds.val).unwrap();
    let (test_x, test_y) = to_batch(&ds.test).unwrap();

    let t1 = Instant::now();
    let cfg = TrainConfig {
        epochs: std::env::args()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(4),
        lr: std::env::args()
            .nth(2)
            .and_then(|s| s.parse().ok())
            .unwrap_or(1e-3),
        ..TrainConfig::default()
    };
    let (weights, log) = train_base(&spec, &train_x, &train_y, &val_x, &val_y, &cfg).unwrap();
    println!("train {} epochs: {:?}", cfg.epochs, t1.elapsed());
    for e in &log.epochs {
        println!(
            "  epoch {}: loss {:.4} val acc {:.4}",
            e.epoch, e.train_loss, e.val_accuracy
        );
    }
    let (_, test_acc) = evaluate(&spec, &weights, &test_x, &test_y, 256).unwrap();
    println!("test acc {:.4}", test_acc);

    // confusion matrix on test
    let logits =
        subnetscope::model::forward_batched(&spec, &weights, &test_x, None, 256).unwrap();
    let preds = subnetscope::model::predictions(&logits).unwrap();
    let mut confusion = vec![vec![0usize; 10]; 10];
    for (&p, &y) in preds.iter().zip(&test_y) {
        confusion[y][p] += 1;
    }
    println!("confusion (rows=true):");
    for (y, row) in confusion.iter().enumerate() {
        println!("  {y}: {row:?}");
    }
}
