//! Extraction feasibility benchmark (not part of the test suite).

use std::time::Instant;

use subnetscope::advdetect::auroc;
use subnetscope::data::{generate_shapes, to_batch, ShapesConfig};
use subnetscope::extract::{extract_subnetwork, ExtractionConfig, TeacherLogits};
use subnetscope::model::{build_reference_cnn, forward_batched, train_base, TrainConfig};

fn class_auroc(logits: &subnetscope::tensor::Tensor, ys: &[usize], class: usize) -> f64 {
    let (_, k) = logits.dims2().unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, &y) in ys.iter().enumerate() {
        let score = logits.data()[i * k + class];
        if y == class {
            pos.push(score);
        } else {
            neg.push(score);
        }
    }
    auroc(&pos, &neg).unwrap()
}

fn main() {
    let ds = generate_shapes(&ShapesConfig::default()).unwrap();
    let spec = build_reference_cnn([1, 32, 32], 10).unwrap();
    let (train_x, train_y) = to_batch(&ds.train).unwrap();
    let (val_x, val_y) = to_batch(&ds.val).unwrap();
    let (test_x, test_y) = to_batch(&ds.test).unwrap();

    let t = Instant::now();
    let (weights, _) =
        train_base(&spec, &train_x, &train_y, &val_x, &val_y, &TrainConfig::default()).unwrap();
    println!("train: {:?}", t.elapsed());

    let t = Instant::now();
    let teacher_train = TeacherLogits::compute(&spec, &weights, &ds.train, 256).unwrap();
    let teacher_val = TeacherLogits::compute(&spec, &weights, &ds.val, 256).unwrap();
    println!("teacher cache: {:?}", t.elapsed());

    let full_logits = forward_batched(&spec, &weights, &test_x, None, 256).unwrap();

    let cfg = ExtractionConfig::default();
    for class in [0usize, 4, 8] {
        let t = Instant::now();
        let bundle = extract_subnetwork(
            &spec,
            &weights,
            &ds.train,
            &ds.val,
            &teacher_train,
            &teacher_val,
            class,
            &cfg,
        )
        .unwrap();
        let sub_logits =
            forward_batched(&spec, &weights, &test_x, Some(&bundle.gates), 256).unwrap();
        let full_a = class_auroc(&full_logits, &test_y, class);
        let sub_a = class_auroc(&sub_logits, &test_y, class);
        println!(
            "class {class}: {:?} sparsity {:.3} met_tau {} epoch {} auroc full {:.4} subnet {:.4} (gap {:+.4})",
            t.elapsed(),
            bundle.sparsity,
            bundle.met_tau,
            bundle.selected_epoch,
            full_a,
            sub_a,
            sub_a - full_a,
        );
        println!("  loss history: {:?}", bundle.loss_history);
    }
}
