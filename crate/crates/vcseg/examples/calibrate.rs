//! Desk-scale calibration run: generates the synthetic benchmark, trains the
//! full model, and prints timing plus evaluation numbers.
//!
//! Usage: cargo run --example calibrate -- [iterations] [base_lr] [init_noise]

use std::time::Instant;

use vcseg::data::{generate_dataset, Dataset, DatasetSpec};
use vcseg::eval::{eval_kmeans_knn, eval_linear, track_dataset, EvalProtocol};
use vcseg::pseudoseg::segment_with;
use vcseg::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let base_lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let init_noise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let dir = std::env::temp_dir().join("vcseg_calibrate");
    let _ = std::fs::remove_dir_all(&dir);
    let spec = DatasetSpec::default();
    let t0 = Instant::now();
    generate_dataset(&spec, 0, &dir).unwrap();
    let dataset = Dataset::load(&dir.join("manifest.json")).unwrap();
    println!("dataset: {} images in {:.1?}", dataset.len(), t0.elapsed());

    // segment-count sanity
    let t0 = Instant::now();
    let config = TrainConfig {
        iterations,
        base_lr,
        init_noise,
        ..TrainConfig::default()
    };
    let counts: Vec<usize> = dataset
        .images
        .iter()
        .take(20)
        .map(|img| segment_with(img, &config.pseudoseg).unwrap().segment_count())
        .collect();
    println!(
        "felzenszwalb: {:.1?} for 20 images, segment counts {:?}",
        t0.elapsed(),
        counts
    );

    let t0 = Instant::now();
    let (model, log) = train(&dataset, &config).unwrap();
    println!(
        "train: {} iters in {:.1?}  (first l_s {:.4} last l_s {:.4}, last total {:.4})",
        iterations,
        t0.elapsed(),
        log[0].report.l_s,
        log.last().unwrap().report.l_s,
        log.last().unwrap().report.total,
    );

    let protocol = EvalProtocol::default();
    let t0 = Instant::now();
    let knn = eval_kmeans_knn(&model, &dataset, &protocol).unwrap();
    println!(
        "eval kmeans+knn: {:.1?}  mIoU {:.4}  purity mean {:.4} (active {}, >0.8: {})",
        t0.elapsed(),
        knn.miou.mean,
        knn.purity.mean,
        knn.purity.active_concepts,
        knn.purity
            .per_concept
            .iter()
            .flatten()
            .filter(|(p, _)| *p > 0.8)
            .count(),
    );
    for (c, iou) in knn.miou.per_class.iter().enumerate() {
        if let Some(iou) = iou {
            println!("  class {c}: IoU {iou:.4}");
        }
    }

    let t0 = Instant::now();
    let linear = eval_linear(&model, &dataset, &protocol).unwrap();
    println!(
        "eval linear: {:.1?}  mIoU {:.4}",
        t0.elapsed(),
        linear.miou.mean
    );

    let t0 = Instant::now();
    let track = track_dataset(&model, &dataset, &protocol).unwrap();
    println!(
        "track: {:.1?}  J {:.4}  F {:.4}  (fallbacks {})",
        t0.elapsed(),
        track.j_mean,
        track.f_mean,
        track.fallback_count
    );
}
