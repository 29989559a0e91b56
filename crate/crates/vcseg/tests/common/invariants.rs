//! Invariant check bodies shared by the standalone property suite and the
//! acceptance gate.


use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vcseg::concepts::{build_cooccurrence, Codebook};
use vcseg::embeddings::{
    cosine, normalize_vec, segment_means, EmbeddingField, SegmentEmbeddings,
};
use vcseg::inference::{
    kmeans_segment, knn_label, linear_probe_train, propagate_masks, LabelMap, ProbeSamples,
    RetrievalIndex,
};
use vcseg::losses::{local_segmentation_loss, total_loss, LossWeights, MemoryBank};
use vcseg::metrics::{j_f_scores, miou, purity, ConfusionMatrix};
use vcseg::pseudoseg::{felzenszwalb_segment, SegmentMap};
use vcseg::trainer::{train_with_hook, TrainConfig};

// ---------------------------------------------------------------------------
// pseudoseg
// ---------------------------------------------------------------------------

pub fn check_pseudoseg_partition_covers_every_pixel() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(3..10), rng.gen_range(3..10));
        let img = super::random_image(w, h, &mut rng);
        let map = felzenszwalb_segment(&img, rng.gen_range(1.0..300.0), rng.gen_range(1..5), 0.0)
            .unwrap();
        let sizes = map.segment_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), w * h);
        assert!(sizes.iter().all(|&s| s > 0));
    }
}

pub fn check_pseudoseg_relabel_dense_idempotent() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(2..9), rng.gen_range(2..9));
        // random connected-enough labels: relabel whatever comes out of the
        // segmenter with scrambled ids
        let img = super::random_image(w, h, &mut rng);
        let map = felzenszwalb_segment(&img, rng.gen_range(1.0..100.0), 1, 0.0).unwrap();
        let scrambled: Vec<u32> = map.ids().iter().map(|&i| i * 7 + 3).collect();
        let raw = SegmentMap::from_ids(w, h, scrambled).unwrap();
        let once = raw.relabel_dense();
        assert_eq!(once, once.relabel_dense());
    }
}

pub fn check_pseudoseg_matches_bruteforce_reference() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = super::random_image(5, 5, &mut rng);
        let scale_k = rng.gen_range(1.0..200.0);
        let min_size = rng.gen_range(1..4);
        let mine = felzenszwalb_segment(&img, scale_k, min_size, 0.0).unwrap();
        assert_eq!(
            super::canonical_labels(mine.ids()),
            super::felzenszwalb_reference(&img, scale_k, min_size),
            "seed {seed}"
        );
    }
}

pub fn check_pseudoseg_segment_count_monotone_in_scale() {
    // the raw graph-merge partition (min_size 1); the min-size pass can
    // break strict monotonicity on adversarial inputs
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(4..9), rng.gen_range(4..9));
        let img = super::random_image(w, h, &mut rng);
        let mut prev = usize::MAX;
        for k in [1.0, 5.0, 20.0, 50.0, 120.0, 300.0, 800.0] {
            let count = felzenszwalb_segment(&img, k, 1, 0.0).unwrap().segment_count();
            assert!(count <= prev, "seed {seed}: count rose {prev} -> {count} at k={k}");
            prev = count;
        }
    }
}

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

pub fn check_embeddings_normalize_idempotent() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.gen_range(2..24);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        normalize_vec(&mut v);
        let once = v.clone();
        normalize_vec(&mut v);
        for (a, b) in once.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}


pub fn check_embeddings_segment_means_linear_in_field() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, dim) = (3, 3, 4);
        let f1 = EmbeddingField::init(w, h, dim, seed).unwrap();
        let f2 = EmbeddingField::init(w, h, dim, seed ^ 0xff).unwrap();
        let (alpha, beta): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let ids: Vec<u32> = (0..9).map(|_| rng.gen_range(0..2)).collect();
        let map = match SegmentMap::from_ids(w, h, ids) {
            Ok(m) => m,
            Err(_) => continue, // disconnected draw; linearity needs a valid map
        };
        let combo_values: Vec<f64> = f1
            .values()
            .iter()
            .zip(f2.values())
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let combo = EmbeddingField::from_values(w, h, dim, combo_values).unwrap();
        let m1 = segment_means(&f1, &map, 0).unwrap();
        let m2 = segment_means(&f2, &map, 0).unwrap();
        let mc = segment_means(&combo, &map, 0).unwrap();
        for s in 0..map.segment_count() {
            for d in 0..dim {
                let expect = alpha * m1.vector(s)[d] + beta * m2.vector(s)[d];
                assert!((mc.vector(s)[d] - expect).abs() < 1e-12);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// concepts
// ---------------------------------------------------------------------------

pub fn check_concepts_assign_scale_invariant() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, dim) = (6, 5);
        let vectors: Vec<f64> = (0..k)
            .flat_map(|_| super::random_unit(dim, &mut rng))
            .collect();
        let codebook = Codebook::from_vectors(vectors, k, dim).unwrap();
        let v = super::random_unit(dim, &mut rng);
        let base = codebook.nearest(&v);
        let scale = rng.gen_range(0.001..100.0);
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        assert_eq!(codebook.nearest(&scaled), base);
    }
}

pub fn check_concepts_unit_norm_after_update_and_reseed() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codebook = Codebook::init(5, 4, seed, None).unwrap();
        // simulate an update step
        for v in codebook.vectors_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        codebook.renormalize();
        assert!(codebook.max_norm_deviation() < 1e-6);
        // force a reseed
        let segs = SegmentEmbeddings {
            dim: 4,
            vectors: super::random_unit(4, &mut rng),
            sizes: vec![3],
            image_id: 0,
            concept_ids: None,
        };
        let before = codebook.usage().to_vec();
        codebook.assign(&segs).unwrap();
        assert_eq!(
            codebook.usage().iter().sum::<u64>(),
            before.iter().sum::<u64>() + 1
        );
        let mut stale = codebook.clone();
        for s in 0..5 {
            if stale.staleness()[s] == 0 {
                continue;
            }
        }
        stale.reseed_dead(&segs, 0, &mut rng).unwrap();
        assert!(stale.max_norm_deviation() < 1e-6);
    }
}

pub fn check_concepts_cooccurrence_symmetric() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..30);
        let items: Vec<(u64, u32)> = (0..n)
            .map(|_| (rng.gen_range(0..5u64), rng.gen_range(0..7u32)))
            .collect();
        let index = build_cooccurrence(items);
        for a in 0..7u32 {
            for b in 0..7u32 {
                assert_eq!(index.contains(a, b), index.contains(b, a));
            }
        }
    }
}

pub fn check_concepts_usage_increments_match_batch_size() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, dim) = (5, 4);
        let mut codebook = Codebook::init(k, dim, seed, None).unwrap();
        let n = rng.gen_range(1..20);
        let segs = SegmentEmbeddings {
            dim,
            vectors: (0..n).flat_map(|_| super::random_unit(dim, &mut rng)).collect(),
            sizes: vec![1; n],
            image_id: 0,
            concept_ids: None,
        };
        let before: u64 = codebook.usage().iter().sum();
        codebook.assign(&segs).unwrap();
        let after: u64 = codebook.usage().iter().sum();
        assert_eq!(after - before, n as u64);
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

pub fn check_losses_gradients_match_finite_differences_small() {
    let shape = super::FixtureShape {
        view_w: 4,
        view_h: 4,
        dim: 4,
        seg_slots: 3,
        k: 4,
        bank_batches: 1,
        bank_entries_per_batch: 3,
    };
    for seed in 0..10u64 {
        let rel = super::gradcheck(seed, &shape, LossWeights::default(), 1e-5);
        for (t, r) in rel.iter().enumerate() {
            assert!(*r < 1e-4, "loss {t} seed {seed}: rel {r:.3e}");
        }
    }
}

pub fn check_losses_local_invariant_under_segment_relabeling() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
        let shape = super::FixtureShape {
            view_w: 4,
            view_h: 4,
            dim: 4,
            seg_slots: 4,
            k: 4,
            bank_batches: 1,
            bank_entries_per_batch: 3,
        };
        let fix = super::build_fixture(seed, &shape, LossWeights::default());
        let base = local_segmentation_loss(
            &fix.batch,
            &fix.segments,
            &fix.bank,
            &fix.anchors,
            fix.weights.kappa,
        );
        // random permutation of merged slot names
        let mut perm: Vec<u32> = (0..shape.seg_slots as u32).collect();
        for i in 0..perm.len() {
            let j = rng.gen_range(i..perm.len());
            perm.swap(i, j);
        }
        let mut batch = fix.batch.clone();
        for img in &mut batch.images {
            for view in &mut img.views {
                for s in &mut view.seg_of_pixel {
                    *s = perm[*s as usize];
                }
            }
        }
        let mut seg_image_ids = vec![0u64; shape.seg_slots];
        for (old, &new) in perm.iter().enumerate() {
            seg_image_ids[new as usize] = fix.batch.seg_image_ids[old];
        }
        batch.seg_image_ids = seg_image_ids;
        let mut segments = vcseg::losses::BatchSegments::compute(&batch).unwrap();
        segments.concepts = fix
            .codebook
            .nearest_many(&segments.as_segment_embeddings())
            .unwrap();
        let relabeled = local_segmentation_loss(
            &batch,
            &segments,
            &fix.bank,
            &fix.anchors,
            fix.weights.kappa,
        );
        assert!(
            (base.value - relabeled.value).abs() < 1e-12,
            "seed {seed}: {} vs {}",
            base.value,
            relabeled.value
        );
    }
}

pub fn check_losses_extra_negative_never_decreases_local_loss() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
        let shape = super::FixtureShape {
            view_w: 4,
            view_h: 4,
            dim: 4,
            seg_slots: 3,
            k: 4,
            bank_batches: 1,
            bank_entries_per_batch: 2,
        };
        let fix = super::build_fixture(seed, &shape, LossWeights::default());
        let fields = super::fixture_fields(&fix);
        let before = super::naive_local_per_anchor(&fix, &fields);
        let lib_before = local_segmentation_loss(
            &fix.batch,
            &fix.segments,
            &fix.bank,
            &fix.anchors,
            fix.weights.kappa,
        )
        .value;
        let mut grown = fix;
        let mut extra = grown.bank.batches().last().unwrap().clone();
        extra.push(vcseg::losses::BankEntry {
            vector: super::random_unit(4, &mut rng),
            image_id: 999,
            concept_id: rng.gen_range(0..4),
            size: 1,
        });
        grown.bank = MemoryBank::new(1);
        grown.bank.push_batch(extra);
        let after = super::naive_local_per_anchor(&grown, &fields);
        for (b, a) in before.iter().zip(&after) {
            assert!(a + 1e-12 >= *b, "per-pixel loss decreased: {b} -> {a}");
        }
        let lib_after = local_segmentation_loss(
            &grown.batch,
            &grown.segments,
            &grown.bank,
            &grown.anchors,
            grown.weights.kappa,
        )
        .value;
        assert!(lib_after + 1e-12 >= lib_before);
    }
}

pub fn check_losses_finite_on_ten_thousand_random_configurations() {
    let mut checked = 0u32;
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = super::FixtureShape {
            view_w: 3,
            view_h: 3,
            dim: 4,
            seg_slots: 3,
            k: 4,
            bank_batches: (seed % 3) as usize,
            bank_entries_per_batch: 3,
        };
        let mut fix = super::build_fixture(seed, &shape, LossWeights::default());
        // stress scales: grow or shrink some pixel vectors drastically
        for img in &mut fix.batch.images {
            for view in &mut img.views {
                let n = view.field.pixel_count();
                for _ in 0..3 {
                    let p = rng.gen_range(0..n);
                    let scale = 10f64.powf(rng.gen_range(-8.0..3.0));
                    for v in view.field.pixel_mut(p) {
                        *v *= scale;
                    }
                }
            }
        }
        let mut segments = vcseg::losses::BatchSegments::compute(&fix.batch).unwrap();
        segments.concepts = fix
            .codebook
            .nearest_many(&segments.as_segment_embeddings())
            .unwrap();
        let (report, grads) = total_loss(
            &fix.batch,
            &segments,
            &fix.codebook,
            &fix.bank,
            &fix.index,
            &fix.anchors,
            &fix.weights,
        );
        assert!(report.total.is_finite(), "seed {seed}");
        assert!(report.l_s.is_finite() && report.l_v.is_finite() && report.l_c.is_finite());
        assert!(grads.is_finite(), "seed {seed}");
        checked += 1;
    }
    assert_eq!(checked, 10_000);
}

pub fn check_losses_bank_entries_receive_no_gradients() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let shape = super::FixtureShape {
            view_w: 4,
            view_h: 4,
            dim: 4,
            seg_slots: 3,
            k: 4,
            bank_batches: 1,
            bank_entries_per_batch: 3,
        };
        let fix = super::build_fixture(seed, &shape, LossWeights::default());
        let bank_before: Vec<Vec<f64>> = fix.bank.entries().map(|e| e.vector.clone()).collect();
        let (report, grads) = total_loss(
            &fix.batch,
            &fix.segments,
            &fix.codebook,
            &fix.bank,
            &fix.index,
            &fix.anchors,
            &fix.weights,
        );
        // gradients cover exactly the batch views and the codebook
        assert_eq!(grads.fields.len(), fix.batch.images.len());
        assert_eq!(grads.codebook.len(), fix.codebook.k() * fix.codebook.dim());
        // the bank is untouched by loss computation
        let bank_after: Vec<Vec<f64>> = fix.bank.entries().map(|e| e.vector.clone()).collect();
        assert_eq!(bank_before, bank_after);
        // perturbing a bank entry changes the loss value but the gradient
        // layout still has no bank slots
        let mut perturbed = fix;
        let mut batch0 = perturbed.bank.batches().next().unwrap().clone();
        let j = rng.gen_range(0..batch0[0].vector.len());
        batch0[0].vector[j] += 0.25;
        perturbed.bank = MemoryBank::new(1);
        perturbed.bank.push_batch(batch0);
        let (report2, _) = total_loss(
            &perturbed.batch,
            &perturbed.segments,
            &perturbed.codebook,
            &perturbed.bank,
            &perturbed.index,
            &perturbed.anchors,
            &perturbed.weights,
        );
        assert!(
            (report.total - report2.total).abs() > 0.0,
            "seed {seed}: bank perturbation should move the loss"
        );
    }
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

fn tiny_train_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        concepts: 6,
        dim: 6,
        pixel_sample_count: 48,
        augment: vcseg::augment::AugmentConfig {
            crop_size: 16,
            ..Default::default()
        },
        pseudoseg: vcseg::pseudoseg::FelzParams {
            scale_k: 50.0,
            min_size: 8,
            sigma: 0.8,
        },
        ..TrainConfig::default()
    }
}

fn tiny_dataset(dir: &std::path::Path, seed: u64) -> vcseg::data::Dataset {
    let spec = vcseg::data::DatasetSpec {
        scene: vcseg::data::SceneSpec {
            width: 24,
            height: 24,
            size_min: 4,
            size_max: 7,
            ..Default::default()
        },
        train_count: 4,
        val_count: 1,
        video_count: 0,
        ..Default::default()
    };
    vcseg::data::generate_dataset(&spec, seed, dir).unwrap();
    vcseg::data::Dataset::load(&dir.join("manifest.json")).unwrap()
}

pub fn check_trainer_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path(), 5);
    let config = tiny_train_config(6);
    let (a, _) = vcseg::trainer::train(&dataset, &config).unwrap();
    let (b, _) = vcseg::trainer::train(&dataset, &config).unwrap();
    // byte-exact comparison through serialization
    let dir_a = dir.path().join("a");
    let dir_b = dir.path().join("b");
    vcseg::trainer::save_model(&a, &[], &dir_a).unwrap();
    vcseg::trainer::save_model(&b, &[], &dir_b).unwrap();
    for entry in std::fs::read_dir(dir_a.join("fields")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let bytes_b = std::fs::read(dir_b.join("fields").join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
    assert_eq!(
        std::fs::read(dir_a.join("codebook.vcbk")).unwrap(),
        std::fs::read(dir_b.join("codebook.vcbk")).unwrap()
    );
}

pub fn check_trainer_sphere_and_bank_fifo_maintained() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path(), 6);
    let config = TrainConfig {
        bank_batches: 2,
        ..tiny_train_config(7)
    };
    let mut pushed: std::collections::VecDeque<Vec<u64>> = std::collections::VecDeque::new();
    train_with_hook(&dataset, &config, &mut |state| {
        for field in state.fields {
            assert!(field.max_norm_deviation() < 1e-6);
        }
        assert!(state.codebook.max_norm_deviation() < 1e-6);
        // bank FIFO: exactly the last min(step+1, capacity) batches
        pushed.push_back(state.batch.seg_image_ids.clone());
        while pushed.len() > 2 {
            pushed.pop_front();
        }
        assert_eq!(state.bank.batch_count(), pushed.len());
        let expect: Vec<u64> = pushed.iter().flatten().copied().collect();
        let got: Vec<u64> = state.bank.entries().map(|e| e.image_id).collect();
        assert_eq!(got, expect, "step {}", state.step);
    })
    .unwrap();
}

pub fn check_trainer_cross_view_consistency_non_decreasing() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path(), 7);
    let config = tiny_train_config(30);
    let mut trace = Vec::new();
    train_with_hook(&dataset, &config, &mut |state| {
        if let Some(c) = vcseg::trainer::cross_view_mean_cosine(state.batch, state.routing) {
            trace.push(c);
        }
    })
    .unwrap();
    // windowed means over the trace must not decrease
    let window = 10;
    let windowed: Vec<f64> = trace
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    for pair in windowed.windows(2) {
        assert!(pair[1] >= pair[0] - 1e-9);
    }
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

pub fn check_inference_kmeans_objective_non_increasing() {
    for seed in 0..200u64 {
        let field = EmbeddingField::init(6, 6, 4, seed).unwrap();
        let out = kmeans_segment(&field, 3, 10, seed).unwrap();
        for pair in out.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "seed {seed}");
        }
    }
}

pub fn check_inference_knn_invariant_to_index_permutation() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 4;
        let n = rng.gen_range(5..30);
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| super::random_unit(dim, &mut rng)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let mut forward = RetrievalIndex::new(dim);
        let mut reversed = RetrievalIndex::new(dim);
        for (v, &l) in vectors.iter().zip(&labels) {
            forward.push(v, l);
        }
        for (v, &l) in vectors.iter().zip(&labels).rev() {
            reversed.push(v, l);
        }
        let queries = SegmentEmbeddings {
            dim,
            vectors: super::random_unit(dim, &mut rng),
            sizes: vec![1],
            image_id: 0,
            concept_ids: None,
        };
        let a = knn_label(&queries, &forward, 5).unwrap();
        let b = knn_label(&queries, &reversed, 5).unwrap();
        assert_eq!(a, b, "seed {seed}");
    }
}

pub fn check_inference_propagation_labels_subset_of_first_frame() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<EmbeddingField> = (0..3)
            .map(|t| EmbeddingField::init(8, 8, 4, seed * 10 + t).unwrap())
            .collect();
        let labels_present = rng.gen_range(1..4u32);
        let ids: Vec<u32> = (0..64).map(|_| rng.gen_range(0..=labels_present)).collect();
        let mask = LabelMap::new(8, 8, ids, labels_present as usize + 1).unwrap();
        let (out, _) = propagate_masks(&frames, &mask, 3, 2).unwrap();
        let allowed: std::collections::BTreeSet<u32> = mask.ids.iter().copied().collect();
        for frame in &out {
            for &id in &frame.ids {
                assert!(allowed.contains(&id), "seed {seed}");
            }
        }
    }
}

pub fn check_inference_probe_loss_monotone_for_small_lr() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 3;
        let n = 40;
        let xs: Vec<f64> = (0..n)
            .flat_map(|_| super::random_unit(dim, &mut rng))
            .collect();
        let ys: Vec<u32> = (0..n / 2)
            .flat_map(|_| [0u32, 1])
            .collect();
        let samples = ProbeSamples {
            dim,
            class_count: 2,
            xs,
            ys,
        };
        let (_probe, trace) = linear_probe_train(&samples, 25, 0.5).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "seed {seed}");
        }
    }
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

pub fn check_metrics_miou_invariant_under_consistent_relabeling() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, classes) = (4, 4, 4usize);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            (0..16).map(|_| rng.gen_range(0..classes as u32)).collect()
        };
        let gt_ids = draw(&mut rng);
        let pred_ids = draw(&mut rng);
        // random permutation of class ids
        let mut perm: Vec<u32> = (0..classes as u32).collect();
        for i in 0..classes {
            let j = rng.gen_range(i..classes);
            perm.swap(i, j);
        }
        let gt = LabelMap::new(w, h, gt_ids.clone(), classes).unwrap();
        let pred = LabelMap::new(w, h, pred_ids.clone(), classes).unwrap();
        let gt_p = LabelMap::new(w, h, gt_ids.iter().map(|&i| perm[i as usize]).collect(), classes)
            .unwrap();
        let pred_p =
            LabelMap::new(w, h, pred_ids.iter().map(|&i| perm[i as usize]).collect(), classes)
                .unwrap();
        let a = miou(&[pred], &[gt]).unwrap();
        let b = miou(&[pred_p], &[gt_p]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12, "seed {seed}");
    }
}

pub fn check_metrics_confusion_total_counts_non_ignored_pixels() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, classes) = (5, 4, 3usize);
        let mut gt_ids: Vec<u32> = (0..20).map(|_| rng.gen_range(0..classes as u32)).collect();
        let pred_ids: Vec<u32> = (0..20).map(|_| rng.gen_range(0..classes as u32)).collect();
        let mut ignored = 0;
        for id in gt_ids.iter_mut() {
            if rng.gen_bool(0.2) {
                *id = 255;
                ignored += 1;
            }
        }
        let gt = LabelMap::new(w, h, gt_ids, classes).unwrap();
        let pred = LabelMap::new(w, h, pred_ids, classes).unwrap();
        let mut cm = ConfusionMatrix::new(classes);
        cm.add_maps(&gt, &pred).unwrap();
        assert_eq!(cm.total(), (20 - ignored) as u64);
    }
}

pub fn check_metrics_purity_at_least_inverse_class_count() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let concepts: Vec<u32> = (0..30).map(|_| rng.gen_range(0..5)).collect();
        let class_count = rng.gen_range(2..6) as u32;
        let classes: Vec<u32> = (0..30).map(|_| rng.gen_range(0..class_count)).collect();
        let report = purity(&concepts, &classes, 5);
        for entry in report.per_concept.iter().flatten() {
            assert!(entry.0 >= 1.0 / class_count as f64 - 1e-12, "seed {seed}");
        }
    }
}

pub fn check_metrics_jf_invariant_under_object_permutation() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (6, 6);
        let objects = 3u32;
        let frames = 2;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<LabelMap> {
            (0..frames)
                .map(|_| {
                    let ids: Vec<u32> = (0..w * h).map(|_| rng.gen_range(0..=objects)).collect();
                    LabelMap::new(w, h, ids, objects as usize + 1).unwrap()
                })
                .collect()
        };
        let mut gt = draw(&mut rng);
        // frame 1 must contain every object for a stable object list
        for o in 1..=objects {
            gt[0].ids[o as usize] = o;
        }
        let pred = draw(&mut rng);
        let base = j_f_scores(&pred, &gt, None).unwrap();
        // permute object ids consistently (0 stays background)
        let mut perm: Vec<u32> = (1..=objects).collect();
        for i in 0..perm.len() {
            let j = rng.gen_range(i..perm.len());
            perm.swap(i, j);
        }
        let apply = |maps: &[LabelMap]| -> Vec<LabelMap> {
            maps.iter()
                .map(|m| {
                    let ids = m
                        .ids
                        .iter()
                        .map(|&i| if i == 0 { 0 } else { perm[i as usize - 1] })
                        .collect();
                    LabelMap::new(w, h, ids, objects as usize + 1).unwrap()
                })
                .collect()
        };
        let permuted = j_f_scores(&apply(&pred), &apply(&gt), None).unwrap();
        assert!((base.j_mean - permuted.j_mean).abs() < 1e-12, "seed {seed}");
        assert!((base.f_mean - permuted.f_mean).abs() < 1e-12, "seed {seed}");
    }
}

// ---------------------------------------------------------------------------
// data
// ---------------------------------------------------------------------------

pub fn check_data_label_roundtrip_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(2..10), rng.gen_range(2..10));
        let classes = rng.gen_range(2..6);
        let ids: Vec<u32> = (0..w * h)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    255
                } else {
                    rng.gen_range(0..classes as u32)
                }
            })
            .collect();
        let map = LabelMap {
            width: w,
            height: h,
            ids,
            class_count: classes,
            ignore_id: 255,
        };
        let path = dir.path().join(format!("l{seed}.png"));
        vcseg::data::save_label_png(&map, &path).unwrap();
        let back = vcseg::data::load_label_png(&path, classes).unwrap();
        assert_eq!(back.ids, map.ids);
    }
}

pub fn check_data_field_and_codebook_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..50u64 {
        let field = EmbeddingField::init(5, 4, 6, seed).unwrap();
        let path = dir.path().join(format!("f{seed}.vef"));
        field.save(&path).unwrap();
        let back = EmbeddingField::load(&path).unwrap();
        // reals survive at 32-bit file precision
        for (a, b) in field.values().iter().zip(back.values()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let codebook = Codebook::init(4, 6, seed, None).unwrap();
        let cpath = dir.path().join(format!("c{seed}.vcbk"));
        codebook.save(&cpath).unwrap();
        assert_eq!(Codebook::load(&cpath).unwrap(), codebook);
    }
}

pub fn check_data_manifest_roundtrip_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = vcseg::data::DatasetSpec {
        train_count: 2,
        val_count: 1,
        video_count: 1,
        video_frames: 2,
        ..Default::default()
    };
    let manifest = vcseg::data::generate_dataset(&spec, 3, dir.path()).unwrap();
    let loaded = vcseg::data::DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, manifest);
}

pub fn check_data_video_pixels_have_unique_owner() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = vcseg::data::SceneSpec::default();
        let n = rng.gen_range(1..4);
        let velocities: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let video = vcseg::data::generate_video(&spec, 4, &velocities, seed).unwrap();
        for mask in &video.masks {
            for &id in &mask.ids {
                assert!(id as usize <= n, "seed {seed}");
            }
        }
    }
}

