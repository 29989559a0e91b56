//! End-to-end evaluation pipelines: k-means + nearest-neighbor retrieval,
//! the linear probe, concept purity, and video mask tracking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::Codebook;
use crate::data::Dataset;
use crate::embeddings::{segment_means, EmbeddingField};
use crate::error::{Error, Result};
use crate::inference::{
    kmeans_segment, knn_label, linear_probe_apply, linear_probe_train, propagate_masks, LabelMap,
    ProbeSamples, RetrievalIndex,
};
use crate::losses::{
    sample_anchors, total_loss, Batch, BatchImage, BatchSegments, LossWeights, MemoryBank,
    ViewData,
};
use crate::metrics::{miou, purity, JfReport, MiouReport, PurityReport};
use crate::pseudoseg::{segment_with, SegmentMap};
use crate::rng::{rng_for, stream, subseed};
use crate::trainer::{lr_schedule, TrainedModel};

/// Shared evaluation hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    /// Clusters per image.
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    /// Neighbors for segment label retrieval.
    pub knn: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_samples_per_image: usize,
    /// Per-frame refinement steps against the frozen codebook.
    pub frame_refine_steps: usize,
    pub track_neighbors: usize,
    pub track_window: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            kmeans_k: 25,
            kmeans_iters: 50,
            knn: 15,
            probe_epochs: 600,
            probe_lr: 5.0,
            probe_samples_per_image: 400,
            frame_refine_steps: 40,
            track_neighbors: 5,
            track_window: 12,
            seed: 0,
        }
    }
}

fn check_alignment(model: &TrainedModel, dataset: &Dataset) -> Result<()> {
    let dataset_ids: Vec<u64> = dataset.manifest.images.iter().map(|e| e.id).collect();
    if model.image_ids != dataset_ids {
        return Err(Error::invalid(
            "model fields are not aligned with this dataset manifest",
        ));
    }
    Ok(())
}

/// Majority ground-truth class per segment (ignore pixels excluded);
/// `None` for segments that are entirely ignored.
pub fn segment_majority_classes(map: &SegmentMap, labels: &LabelMap) -> Vec<Option<u32>> {
    let mut tallies: Vec<std::collections::BTreeMap<u32, usize>> =
        vec![std::collections::BTreeMap::new(); map.segment_count()];
    for (p, &seg) in map.ids().iter().enumerate() {
        let class = labels.ids[p];
        if class == labels.ignore_id {
            continue;
        }
        *tallies[seg as usize].entry(class).or_insert(0) += 1;
    }
    tallies
        .iter()
        .map(|tally| {
            tally
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&class, _)| class)
        })
        .collect()
}

/// Cluster one image, label segments through the index, and paint the
/// prediction; also returns per-segment (concept, ground-truth class) pairs
/// for purity tallies.
struct ImageEval {
    prediction: LabelMap,
    concept_class_pairs: Vec<(u32, u32)>,
}

fn eval_one_image(
    field: &EmbeddingField,
    labels: &LabelMap,
    codebook: &Codebook,
    index: &RetrievalIndex,
    protocol: &EvalProtocol,
    kmeans_seed: u64,
    class_count: usize,
) -> Result<ImageEval> {
    let outcome = kmeans_segment(field, protocol.kmeans_k, protocol.kmeans_iters, kmeans_seed)?;
    let segments = segment_means(field, &outcome.map, 0)?;
    let classes = knn_label(&segments, index, protocol.knn)?;
    let mut ids = vec![0u32; field.pixel_count()];
    for (p, &seg) in outcome.map.ids().iter().enumerate() {
        ids[p] = classes[seg as usize];
    }
    let prediction = LabelMap::new(field.width(), field.height(), ids, class_count)?;
    let majority = segment_majority_classes(&outcome.map, labels);
    let mut concept_class_pairs = Vec::new();
    for s in 0..segments.count() {
        if let Some(class) = majority[s] {
            concept_class_pairs.push((codebook.nearest(segments.vector(s)), class));
        }
    }
    Ok(ImageEval {
        prediction,
        concept_class_pairs,
    })
}

/// Build the retrieval index from the training split: every training image
/// is clustered into `kmeans_k` segments whose mean vectors enter the index
/// labeled by majority ground truth.
pub fn build_retrieval_index(
    model: &TrainedModel,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<RetrievalIndex> {
    check_alignment(model, dataset)?;
    let per_image: Vec<Vec<(Vec<f64>, u32)>> = dataset
        .train_indices()
        .into_par_iter()
        .map(|i| -> Result<Vec<(Vec<f64>, u32)>> {
            let field = &model.fields[i];
            let outcome = kmeans_segment(
                field,
                protocol.kmeans_k.min(field.pixel_count()),
                protocol.kmeans_iters,
                subseed(protocol.seed, &[stream::KMEANS, model.image_ids[i]]),
            )?;
            // cluster-level prototypes: mean embedding and majority class
            let dim = field.dim();
            let k = protocol.kmeans_k.min(field.pixel_count());
            let mut sums = vec![0.0f64; k * dim];
            let mut tallies: Vec<std::collections::BTreeMap<u32, usize>> =
                vec![std::collections::BTreeMap::new(); k];
            let mut counts = vec![0usize; k];
            let labels = &dataset.labels[i];
            for (p, &c) in outcome.cluster_of_pixel.iter().enumerate() {
                let c = c as usize;
                counts[c] += 1;
                let v = field.pixel(p);
                for d in 0..dim {
                    sums[c * dim + d] += v[d];
                }
                let class = labels.ids[p];
                if class != labels.ignore_id {
                    *tallies[c].entry(class).or_insert(0) += 1;
                }
            }
            Ok((0..k)
                .filter(|&c| counts[c] > 0)
                .filter_map(|c| {
                    let majority = tallies[c]
                        .iter()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                        .map(|(&class, _)| class)?;
                    let mean: Vec<f64> = sums[c * dim..(c + 1) * dim]
                        .iter()
                        .map(|s| s / counts[c] as f64)
                        .collect();
                    Some((mean, majority))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut index = RetrievalIndex::new(model.config.dim);
    for entries in per_image {
        for (vector, class) in entries {
            index.push(&vector, class);
        }
    }
    if index.is_empty() {
        return Err(Error::invalid("training split produced no labeled segments"));
    }
    Ok(index)
}

/// k-means + nearest-neighbor evaluation on the validation split.
#[derive(Debug, Clone)]
pub struct KnnEval {
    pub miou: MiouReport,
    pub purity: PurityReport,
    /// (image id, prediction) per validation image.
    pub predictions: Vec<(u64, LabelMap)>,
}

pub fn eval_kmeans_knn(
    model: &TrainedModel,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<KnnEval> {
    check_alignment(model, dataset)?;
    let index = build_retrieval_index(model, dataset, protocol)?;
    let val = dataset.val_indices();
    if val.is_empty() {
        return Err(Error::invalid("dataset has no validation split"));
    }
    let results: Vec<(usize, ImageEval)> = val
        .par_iter()
        .map(|&i| -> Result<(usize, ImageEval)> {
            let out = eval_one_image(
                &model.fields[i],
                &dataset.labels[i],
                &model.codebook,
                &index,
                protocol,
                subseed(protocol.seed, &[stream::KMEANS, model.image_ids[i]]),
                dataset.manifest.class_count,
            )?;
            Ok((i, out))
        })
        .collect::<Result<_>>()?;
    let mut predictions = Vec::with_capacity(results.len());
    let mut gts = Vec::with_capacity(results.len());
    let mut pairs = Vec::new();
    for (i, out) in results {
        gts.push(dataset.labels[i].clone());
        predictions.push((model.image_ids[i], out.prediction));
        pairs.extend(out.concept_class_pairs);
    }
    let preds: Vec<LabelMap> = predictions.iter().map(|(_, p)| p.clone()).collect();
    let miou_report = miou(&preds, &gts)?;
    let concepts: Vec<u32> = pairs.iter().map(|&(c, _)| c).collect();
    let classes: Vec<u32> = pairs.iter().map(|&(_, c)| c).collect();
    let purity_report = purity(&concepts, &classes, model.codebook.k());
    Ok(KnnEval {
        miou: miou_report,
        purity: purity_report,
        predictions,
    })
}

/// Linear-probe evaluation on the validation split.
#[derive(Debug, Clone)]
pub struct LinearEval {
    pub miou: MiouReport,
    pub predictions: Vec<(u64, LabelMap)>,
    pub train_loss_trace: Vec<f64>,
}

pub fn eval_linear(
    model: &TrainedModel,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<LinearEval> {
    check_alignment(model, dataset)?;
    let train = dataset.train_indices();
    let pairs: Vec<(&EmbeddingField, &LabelMap)> = train
        .iter()
        .map(|&i| (&model.fields[i], &dataset.labels[i]))
        .collect();
    let samples = ProbeSamples::collect(
        &pairs,
        dataset.manifest.class_count,
        protocol.probe_samples_per_image,
        subseed(protocol.seed, &[0x50]),
    )?;
    let (probe, trace) = linear_probe_train(&samples, protocol.probe_epochs, protocol.probe_lr)?;
    let val = dataset.val_indices();
    if val.is_empty() {
        return Err(Error::invalid("dataset has no validation split"));
    }
    let results: Vec<(u64, LabelMap)> = val
        .par_iter()
        .map(|&i| -> Result<(u64, LabelMap)> {
            Ok((
                model.image_ids[i],
                linear_probe_apply(&probe, &model.fields[i])?,
            ))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<LabelMap> = results.iter().map(|(_, p)| p.clone()).collect();
    let gts: Vec<LabelMap> = val.iter().map(|&i| dataset.labels[i].clone()).collect();
    Ok(LinearEval {
        miou: miou(&preds, &gts)?,
        predictions: results,
        train_loss_trace: trace,
    })
}

/// Embed a new image with the trained model: appearance projection plus a
/// short refinement against the frozen codebook (local loss + commitment).
pub fn embed_frame(
    model: &TrainedModel,
    image: &crate::pseudoseg::RawImage,
    frame_seed: u64,
    protocol: &EvalProtocol,
) -> Result<EmbeddingField> {
    let projection = model.projection.as_ref().ok_or_else(|| {
        Error::invalid("model has no appearance projection; cannot embed new images")
    })?;
    let mut field = EmbeddingField::from_appearance(
        image,
        projection,
        model.config.init_noise,
        subseed(frame_seed, &[stream::FIELD_INIT]),
    )?;
    if protocol.frame_refine_steps == 0 {
        return Ok(field);
    }
    let seg = segment_with(image, &model.config.pseudoseg)?;
    let weights = LossWeights {
        lambda_c: 0.0,
        ..model.config.weights
    };
    let bank = MemoryBank::new(0);
    let index = crate::concepts::build_cooccurrence(std::iter::empty());
    let steps = protocol.frame_refine_steps as u64;
    for step in 0..steps {
        let mut rng = rng_for(frame_seed, &[stream::STEP, step]);
        let view = ViewData {
            field: field.clone(),
            seg_of_pixel: seg.ids().to_vec(),
        };
        let batch = Batch {
            images: vec![BatchImage {
                image_id: 0,
                views: [view.clone(), view],
            }],
            seg_count: seg.segment_count(),
            seg_image_ids: vec![0; seg.segment_count()],
        };
        let mut segments = BatchSegments::compute(&batch)?;
        segments.concepts = model.codebook.nearest_many(&segments.as_segment_embeddings())?;
        let anchors = sample_anchors(&batch, model.config.pixel_sample_count, &mut rng);
        let (report, grads) = total_loss(
            &batch,
            &segments,
            &model.codebook,
            &bank,
            &index,
            &anchors,
            &weights,
        );
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "frame refinement".into(),
            });
        }
        let lr = lr_schedule(step, steps, model.config.base_lr, model.config.poly_power);
        let dim = field.dim();
        // identical views: both gradient blocks route to the same pixels
        for v in 0..2 {
            let grad = &grads.fields[0][v];
            for p in 0..field.pixel_count() {
                let target = field.pixel_mut(p);
                for d in 0..dim {
                    target[d] -= lr * grad[p * dim + d];
                }
            }
        }
        field.normalize_pixels();
        // codebook gradients are discarded: the dictionary stays frozen
    }
    Ok(field)
}

/// Mask-tracking evaluation over every video of the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackEval {
    pub j_mean: f64,
    pub f_mean: f64,
    pub per_video: Vec<(u64, JfReport)>,
    pub fallback_count: u64,
}

/// Propagate first-frame ground-truth masks through every video with
/// per-frame embeddings from the model; J/F are scored on the propagated
/// frames (the given first frame is excluded).
pub fn track_dataset(
    model: &TrainedModel,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<TrackEval> {
    if dataset.manifest.videos.is_empty() {
        return Err(Error::invalid("dataset has no videos"));
    }
    let outcomes: Vec<(u64, JfReport, u64)> = (0..dataset.manifest.videos.len())
        .into_par_iter()
        .map(|v| -> Result<(u64, JfReport, u64)> {
            let video = dataset.load_video(v)?;
            let video_id = dataset.manifest.videos[v].id;
            let fields: Vec<EmbeddingField> = video
                .frames
                .iter()
                .enumerate()
                .map(|(t, frame)| {
                    embed_frame(
                        model,
                        frame,
                        subseed(protocol.seed, &[stream::VIDEO, video_id, t as u64]),
                        protocol,
                    )
                })
                .collect::<Result<_>>()?;
            let (pred, fallbacks) = propagate_masks(
                &fields,
                &video.masks[0],
                protocol.track_neighbors,
                protocol.track_window,
            )?;
            if pred.len() < 2 {
                return Err(Error::invalid("video must have at least 2 frames to score"));
            }
            let report = crate::metrics::j_f_scores(&pred[1..], &video.masks[1..], None)?;
            Ok((video_id, report, fallbacks))
        })
        .collect::<Result<_>>()?;
    let mut per_video = Vec::with_capacity(outcomes.len());
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    let mut objects = 0usize;
    let mut fallback_count = 0u64;
    for (id, report, fallbacks) in outcomes {
        for &(_, j, f) in &report.per_object {
            j_sum += j;
            f_sum += f;
            objects += 1;
        }
        fallback_count += fallbacks;
        per_video.push((id, report));
    }
    Ok(TrackEval {
        j_mean: j_sum / objects as f64,
        f_mean: f_sum / objects as f64,
        per_video,
        fallback_count,
    })
}
