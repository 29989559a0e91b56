//! The self-supervised training loop.
//!
//! Per step: sample a batch of images, draw two augmented views per image,
//! realize view embedding fields from each image's per-source-pixel
//! parameter table, transfer and merge pseudo segments across views, assign
//! concepts, build co-occurrence, take an SGD step on the total loss,
//! renormalize pixel and concept vectors back to the unit sphere, and push
//! the batch's segment embeddings into the memory bank.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewTransform};
use crate::concepts::{build_cooccurrence, Codebook};
use crate::data::Dataset;
use crate::embeddings::{cosine, AppearanceProjection, EmbeddingField};
use crate::error::{Error, Result};
use crate::losses::{
    sample_anchors, total_loss, BankEntry, Batch, BatchImage, BatchSegments, LossReport,
    LossWeights, MemoryBank, ViewData,
};
use crate::pseudoseg::{segment_with, FelzParams, SegmentMap};
use crate::rng::{rng_for, stream, subseed};

/// Complete training configuration.
///
/// Defaults are desk-scale; [`TrainConfig::paper_scale`] selects the
/// full-scale hyper-parameters (D=32, K=512, batch 8, 5k iterations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Images per batch.
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weights: LossWeights,
    /// Codebook size K.
    pub concepts: usize,
    /// Embedding dimension D.
    pub dim: usize,
    /// Memory bank capacity in batches.
    pub bank_batches: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Loss anchors sampled per step; 0 means every view pixel.
    pub pixel_sample_count: usize,
    pub pseudoseg: FelzParams,
    /// Seed pixel parameters from a fixed random projection of color
    /// (stands in for a pretrained feature extractor). When false, pixel
    /// parameters start as pure random unit vectors.
    pub appearance_init: bool,
    /// Per-pixel noise mixed into the appearance initialization.
    pub init_noise: f64,
    /// Concepts unassigned for more than this many steps get reseeded.
    pub staleness_threshold: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            base_lr: 0.3,
            poly_power: 0.9,
            weights: LossWeights::default(),
            concepts: 32,
            dim: 16,
            bank_batches: 2,
            seed: 0,
            augment: AugmentConfig::default(),
            pixel_sample_count: 256,
            pseudoseg: FelzParams::default(),
            appearance_init: true,
            init_noise: 0.1,
            staleness_threshold: 200,
        }
    }
}

impl TrainConfig {
    /// Full-scale hyper-parameters.
    pub fn paper_scale() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 8,
            dim: 32,
            concepts: 512,
            base_lr: 0.001,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if self.poly_power < 0.0 || !self.poly_power.is_finite() {
            return Err(Error::invalid("poly_power must be non-negative"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("dim must be at least 2"));
        }
        if self.concepts < 2 {
            return Err(Error::invalid("concepts must be at least 2"));
        }
        if self.init_noise < 0.0 {
            return Err(Error::invalid("init_noise must be non-negative"));
        }
        self.weights.validate()?;
        self.augment.validate()
    }

    /// Read from a JSON or TOML file (by extension).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::format(path, format!("{e}")))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("{e}")))?
        };
        config.validate()?;
        Ok(config)
    }
}

/// Poly learning-rate schedule: `base * (1 - step/total)^power`.
pub fn lr_schedule(step: u64, total: u64, base_lr: f64, power: f64) -> f64 {
    debug_assert!(step < total);
    base_lr * (1.0 - step as f64 / total as f64).powf(power)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// The trained state: per-image embedding tables plus the concept codebook.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    /// Manifest image ids aligned with `fields`.
    pub image_ids: Vec<u64>,
    pub projection: Option<AppearanceProjection>,
    pub fields: Vec<EmbeddingField>,
    pub codebook: Codebook,
}

/// Post-step snapshot passed to the training hook.
pub struct StepState<'a> {
    pub step: u64,
    pub lr: f64,
    pub batch: &'a Batch,
    /// Per batch image, per view: source pixel index of every view pixel.
    pub routing: &'a [[Vec<u32>; 2]],
    /// Dataset indices of the batch images.
    pub batch_indices: &'a [usize],
    pub bank: &'a MemoryBank,
    pub fields: &'a [EmbeddingField],
    pub codebook: &'a Codebook,
    pub report: &'a LossReport,
}

/// Mean cosine between the two views' embeddings of co-visible source
/// pixels, or `None` when the views share no source pixel.
pub fn cross_view_mean_cosine(batch: &Batch, routing: &[[Vec<u32>; 2]]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (img, routes) in batch.images.iter().zip(routing) {
        let mut first_seen: std::collections::BTreeMap<u32, usize> =
            std::collections::BTreeMap::new();
        for (p, &src) in routes[0].iter().enumerate() {
            first_seen.entry(src).or_insert(p);
        }
        for (p1, &src) in routes[1].iter().enumerate() {
            if let Some(&p0) = first_seen.get(&src) {
                sum += cosine(
                    img.views[0].field.pixel(p0),
                    img.views[1].field.pixel(p1),
                );
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Realize one view: copy table entries through the transform and carry the
/// source segment ids along.
fn realize_view(
    table: &EmbeddingField,
    seg: &SegmentMap,
    transform: &ViewTransform,
) -> Result<(EmbeddingField, Vec<u32>, Vec<u32>)> {
    let (view_map, src_of_new) = crate::pseudoseg::transfer_segments(seg, transform)?;
    let (ow, oh) = (transform.out_w, transform.out_h);
    let dim = table.dim();
    let mut values = Vec::with_capacity(ow * oh * dim);
    let mut routing = Vec::with_capacity(ow * oh);
    for vy in 0..oh {
        for vx in 0..ow {
            let src = transform.source_index(vx, vy, table.width());
            routing.push(src as u32);
            values.extend_from_slice(table.pixel(src));
        }
    }
    let field = EmbeddingField::from_values(ow, oh, dim, values)?;
    // per-pixel source segment id
    let src_seg_of_pixel: Vec<u32> = view_map
        .ids()
        .iter()
        .map(|&local| src_of_new[local as usize])
        .collect();
    Ok((field, routing, src_seg_of_pixel))
}

/// Train on every image of the dataset (labels are never read).
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<StepLog>)> {
    train_with_hook(dataset, config, &mut |_state: &StepState| {})
}

pub fn train_with_hook(
    dataset: &Dataset,
    config: &TrainConfig,
    hook: &mut dyn FnMut(&StepState),
) -> Result<(TrainedModel, Vec<StepLog>)> {
    config.validate()?;
    let n_images = dataset.len();
    if n_images < config.batch_size {
        return Err(Error::invalid(format!(
            "dataset has {} images, batch size is {}",
            n_images, config.batch_size
        )));
    }

    // pseudo segments: reuse sidecars, compute the rest
    let mut seg_maps: Vec<SegmentMap> = Vec::with_capacity(n_images);
    for i in 0..n_images {
        match &dataset.segs[i] {
            Some(seg) => seg_maps.push(seg.clone()),
            None => seg_maps.push(segment_with(&dataset.images[i], &config.pseudoseg)?),
        }
    }

    // parameter tables
    let projection = if config.appearance_init {
        Some(AppearanceProjection::new(
            config.dim,
            subseed(config.seed, &[stream::PROJECTION]),
        )?)
    } else {
        None
    };
    let mut fields: Vec<EmbeddingField> = Vec::with_capacity(n_images);
    for (i, image) in dataset.images.iter().enumerate() {
        let field_seed = subseed(config.seed, &[stream::FIELD_INIT, i as u64]);
        let field = match &projection {
            Some(proj) => {
                EmbeddingField::from_appearance(image, proj, config.init_noise, field_seed)?
            }
            None => EmbeddingField::init(image.width(), image.height(), config.dim, field_seed)?,
        };
        fields.push(field);
    }

    let mut codebook: Option<Codebook> = None;
    let mut bank = MemoryBank::new(config.bank_batches);
    let mut log = Vec::with_capacity(config.iterations as usize);

    for step in 0..config.iterations {
        let mut rng = rng_for(config.seed, &[stream::STEP, step]);
        // batch of distinct images
        let batch_indices: Vec<usize> = {
            let mut idx: Vec<usize> = (0..n_images).collect();
            for i in 0..config.batch_size {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(config.batch_size);
            idx
        };

        // realize views and merge segments across views per image
        let mut images = Vec::with_capacity(config.batch_size);
        let mut routing: Vec<[Vec<u32>; 2]> = Vec::with_capacity(config.batch_size);
        let mut seg_image_ids = Vec::new();
        let mut seg_offset = 0u32;
        for &di in &batch_indices {
            let image_id = dataset.manifest.images[di].id;
            let (w, h) = (dataset.images[di].width(), dataset.images[di].height());
            let t0 = config.augment.sample(w, h, &mut rng);
            let t1 = config.augment.sample(w, h, &mut rng);
            let (f0, r0, s0) = realize_view(&fields[di], &seg_maps[di], &t0)?;
            let (f1, r1, s1) = realize_view(&fields[di], &seg_maps[di], &t1)?;
            // merged slots keyed by source segment id, in view order
            let mut slot_of_src: std::collections::BTreeMap<u32, u32> =
                std::collections::BTreeMap::new();
            for &src in s0.iter().chain(&s1) {
                let next = slot_of_src.len() as u32;
                slot_of_src.entry(src).or_insert(next);
            }
            let merged = |src_seg: &[u32]| -> Vec<u32> {
                src_seg
                    .iter()
                    .map(|s| seg_offset + slot_of_src[s])
                    .collect()
            };
            images.push(BatchImage {
                image_id,
                views: [
                    ViewData {
                        field: f0,
                        seg_of_pixel: merged(&s0),
                    },
                    ViewData {
                        field: f1,
                        seg_of_pixel: merged(&s1),
                    },
                ],
            });
            routing.push([r0, r1]);
            seg_image_ids.extend(std::iter::repeat(image_id).take(slot_of_src.len()));
            seg_offset += slot_of_src.len() as u32;
        }
        let batch = Batch {
            images,
            seg_count: seg_offset as usize,
            seg_image_ids,
        };

        let mut segments = BatchSegments::compute(&batch)?;
        let codebook = match codebook.as_mut() {
            Some(cb) => cb,
            None => {
                // warm start from the first batch's segment means
                let warm = Codebook::init(
                    config.concepts,
                    config.dim,
                    subseed(config.seed, &[stream::CODEBOOK]),
                    Some(&segments.as_segment_embeddings()),
                )?;
                codebook.insert(warm)
            }
        };
        segments.assign_concepts(codebook)?;

        let index = build_cooccurrence(
            segments
                .image_ids
                .iter()
                .copied()
                .zip(segments.concepts.iter().copied())
                .chain(bank.entries().map(|e| (e.image_id, e.concept_id))),
        );

        let anchors = sample_anchors(&batch, config.pixel_sample_count, &mut rng);
        let (report, grads) =
            total_loss(&batch, &segments, codebook, &bank, &index, &anchors, &config.weights);
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: serde_json::to_string(&report).unwrap_or_else(|_| "loss report".into()),
            });
        }

        let lr = lr_schedule(step, config.iterations, config.base_lr, config.poly_power);
        // descend: route view-pixel gradients back to the shared tables
        for (bi, &di) in batch_indices.iter().enumerate() {
            let dim = config.dim;
            for v in 0..2 {
                let grad = &grads.fields[bi][v];
                let routes = &routing[bi][v];
                let table = &mut fields[di];
                for (p, &src) in routes.iter().enumerate() {
                    let g = &grad[p * dim..(p + 1) * dim];
                    let target = table.pixel_mut(src as usize);
                    for d in 0..dim {
                        target[d] -= lr * g[d];
                    }
                }
            }
            fields[di].normalize_pixels();
        }
        for (v, g) in codebook.vectors_mut().iter_mut().zip(&grads.codebook) {
            *v -= lr * g;
        }
        codebook.renormalize();
        codebook.reseed_dead(
            &segments.as_segment_embeddings(),
            config.staleness_threshold,
            &mut rng,
        )?;

        bank.push_batch(
            (0..segments.count())
                .map(|s| BankEntry {
                    vector: segments.vector(s).to_vec(),
                    image_id: segments.image_ids[s],
                    concept_id: segments.concepts[s],
                    size: segments.member_counts[s],
                })
                .collect(),
        );

        hook(&StepState {
            step,
            lr,
            batch: &batch,
            routing: &routing,
            batch_indices: &batch_indices,
            bank: &bank,
            fields: &fields,
            codebook,
            report: &report,
        });
        log.push(StepLog { step, lr, report });
    }

    // snap to the model's serialized precision so in-memory and reloaded
    // models evaluate identically
    for field in &mut fields {
        for v in field.values_mut() {
            *v = *v as f32 as f64;
        }
    }
    let model = TrainedModel {
        config: config.clone(),
        image_ids: dataset.manifest.images.iter().map(|e| e.id).collect(),
        projection,
        fields,
        codebook: codebook.expect("at least one step ran"),
    };
    Ok((model, log))
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    image_ids: Vec<u64>,
    projection: Option<ProjectionMeta>,
}

#[derive(Serialize, Deserialize)]
struct ProjectionMeta {
    dim: usize,
    matrix: Vec<f64>,
}

/// Write a model directory: config.json, meta.json, codebook.vcbk,
/// fields/*.vef, log.jsonl.
pub fn save_model(model: &TrainedModel, log: &[StepLog], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(&model.config)
            .map_err(|e| Error::format(&config_path, format!("{e}")))?,
    )
    .map_err(|e| Error::io(&config_path, e))?;

    let meta = ModelMeta {
        image_ids: model.image_ids.clone(),
        projection: model.projection.as_ref().map(|p| ProjectionMeta {
            dim: p.dim,
            matrix: p.matrix.clone(),
        }),
    };
    let meta_path = dir.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_string(&meta).map_err(|e| Error::format(&meta_path, format!("{e}")))?,
    )
    .map_err(|e| Error::io(&meta_path, e))?;

    model.codebook.save(&dir.join("codebook.vcbk"))?;

    let fields_dir = dir.join("fields");
    fs::create_dir_all(&fields_dir).map_err(|e| Error::io(&fields_dir, e))?;
    for (id, field) in model.image_ids.iter().zip(&model.fields) {
        field.save(&fields_dir.join(format!("field_{id:06}.vef")))?;
    }

    let log_path = dir.join("log.jsonl");
    let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for line in log {
        serde_json::to_writer(&mut f, line).map_err(|e| Error::format(&log_path, format!("{e}")))?;
        f.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let config = TrainConfig::from_file(&dir.join("config.json"))?;
    let meta_path = dir.join("meta.json");
    let meta: ModelMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )
    .map_err(|e| Error::format(&meta_path, format!("{e}")))?;
    let codebook = Codebook::load(&dir.join("codebook.vcbk"))?;
    let mut fields = Vec::with_capacity(meta.image_ids.len());
    for id in &meta.image_ids {
        fields.push(EmbeddingField::load(
            &dir.join("fields").join(format!("field_{id:06}.vef")),
        )?);
    }
    let projection = match meta.projection {
        Some(p) => Some(AppearanceProjection::from_matrix(p.dim, p.matrix)?),
        None => None,
    };
    Ok(TrainedModel {
        config,
        image_ids: meta.image_ids,
        projection,
        fields,
        codebook,
    })
}
