//! Rendering helpers: segment and label coloring, side-by-side panels, and
//! the per-concept contact sheet.

use crate::data::hsv_to_rgb;
use crate::embeddings::{cosine, pca_project, segment_means};
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::inference::{kmeans_segment, knn_label, LabelMap};
use crate::pseudoseg::{RawImage, SegmentMap};
use crate::rng::{stream, subseed};
use crate::trainer::TrainedModel;

/// Deterministic distinct color for an id.
pub fn distinct_color(id: u32) -> [f32; 3] {
    let hue = (id as f32 * 0.618_034) % 1.0;
    let (r, g, b) = hsv_to_rgb(hue, 0.72, 0.96);
    [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]
}

/// Render a segment map with one distinct color per id.
pub fn colorize_segments(map: &SegmentMap) -> RawImage {
    let mut px = Vec::with_capacity(map.width() * map.height() * 3);
    for &id in map.ids() {
        px.extend_from_slice(&distinct_color(id));
    }
    RawImage::new(map.width(), map.height(), px).expect("palette colors are valid")
}

/// Render labels: background black, ignore white, classes distinct.
pub fn colorize_labels(labels: &LabelMap) -> RawImage {
    let mut px = Vec::with_capacity(labels.width * labels.height * 3);
    for &id in &labels.ids {
        let color = if id == labels.ignore_id {
            [1.0, 1.0, 1.0]
        } else if id == 0 {
            [0.0, 0.0, 0.0]
        } else {
            distinct_color(id)
        };
        px.extend_from_slice(&color);
    }
    RawImage::new(labels.width, labels.height, px).expect("palette colors are valid")
}

/// Stack images horizontally with a 2-pixel white separator.
pub fn hstack(images: &[RawImage]) -> Result<RawImage> {
    let first = images.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
    let h = first.height();
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::shape("stacked images must share height"));
    }
    let sep = 2usize;
    let total_w: usize = images.iter().map(|i| i.width()).sum::<usize>() + sep * (images.len() - 1);
    let mut out = RawImage::filled(total_w, h, [1.0, 1.0, 1.0])?;
    let mut x0 = 0usize;
    for img in images {
        for y in 0..h {
            for x in 0..img.width() {
                out.set_pixel(x0 + x, y, img.pixel(x, y));
            }
        }
        x0 += img.width() + sep;
    }
    Ok(out)
}

/// Per-image panel: raw | PCA embedding | k-means segments | predicted labels.
pub fn visualize_panel(
    model: &TrainedModel,
    image: &RawImage,
    field: &crate::embeddings::EmbeddingField,
    index: &crate::inference::RetrievalIndex,
    class_count: usize,
    protocol: &EvalProtocol,
    kmeans_seed: u64,
) -> Result<RawImage> {
    let pca = pca_project(field)?;
    let outcome = kmeans_segment(
        field,
        protocol.kmeans_k.min(field.pixel_count()),
        protocol.kmeans_iters,
        kmeans_seed,
    )?;
    let segments = segment_means(field, &outcome.map, 0)?;
    let classes = knn_label(&segments, index, protocol.knn)?;
    let mut ids = vec![0u32; field.pixel_count()];
    for (p, &seg) in outcome.map.ids().iter().enumerate() {
        ids[p] = classes[seg as usize];
    }
    let prediction = LabelMap::new(field.width(), field.height(), ids, class_count)?;
    let _ = model;
    hstack(&[
        image.clone(),
        pca,
        colorize_segments(&outcome.map),
        colorize_labels(&prediction),
    ])
}

/// Contact sheet of segment crops per concept, concepts ordered by
/// descending usage. Returns the sheet and the concept order used.
pub fn concept_sheet(
    model: &TrainedModel,
    dataset: &crate::data::Dataset,
    protocol: &EvalProtocol,
    samples_per_concept: usize,
    tile: usize,
) -> Result<(RawImage, Vec<u32>)> {
    let k = model.codebook.k();
    // gather candidate segments from the training split
    let mut candidates: Vec<Vec<(f64, usize, [usize; 4])>> = vec![Vec::new(); k];
    for i in dataset.train_indices() {
        let field = &model.fields[i];
        let outcome = kmeans_segment(
            field,
            protocol.kmeans_k.min(field.pixel_count()),
            protocol.kmeans_iters,
            subseed(protocol.seed, &[stream::KMEANS, model.image_ids[i]]),
        )?;
        let segments = segment_means(field, &outcome.map, model.image_ids[i])?;
        let mut bboxes = vec![[usize::MAX, usize::MAX, 0usize, 0usize]; segments.count()];
        for (p, &seg) in outcome.map.ids().iter().enumerate() {
            let b = &mut bboxes[seg as usize];
            let (x, y) = (p % field.width(), p / field.width());
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        for s in 0..segments.count() {
            let concept = model.codebook.nearest(segments.vector(s));
            let sim = cosine(segments.vector(s), model.codebook.vector(concept as usize));
            candidates[concept as usize].push((sim, i, bboxes[s]));
        }
    }
    // concepts by descending usage, active first
    let mut order: Vec<u32> = (0..k as u32).collect();
    order.sort_by(|&a, &b| {
        model.codebook.usage()[b as usize]
            .cmp(&model.codebook.usage()[a as usize])
            .then(a.cmp(&b))
    });
    let active: Vec<u32> = order
        .into_iter()
        .filter(|&c| !candidates[c as usize].is_empty())
        .collect();
    if active.is_empty() {
        return Err(Error::invalid("no active concepts to visualize"));
    }

    let gap = 1usize;
    let rows = active.len();
    let cols = samples_per_concept;
    let sheet_w = cols * tile + (cols + 1) * gap;
    let sheet_h = rows * tile + (rows + 1) * gap;
    let mut sheet = RawImage::filled(sheet_w, sheet_h, [1.0, 1.0, 1.0])?;
    for (row, &concept) in active.iter().enumerate() {
        let pool = &mut candidates[concept as usize];
        pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (col, &(_, image_idx, bbox)) in pool.iter().take(cols).enumerate() {
            let src = &dataset.images[image_idx];
            let (bw, bh) = (bbox[2] - bbox[0] + 1, bbox[3] - bbox[1] + 1);
            let ox = gap + col * (tile + gap);
            let oy = gap + row * (tile + gap);
            for ty in 0..tile {
                for tx in 0..tile {
                    let sx = bbox[0] + tx * bw / tile;
                    let sy = bbox[1] + ty * bh / tile;
                    sheet.set_pixel(ox + tx, oy + ty, src.pixel(sx, sy));
                }
            }
        }
    }
    Ok((sheet, active))
}
