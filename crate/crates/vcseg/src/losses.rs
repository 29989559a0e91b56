//! The three training losses and their analytic gradients.
//!
//! All three act on a two-view batch plus a frozen memory bank:
//!
//! * local segmentation loss: pixel-to-segment contrastive loss where a
//!   pixel's positives are its own (cross-view merged) segment and the
//!   negatives are every other segment in batch and bank;
//! * VQ loss: commitment of segment means to their assigned concept with a
//!   stop-gradient split (dictionary term updates only the concept vector,
//!   commitment term updates only the segment mean);
//! * co-occurrence loss: same contrastive form with positives redefined as
//!   every segment whose concept co-occurs with the pixel's concept.
//!
//! Bank entries contribute to loss values but never receive gradients.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{Codebook, CooccurrenceIndex};
use crate::embeddings::{norm, EmbeddingField, DEGENERATE_NORM};
use crate::error::{Error, Result};

/// Weights and constants of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    /// Concentration constant scaling cosine similarities in the softmax.
    pub kappa: f64,
    /// Commitment constant of the VQ loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_v: 2.0,
            lambda_c: 1.0,
            kappa: 10.0,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_v, self.lambda_c, self.kappa, self.beta];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("loss weights must be finite"));
        }
        if self.lambda_s < 0.0 || self.lambda_v < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.kappa <= 0.0 {
            return Err(Error::invalid("kappa must be positive"));
        }
        if self.beta <= 0.0 || self.beta > 1.0 {
            return Err(Error::invalid("beta must be in (0, 1]"));
        }
        Ok(())
    }
}

/// A frozen segment cached from a previous batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub vector: Vec<f64>,
    pub image_id: u64,
    pub concept_id: u32,
    pub size: usize,
}

/// Ring buffer of the segment embeddings of the most recent batches.
///
/// Entries are frozen copies: no gradient ever flows into them.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    capacity_batches: usize,
    batches: VecDeque<Vec<BankEntry>>,
}

impl MemoryBank {
    pub fn new(capacity_batches: usize) -> Self {
        MemoryBank {
            capacity_batches,
            batches: VecDeque::new(),
        }
    }

    pub fn capacity_batches(&self) -> usize {
        self.capacity_batches
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    pub fn entry_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Push one batch of frozen segments, evicting the oldest beyond capacity.
    pub fn push_batch(&mut self, entries: Vec<BankEntry>) {
        if self.capacity_batches == 0 {
            return;
        }
        self.batches.push_back(entries);
        while self.batches.len() > self.capacity_batches {
            self.batches.pop_front();
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.batches.iter().flatten()
    }

    pub fn batches(&self) -> impl Iterator<Item = &Vec<BankEntry>> {
        self.batches.iter()
    }
}

/// One augmented view inside a batch: its embedding field plus, per pixel,
/// the batch-level merged segment slot (`NO_SEGMENT` if none).
#[derive(Debug, Clone)]
pub struct ViewData {
    pub field: EmbeddingField,
    pub seg_of_pixel: Vec<u32>,
}

pub const NO_SEGMENT: u32 = u32::MAX;

/// Two views of one image with merged segment identity.
#[derive(Debug, Clone)]
pub struct BatchImage {
    pub image_id: u64,
    pub views: [ViewData; 2],
}

/// A training batch: per-image view pairs plus the merged segment space.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<BatchImage>,
    pub seg_count: usize,
    /// Owning image id per merged segment.
    pub seg_image_ids: Vec<u64>,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::invalid("batch must contain at least one image"));
        }
        if self.seg_image_ids.len() != self.seg_count {
            return Err(Error::shape("seg_image_ids length must equal seg_count"));
        }
        let dim = self.images[0].views[0].field.dim();
        for img in &self.images {
            for view in &img.views {
                if view.field.dim() != dim {
                    return Err(Error::shape("all view fields must share dim"));
                }
                if view.seg_of_pixel.len() != view.field.pixel_count() {
                    return Err(Error::shape("seg_of_pixel must cover every pixel"));
                }
                if view
                    .seg_of_pixel
                    .iter()
                    .any(|&s| s != NO_SEGMENT && s as usize >= self.seg_count)
                {
                    return Err(Error::invalid("segment slot out of range"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.images[0].views[0].field.dim()
    }
}

/// Mean embeddings of the batch's merged segments.
#[derive(Debug, Clone)]
pub struct BatchSegments {
    pub dim: usize,
    /// seg_count × dim row-major means over member pixels of both views.
    pub vectors: Vec<f64>,
    pub member_counts: Vec<usize>,
    pub image_ids: Vec<u64>,
    /// Concept assignment per segment; filled by the caller.
    pub concepts: Vec<u32>,
}

impl BatchSegments {
    /// Compute member counts and mean vectors from a batch.
    pub fn compute(batch: &Batch) -> Result<Self> {
        batch.validate()?;
        let dim = batch.dim();
        let n = batch.seg_count;
        let mut vectors = vec![0.0f64; n * dim];
        let mut member_counts = vec![0usize; n];
        for img in &batch.images {
            for view in &img.views {
                for (p, &slot) in view.seg_of_pixel.iter().enumerate() {
                    if slot == NO_SEGMENT {
                        continue;
                    }
                    let s = slot as usize;
                    member_counts[s] += 1;
                    let v = view.field.pixel(p);
                    let acc = &mut vectors[s * dim..(s + 1) * dim];
                    for d in 0..dim {
                        acc[d] += v[d];
                    }
                }
            }
        }
        for s in 0..n {
            if member_counts[s] == 0 {
                return Err(Error::invalid(format!("merged segment {s} has no member pixels")));
            }
            let inv = 1.0 / member_counts[s] as f64;
            for d in 0..dim {
                vectors[s * dim + d] *= inv;
            }
        }
        Ok(BatchSegments {
            dim,
            vectors,
            member_counts,
            image_ids: batch.seg_image_ids.clone(),
            concepts: Vec::new(),
        })
    }

    pub fn vector(&self, s: usize) -> &[f64] {
        &self.vectors[s * self.dim..(s + 1) * self.dim]
    }

    pub fn count(&self) -> usize {
        self.member_counts.len()
    }

    /// Assign every segment to its nearest concept, updating codebook
    /// counters, and record the assignment.
    pub fn assign_concepts(&mut self, codebook: &mut Codebook) -> Result<()> {
        let segs = self.as_segment_embeddings();
        self.concepts = codebook.assign(&segs)?;
        Ok(())
    }

    /// View as a [`SegmentEmbeddings`] block (image_id 0: mixed batch).
    pub fn as_segment_embeddings(&self) -> crate::embeddings::SegmentEmbeddings {
        crate::embeddings::SegmentEmbeddings {
            dim: self.dim,
            vectors: self.vectors.clone(),
            sizes: self.member_counts.clone(),
            image_id: 0,
            concept_ids: if self.concepts.is_empty() {
                None
            } else {
                Some(self.concepts.clone())
            },
        }
    }
}

/// One sampled loss anchor: a pixel occurrence in a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub image: u32,
    pub view: u8,
    pub pixel: u32,
}

/// Every pixel of every view, in deterministic order.
pub fn all_anchors(batch: &Batch) -> Vec<Anchor> {
    let mut anchors = Vec::new();
    for (i, img) in batch.images.iter().enumerate() {
        for (v, view) in img.views.iter().enumerate() {
            for p in 0..view.field.pixel_count() {
                anchors.push(Anchor {
                    image: i as u32,
                    view: v as u8,
                    pixel: p as u32,
                });
            }
        }
    }
    anchors
}

/// Sample `count` anchors uniformly without replacement (all if `count` is 0
/// or exceeds the pixel total).
pub fn sample_anchors(batch: &Batch, count: usize, rng: &mut ChaCha8Rng) -> Vec<Anchor> {
    let all = all_anchors(batch);
    if count == 0 || count >= all.len() {
        return all;
    }
    // partial Fisher-Yates over index space
    let mut idx: Vec<usize> = (0..all.len()).collect();
    let mut picked = Vec::with_capacity(count);
    for i in 0..count {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
        picked.push(all[idx[i]]);
    }
    picked
}

/// Unified slot table over batch segments followed by bank entries.
struct SlotTable<'a> {
    dim: usize,
    batch_count: usize,
    vectors: Vec<&'a [f64]>,
    concepts: Vec<u32>,
    norms: Vec<f64>,
}

impl<'a> SlotTable<'a> {
    fn build(segs: &'a BatchSegments, bank: &'a MemoryBank) -> Self {
        let mut vectors: Vec<&[f64]> = Vec::with_capacity(segs.count() + bank.entry_count());
        let mut concepts = Vec::with_capacity(vectors.capacity());
        for s in 0..segs.count() {
            vectors.push(segs.vector(s));
            concepts.push(segs.concepts.get(s).copied().unwrap_or(u32::MAX));
        }
        for e in bank.entries() {
            vectors.push(&e.vector);
            concepts.push(e.concept_id);
        }
        let norms = vectors.iter().map(|v| norm(v)).collect();
        SlotTable {
            dim: segs.dim,
            batch_count: segs.count(),
            vectors,
            concepts,
            norms,
        }
    }

    fn len(&self) -> usize {
        self.vectors.len()
    }
}

/// Value and gradients of one contrastive term.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    /// Mean loss over used anchors.
    pub value: f64,
    /// Gradient of the mean w.r.t. each anchor's pixel embedding,
    /// aligned with the anchor list (zero vectors for skipped anchors).
    pub grad_anchors: Vec<f64>,
    /// Gradient of the mean w.r.t. each batch segment mean.
    pub grad_segments: Vec<f64>,
    pub used_anchors: usize,
    pub skipped_anchors: usize,
    pub degenerate_count: u64,
}

fn contrastive_core<F>(
    batch: &Batch,
    table: &SlotTable,
    anchors: &[Anchor],
    kappa: f64,
    mut positives: F,
) -> ContrastiveOutput
where
    F: FnMut(u32, &mut Vec<bool>) -> bool,
{
    let dim = table.dim;
    let m = table.len();
    let mut grad_anchors = vec![0.0f64; anchors.len() * dim];
    let mut grad_segments = vec![0.0f64; table.batch_count * dim];
    let mut value_sum = 0.0f64;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut degenerate: u64 = 0;

    let mut sims = vec![0.0f64; m];
    let mut logits = vec![0.0f64; m];
    let mut sim_ok = vec![false; m];
    let mut pos_mask = vec![false; m];

    for (ai, anchor) in anchors.iter().enumerate() {
        let view = &batch.images[anchor.image as usize].views[anchor.view as usize];
        let own_slot = view.seg_of_pixel[anchor.pixel as usize];
        if own_slot == NO_SEGMENT {
            skipped += 1;
            continue;
        }
        if !positives(own_slot, &mut pos_mask) {
            skipped += 1;
            continue;
        }
        let zp = view.field.pixel(anchor.pixel as usize);
        let np = norm(zp);
        let anchor_ok = np >= DEGENERATE_NORM;

        let mut max_all = f64::NEG_INFINITY;
        let mut max_pos = f64::NEG_INFINITY;
        for i in 0..m {
            let ns = table.norms[i];
            let ok = anchor_ok && ns >= DEGENERATE_NORM;
            let sim = if ok {
                (crate::embeddings::dot(zp, table.vectors[i]) / (np * ns)).clamp(-1.0, 1.0)
            } else {
                degenerate += 1;
                0.0
            };
            sims[i] = sim;
            sim_ok[i] = ok;
            let l = kappa * sim;
            logits[i] = l;
            max_all = max_all.max(l);
            if pos_mask[i] {
                max_pos = max_pos.max(l);
            }
        }
        let mut sum_all = 0.0f64;
        let mut sum_pos = 0.0f64;
        for i in 0..m {
            sum_all += (logits[i] - max_all).exp();
            if pos_mask[i] {
                sum_pos += (logits[i] - max_pos).exp();
            }
        }
        value_sum += (max_all + sum_all.ln()) - (max_pos + sum_pos.ln());
        used += 1;

        let ga = &mut grad_anchors[ai * dim..(ai + 1) * dim];
        for i in 0..m {
            let w = (logits[i] - max_all).exp() / sum_all;
            let v = if pos_mask[i] {
                (logits[i] - max_pos).exp() / sum_pos
            } else {
                0.0
            };
            let coef = kappa * (w - v);
            if coef == 0.0 || !sim_ok[i] {
                continue;
            }
            let zs = table.vectors[i];
            let ns = table.norms[i];
            let cos = sims[i];
            // d cos / d z_p = (z_s/ns - cos * z_p/np) / np
            let inv_np = 1.0 / np;
            let inv_ns = 1.0 / ns;
            for d in 0..dim {
                ga[d] += coef * inv_np * (zs[d] * inv_ns - cos * zp[d] * inv_np);
            }
            if i < table.batch_count {
                let gs = &mut grad_segments[i * dim..(i + 1) * dim];
                for d in 0..dim {
                    gs[d] += coef * inv_ns * (zp[d] * inv_np - cos * zs[d] * inv_ns);
                }
            }
        }
    }

    if used > 0 {
        let inv = 1.0 / used as f64;
        value_sum *= inv;
        for g in &mut grad_anchors {
            *g *= inv;
        }
        for g in &mut grad_segments {
            *g *= inv;
        }
    }
    ContrastiveOutput {
        value: value_sum,
        grad_anchors,
        grad_segments,
        used_anchors: used,
        skipped_anchors: skipped,
        degenerate_count: degenerate,
    }
}

/// Pixel-to-segment contrastive loss over the batch plus bank.
///
/// A pixel's positives are its merged segment; every other segment in the
/// batch and every bank entry is a negative. Pixels without a segment are
/// skipped and counted.
pub fn local_segmentation_loss(
    batch: &Batch,
    segs: &BatchSegments,
    bank: &MemoryBank,
    anchors: &[Anchor],
    kappa: f64,
) -> ContrastiveOutput {
    let table = SlotTable::build(segs, bank);
    let m = table.len();
    contrastive_core(batch, &table, anchors, kappa, |own, mask| {
        mask[..m].fill(false);
        mask[own as usize] = true;
        true
    })
}

/// Co-occurrence contrastive loss: positives are all segments (batch and
/// bank) whose concept co-occurs with the pixel's concept.
pub fn cooccurrence_loss(
    batch: &Batch,
    segs: &BatchSegments,
    bank: &MemoryBank,
    index: &CooccurrenceIndex,
    anchors: &[Anchor],
    kappa: f64,
) -> ContrastiveOutput {
    assert_eq!(
        segs.concepts.len(),
        segs.count(),
        "co-occurrence loss requires concept assignments"
    );
    let table = SlotTable::build(segs, bank);
    let m = table.len();
    contrastive_core(batch, &table, anchors, kappa, |own, mask| {
        let own_concept = table.concepts[own as usize];
        let mut any = false;
        for i in 0..m {
            let is_pos = index.contains(own_concept, table.concepts[i]);
            mask[i] = is_pos;
            any |= is_pos;
        }
        any
    })
}

/// Value and gradients of the VQ term.
#[derive(Debug, Clone)]
pub struct VqOutput {
    /// Mean over anchors of the VQ loss of the anchor's segment.
    pub value: f64,
    /// Gradient of the mean w.r.t. each batch segment mean
    /// (commitment term only: the dictionary side is stop-gradient).
    pub grad_segments: Vec<f64>,
    /// Gradient of the mean w.r.t. the codebook vectors
    /// (dictionary term only: the segment side is stop-gradient).
    pub grad_codebook: Vec<f64>,
    /// Per-segment loss values (1 + beta) * (1 - sim).
    pub per_segment: Vec<f64>,
    pub used_anchors: usize,
    pub skipped_anchors: usize,
    pub degenerate_count: u64,
}

/// VQ loss with stop-gradient split, averaged per pixel.
///
/// Per segment s with assigned concept k:
/// `(1 - sim(sg(z_s), e_k)) + beta * (1 - sim(z_s, sg(e_k)))`.
/// The per-pixel value is the loss of the pixel's segment, so segments are
/// weighted by how many anchors fall inside them.
pub fn vq_loss(
    batch: &Batch,
    segs: &BatchSegments,
    codebook: &Codebook,
    anchors: &[Anchor],
    beta: f64,
) -> VqOutput {
    assert_eq!(
        segs.concepts.len(),
        segs.count(),
        "vq loss requires concept assignments"
    );
    let dim = segs.dim;
    let n = segs.count();
    let mut anchor_counts = vec![0usize; n];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for anchor in anchors {
        let view = &batch.images[anchor.image as usize].views[anchor.view as usize];
        let slot = view.seg_of_pixel[anchor.pixel as usize];
        if slot == NO_SEGMENT {
            skipped += 1;
        } else {
            anchor_counts[slot as usize] += 1;
            used += 1;
        }
    }

    let mut per_segment = vec![0.0f64; n];
    let mut grad_segments = vec![0.0f64; n * dim];
    let mut grad_codebook = vec![0.0f64; codebook.k() * codebook.dim()];
    let mut value = 0.0f64;
    let mut degenerate: u64 = 0;

    for s in 0..n {
        let k = segs.concepts[s] as usize;
        let zs = segs.vector(s);
        let ek = codebook.vector(k);
        let nz = norm(zs);
        let ne = norm(ek);
        let ok = nz >= DEGENERATE_NORM && ne >= DEGENERATE_NORM;
        let sim = if ok {
            (crate::embeddings::dot(zs, ek) / (nz * ne)).clamp(-1.0, 1.0)
        } else {
            degenerate += 1;
            0.0
        };
        per_segment[s] = (1.0 + beta) * (1.0 - sim);
        if anchor_counts[s] == 0 || used == 0 {
            continue;
        }
        let weight = anchor_counts[s] as f64 / used as f64;
        value += weight * per_segment[s];
        if !ok {
            continue;
        }
        let inv_nz = 1.0 / nz;
        let inv_ne = 1.0 / ne;
        // commitment term: -beta * d sim / d z_s
        let gs = &mut grad_segments[s * dim..(s + 1) * dim];
        for d in 0..dim {
            gs[d] -= weight * beta * inv_nz * (ek[d] * inv_ne - sim * zs[d] * inv_nz);
        }
        // dictionary term: -d sim / d e_k
        let gk = &mut grad_codebook[k * dim..(k + 1) * dim];
        for d in 0..dim {
            gk[d] -= weight * inv_ne * (zs[d] * inv_nz - sim * ek[d] * inv_ne);
        }
    }

    VqOutput {
        value,
        grad_segments,
        grad_codebook,
        per_segment,
        used_anchors: used,
        skipped_anchors: skipped,
        degenerate_count: degenerate,
    }
}

/// Per-step loss summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_v: f64,
    pub l_c: f64,
    pub total: f64,
    pub degenerate_similarity_count: u64,
    pub skipped_pixels: u64,
    pub grad_field_norm: f64,
    pub grad_codebook_norm: f64,
}

/// Gradients of the total loss w.r.t. every view pixel and codebook vector.
#[derive(Debug, Clone)]
pub struct StepGradients {
    /// Per batch image, per view: pixel-major (dim-contiguous) gradients.
    pub fields: Vec<[Vec<f64>; 2]>,
    /// K×dim codebook gradient.
    pub codebook: Vec<f64>,
}

impl StepGradients {
    pub fn zeros(batch: &Batch, codebook_k: usize, dim: usize) -> Self {
        let fields = batch
            .images
            .iter()
            .map(|img| {
                [
                    vec![0.0f64; img.views[0].field.pixel_count() * dim],
                    vec![0.0f64; img.views[1].field.pixel_count() * dim],
                ]
            })
            .collect();
        StepGradients {
            fields,
            codebook: vec![0.0f64; codebook_k * dim],
        }
    }

    pub fn field_norm(&self) -> f64 {
        self.fields
            .iter()
            .flat_map(|views| views.iter())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn codebook_norm(&self) -> f64 {
        self.codebook.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.codebook.iter().all(|v| v.is_finite())
            && self
                .fields
                .iter()
                .all(|views| views.iter().all(|g| g.iter().all(|v| v.is_finite())))
    }
}

/// Chain segment-mean gradients to member pixels and add anchor gradients,
/// scaled by `scale`, into `out`.
///
/// A member pixel of segment s receives `grad_segments[s] / |s|`; an anchor
/// pixel additionally receives its direct gradient.
pub fn accumulate_field_grads(
    batch: &Batch,
    anchors: &[Anchor],
    grad_anchors: &[f64],
    grad_segments: &[f64],
    member_counts: &[usize],
    scale: f64,
    out: &mut StepGradients,
) {
    let dim = batch.dim();
    if !grad_segments.is_empty() {
        let mut per_member: Vec<f64> = grad_segments.to_vec();
        for (s, &count) in member_counts.iter().enumerate() {
            let inv = scale / count as f64;
            for d in 0..dim {
                per_member[s * dim + d] *= inv;
            }
        }
        for (i, img) in batch.images.iter().enumerate() {
            for (v, view) in img.views.iter().enumerate() {
                let field_grad = &mut out.fields[i][v];
                for (p, &slot) in view.seg_of_pixel.iter().enumerate() {
                    if slot == NO_SEGMENT {
                        continue;
                    }
                    let src = &per_member[slot as usize * dim..(slot as usize + 1) * dim];
                    let dst = &mut field_grad[p * dim..(p + 1) * dim];
                    for d in 0..dim {
                        dst[d] += src[d];
                    }
                }
            }
        }
    }
    if !grad_anchors.is_empty() {
        for (ai, anchor) in anchors.iter().enumerate() {
            let src = &grad_anchors[ai * dim..(ai + 1) * dim];
            let dst = &mut out.fields[anchor.image as usize][anchor.view as usize]
                [anchor.pixel as usize * dim..(anchor.pixel as usize + 1) * dim];
            for d in 0..dim {
                dst[d] += scale * src[d];
            }
        }
    }
}

/// Weighted combination of the three losses with full gradients.
///
/// Terms with zero weight are not computed and report as zero.
pub fn total_loss(
    batch: &Batch,
    segs: &BatchSegments,
    codebook: &Codebook,
    bank: &MemoryBank,
    index: &CooccurrenceIndex,
    anchors: &[Anchor],
    weights: &LossWeights,
) -> (LossReport, StepGradients) {
    let dim = batch.dim();
    let mut grads = StepGradients::zeros(batch, codebook.k(), dim);
    let mut degenerate = 0u64;
    let mut skipped = 0u64;

    let l_s = if weights.lambda_s > 0.0 {
        let out = local_segmentation_loss(batch, segs, bank, anchors, weights.kappa);
        accumulate_field_grads(
            batch,
            anchors,
            &out.grad_anchors,
            &out.grad_segments,
            &segs.member_counts,
            weights.lambda_s,
            &mut grads,
        );
        degenerate += out.degenerate_count;
        skipped += out.skipped_anchors as u64;
        out.value
    } else {
        0.0
    };

    let l_v = if weights.lambda_v > 0.0 {
        let out = vq_loss(batch, segs, codebook, anchors, weights.beta);
        accumulate_field_grads(
            batch,
            anchors,
            &[],
            &out.grad_segments,
            &segs.member_counts,
            weights.lambda_v,
            &mut grads,
        );
        for (g, src) in grads.codebook.iter_mut().zip(&out.grad_codebook) {
            *g += weights.lambda_v * src;
        }
        degenerate += out.degenerate_count;
        out.value
    } else {
        0.0
    };

    let l_c = if weights.lambda_c > 0.0 {
        let out = cooccurrence_loss(batch, segs, bank, index, anchors, weights.kappa);
        accumulate_field_grads(
            batch,
            anchors,
            &out.grad_anchors,
            &out.grad_segments,
            &segs.member_counts,
            weights.lambda_c,
            &mut grads,
        );
        degenerate += out.degenerate_count;
        out.value
    } else {
        0.0
    };

    let total = weights.lambda_s * l_s + weights.lambda_v * l_v + weights.lambda_c * l_c;
    let report = LossReport {
        l_s,
        l_v,
        l_c,
        total,
        degenerate_similarity_count: degenerate,
        skipped_pixels: skipped,
        grad_field_norm: grads.field_norm(),
        grad_codebook_norm: grads.codebook_norm(),
    };
    (report, grads)
}
