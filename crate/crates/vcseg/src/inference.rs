//! From trained embeddings to labels: spherical k-means segmentation,
//! nearest-neighbor label transfer, a linear softmax probe, and video mask
//! propagation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embeddings::{cosine, dot, norm, normalize_vec, EmbeddingField, SegmentEmbeddings};
use crate::error::{Error, Result};
use crate::pseudoseg::SegmentMap;

/// Per-pixel class (or object) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
    pub class_count: usize,
    /// Pixels with this id are excluded from metrics and references.
    pub ignore_id: u32,
}

/// Instance masks use the same layout: 0 is background, objects are 1..N.
pub type MaskSet = LabelMap;

pub const DEFAULT_IGNORE_ID: u32 = 255;

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u32>, class_count: usize) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} labels, got {}",
                width * height,
                ids.len()
            )));
        }
        let map = LabelMap {
            width,
            height,
            ids,
            class_count,
            ignore_id: DEFAULT_IGNORE_ID,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .ids
            .iter()
            .any(|&id| id != self.ignore_id && id as usize >= self.class_count)
        {
            return Err(Error::invalid("label id out of range"));
        }
        Ok(())
    }

    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// Labels present, ignoring `ignore_id`.
    pub fn present_labels(&self) -> Vec<u32> {
        let mut seen = vec![false; self.class_count];
        for &id in &self.ids {
            if id != self.ignore_id {
                seen[id as usize] = true;
            }
        }
        (0..self.class_count as u32)
            .filter(|&c| seen[c as usize])
            .collect()
    }
}

/// Result of spherical k-means over a field.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    /// Clusters split into 4-connected components.
    pub map: SegmentMap,
    pub cluster_of_pixel: Vec<u32>,
    /// k×dim unit centroids.
    pub centroids: Vec<f64>,
    /// Objective (sum of 1 - cosine) after each assignment phase.
    pub objective_trace: Vec<f64>,
}

/// Spherical k-means over pixel embeddings.
///
/// Cosine distance with normalized-mean centroid updates, seeded
/// k-means++-style initialization, empty clusters reseeded from the worst-fit
/// point. Runs `iters` iterations or stops early once assignments are stable.
/// Final clusters are split into 4-connected components to form the map.
pub fn kmeans_segment(
    field: &EmbeddingField,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KmeansOutcome> {
    let n = field.pixel_count();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds pixel count {n}")));
    }
    if iters == 0 {
        return Err(Error::invalid("iters must be at least 1"));
    }
    let dim = field.dim();
    // normalized copies so that mean-then-normalize maximizes mean cosine
    let mut points = field.values().to_vec();
    for p in 0..n {
        let v = &mut points[p * dim..(p + 1) * dim];
        let nv = norm(v);
        if nv >= crate::embeddings::DEGENERATE_NORM {
            for x in v {
                *x /= nv;
            }
        } else {
            v.fill(0.0);
        }
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    // greedy k-means++ seeding: sample several candidates per step by the
    // (1 - best cosine) potential and keep the one reducing it the most
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![0.0f64; k * dim];
    let first = rng.gen_range(0..n);
    centroids[0..dim].copy_from_slice(point(first));
    let candidates = 2 + (k as f64).ln().ceil() as usize;
    let mut best_sim = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        best_sim[i] = dot(point(i), &centroids[0..dim]);
    }
    for c in 1..k {
        let mut weights = vec![0.0f64; n];
        let mut total = 0.0;
        for i in 0..n {
            let w = (1.0 - best_sim[i]).max(0.0);
            weights[i] = w;
            total += w;
        }
        let mut best_pick = usize::MAX;
        let mut best_potential = f64::INFINITY;
        for _ in 0..candidates {
            let pick = if total > 0.0 {
                let mut target = rng.gen_range(0.0..total);
                let mut chosen = n - 1;
                for (i, &w) in weights.iter().enumerate() {
                    if target < w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                chosen
            } else {
                rng.gen_range(0..n)
            };
            let cand = point(pick);
            let mut potential = 0.0;
            for i in 0..n {
                let s = dot(point(i), cand).max(best_sim[i]);
                potential += (1.0 - s).max(0.0);
            }
            if potential < best_potential {
                best_potential = potential;
                best_pick = pick;
            }
        }
        let chosen = point(best_pick);
        for i in 0..n {
            let s = dot(point(i), chosen);
            if s > best_sim[i] {
                best_sim[i] = s;
            }
        }
        centroids[c * dim..(c + 1) * dim].copy_from_slice(chosen);
    }

    let mut assignment = vec![0u32; n];
    let mut objective_trace = Vec::with_capacity(iters);
    for _it in 0..iters {
        // assignment phase
        let mut objective = 0.0f64;
        let mut changed = false;
        for i in 0..n {
            let mut best = 0u32;
            let mut best_s = f64::NEG_INFINITY;
            for c in 0..k {
                let s = dot(point(i), &centroids[c * dim..(c + 1) * dim]);
                if s > best_s {
                    best_s = s;
                    best = c as u32;
                }
            }
            objective += 1.0 - best_s.clamp(-1.0, 1.0);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if let Some(&prev) = objective_trace.last() {
            debug_assert!(
                objective <= prev + 1e-9,
                "k-means objective increased: {prev} -> {objective}"
            );
        }
        objective_trace.push(objective);
        if !changed && objective_trace.len() > 1 {
            break;
        }
        // update phase
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i] as usize;
            counts[c] += 1;
            let p = point(i);
            let acc = &mut sums[c * dim..(c + 1) * dim];
            for d in 0..dim {
                acc[d] += p[d];
            }
        }
        let mut stolen = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let v = &mut sums[c * dim..(c + 1) * dim];
                normalize_vec(v);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(v);
            } else {
                // reseed from the worst-fit point not already stolen
                let mut worst = usize::MAX;
                let mut worst_sim = f64::INFINITY;
                for i in 0..n {
                    if stolen[i] {
                        continue;
                    }
                    let a = assignment[i] as usize;
                    let s = dot(point(i), &centroids[a * dim..(a + 1) * dim]);
                    if s < worst_sim {
                        worst_sim = s;
                        worst = i;
                    }
                }
                if worst != usize::MAX {
                    stolen[worst] = true;
                    centroids[c * dim..(c + 1) * dim].copy_from_slice(point(worst));
                }
            }
        }
    }

    let (labels, _count) =
        crate::pseudoseg::connected_components(&assignment, field.width(), field.height());
    let map = SegmentMap::from_ids(field.width(), field.height(), labels)?;
    Ok(KmeansOutcome {
        map,
        cluster_of_pixel: assignment,
        centroids,
        objective_trace,
    })
}

/// Labeled segment vectors from the training set, unit-normalized for
/// cosine retrieval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalIndex {
    pub dim: usize,
    vectors: Vec<f64>,
    labels: Vec<u32>,
}

impl RetrievalIndex {
    pub fn new(dim: usize) -> Self {
        RetrievalIndex {
            dim,
            vectors: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, vector: &[f64], label: u32) {
        debug_assert_eq!(vector.len(), self.dim);
        let mut v = vector.to_vec();
        normalize_vec(&mut v);
        self.vectors.extend_from_slice(&v);
        self.labels.push(label);
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"VIDX");
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for &v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[0..4] != b"VIDX" {
            return Err(Error::format(path, "not a retrieval index"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + count * dim * 8 + count * 4 {
            return Err(Error::format(path, "truncated retrieval index"));
        }
        let vectors = (0..count * dim)
            .map(|i| f64::from_le_bytes(bytes[12 + i * 8..20 + i * 8].try_into().unwrap()))
            .collect();
        let base = 12 + count * dim * 8;
        let labels = (0..count)
            .map(|i| u32::from_le_bytes(bytes[base + i * 4..base + i * 4 + 4].try_into().unwrap()))
            .collect();
        Ok(RetrievalIndex {
            dim,
            vectors,
            labels,
        })
    }
}

/// Majority class among the `k_neighbors` highest-cosine index entries.
///
/// Vote ties break by summed similarity, then lowest class id.
pub fn knn_label(
    queries: &SegmentEmbeddings,
    index: &RetrievalIndex,
    k_neighbors: usize,
) -> Result<Vec<u32>> {
    if index.is_empty() {
        return Err(Error::invalid("retrieval index is empty"));
    }
    if queries.dim != index.dim {
        return Err(Error::shape("query dim differs from index dim"));
    }
    let k = k_neighbors.max(1).min(index.len());
    let mut out = Vec::with_capacity(queries.count());
    for q in 0..queries.count() {
        let qv = queries.vector(q);
        let mut scored: Vec<(f64, usize)> = (0..index.len())
            .map(|i| (cosine(qv, index.vector(i)), i))
            .collect();
        scored.select_nth_unstable_by(k - 1, |a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
        });
        out.push(vote(&scored[..k], index));
    }
    Ok(out)
}

fn vote(neighbors: &[(f64, usize)], index: &RetrievalIndex) -> u32 {
    let mut counts: std::collections::BTreeMap<u32, (usize, f64)> =
        std::collections::BTreeMap::new();
    for &(sim, i) in neighbors {
        let e = counts.entry(index.label(i)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += sim;
    }
    let mut best: Option<(u32, usize, f64)> = None;
    for (&class, &(count, sim_sum)) in &counts {
        let better = match best {
            None => true,
            Some((bc, bcount, bsim)) => {
                count > bcount
                    || (count == bcount && sim_sum > bsim)
                    || (count == bcount && sim_sum == bsim && class < bc)
            }
        };
        if better {
            best = Some((class, count, sim_sum));
        }
    }
    best.map(|(c, _, _)| c).unwrap_or(0)
}

/// A per-pixel softmax classifier over frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub class_count: usize,
    pub dim: usize,
    /// class_count × dim weight rows.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(class_count: usize, dim: usize) -> Self {
        LinearProbe {
            class_count,
            dim,
            weights: vec![0.0; class_count * dim],
            bias: vec![0.0; class_count],
        }
    }

    fn scores(&self, x: &[f64], out: &mut [f64]) {
        for c in 0..self.class_count {
            out[c] = self.bias[c] + dot(&self.weights[c * self.dim..(c + 1) * self.dim], x);
        }
    }
}

/// Pixel samples for probe training: embeddings plus class labels with
/// ignore pixels already excluded.
#[derive(Debug, Clone)]
pub struct ProbeSamples {
    pub dim: usize,
    pub class_count: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<u32>,
}

impl ProbeSamples {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// Collect up to `per_image` pixels per (field, labels) pair, seeded.
    pub fn collect(
        pairs: &[(&EmbeddingField, &LabelMap)],
        class_count: usize,
        per_image: usize,
        seed: u64,
    ) -> Result<Self> {
        let dim = pairs
            .first()
            .map(|(f, _)| f.dim())
            .ok_or_else(|| Error::invalid("no training pairs"))?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (field, labels) in pairs {
            if field.width() != labels.width || field.height() != labels.height {
                return Err(Error::shape("field and label map sizes differ"));
            }
            let valid: Vec<usize> = (0..field.pixel_count())
                .filter(|&p| labels.ids[p] != labels.ignore_id)
                .collect();
            let take = if per_image == 0 || per_image >= valid.len() {
                valid
            } else {
                let mut idx = valid;
                for i in 0..per_image {
                    let j = rng.gen_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx.truncate(per_image);
                idx
            };
            for p in take {
                xs.extend_from_slice(field.pixel(p));
                ys.push(labels.ids[p]);
            }
        }
        Ok(ProbeSamples {
            dim,
            class_count,
            xs,
            ys,
        })
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean softmax cross-entropy of the probe on samples.
pub fn linear_probe_loss(probe: &LinearProbe, samples: &ProbeSamples) -> f64 {
    let n = samples.len();
    let mut scores = vec![0.0f64; probe.class_count];
    let mut loss = 0.0;
    for i in 0..n {
        probe.scores(samples.x(i), &mut scores);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        loss += lse - scores[samples.ys[i] as usize];
    }
    loss / n as f64
}

/// Full-batch gradient descent on multinomial logistic regression.
///
/// Returns the trained probe and the loss after every epoch.
pub fn linear_probe_train(
    samples: &ProbeSamples,
    epochs: usize,
    lr: f64,
) -> Result<(LinearProbe, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("no probe samples"));
    }
    let distinct: std::collections::BTreeSet<u32> = samples.ys.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("probe training needs at least two classes"));
    }
    let (n, dim, classes) = (samples.len(), samples.dim, samples.class_count);
    let mut probe = LinearProbe::zeros(classes, dim);
    let mut trace = Vec::with_capacity(epochs);
    let mut scores = vec![0.0f64; classes];
    let mut grad_w = vec![0.0f64; classes * dim];
    let mut grad_b = vec![0.0f64; classes];
    for _epoch in 0..epochs {
        grad_w.fill(0.0);
        grad_b.fill(0.0);
        let mut loss = 0.0;
        for i in 0..n {
            let x = samples.x(i);
            probe.scores(x, &mut scores);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            loss += -(scores[samples.ys[i] as usize] / sum).ln();
            for c in 0..classes {
                let p = scores[c] / sum - if samples.ys[i] as usize == c { 1.0 } else { 0.0 };
                grad_b[c] += p;
                let gw = &mut grad_w[c * dim..(c + 1) * dim];
                for d in 0..dim {
                    gw[d] += p * x[d];
                }
            }
        }
        let inv = 1.0 / n as f64;
        for (w, g) in probe.weights.iter_mut().zip(&grad_w) {
            *w -= lr * g * inv;
        }
        for (b, g) in probe.bias.iter_mut().zip(&grad_b) {
            *b -= lr * g * inv;
        }
        trace.push(loss * inv);
    }
    Ok((probe, trace))
}

/// Per-pixel argmax of class scores.
pub fn linear_probe_apply(probe: &LinearProbe, field: &EmbeddingField) -> Result<LabelMap> {
    if field.dim() != probe.dim {
        return Err(Error::shape("field dim differs from probe dim"));
    }
    let mut ids = Vec::with_capacity(field.pixel_count());
    let mut scores = vec![0.0f64; probe.class_count];
    for p in 0..field.pixel_count() {
        probe.scores(field.pixel(p), &mut scores);
        let mut best = 0u32;
        let mut best_s = f64::NEG_INFINITY;
        for (c, &s) in scores.iter().enumerate() {
            if s > best_s {
                best_s = s;
                best = c as u32;
            }
        }
        ids.push(best);
    }
    LabelMap::new(field.width(), field.height(), ids, probe.class_count)
}

/// Propagate first-frame masks through a video by windowed nearest-neighbor
/// label transfer against frame 1 and the previous frame.
///
/// Pixels whose window holds no usable reference (all ignored) fall back to a
/// full-frame search; the fallback count is returned.
pub fn propagate_masks(
    fields: &[EmbeddingField],
    first: &MaskSet,
    k_neighbors: usize,
    window_radius: usize,
) -> Result<(Vec<MaskSet>, u64)> {
    let t0 = fields
        .first()
        .ok_or_else(|| Error::invalid("video needs at least one frame"))?;
    let (w, h) = (t0.width(), t0.height());
    if first.width != w || first.height != h {
        return Err(Error::shape("first-frame mask size differs from fields"));
    }
    if fields
        .iter()
        .any(|f| f.width() != w || f.height() != h || f.dim() != t0.dim())
    {
        return Err(Error::shape("all frames must share dimensions"));
    }
    if k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    let mut out = vec![first.clone()];
    let mut fallbacks = 0u64;
    for t in 1..fields.len() {
        let field_t = &fields[t];
        let prev_labels = out[t - 1].clone();
        let refs: [(&EmbeddingField, &MaskSet); 2] =
            [(&fields[0], first), (&fields[t - 1], &prev_labels)];
        let rows: Vec<(Vec<u32>, u64)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::with_capacity(w);
                let mut row_fallbacks = 0u64;
                let mut heap: Vec<(f64, u32, usize)> = Vec::new();
                for x in 0..w {
                    let zp = field_t.pixel_at(x, y);
                    heap.clear();
                    let mut order = 0usize;
                    let x0 = x.saturating_sub(window_radius);
                    let x1 = (x + window_radius).min(w - 1);
                    let y0 = y.saturating_sub(window_radius);
                    let y1 = (y + window_radius).min(h - 1);
                    for (rf, rm) in refs.iter() {
                        for ry in y0..=y1 {
                            for rx in x0..=x1 {
                                let label = rm.id_at(rx, ry);
                                if label == rm.ignore_id {
                                    continue;
                                }
                                push_neighbor(
                                    &mut heap,
                                    k_neighbors,
                                    cosine(zp, rf.pixel_at(rx, ry)),
                                    label,
                                    order,
                                );
                                order += 1;
                            }
                        }
                    }
                    if heap.is_empty() {
                        // full-frame fallback
                        row_fallbacks += 1;
                        for (rf, rm) in refs.iter() {
                            for p in 0..w * h {
                                let label = rm.ids[p];
                                if label == rm.ignore_id {
                                    continue;
                                }
                                push_neighbor(
                                    &mut heap,
                                    k_neighbors,
                                    cosine(zp, rf.pixel(p)),
                                    label,
                                    order,
                                );
                                order += 1;
                            }
                        }
                    }
                    row.push(vote_labels(&heap));
                }
                (row, row_fallbacks)
            })
            .collect();
        let mut ids = Vec::with_capacity(w * h);
        for (row, fb) in rows {
            ids.extend(row);
            fallbacks += fb;
        }
        let mut frame = first.clone();
        frame.ids = ids;
        out.push(frame);
    }
    Ok((out, fallbacks))
}

/// Keep the k best (similarity, label) references with deterministic
/// insertion-order tie-breaking.
fn push_neighbor(heap: &mut Vec<(f64, u32, usize)>, k: usize, sim: f64, label: u32, order: usize) {
    if heap.len() < k {
        heap.push((sim, label, order));
        heap.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
        return;
    }
    let worst = heap.last().unwrap();
    if sim > worst.0 {
        heap.pop();
        heap.push((sim, label, order));
        heap.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
    }
}

fn vote_labels(neighbors: &[(f64, u32, usize)]) -> u32 {
    let mut counts: std::collections::BTreeMap<u32, (usize, f64)> =
        std::collections::BTreeMap::new();
    for &(sim, label, _) in neighbors {
        let e = counts.entry(label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += sim;
    }
    let mut best: Option<(u32, usize, f64)> = None;
    for (&label, &(count, sim)) in &counts {
        let better = match best {
            None => true,
            Some((bl, bc, bs)) => {
                count > bc || (count == bc && sim > bs) || (count == bc && sim == bs && label < bl)
            }
        };
        if better {
            best = Some((label, count, sim));
        }
    }
    best.map(|(l, _, _)| l).unwrap_or(0)
}
