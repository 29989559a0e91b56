//! Shared test support: independent brute-force oracles, a naive loss
//! evaluator with value-level stop-gradient splits, and the finite-difference
//! gradient harness. Nothing here calls into the gradient code it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vcseg::concepts::{build_cooccurrence, Codebook, CooccurrenceIndex};
use vcseg::embeddings::EmbeddingField;
use vcseg::losses::{
    accumulate_field_grads, all_anchors, cooccurrence_loss, local_segmentation_loss, total_loss,
    vq_loss, Anchor, BankEntry, Batch, BatchImage, BatchSegments, LossWeights, MemoryBank,
    StepGradients, ViewData,
};
use vcseg::pseudoseg::RawImage;

// ---------------------------------------------------------------------------
// brute-force graph-merge segmentation
// ---------------------------------------------------------------------------

/// Naive reference implementation of the graph-merge segmenter on explicit
/// component member lists (no union-find). Returns canonical first-occurrence
/// labels. No smoothing (sigma 0).
pub fn felzenszwalb_reference(image: &RawImage, scale_k: f64, min_size: usize) -> Vec<u32> {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let weight = |a: usize, b: usize| -> f64 {
        let pa = image.pixel(a % w, a / w);
        let pb = image.pixel(b % w, b / w);
        let mut acc = 0.0f64;
        for c in 0..3 {
            let d = (pa[c] as f64 - pb[c] as f64) * 255.0;
            acc += d * d;
        }
        acc.sqrt()
    };
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((weight(p, p + 1), p, p + 1));
            }
            if y + 1 < h {
                edges.push((weight(p, p + w), p, p + w));
            }
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut comp_of: Vec<usize> = (0..n).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|p| vec![p]).collect();
    let mut internal: Vec<f64> = vec![0.0; n];

    let mut merge = |comp_of: &mut Vec<usize>,
                     members: &mut Vec<Vec<usize>>,
                     internal: &mut Vec<f64>,
                     a: usize,
                     b: usize,
                     w_edge: f64| {
        let (into, from) = if members[a].len() >= members[b].len() {
            (a, b)
        } else {
            (b, a)
        };
        let moved = std::mem::take(&mut members[from]);
        for &p in &moved {
            comp_of[p] = into;
        }
        members[into].extend(moved);
        internal[into] = w_edge;
    };

    for &(w_edge, u, v) in &edges {
        let (ca, cb) = (comp_of[u], comp_of[v]);
        if ca == cb {
            continue;
        }
        let ta = internal[ca] + scale_k / members[ca].len() as f64;
        let tb = internal[cb] + scale_k / members[cb].len() as f64;
        if w_edge <= ta && w_edge <= tb {
            merge(&mut comp_of, &mut members, &mut internal, ca, cb, w_edge);
        }
    }
    for &(w_edge, u, v) in &edges {
        let (ca, cb) = (comp_of[u], comp_of[v]);
        if ca != cb && (members[ca].len() < min_size || members[cb].len() < min_size) {
            merge(&mut comp_of, &mut members, &mut internal, ca, cb, w_edge);
        }
    }
    canonical_labels(&comp_of.iter().map(|&c| c as u32).collect::<Vec<_>>())
}

/// Relabel arbitrary labels densely in first-occurrence order.
pub fn canonical_labels(labels: &[u32]) -> Vec<u32> {
    let mut remap = std::collections::BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = remap.len() as u32;
        out.push(*remap.entry(l).or_insert(next));
    }
    out
}

pub fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RawImage {
    let px: Vec<f32> = (0..w * h * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
    RawImage::new(w, h, px).unwrap()
}

// ---------------------------------------------------------------------------
// gradcheck fixture
// ---------------------------------------------------------------------------

/// A frozen small training state for loss and gradient checks.
pub struct Fixture {
    pub batch: Batch,
    pub segments: BatchSegments,
    pub bank: MemoryBank,
    pub codebook: Codebook,
    pub index: CooccurrenceIndex,
    pub anchors: Vec<Anchor>,
    pub weights: LossWeights,
}

pub struct FixtureShape {
    pub view_w: usize,
    pub view_h: usize,
    pub dim: usize,
    pub seg_slots: usize,
    pub k: usize,
    pub bank_batches: usize,
    pub bank_entries_per_batch: usize,
}

impl Default for FixtureShape {
    fn default() -> Self {
        FixtureShape {
            view_w: 8,
            view_h: 8,
            dim: 8,
            seg_slots: 5,
            k: 8,
            bank_batches: 1,
            bank_entries_per_batch: 6,
        }
    }
}

pub fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Build a random two-view one-image fixture with frozen assignments and
/// co-occurrence, per the shape.
pub fn build_fixture(seed: u64, shape: &FixtureShape, weights: LossWeights) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.view_w * shape.view_h;
    let views = [0, 1].map(|_| {
        let values: Vec<f64> = (0..n)
            .flat_map(|_| random_unit(shape.dim, &mut rng))
            .collect();
        let field = EmbeddingField::from_values(shape.view_w, shape.view_h, shape.dim, values)
            .unwrap();
        field
    });
    // segment slots: every slot occupied somewhere across the two views
    let seg_of_pixel: [Vec<u32>; 2] = loop {
        let assign: [Vec<u32>; 2] = [0, 1].map(|_| {
            (0..n)
                .map(|_| rng.gen_range(0..shape.seg_slots as u32))
                .collect()
        });
        let mut seen = vec![false; shape.seg_slots];
        for v in &assign {
            for &s in v {
                seen[s as usize] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            break assign;
        }
    };
    let [f0, f1] = views;
    let [s0, s1] = seg_of_pixel;
    let batch = Batch {
        images: vec![BatchImage {
            image_id: 1,
            views: [
                ViewData {
                    field: f0,
                    seg_of_pixel: s0,
                },
                ViewData {
                    field: f1,
                    seg_of_pixel: s1,
                },
            ],
        }],
        seg_count: shape.seg_slots,
        seg_image_ids: vec![1; shape.seg_slots],
    };

    let codebook = {
        let vectors: Vec<f64> = (0..shape.k)
            .flat_map(|_| random_unit(shape.dim, &mut rng))
            .collect();
        Codebook::from_vectors(vectors, shape.k, shape.dim).unwrap()
    };

    let mut bank = MemoryBank::new(shape.bank_batches.max(1));
    for b in 0..shape.bank_batches {
        bank.push_batch(
            (0..shape.bank_entries_per_batch)
                .map(|_| BankEntry {
                    vector: random_unit(shape.dim, &mut rng),
                    image_id: 100 + b as u64,
                    concept_id: rng.gen_range(0..shape.k as u32),
                    size: rng.gen_range(1..20),
                })
                .collect(),
        );
    }

    let mut segments = BatchSegments::compute(&batch).unwrap();
    segments.concepts = codebook
        .nearest_many(&segments.as_segment_embeddings())
        .unwrap();
    let index = build_cooccurrence(
        segments
            .image_ids
            .iter()
            .copied()
            .zip(segments.concepts.iter().copied())
            .chain(bank.entries().map(|e| (e.image_id, e.concept_id))),
    );
    let anchors = all_anchors(&batch);
    Fixture {
        batch,
        segments,
        bank,
        codebook,
        index,
        anchors,
        weights,
    }
}

// ---------------------------------------------------------------------------
// naive loss evaluator (independent of the library gradient path)
// ---------------------------------------------------------------------------

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Segment means recomputed by direct summation from explicit field values.
fn naive_means(fix: &Fixture, fields: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = fix.batch.dim();
    let mut sums = vec![vec![0.0f64; dim]; fix.batch.seg_count];
    let mut counts = vec![0usize; fix.batch.seg_count];
    let mut vi = 0usize;
    for img in &fix.batch.images {
        for view in &img.views {
            for (p, &slot) in view.seg_of_pixel.iter().enumerate() {
                if slot == u32::MAX {
                    continue;
                }
                counts[slot as usize] += 1;
                for d in 0..dim {
                    sums[slot as usize][d] += fields[vi][p * dim + d];
                }
            }
            vi += 1;
        }
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= *c as f64;
        }
    }
    sums
}

/// All slot vectors: batch segment means followed by bank entries.
fn naive_slots<'a>(fix: &'a Fixture, means: &'a [Vec<f64>]) -> (Vec<&'a [f64]>, Vec<u32>) {
    let mut slots: Vec<&[f64]> = means.iter().map(|m| m.as_slice()).collect();
    let mut concepts: Vec<u32> = fix.segments.concepts.clone();
    for e in fix.bank.entries() {
        slots.push(&e.vector);
        concepts.push(e.concept_id);
    }
    (slots, concepts)
}

/// Flattened per-view field values of a fixture.
pub fn fixture_fields(fix: &Fixture) -> Vec<Vec<f64>> {
    fix.batch
        .images
        .iter()
        .flat_map(|img| img.views.iter().map(|v| v.field.values().to_vec()))
        .collect()
}

/// Per-anchor local contrastive losses (own segment positive, rest negative).
pub fn naive_local_per_anchor(fix: &Fixture, fields: &[Vec<f64>]) -> Vec<f64> {
    let means = naive_means(fix, fields);
    let (slots, _) = naive_slots(fix, &means);
    let dim = fix.batch.dim();
    let mut out = Vec::new();
    for a in &fix.anchors {
        let view = &fix.batch.images[a.image as usize].views[a.view as usize];
        let slot = view.seg_of_pixel[a.pixel as usize];
        if slot == u32::MAX {
            continue;
        }
        let vi = a.image as usize * 2 + a.view as usize;
        let zp = &fields[vi][a.pixel as usize * dim..(a.pixel as usize + 1) * dim];
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (i, s) in slots.iter().enumerate() {
            let e = (fix.weights.kappa * naive_cos(zp, s)).exp();
            den += e;
            if i == slot as usize {
                num += e;
            }
        }
        out.push(-(num / den).ln());
    }
    out
}

pub fn naive_local(fix: &Fixture, fields: &[Vec<f64>]) -> f64 {
    let per = naive_local_per_anchor(fix, fields);
    per.iter().sum::<f64>() / per.len() as f64
}

/// Co-occurrence loss: positives are slots whose concept co-occurs with the
/// anchor's concept.
pub fn naive_cooc(fix: &Fixture, fields: &[Vec<f64>]) -> f64 {
    let means = naive_means(fix, fields);
    let (slots, concepts) = naive_slots(fix, &means);
    let dim = fix.batch.dim();
    let mut total = 0.0f64;
    let mut used = 0usize;
    for a in &fix.anchors {
        let view = &fix.batch.images[a.image as usize].views[a.view as usize];
        let slot = view.seg_of_pixel[a.pixel as usize];
        if slot == u32::MAX {
            continue;
        }
        let own_concept = concepts[slot as usize];
        let vi = a.image as usize * 2 + a.view as usize;
        let zp = &fields[vi][a.pixel as usize * dim..(a.pixel as usize + 1) * dim];
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut any_pos = false;
        for (i, s) in slots.iter().enumerate() {
            let e = (fix.weights.kappa * naive_cos(zp, s)).exp();
            den += e;
            if fix.index.contains(own_concept, concepts[i]) {
                num += e;
                any_pos = true;
            }
        }
        if !any_pos {
            continue;
        }
        total += -(num / den).ln();
        used += 1;
    }
    total / used as f64
}

/// VQ loss with the stop-gradient realized at value level: the dictionary
/// term reads (`means_t1`, `codebook_t1`), the commitment term reads
/// (`means_t2`, `codebook_t2`). Pass base values for the frozen side.
pub fn naive_vq_split(
    fix: &Fixture,
    means_t1: &[Vec<f64>],
    codebook_t1: &[f64],
    means_t2: &[Vec<f64>],
    codebook_t2: &[f64],
) -> f64 {
    let dim = fix.batch.dim();
    // anchor counts per segment
    let mut counts = vec![0usize; fix.batch.seg_count];
    let mut used = 0usize;
    for a in &fix.anchors {
        let view = &fix.batch.images[a.image as usize].views[a.view as usize];
        let slot = view.seg_of_pixel[a.pixel as usize];
        if slot != u32::MAX {
            counts[slot as usize] += 1;
            used += 1;
        }
    }
    let mut total = 0.0f64;
    for s in 0..fix.batch.seg_count {
        if counts[s] == 0 {
            continue;
        }
        let k = fix.segments.concepts[s] as usize;
        let term1 = 1.0 - naive_cos(&means_t1[s], &codebook_t1[k * dim..(k + 1) * dim]);
        let term2 = 1.0 - naive_cos(&means_t2[s], &codebook_t2[k * dim..(k + 1) * dim]);
        total += counts[s] as f64 / used as f64 * (term1 + fix.weights.beta * term2);
    }
    total
}

/// The four loss values as a function of field values, honoring stop
/// gradients (codebook frozen at the fixture's values).
pub fn naive_losses_of_fields(fix: &Fixture, fields: &[Vec<f64>]) -> [f64; 4] {
    let base_fields = fixture_fields(fix);
    let base_means = naive_means(fix, &base_fields);
    let means = naive_means(fix, fields);
    let l_s = naive_local(fix, fields);
    let l_c = naive_cooc(fix, fields);
    let l_v = naive_vq_split(
        fix,
        &base_means,
        fix.codebook.vectors(),
        &means,
        fix.codebook.vectors(),
    );
    let total = fix.weights.lambda_s * l_s + fix.weights.lambda_v * l_v + fix.weights.lambda_c * l_c;
    [l_s, l_v, l_c, total]
}

/// The four loss values as a function of codebook values, honoring stop
/// gradients (fields frozen at the fixture's values).
pub fn naive_losses_of_codebook(fix: &Fixture, codebook: &[f64]) -> [f64; 4] {
    let base_fields = fixture_fields(fix);
    let base_means = naive_means(fix, &base_fields);
    let l_s = naive_local(fix, &base_fields);
    let l_c = naive_cooc(fix, &base_fields);
    let l_v = naive_vq_split(fix, &base_means, codebook, &base_means, fix.codebook.vectors());
    let total = fix.weights.lambda_s * l_s + fix.weights.lambda_v * l_v + fix.weights.lambda_c * l_c;
    [l_s, l_v, l_c, total]
}

// ---------------------------------------------------------------------------
// analytic gradients via the library
// ---------------------------------------------------------------------------

pub struct AnalyticGrads {
    /// Per loss (ls, lv, lc, total): per-view flattened field gradients.
    pub fields: [Vec<Vec<f64>>; 4],
    /// Per loss: codebook gradients.
    pub codebook: [Vec<f64>; 4],
    pub values: [f64; 4],
}

pub fn analytic_grads(fix: &Fixture) -> AnalyticGrads {
    let dim = fix.batch.dim();
    let flatten = |g: &StepGradients| -> Vec<Vec<f64>> {
        g.fields
            .iter()
            .flat_map(|views| views.iter().cloned())
            .collect()
    };
    let mut values = [0.0f64; 4];
    let mut fields: [Vec<Vec<f64>>; 4] = Default::default();
    let mut codebook: [Vec<f64>; 4] = Default::default();

    let local = local_segmentation_loss(
        &fix.batch,
        &fix.segments,
        &fix.bank,
        &fix.anchors,
        fix.weights.kappa,
    );
    let mut g = StepGradients::zeros(&fix.batch, fix.codebook.k(), dim);
    accumulate_field_grads(
        &fix.batch,
        &fix.anchors,
        &local.grad_anchors,
        &local.grad_segments,
        &fix.segments.member_counts,
        1.0,
        &mut g,
    );
    values[0] = local.value;
    fields[0] = flatten(&g);
    codebook[0] = g.codebook.clone();

    let vq = vq_loss(
        &fix.batch,
        &fix.segments,
        &fix.codebook,
        &fix.anchors,
        fix.weights.beta,
    );
    let mut g = StepGradients::zeros(&fix.batch, fix.codebook.k(), dim);
    accumulate_field_grads(
        &fix.batch,
        &fix.anchors,
        &[],
        &vq.grad_segments,
        &fix.segments.member_counts,
        1.0,
        &mut g,
    );
    g.codebook.copy_from_slice(&vq.grad_codebook);
    values[1] = vq.value;
    fields[1] = flatten(&g);
    codebook[1] = g.codebook.clone();

    let cooc = cooccurrence_loss(
        &fix.batch,
        &fix.segments,
        &fix.bank,
        &fix.index,
        &fix.anchors,
        fix.weights.kappa,
    );
    let mut g = StepGradients::zeros(&fix.batch, fix.codebook.k(), dim);
    accumulate_field_grads(
        &fix.batch,
        &fix.anchors,
        &cooc.grad_anchors,
        &cooc.grad_segments,
        &fix.segments.member_counts,
        1.0,
        &mut g,
    );
    values[2] = cooc.value;
    fields[2] = flatten(&g);
    codebook[2] = g.codebook.clone();

    let (report, g) = total_loss(
        &fix.batch,
        &fix.segments,
        &fix.codebook,
        &fix.bank,
        &fix.index,
        &fix.anchors,
        &fix.weights,
    );
    values[3] = report.total;
    fields[3] = flatten(&g);
    codebook[3] = g.codebook.clone();

    AnalyticGrads {
        fields,
        codebook,
        values,
    }
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Relative error with a floor scaled to the gradient's largest component,
/// so that finite-difference noise on near-zero components is judged against
/// the gradient's own scale.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Max relative error per loss (ls, lv, lc, total) between analytic
/// gradients and central finite differences over every pixel and codebook
/// parameter, honoring stop-gradient semantics.
pub fn gradcheck(seed: u64, shape: &FixtureShape, weights: LossWeights, eps: f64) -> [f64; 4] {
    let fix = build_fixture(seed, shape, weights);
    let analytic = analytic_grads(&fix);
    let mut max_rel = [0.0f64; 4];
    let floors: [f64; 4] = std::array::from_fn(|t| {
        let linf = analytic.fields[t]
            .iter()
            .flat_map(|g| g.iter())
            .chain(analytic.codebook[t].iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        (1e-4 * linf).max(1e-6)
    });

    // field parameters
    let base_fields = fixture_fields(&fix);
    let mut fields = base_fields.clone();
    for vi in 0..fields.len() {
        for j in 0..fields[vi].len() {
            let orig = fields[vi][j];
            fields[vi][j] = orig + eps;
            let plus = naive_losses_of_fields(&fix, &fields);
            fields[vi][j] = orig - eps;
            let minus = naive_losses_of_fields(&fix, &fields);
            fields[vi][j] = orig;
            for t in 0..4 {
                let fd = (plus[t] - minus[t]) / (2.0 * eps);
                let an = analytic.fields[t][vi][j];
                max_rel[t] = max_rel[t].max(rel_error(an, fd, floors[t]));
            }
        }
    }
    // codebook parameters: only the vq term (and total through it) moves
    let mut codebook = fix.codebook.vectors().to_vec();
    for j in 0..codebook.len() {
        let orig = codebook[j];
        codebook[j] = orig + eps;
        let plus = naive_losses_of_codebook(&fix, &codebook);
        codebook[j] = orig - eps;
        let minus = naive_losses_of_codebook(&fix, &codebook);
        codebook[j] = orig;
        for t in 0..4 {
            let fd = (plus[t] - minus[t]) / (2.0 * eps);
            let an = analytic.codebook[t][j];
            max_rel[t] = max_rel[t].max(rel_error(an, fd, floors[t]));
        }
    }
    max_rel
}

// ---------------------------------------------------------------------------
// simple scan oracles
// ---------------------------------------------------------------------------

/// Exhaustive nearest-concept scan.
pub fn assign_reference(codebook: &Codebook, vectors: &[Vec<f64>]) -> Vec<u32> {
    vectors
        .iter()
        .map(|v| {
            let mut best = 0u32;
            let mut best_sim = f64::NEG_INFINITY;
            for i in 0..codebook.k() {
                let sim = naive_cos(v, codebook.vector(i));
                if sim > best_sim {
                    best_sim = sim;
                    best = i as u32;
                }
            }
            best
        })
        .collect()
}

/// Double-loop co-occurrence pair construction.
pub fn cooccurrence_reference(items: &[(u64, u32)]) -> std::collections::BTreeSet<(u32, u32)> {
    let mut pairs = std::collections::BTreeSet::new();
    for (i, &(img_a, c_a)) in items.iter().enumerate() {
        for &(img_b, c_b) in &items[i..] {
            if img_a == img_b {
                pairs.insert((c_a.min(c_b), c_a.max(c_b)));
            }
        }
    }
    pairs
}

/// Exhaustive-scan k-nearest vote with the tie rules: majority count, then
/// summed similarity, then lowest class id.
pub fn knn_reference(
    query: &[f64],
    index_vectors: &[Vec<f64>],
    index_labels: &[u32],
    k: usize,
) -> u32 {
    let mut scored: Vec<(f64, usize)> = index_vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (naive_cos(query, v), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let top = &scored[..k.min(scored.len())];
    let mut tally: std::collections::BTreeMap<u32, (usize, f64)> = std::collections::BTreeMap::new();
    for &(sim, i) in top {
        let e = tally.entry(index_labels[i]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += sim;
    }
    let mut best: Option<(u32, usize, f64)> = None;
    for (&class, &(count, sim)) in &tally {
        let better = match best {
            None => true,
            Some((bc, bn, bs)) => {
                count > bn || (count == bn && sim > bs) || (count == bn && sim == bs && class < bc)
            }
        };
        if better {
            best = Some((class, count, sim));
        }
    }
    best.unwrap().0
}

/// Direct per-pixel confusion tally.
pub fn confusion_reference(
    gt: &[u32],
    pred: &[u32],
    class_count: usize,
    ignore: u32,
) -> Vec<u64> {
    let mut counts = vec![0u64; class_count * class_count];
    for (&g, &p) in gt.iter().zip(pred) {
        if g != ignore && p != ignore {
            counts[g as usize * class_count + p as usize] += 1;
        }
    }
    counts
}
pub mod invariants;
