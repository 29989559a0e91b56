//! Quantitative evaluation: mIoU, concept purity, and video J/F scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::LabelMap;

/// Rows are ground truth, columns are prediction; ignore pixels excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn add_maps(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.width != pred.width || gt.height != pred.height {
            return Err(Error::shape("prediction and ground truth sizes differ"));
        }
        for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
            if g == gt.ignore_id || p == pred.ignore_id {
                continue;
            }
            self.counts[g as usize * self.class_count + p as usize] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: u32, pred: u32) -> u64 {
        self.counts[gt as usize * self.class_count + pred as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class intersection over union and the mean over evaluated classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub evaluated_classes: usize,
}

/// mIoU from a confusion matrix. Classes absent from both ground truth and
/// prediction are excluded from the mean.
pub fn miou_from_confusion(cm: &ConfusionMatrix) -> MiouReport {
    let k = cm.class_count;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    for c in 0..k {
        let tp = cm.count(c as u32, c as u32);
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for o in 0..k {
            if o != c {
                fp += cm.count(o as u32, c as u32);
                fn_ += cm.count(c as u32, o as u32);
            }
        }
        if tp + fp + fn_ == 0 {
            per_class.push(None);
            continue;
        }
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        per_class.push(Some(iou));
        sum += iou;
        evaluated += 1;
    }
    MiouReport {
        per_class,
        mean: if evaluated > 0 { sum / evaluated as f64 } else { 0.0 },
        evaluated_classes: evaluated,
    }
}

/// mIoU over aligned prediction/ground-truth pairs.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap]) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("prediction and ground truth counts differ"));
    }
    let class_count = gts
        .iter()
        .map(|g| g.class_count)
        .max()
        .ok_or_else(|| Error::invalid("no maps to evaluate"))?;
    let mut cm = ConfusionMatrix::new(class_count);
    for (p, g) in preds.iter().zip(gts) {
        cm.add_maps(g, p)?;
    }
    Ok(miou_from_confusion(&cm))
}

/// Purity of each concept: the fraction of its segments belonging to the
/// concept's majority class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Per concept: (purity, segment count); `None` for unused concepts.
    pub per_concept: Vec<Option<(f64, usize)>>,
    /// Histogram of purity in 10 bins of width 0.1 over [0, 1].
    pub histogram: [u64; 10],
    pub mean: f64,
    pub active_concepts: usize,
}

/// Tally segment concept assignments against segment ground-truth classes.
pub fn purity(seg_concepts: &[u32], seg_classes: &[u32], concept_count: usize) -> PurityReport {
    assert_eq!(seg_concepts.len(), seg_classes.len());
    let mut tallies: Vec<std::collections::BTreeMap<u32, usize>> =
        vec![std::collections::BTreeMap::new(); concept_count];
    for (&concept, &class) in seg_concepts.iter().zip(seg_classes) {
        *tallies[concept as usize].entry(class).or_insert(0) += 1;
    }
    let mut per_concept = Vec::with_capacity(concept_count);
    let mut histogram = [0u64; 10];
    let mut sum = 0.0;
    let mut active = 0usize;
    for tally in &tallies {
        let total: usize = tally.values().sum();
        if total == 0 {
            per_concept.push(None);
            continue;
        }
        let majority = *tally.values().max().unwrap();
        let p = majority as f64 / total as f64;
        per_concept.push(Some((p, total)));
        let bin = ((p * 10.0).floor() as usize).min(9);
        histogram[bin] += 1;
        sum += p;
        active += 1;
    }
    PurityReport {
        per_concept,
        histogram,
        mean: if active > 0 { sum / active as f64 } else { 0.0 },
        active_concepts: active,
    }
}

/// Region similarity J and boundary accuracy F per object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JfReport {
    pub j_mean: f64,
    pub f_mean: f64,
    /// (object id, J, F) per object present in the first ground-truth frame.
    pub per_object: Vec<(u32, f64, f64)>,
}

/// J/F over one video's aligned frames.
///
/// J per object is the mean over frames of binary-mask IoU. F per object is
/// the mean over frames of the boundary F-measure: boundary pixels are mask
/// pixels with a 4-neighbor outside the mask, matched bipartitely within
/// `tolerance` pixels (default: 0.8% of the image diagonal, rounded up).
pub fn j_f_scores(
    pred_frames: &[LabelMap],
    gt_frames: &[LabelMap],
    tolerance: Option<f64>,
) -> Result<JfReport> {
    if pred_frames.len() != gt_frames.len() {
        return Err(Error::shape("frame counts differ"));
    }
    let first_gt = gt_frames
        .first()
        .ok_or_else(|| Error::invalid("no frames to evaluate"))?;
    let (w, h) = (first_gt.width, first_gt.height);
    let tau = tolerance
        .unwrap_or_else(|| (0.008 * ((w * w + h * h) as f64).sqrt()).ceil())
        .max(0.0);
    let objects: Vec<u32> = first_gt
        .present_labels()
        .into_iter()
        .filter(|&o| o != 0)
        .collect();
    if objects.is_empty() {
        return Err(Error::invalid("first ground-truth frame has no objects"));
    }
    let mut per_object = Vec::with_capacity(objects.len());
    for &obj in &objects {
        let mut j_sum = 0.0;
        let mut f_sum = 0.0;
        for (pred, gt) in pred_frames.iter().zip(gt_frames) {
            if pred.width != w || pred.height != h || gt.width != w || gt.height != h {
                return Err(Error::shape("frame sizes differ"));
            }
            let pm: Vec<bool> = pred.ids.iter().map(|&id| id == obj).collect();
            let gm: Vec<bool> = gt.ids.iter().map(|&id| id == obj).collect();
            j_sum += mask_iou(&pm, &gm);
            f_sum += boundary_f(&pm, &gm, w, h, tau);
        }
        let n = pred_frames.len() as f64;
        per_object.push((obj, j_sum / n, f_sum / n));
    }
    let j_mean = per_object.iter().map(|o| o.1).sum::<f64>() / per_object.len() as f64;
    let f_mean = per_object.iter().map(|o| o.2).sum::<f64>() / per_object.len() as f64;
    Ok(JfReport {
        j_mean,
        f_mean,
        per_object,
    })
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask pixels with at least one 4-neighbor outside the mask (image border
/// counts as outside).
fn boundary_pixels(mask: &[bool], w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let outside = (x == 0 || !mask[y * w + x - 1])
                || (x + 1 == w || !mask[y * w + x + 1])
                || (y == 0 || !mask[(y - 1) * w + x])
                || (y + 1 == h || !mask[(y + 1) * w + x]);
            if outside {
                out.push((x, y));
            }
        }
    }
    out
}

/// Boundary F-measure with maximum bipartite matching within `tau`.
fn boundary_f(pred: &[bool], gt: &[bool], w: usize, h: usize, tau: f64) -> f64 {
    let pb = boundary_pixels(pred, w, h);
    let gb = boundary_pixels(gt, w, h);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let matched = max_bipartite_matching(&pb, &gb, tau);
    let precision = matched as f64 / pb.len() as f64;
    let recall = matched as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Kuhn's augmenting-path maximum matching between boundary pixel sets,
/// with candidate edges limited to pairs within `tau` Euclidean distance.
fn max_bipartite_matching(left: &[(usize, usize)], right: &[(usize, usize)], tau: f64) -> usize {
    let tau2 = tau * tau;
    let r = tau.floor() as isize;
    // bucket right pixels by coordinates for windowed candidate lookup
    let mut by_pos: std::collections::BTreeMap<(isize, isize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, &(x, y)) in right.iter().enumerate() {
        by_pos.entry((x as isize, y as isize)).or_default().push(i);
    }
    let adj: Vec<Vec<usize>> = left
        .iter()
        .map(|&(x, y)| {
            let mut cands = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    if (dx * dx + dy * dy) as f64 > tau2 {
                        continue;
                    }
                    if let Some(list) = by_pos.get(&(x as isize + dx, y as isize + dy)) {
                        cands.extend_from_slice(list);
                    }
                }
            }
            cands
        })
        .collect();

    let mut match_right = vec![usize::MAX; right.len()];
    let mut matched = 0usize;
    let mut visited = vec![false; right.len()];
    for u in 0..left.len() {
        visited.fill(false);
        if augment(u, &adj, &mut match_right, &mut visited) {
            matched += 1;
        }
    }
    matched
}

fn augment(u: usize, adj: &[Vec<usize>], match_right: &mut [usize], visited: &mut [bool]) -> bool {
    for &v in &adj[u] {
        if visited[v] {
            continue;
        }
        visited[v] = true;
        if match_right[v] == usize::MAX || augment(match_right[v], adj, match_right, visited) {
            match_right[v] = u;
            return true;
        }
    }
    false
}
