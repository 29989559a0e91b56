//! Pseudo image segments from graph-based segmentation.
//!
//! Produces the local concepts that drive the contrastive losses: a source
//! image is partitioned into visually coherent regions by the classic
//! graph-merge algorithm over a 4-connected pixel grid, and segment identity
//! is carried into augmented views by [`transfer_segments`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::ViewTransform;
use crate::error::{Error, Result};

/// An RGB image with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    width: usize,
    height: usize,
    /// Row-major, 3 floats per pixel.
    pixels: Vec<f32>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must have nonzero dimensions"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "expected {} channel values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("channel values must be finite and in [0,1]"));
        }
        Ok(RawImage {
            width,
            height,
            pixels,
        })
    }

    /// Constant-color image.
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        RawImage::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn data(&self) -> &[f32] {
        &self.pixels
    }

    /// Separable Gaussian smoothing with clamped borders; sigma 0 is a copy.
    pub fn gaussian_smoothed(&self, sigma: f32) -> RawImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let s2 = 2.0 * (sigma as f64) * (sigma as f64);
        for d in -radius..=radius {
            kernel.push((-(d * d) as f64 / s2).exp());
        }
        let norm: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= norm;
        }

        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0.0f64; self.pixels.len()];
        // horizontal pass
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, d) in (-radius..=radius).enumerate() {
                        let xx = (x + d).clamp(0, w - 1);
                        acc += kernel[ki] * self.pixels[((y * w + xx) * 3) as usize + c] as f64;
                    }
                    tmp[((y * w + x) * 3) as usize + c] = acc;
                }
            }
        }
        // vertical pass
        let mut out = vec![0.0f32; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, d) in (-radius..=radius).enumerate() {
                        let yy = (y + d).clamp(0, h - 1);
                        acc += kernel[ki] * tmp[((yy * w + x) * 3) as usize + c];
                    }
                    out[((y * w + x) * 3) as usize + c] = (acc as f32).clamp(0.0, 1.0);
                }
            }
        }
        RawImage {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }
}

/// A dense per-pixel partition of one image view into segments.
///
/// Ids are dense in `[0, segment_count)`, every id occurs, and each segment
/// is 4-connected.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    segment_count: usize,
}

impl SegmentMap {
    /// Build from raw ids, relabeling densely in row-major first-occurrence
    /// order. Fails if any resulting segment is not 4-connected.
    pub fn from_ids(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        let map = SegmentMap::from_ids_unchecked(width, height, ids).relabel_dense();
        for seg in 0..map.segment_count {
            if !map.segment_is_connected(seg as u32) {
                return Err(Error::invalid(format!("segment {seg} is not 4-connected")));
            }
        }
        Ok(map)
    }

    fn from_ids_unchecked(width: usize, height: usize, ids: Vec<u32>) -> Self {
        let count = ids.iter().copied().max().map_or(0, |m| m as usize + 1);
        SegmentMap {
            width,
            height,
            ids,
            segment_count: count,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// Per-segment pixel counts.
    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.segment_count];
        for &id in &self.ids {
            sizes[id as usize] += 1;
        }
        sizes
    }

    /// Relabel ids densely in row-major first-occurrence order. Idempotent.
    pub fn relabel_dense(&self) -> SegmentMap {
        let mut remap: Vec<u32> = vec![u32::MAX; self.segment_count.max(1)];
        let mut next = 0u32;
        let mut ids = Vec::with_capacity(self.ids.len());
        for &id in &self.ids {
            let slot = &mut remap[id as usize];
            if *slot == u32::MAX {
                *slot = next;
                next += 1;
            }
            ids.push(*slot);
        }
        SegmentMap {
            width: self.width,
            height: self.height,
            ids,
            segment_count: next as usize,
        }
    }

    fn segment_is_connected(&self, seg: u32) -> bool {
        let start = match self.ids.iter().position(|&i| i == seg) {
            Some(p) => p,
            None => return false, // id must occur
        };
        let total = self.ids.iter().filter(|&&i| i == seg).count();
        let mut seen = vec![false; self.ids.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0usize;
        while let Some(p) = stack.pop() {
            reached += 1;
            let (x, y) = (p % self.width, p / self.width);
            let mut push = |q: usize| {
                if !seen[q] && self.ids[q] == seg {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < self.width {
                push(p + 1);
            }
            if y > 0 {
                push(p - self.width);
            }
            if y + 1 < self.height {
                push(p + self.width);
            }
        }
        reached == total
    }
}

/// Split a raw id image into 4-connected components of equal value.
///
/// Returns dense component labels in row-major first-occurrence order plus
/// the component count.
pub(crate) fn connected_components(ids: &[u32], width: usize, height: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![u32::MAX; ids.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..ids.len() {
        if labels[start] != u32::MAX {
            continue;
        }
        let value = ids[start];
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let visit = |q: usize, labels: &mut Vec<u32>, stack: &mut Vec<usize>| {
                if labels[q] == u32::MAX && ids[q] == value {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1, &mut labels, &mut stack);
            }
            if x + 1 < width {
                visit(p + 1, &mut labels, &mut stack);
            }
            if y > 0 {
                visit(p - width, &mut labels, &mut stack);
            }
            if y + 1 < height {
                visit(p + width, &mut labels, &mut stack);
            }
        }
        next += 1;
    }
    (labels, next as usize)
}

/// Parameters of the graph-merge segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FelzParams {
    /// Merge threshold scale, on 0-255-scaled color distances.
    pub scale_k: f64,
    /// Minimum segment size enforced by the final merge pass.
    pub min_size: usize,
    /// Gaussian pre-smoothing sigma.
    pub sigma: f64,
}

impl Default for FelzParams {
    fn default() -> Self {
        FelzParams {
            scale_k: 50.0,
            min_size: 20,
            sigma: 0.8,
        }
    }
}

struct Dsu {
    parent: Vec<u32>,
    size: Vec<u32>,
    int_diff: Vec<f64>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            int_diff: vec![0.0; n],
        }
    }

    fn find(&mut self, mut v: u32) -> u32 {
        while self.parent[v as usize] != v {
            let gp = self.parent[self.parent[v as usize] as usize];
            self.parent[v as usize] = gp;
            v = gp;
        }
        v
    }

    fn union(&mut self, a: u32, b: u32, w: f64) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.int_diff[big as usize] = w;
        big
    }
}

/// Compute the sorted edge list of the 4-connected grid graph.
///
/// Weights are Euclidean RGB distances on 0-255-scaled color; ties are
/// broken by (weight, lower endpoint, higher endpoint).
fn grid_edges(image: &RawImage) -> Vec<(f64, u32, u32)> {
    let (w, h) = (image.width(), image.height());
    let mut edges = Vec::with_capacity(2 * w * h);
    let weight = |a: usize, b: usize| -> f64 {
        let pa = &image.data()[a * 3..a * 3 + 3];
        let pb = &image.data()[b * 3..b * 3 + 3];
        let mut acc = 0.0f64;
        for c in 0..3 {
            let d = (pa[c] as f64 - pb[c] as f64) * 255.0;
            acc += d * d;
        }
        acc.sqrt()
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((weight(p, p + 1), p as u32, (p + 1) as u32));
            }
            if y + 1 < h {
                edges.push((weight(p, p + w), p as u32, (p + w) as u32));
            }
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("edge weights are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    edges
}

/// Graph-based segmentation of `image` into a [`SegmentMap`].
///
/// Edges of the 4-connected grid are processed in nondecreasing weight
/// order; two components merge when the edge weight does not exceed either
/// component's internal difference plus `scale_k / size`. A second pass over
/// the same edge order merges away components smaller than `min_size`.
pub fn felzenszwalb_segment(
    image: &RawImage,
    scale_k: f64,
    min_size: usize,
    smoothing_sigma: f64,
) -> Result<SegmentMap> {
    if !(scale_k > 0.0) || !scale_k.is_finite() {
        return Err(Error::invalid("scale_k must be positive and finite"));
    }
    if min_size == 0 {
        return Err(Error::invalid("min_size must be at least 1"));
    }
    if smoothing_sigma < 0.0 {
        return Err(Error::invalid("smoothing_sigma must be non-negative"));
    }
    let smoothed = image.gaussian_smoothed(smoothing_sigma as f32);
    let n = smoothed.width() * smoothed.height();
    let edges = grid_edges(&smoothed);

    let mut dsu = Dsu::new(n);
    for &(w, a, b) in &edges {
        let ra = dsu.find(a);
        let rb = dsu.find(b);
        if ra == rb {
            continue;
        }
        let ta = dsu.int_diff[ra as usize] + scale_k / dsu.size[ra as usize] as f64;
        let tb = dsu.int_diff[rb as usize] + scale_k / dsu.size[rb as usize] as f64;
        if w <= ta && w <= tb {
            dsu.union(ra, rb, w);
        }
    }
    // enforce min_size along the same edge order
    for &(w, a, b) in &edges {
        let ra = dsu.find(a);
        let rb = dsu.find(b);
        if ra != rb
            && ((dsu.size[ra as usize] as usize) < min_size
                || (dsu.size[rb as usize] as usize) < min_size)
        {
            dsu.union(ra, rb, w);
        }
    }

    let ids: Vec<u32> = (0..n).map(|p| dsu.find(p as u32)).collect();
    let (labels, count) = connected_components(&ids, smoothed.width(), smoothed.height());
    Ok(SegmentMap {
        width: smoothed.width(),
        height: smoothed.height(),
        ids: labels,
        segment_count: count,
    })
}

/// Run the segmenter with a parameter bundle.
pub fn segment_with(image: &RawImage, params: &FelzParams) -> Result<SegmentMap> {
    felzenszwalb_segment(image, params.scale_k, params.min_size, params.sigma)
}

/// Carry a source segmentation into an augmented view.
///
/// Every view pixel samples the source segment id under `transform`; the
/// sampled ids are then split into 4-connected components and relabeled
/// densely. Returns the view map plus, per new id, the source segment id it
/// came from, so that the same source segment can be merged across views.
pub fn transfer_segments(
    map: &SegmentMap,
    transform: &ViewTransform,
) -> Result<(SegmentMap, Vec<u32>)> {
    transform.validate_for(map.width(), map.height())?;
    let (ow, oh) = (transform.out_w, transform.out_h);
    let mut sampled = Vec::with_capacity(ow * oh);
    for vy in 0..oh {
        for vx in 0..ow {
            sampled.push(map.ids[transform.source_index(vx, vy, map.width())]);
        }
    }
    let (labels, count) = connected_components(&sampled, ow, oh);
    let mut source_ids = vec![u32::MAX; count];
    for (p, &lab) in labels.iter().enumerate() {
        if source_ids[lab as usize] == u32::MAX {
            source_ids[lab as usize] = sampled[p];
        }
    }
    Ok((
        SegmentMap {
            width: ow,
            height: oh,
            ids: labels,
            segment_count: count,
        },
        source_ids,
    ))
}

const SEG_MAGIC: &[u8; 4] = b"VSEG";

/// Write a segment map as the flat binary sidecar format:
/// magic, version, endian tag, width, height, segment_count, row-major u32 ids.
pub fn save_segment_map(map: &SegmentMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + map.ids.len() * 4);
    buf.extend_from_slice(SEG_MAGIC);
    buf.push(1); // version
    buf.push(1); // little-endian
    buf.extend_from_slice(&[0, 0]); // padding
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    buf.extend_from_slice(&(map.segment_count as u32).to_le_bytes());
    for &id in &map.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_segment_map(path: &Path) -> Result<SegmentMap> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..4] != SEG_MAGIC {
        return Err(Error::format(path, "not a segment sidecar"));
    }
    if bytes[4] != 1 || bytes[5] != 1 {
        return Err(Error::format(path, "unsupported version or endianness"));
    }
    let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (w, h, count) = (rd(8) as usize, rd(12) as usize, rd(16) as usize);
    if bytes.len() != 20 + w * h * 4 {
        return Err(Error::format(path, "truncated segment sidecar"));
    }
    let ids: Vec<u32> = (0..w * h).map(|i| rd(20 + i * 4)).collect();
    if ids.iter().any(|&id| id as usize >= count) {
        return Err(Error::format(path, "segment id out of range"));
    }
    Ok(SegmentMap {
        width: w,
        height: h,
        ids,
        segment_count: count,
    })
}
