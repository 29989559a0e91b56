//! Per-pixel embeddings on the unit hypersphere.
//!
//! The learnable state is an [`EmbeddingField`]: one D-vector per pixel,
//! renormalized to unit length after every optimizer step. Segment
//! embeddings are plain (unnormalized) means of member pixels; cosine
//! similarity handles the scale.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pseudoseg::{RawImage, SegmentMap};

/// Norms below this are treated as degenerate in similarity computations.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A `width`×`height` grid of D-dimensional pixel embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    width: usize,
    height: usize,
    dim: usize,
    /// Row-major, `dim` floats per pixel.
    values: Vec<f64>,
}

impl EmbeddingField {
    /// Random unit-vector field: i.i.d. standard normal entries, each pixel
    /// normalized. Deterministic per seed.
    pub fn init(width: usize, height: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::check_dims(width, height, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f64; width * height * dim];
        for v in &mut values {
            *v = rng.sample(StandardNormal);
        }
        let mut field = EmbeddingField {
            width,
            height,
            dim,
            values,
        };
        field.normalize_pixels();
        Ok(field)
    }

    /// Appearance-seeded field: each pixel embedding is a fixed random
    /// projection of its RGB color plus seeded per-pixel noise, normalized.
    ///
    /// The projection stands in for a pretrained feature extractor: pixels
    /// with similar colors start near each other on the sphere, across
    /// images sharing the same projection.
    pub fn from_appearance(
        image: &RawImage,
        projection: &AppearanceProjection,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let dim = projection.dim;
        Self::check_dims(image.width(), image.height(), dim)?;
        if noise < 0.0 {
            return Err(Error::invalid("noise must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f64; image.width() * image.height() * dim];
        for y in 0..image.height() {
            for x in 0..image.width() {
                let c = image.pixel(x, y);
                let centered = [c[0] as f64 - 0.5, c[1] as f64 - 0.5, c[2] as f64 - 0.5];
                let base = (y * image.width() + x) * dim;
                for d in 0..dim {
                    let row = &projection.matrix[d * 3..d * 3 + 3];
                    let mut v = row[0] * centered[0] + row[1] * centered[1] + row[2] * centered[2];
                    if noise > 0.0 {
                        let eta: f64 = rng.sample(StandardNormal);
                        v += noise * eta;
                    }
                    values[base + d] = v;
                }
            }
        }
        let mut field = EmbeddingField {
            width: image.width(),
            height: image.height(),
            dim,
            values,
        };
        field.normalize_pixels();
        Ok(field)
    }

    fn check_dims(width: usize, height: usize, dim: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("field must have nonzero dimensions"));
        }
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        Ok(())
    }

    pub fn from_values(width: usize, height: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_dims(width, height, dim)?;
        if values.len() != width * height * dim {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                width * height * dim,
                values.len()
            )));
        }
        Ok(EmbeddingField {
            width,
            height,
            dim,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn pixel_at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Renormalize every pixel vector to unit length.
    pub fn normalize_pixels(&mut self) {
        for p in 0..self.pixel_count() {
            normalize_vec(&mut self.values[p * self.dim..(p + 1) * self.dim]);
        }
    }

    /// Largest deviation of any pixel norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.pixel_count())
            .map(|p| (norm(self.pixel(p)) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Serialize as: magic, endian tag, width, height, dim, then row-major
    /// 32-bit little-endian floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.values.len() * 4);
        buf.extend_from_slice(FIELD_MAGIC);
        buf.push(1); // version
        buf.push(1); // little-endian
        buf.extend_from_slice(&[0, 0]);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[0..4] != FIELD_MAGIC {
            return Err(Error::format(path, "not an embedding field file"));
        }
        if bytes[4] != 1 || bytes[5] != 1 {
            return Err(Error::format(path, "unsupported version or endianness"));
        }
        let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (w, h, dim) = (rd(8) as usize, rd(12) as usize, rd(16) as usize);
        if bytes.len() != 20 + w * h * dim * 4 {
            return Err(Error::format(path, "truncated embedding field file"));
        }
        let values: Vec<f64> = (0..w * h * dim)
            .map(|i| f32::from_le_bytes(bytes[20 + i * 4..24 + i * 4].try_into().unwrap()) as f64)
            .collect();
        EmbeddingField::from_values(w, h, dim, values)
    }
}

const FIELD_MAGIC: &[u8; 4] = b"VCEF";

/// Fixed random color-to-embedding projection shared by all images of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceProjection {
    pub dim: usize,
    /// `dim`×3 row-major.
    pub matrix: Vec<f64>,
}

impl AppearanceProjection {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..dim * 3).map(|_| rng.sample(StandardNormal)).collect();
        Ok(AppearanceProjection { dim, matrix })
    }

    pub fn from_matrix(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * 3 {
            return Err(Error::shape("projection matrix must be dim x 3"));
        }
        Ok(AppearanceProjection { dim, matrix })
    }
}

/// Segment embeddings of one image view (or view pair): per-segment mean
/// vectors, member pixel counts, and optional concept assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEmbeddings {
    pub dim: usize,
    /// `count`×`dim` row-major mean vectors (not renormalized).
    pub vectors: Vec<f64>,
    pub sizes: Vec<usize>,
    pub image_id: u64,
    pub concept_ids: Option<Vec<u32>>,
}

impl SegmentEmbeddings {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean pixel embedding per segment. Means are not renormalized.
pub fn segment_means(
    field: &EmbeddingField,
    map: &SegmentMap,
    image_id: u64,
) -> Result<SegmentEmbeddings> {
    if field.width() != map.width() || field.height() != map.height() {
        return Err(Error::shape(format!(
            "field {}x{} vs segment map {}x{}",
            field.width(),
            field.height(),
            map.width(),
            map.height()
        )));
    }
    let dim = field.dim();
    let count = map.segment_count();
    let mut vectors = vec![0.0f64; count * dim];
    let mut sizes = vec![0usize; count];
    for (p, &id) in map.ids().iter().enumerate() {
        let seg = id as usize;
        sizes[seg] += 1;
        let v = field.pixel(p);
        let acc = &mut vectors[seg * dim..(seg + 1) * dim];
        for d in 0..dim {
            acc[d] += v[d];
        }
    }
    for seg in 0..count {
        let inv = 1.0 / sizes[seg] as f64;
        for d in 0..dim {
            vectors[seg * dim + d] *= inv;
        }
    }
    Ok(SegmentEmbeddings {
        dim,
        vectors,
        sizes,
        image_id,
        concept_ids: None,
    })
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalize in place; a degenerate vector becomes the first basis vector.
pub fn normalize_vec(v: &mut [f64]) {
    let n = norm(v);
    if n < DEGENERATE_NORM {
        v.fill(0.0);
        v[0] = 1.0;
        return;
    }
    let inv = 1.0 / n;
    for x in v {
        *x *= inv;
    }
}

/// Cosine similarity clamped to [-1, 1]; 0 for degenerate inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_checked(a, b).0
}

/// Cosine similarity plus a flag marking a degenerate (near-zero norm) input.
pub fn cosine_checked(a: &[f64], b: &[f64]) -> (f64, bool) {
    debug_assert_eq!(a.len(), b.len());
    let na = norm(a);
    let nb = norm(b);
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return (0.0, true);
    }
    ((dot(a, b) / (na * nb)).clamp(-1.0, 1.0), false)
}

/// Project pixel embeddings onto their top-3 principal components and render
/// as an RGB image, each channel affinely mapped to [0, 1].
///
/// Degenerate components (zero variance) render as constant 0.5.
pub fn pca_project(field: &EmbeddingField) -> Result<RawImage> {
    let n = field.pixel_count();
    if n < 3 {
        return Err(Error::invalid("pca projection needs at least 3 pixels"));
    }
    let dim = field.dim();
    let mut mean = vec![0.0f64; dim];
    for p in 0..n {
        for (d, m) in mean.iter_mut().enumerate() {
            *m += field.pixel(p)[d];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; dim * dim];
    for p in 0..n {
        let v = field.pixel(p);
        for i in 0..dim {
            let di = v[i] - mean[i];
            for j in i..dim {
                cov[i * dim + j] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let val = cov[i * dim + j] / n as f64;
            cov[i * dim + j] = val;
            cov[j * dim + i] = val;
        }
    }
    let eig = jacobi_eigen(&cov, dim);
    let trace: f64 = eig.values.iter().sum();
    let tol = (trace.abs() * 1e-9).max(1e-18);

    let mut pixels = vec![0.5f32; n * 3];
    for (ch, &(val, ref vec)) in eig.top(3).iter().enumerate() {
        if val <= tol {
            continue; // degenerate component stays at 0.5
        }
        let mut scores = Vec::with_capacity(n);
        for p in 0..n {
            let v = field.pixel(p);
            let mut s = 0.0;
            for d in 0..dim {
                s += (v[d] - mean[d]) * vec[d];
            }
            scores.push(s);
        }
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            continue;
        }
        let inv = 1.0 / (hi - lo);
        for (p, s) in scores.iter().enumerate() {
            pixels[p * 3 + ch] = (((s - lo) * inv) as f32).clamp(0.0, 1.0);
        }
    }
    RawImage::new(field.width(), field.height(), pixels)
}

/// Eigendecomposition of a symmetric matrix.
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    /// Column eigenvectors, one `dim`-vector per eigenvalue.
    pub vectors: Vec<Vec<f64>>,
}

impl EigenDecomposition {
    /// Top-k (eigenvalue, eigenvector) pairs by descending eigenvalue, with a
    /// deterministic sign convention (largest-magnitude entry positive).
    pub fn top(&self, k: usize) -> Vec<(f64, Vec<f64>)> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| {
            self.values[b]
                .partial_cmp(&self.values[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| {
                let mut v = self.vectors[i].clone();
                let lead = v
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(_, &x)| x)
                    .unwrap_or(0.0);
                if lead < 0.0 {
                    for x in &mut v {
                        *x = -*x;
                    }
                }
                (self.values[i], v)
            })
            .collect()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric `dim`×`dim` matrix.
pub fn jacobi_eigen(matrix: &[f64], dim: usize) -> EigenDecomposition {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; dim * dim];
    for i in 0..dim {
        v[i * dim + i] = 1.0;
    }
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..dim {
            for j in i + 1..dim {
                off += a[i * dim + j] * a[i * dim + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..dim {
            for q in p + 1..dim {
                let apq = a[p * dim + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * dim + p];
                let aqq = a[q * dim + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[k * dim + p];
                    let akq = a[k * dim + q];
                    a[k * dim + p] = c * akp - s * akq;
                    a[k * dim + q] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[p * dim + k];
                    let aqk = a[q * dim + k];
                    a[p * dim + k] = c * apk - s * aqk;
                    a[q * dim + k] = s * apk + c * aqk;
                }
                for k in 0..dim {
                    let vkp = v[k * dim + p];
                    let vkq = v[k * dim + q];
                    v[k * dim + p] = c * vkp - s * vkq;
                    v[k * dim + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values: Vec<f64> = (0..dim).map(|i| a[i * dim + i]).collect();
    let vectors: Vec<Vec<f64>> = (0..dim)
        .map(|col| (0..dim).map(|row| v[row * dim + col]).collect())
        .collect();
    EigenDecomposition { values, vectors }
}
