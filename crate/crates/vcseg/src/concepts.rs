//! Global concepts: the VQ dictionary and concept co-occurrence.
//!
//! A [`Codebook`] holds K unit vectors, one per global concept. Segments are
//! assigned to their most cosine-similar concept; concepts that co-occur in
//! the same image form the positive sets of the co-occurrence loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, normalize_vec, SegmentEmbeddings};
use crate::error::{Error, Result};

/// The VQ dictionary of K global concept vectors plus usage bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    /// K×dim row-major unit vectors.
    vectors: Vec<f64>,
    /// Total assignments received per concept.
    usage: Vec<u64>,
    /// Assignment rounds since each concept was last used.
    staleness: Vec<u64>,
}

impl Codebook {
    /// Initialize with K concepts.
    ///
    /// With warmup segments, concept vectors are sampled from the normalized
    /// segment means: without replacement when there are at least K,
    /// with replacement otherwise. Without warmup, random unit vectors.
    /// Deterministic per seed.
    pub fn init(
        k: usize,
        dim: usize,
        seed: u64,
        warmup: Option<&SegmentEmbeddings>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("codebook needs at least 2 concepts"));
        }
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(k * dim);
        let usable: Vec<Vec<f64>> = warmup
            .map(|segs| {
                (0..segs.count())
                    .map(|i| {
                        let mut v = segs.vector(i).to_vec();
                        normalize_vec(&mut v);
                        v
                    })
                    .collect()
            })
            .unwrap_or_default();
        if !usable.is_empty() {
            if usable.len() >= k {
                let mut order: Vec<usize> = (0..usable.len()).collect();
                order.shuffle(&mut rng);
                for &i in order.iter().take(k) {
                    vectors.extend_from_slice(&usable[i]);
                }
            } else {
                for _ in 0..k {
                    let i = rng.gen_range(0..usable.len());
                    vectors.extend_from_slice(&usable[i]);
                }
            }
        } else {
            for _ in 0..k {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                normalize_vec(&mut v);
                vectors.extend_from_slice(&v);
            }
        }
        Ok(Codebook {
            k,
            dim,
            vectors,
            usage: vec![0; k],
            staleness: vec![0; k],
        })
    }

    pub fn from_vectors(vectors: Vec<f64>, k: usize, dim: usize) -> Result<Self> {
        if k < 2 || vectors.len() != k * dim {
            return Err(Error::shape("codebook vectors must be k x dim, k >= 2"));
        }
        let mut cb = Codebook {
            k,
            dim,
            vectors,
            usage: vec![0; k],
            staleness: vec![0; k],
        };
        cb.renormalize();
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [f64] {
        &mut self.vectors
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn staleness(&self) -> &[u64] {
        &self.staleness
    }

    /// Renormalize every concept vector to unit length.
    pub fn renormalize(&mut self) {
        for i in 0..self.k {
            normalize_vec(&mut self.vectors[i * self.dim..(i + 1) * self.dim]);
        }
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.k)
            .map(|i| (crate::embeddings::norm(self.vector(i)) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Most cosine-similar concept for one vector; ties break to the lowest
    /// concept index. Does not touch usage counters.
    pub fn nearest(&self, v: &[f64]) -> u32 {
        let mut best = 0u32;
        let mut best_sim = f64::NEG_INFINITY;
        for i in 0..self.k {
            let sim = cosine(v, self.vector(i));
            if sim > best_sim {
                best_sim = sim;
                best = i as u32;
            }
        }
        best
    }

    /// Non-mutating assignment of every segment to its nearest concept.
    pub fn nearest_many(&self, segments: &SegmentEmbeddings) -> Result<Vec<u32>> {
        if segments.dim != self.dim {
            return Err(Error::shape(format!(
                "segment dim {} vs codebook dim {}",
                segments.dim, self.dim
            )));
        }
        Ok((0..segments.count())
            .map(|i| self.nearest(segments.vector(i)))
            .collect())
    }

    /// Assign segments to concepts, updating usage and staleness counters.
    ///
    /// Counts one assignment round: every concept's staleness increments,
    /// then assigned concepts reset to 0 and gain usage.
    pub fn assign(&mut self, segments: &SegmentEmbeddings) -> Result<Vec<u32>> {
        let ids = self.nearest_many(segments)?;
        for s in &mut self.staleness {
            *s = s.saturating_add(1);
        }
        for &id in &ids {
            self.usage[id as usize] += 1;
            self.staleness[id as usize] = 0;
        }
        Ok(ids)
    }

    /// Replace concepts staler than `threshold` with a random segment's
    /// normalized embedding plus tiny noise. Returns the number reseeded.
    pub fn reseed_dead(
        &mut self,
        segments: &SegmentEmbeddings,
        threshold: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        if segments.count() == 0 {
            return Err(Error::invalid("reseed requires at least one segment"));
        }
        let mut reseeded = 0;
        for i in 0..self.k {
            if self.staleness[i] <= threshold {
                continue;
            }
            let pick = rng.gen_range(0..segments.count());
            let mut v = segments.vector(pick).to_vec();
            normalize_vec(&mut v);
            for x in &mut v {
                let eta: f64 = rng.sample(StandardNormal);
                *x += 1e-4 * eta;
            }
            normalize_vec(&mut v);
            self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v);
            self.staleness[i] = 0;
            reseeded += 1;
        }
        Ok(reseeded)
    }

    /// Serialize as a JSON header (k, dim, counters) followed by the
    /// concept vectors as a little-endian f64 block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CodebookHeader {
            k: self.k,
            dim: self.dim,
            usage: self.usage.clone(),
            staleness: self.staleness.clone(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::format(path, format!("header encode: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CODEBOOK_MAGIC);
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for &v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[0..4] != CODEBOOK_MAGIC {
            return Err(Error::format(path, "not a codebook file"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::format(path, "truncated codebook header"));
        }
        let header: CodebookHeader = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| Error::format(path, format!("header decode: {e}")))?;
        let expect = 8 + hlen + header.k * header.dim * 8;
        if bytes.len() != expect {
            return Err(Error::format(path, "truncated codebook vectors"));
        }
        let base = 8 + hlen;
        let vectors: Vec<f64> = (0..header.k * header.dim)
            .map(|i| f64::from_le_bytes(bytes[base + i * 8..base + i * 8 + 8].try_into().unwrap()))
            .collect();
        if header.usage.len() != header.k || header.staleness.len() != header.k {
            return Err(Error::format(path, "counter length mismatch"));
        }
        Ok(Codebook {
            k: header.k,
            dim: header.dim,
            vectors,
            usage: header.usage,
            staleness: header.staleness,
        })
    }
}

const CODEBOOK_MAGIC: &[u8; 4] = b"VCBK";

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    k: usize,
    dim: usize,
    usage: Vec<u64>,
    staleness: Vec<u64>,
}

/// Which concept pairs appear together in at least one image.
///
/// Pairs are unordered and include the self-pair of every observed concept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CooccurrenceIndex {
    pairs: BTreeSet<(u32, u32)>,
    per_image: BTreeMap<u64, BTreeSet<u32>>,
}

impl CooccurrenceIndex {
    pub fn contains(&self, a: u32, b: u32) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn image_concepts(&self, image_id: u64) -> Option<&BTreeSet<u32>> {
        self.per_image.get(&image_id)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.pairs.iter().copied()
    }
}

/// Build the co-occurrence index from (image id, concept id) observations.
pub fn build_cooccurrence(items: impl IntoIterator<Item = (u64, u32)>) -> CooccurrenceIndex {
    let mut per_image: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for (image, concept) in items {
        per_image.entry(image).or_default().insert(concept);
    }
    let mut pairs = BTreeSet::new();
    for concepts in per_image.values() {
        for &a in concepts {
            for &b in concepts {
                if a <= b {
                    pairs.insert((a, b));
                }
            }
        }
    }
    CooccurrenceIndex { pairs, per_image }
}
