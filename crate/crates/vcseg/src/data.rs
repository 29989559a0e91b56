//! Deterministic synthetic datasets: colored shapes on textured backgrounds,
//! with exact ground truth, plus all dataset file I/O.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{LabelMap, MaskSet, DEFAULT_IGNORE_ID};
use crate::pseudoseg::{load_segment_map, RawImage, SegmentMap};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
    Ring,
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Number of shape classes; ground-truth labels are 1..=class_count,
    /// background is 0.
    pub class_count: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Shape kind per class (cycled when shorter than class_count).
    pub kinds: Vec<ShapeKind>,
    /// Base color per class.
    pub palette: Vec<[f32; 3]>,
    /// Per-instance color jitter amplitude.
    pub color_jitter: f32,
    /// Per-pixel uniform noise amplitude.
    pub texture_noise: f32,
    pub background: [f32; 3],
    /// Amplitude of the linear background gradient.
    pub background_gradient: f32,
    /// Required pairwise RGB distance between class colors.
    pub color_margin: f32,
    /// Minimum visible fraction of every placed shape.
    pub min_visible: f32,
    /// Shape half-extent range in pixels.
    pub size_min: usize,
    pub size_max: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            class_count: 4,
            shapes_min: 1,
            shapes_max: 3,
            kinds: vec![
                ShapeKind::Disk,
                ShapeKind::Rect,
                ShapeKind::Triangle,
                ShapeKind::Ring,
            ],
            palette: vec![
                [0.85, 0.13, 0.11],
                [0.10, 0.72, 0.20],
                [0.15, 0.25, 0.86],
                [0.90, 0.84, 0.10],
            ],
            color_jitter: 0.04,
            texture_noise: 0.05,
            background: [0.42, 0.42, 0.45],
            background_gradient: 0.16,
            color_margin: 0.5,
            min_visible: 0.3,
            size_min: 7,
            size_max: 14,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene size must be nonzero"));
        }
        if self.class_count == 0 || self.palette.len() != self.class_count {
            return Err(Error::invalid("palette must have one color per class"));
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("at least one shape kind required"));
        }
        if self.shapes_min == 0
            || self.shapes_max < self.shapes_min
            || self.shapes_max > self.class_count
        {
            return Err(Error::invalid(
                "shape count range must satisfy 1 <= min <= max <= class_count",
            ));
        }
        if self.size_min < 2 || self.size_max < self.size_min {
            return Err(Error::invalid("shape size range must satisfy 2 <= min <= max"));
        }
        if 2 * self.size_max + 2 > self.width.min(self.height) {
            return Err(Error::invalid("shapes cannot fit the image size"));
        }
        for (i, a) in self.palette.iter().enumerate() {
            for b in self.palette.iter().skip(i + 1) {
                if color_distance(*a, *b) < self.color_margin {
                    return Err(Error::invalid(format!(
                        "class colors closer than margin {}",
                        self.color_margin
                    )));
                }
            }
        }
        Ok(())
    }
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// One generated scene: image plus ground-truth class labels.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RawImage,
    pub labels: LabelMap,
    /// Class id (1-based label) per placed shape, in draw order.
    pub shape_classes: Vec<u32>,
}

#[derive(Clone, Copy)]
struct Placement {
    kind: ShapeKind,
    class: usize,
    cx: f64,
    cy: f64,
    size: f64,
    aspect: f64,
    color: [f32; 3],
}

impl Placement {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        let s = self.size;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= s * s,
            ShapeKind::Rect => dx.abs() <= s && dy.abs() <= s * self.aspect,
            ShapeKind::Triangle => {
                // upward triangle: apex at cy - s, base at cy + s
                dy >= -s && dy <= s && dx.abs() <= (dy + s) / (2.0 * s) * s
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = 0.55 * s;
                d2 <= s * s && d2 >= inner * inner
            }
        }
    }
}

fn draw_scene(spec: &SceneSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Scene {
    let (w, h) = (spec.width, spec.height);
    // background with a random-direction gradient plus texture noise
    let gx: f64 = rng.gen_range(-1.0..=1.0);
    let gy: f64 = rng.gen_range(-1.0..=1.0);
    let mut image_px = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 / w as f64 - 0.5) * gx + (y as f64 / h as f64 - 0.5) * gy;
            for c in 0..3 {
                let noise: f32 = if spec.texture_noise > 0.0 {
                    rng.gen_range(-spec.texture_noise..=spec.texture_noise)
                } else {
                    0.0
                };
                let v = spec.background[c] + spec.background_gradient * t as f32 + noise;
                image_px.push(quantize(v));
            }
        }
    }

    // placements with a visibility retry loop
    let n = rng.gen_range(spec.shapes_min..=spec.shapes_max);
    let mut attempts = 0usize;
    let placements = loop {
        attempts += 1;
        let mut classes: Vec<usize> = (0..spec.class_count).collect();
        // draw n distinct classes
        for i in 0..n {
            let j = rng.gen_range(i..classes.len());
            classes.swap(i, j);
        }
        classes.truncate(n);
        let placements: Vec<Placement> = classes
            .iter()
            .map(|&class| {
                let size = rng.gen_range(spec.size_min as f64..=spec.size_max as f64);
                let margin = size.ceil() as usize + 1;
                let cx = rng.gen_range(margin as f64..(w - margin) as f64);
                let cy = rng.gen_range(margin as f64..(h - margin) as f64);
                let aspect = rng.gen_range(0.5..=1.0);
                let mut color = spec.palette[class];
                for ch in &mut color {
                    if spec.color_jitter > 0.0 {
                        *ch = (*ch + rng.gen_range(-spec.color_jitter..=spec.color_jitter))
                            .clamp(0.0, 1.0);
                    }
                }
                Placement {
                    kind: spec.kinds[class % spec.kinds.len()],
                    class,
                    cx,
                    cy,
                    size,
                    aspect,
                    color,
                }
            })
            .collect();
        if visible_fractions(&placements, w, h)
            .iter()
            .all(|&f| f >= spec.min_visible as f64)
            || attempts >= 200
        {
            break placements;
        }
    };

    let mut labels = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            // later placements draw on top
            for p in placements.iter().rev() {
                if p.covers(x, y) {
                    labels[y * w + x] = p.class as u32 + 1;
                    let base = (y * w + x) * 3;
                    for c in 0..3 {
                        image_px[base + c] = quantize(p.color[c]);
                    }
                    break;
                }
            }
        }
    }

    let image = RawImage::new(w, h, image_px).expect("generated pixels are valid");
    let label_map = LabelMap::new(w, h, labels, spec.class_count + 1).expect("valid labels");
    Scene {
        image,
        labels: label_map,
        shape_classes: placements.iter().map(|p| p.class as u32 + 1).collect(),
    }
}

fn visible_fractions(placements: &[Placement], w: usize, h: usize) -> Vec<f64> {
    let mut solo = vec![0u64; placements.len()];
    let mut visible = vec![0u64; placements.len()];
    for y in 0..h {
        for x in 0..w {
            let mut top: Option<usize> = None;
            for (i, p) in placements.iter().enumerate() {
                if p.covers(x, y) {
                    solo[i] += 1;
                    top = Some(i); // later placements win
                }
            }
            if let Some(i) = top {
                visible[i] += 1;
            }
        }
    }
    placements
        .iter()
        .enumerate()
        .map(|(i, _)| {
            if solo[i] == 0 {
                0.0
            } else {
                visible[i] as f64 / solo[i] as f64
            }
        })
        .collect()
}

/// Round to the 8-bit grid so in-memory scenes equal their PNG round-trip.
fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generate `count` deterministic scenes.
pub fn generate_scenes(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::invalid("scene count must be at least 1"));
    }
    spec.validate()?;
    Ok((0..count)
        .map(|i| {
            let mut rng = rng_for(seed, &[stream::SCENE, i as u64]);
            draw_scene(spec, &mut rng)
        })
        .collect())
}

/// One generated video: frames plus per-frame instance masks.
#[derive(Debug, Clone)]
pub struct VideoScene {
    pub frames: Vec<RawImage>,
    /// Instance masks: 0 background, objects 1..=n in draw order.
    pub masks: Vec<MaskSet>,
    pub object_classes: Vec<u32>,
}

/// Generate one video with constant per-object velocities; positions clamp
/// at the borders. One velocity per object.
pub fn generate_video(
    spec: &SceneSpec,
    frames: usize,
    velocities: &[(f64, f64)],
    seed: u64,
) -> Result<VideoScene> {
    if frames == 0 {
        return Err(Error::invalid("video needs at least 1 frame"));
    }
    if velocities.is_empty() || velocities.len() > spec.class_count {
        return Err(Error::invalid(
            "need 1..=class_count velocities (one object per distinct class)",
        ));
    }
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = velocities.len();
    let mut rng = rng_for(seed, &[stream::VIDEO]);

    // static background shared by all frames
    let gx: f64 = rng.gen_range(-1.0..=1.0);
    let gy: f64 = rng.gen_range(-1.0..=1.0);
    let mut background = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 / w as f64 - 0.5) * gx + (y as f64 / h as f64 - 0.5) * gy;
            for c in 0..3 {
                let noise: f32 = if spec.texture_noise > 0.0 {
                    rng.gen_range(-spec.texture_noise..=spec.texture_noise)
                } else {
                    0.0
                };
                background.push(quantize(
                    spec.background[c] + spec.background_gradient * t as f32 + noise,
                ));
            }
        }
    }

    // objects: distinct classes, fixed appearance
    let mut classes: Vec<usize> = (0..spec.class_count).collect();
    for i in 0..n {
        let j = rng.gen_range(i..classes.len());
        classes.swap(i, j);
    }
    classes.truncate(n);
    let mut objects: Vec<Placement> = classes
        .iter()
        .map(|&class| {
            let size = rng.gen_range(spec.size_min as f64..=spec.size_max as f64);
            let margin = size.ceil() + 1.0;
            let cx = rng.gen_range(margin..(w as f64 - margin));
            let cy = rng.gen_range(margin..(h as f64 - margin));
            let aspect = rng.gen_range(0.5..=1.0);
            let mut color = spec.palette[class];
            for ch in &mut color {
                if spec.color_jitter > 0.0 {
                    *ch = (*ch + rng.gen_range(-spec.color_jitter..=spec.color_jitter))
                        .clamp(0.0, 1.0);
                }
            }
            Placement {
                kind: spec.kinds[class % spec.kinds.len()],
                class,
                cx,
                cy,
                size,
                aspect,
                color,
            }
        })
        .collect();
    let starts: Vec<(f64, f64)> = objects.iter().map(|o| (o.cx, o.cy)).collect();

    let mut out_frames = Vec::with_capacity(frames);
    let mut out_masks = Vec::with_capacity(frames);
    for t in 0..frames {
        for (i, obj) in objects.iter_mut().enumerate() {
            let margin = obj.size.ceil() + 1.0;
            obj.cx = (starts[i].0 + velocities[i].0 * t as f64)
                .clamp(margin, w as f64 - margin);
            obj.cy = (starts[i].1 + velocities[i].1 * t as f64)
                .clamp(margin, h as f64 - margin);
        }
        let mut px = background.clone();
        let mut mask = vec![0u32; w * h];
        for y in 0..h {
            for x in 0..w {
                for (i, obj) in objects.iter().enumerate().rev() {
                    if obj.covers(x, y) {
                        mask[y * w + x] = i as u32 + 1;
                        let base = (y * w + x) * 3;
                        for c in 0..3 {
                            px[base + c] = quantize(obj.color[c]);
                        }
                        break;
                    }
                }
            }
        }
        out_frames.push(RawImage::new(w, h, px).expect("generated pixels are valid"));
        out_masks.push(MaskSet::new(w, h, mask, n + 1).expect("valid masks"));
    }
    Ok(VideoScene {
        frames: out_frames,
        masks: out_masks,
        object_classes: classes.iter().map(|&c| c as u32 + 1).collect(),
    })
}

/// Everything needed to generate a full dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub train_count: usize,
    pub val_count: usize,
    pub video_count: usize,
    pub video_frames: usize,
    pub video_objects_min: usize,
    pub video_objects_max: usize,
    pub speed_max: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scene: SceneSpec::default(),
            train_count: 200,
            val_count: 50,
            video_count: 10,
            video_frames: 20,
            video_objects_min: 2,
            video_objects_max: 3,
            speed_max: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub image: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: u64,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
}

/// The dataset root description; all paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    /// Label vocabulary size including background.
    pub class_count: usize,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub images: Vec<ManifestEntry>,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, format!("manifest encode: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("{e}")))?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        for entry in &manifest.images {
            for rel in [Some(&entry.image), Some(&entry.label), entry.seg.as_ref()]
                .into_iter()
                .flatten()
            {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(Error::format(path, format!("missing file {}", p.display())));
                }
            }
        }
        for video in &manifest.videos {
            for rel in video.frames.iter().chain(&video.masks) {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(Error::format(path, format!("missing file {}", p.display())));
                }
            }
        }
        Ok(manifest)
    }
}

/// Write a full dataset directory (images/, labels/, videos/, manifest.json)
/// and return the manifest.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.scene.validate()?;
    if spec.train_count == 0 {
        return Err(Error::invalid("train_count must be at least 1"));
    }
    if spec.video_count > 0
        && (spec.video_objects_min == 0
            || spec.video_objects_max < spec.video_objects_min
            || spec.video_objects_max > spec.scene.class_count)
    {
        return Err(Error::invalid("video object range invalid"));
    }
    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;

    let total = spec.train_count + spec.val_count;
    let scenes = generate_scenes(&spec.scene, total, seed)?;
    let mut images = Vec::with_capacity(total);
    for (i, scene) in scenes.iter().enumerate() {
        let image_rel = format!("images/img_{i:05}.png");
        let label_rel = format!("labels/lab_{i:05}.png");
        save_image_png(&scene.image, &out_dir.join(&image_rel))?;
        save_label_png(&scene.labels, &out_dir.join(&label_rel))?;
        images.push(ManifestEntry {
            id: i as u64,
            image: image_rel,
            label: label_rel,
            seg: None,
        });
    }

    let mut videos = Vec::with_capacity(spec.video_count);
    for v in 0..spec.video_count {
        let mut rng = rng_for(seed, &[stream::VIDEO, 1000 + v as u64]);
        let n = rng.gen_range(spec.video_objects_min..=spec.video_objects_max);
        let velocities: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let vx = rng.gen_range(-spec.speed_max..=spec.speed_max);
                let vy = rng.gen_range(-spec.speed_max..=spec.speed_max);
                (vx, vy)
            })
            .collect();
        let video = generate_video(
            &spec.scene,
            spec.video_frames,
            &velocities,
            crate::rng::subseed(seed, &[stream::VIDEO, v as u64]),
        )?;
        let dir_rel = format!("videos/vid_{v:03}");
        let dir = out_dir.join(&dir_rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut frames = Vec::new();
        let mut masks = Vec::new();
        for (t, (frame, mask)) in video.frames.iter().zip(&video.masks).enumerate() {
            let frame_rel = format!("{dir_rel}/frame_{t:03}.png");
            let mask_rel = format!("{dir_rel}/mask_{t:03}.png");
            save_image_png(frame, &out_dir.join(&frame_rel))?;
            save_label_png(mask, &out_dir.join(&mask_rel))?;
            frames.push(frame_rel);
            masks.push(mask_rel);
        }
        videos.push(VideoEntry {
            id: v as u64,
            frames,
            masks,
        });
    }

    let manifest = DatasetManifest {
        version: "1".into(),
        seed,
        class_count: spec.scene.class_count + 1,
        train: (0..spec.train_count as u64).collect(),
        val: (spec.train_count as u64..total as u64).collect(),
        images,
        videos,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub images: Vec<RawImage>,
    pub labels: Vec<LabelMap>,
    pub segs: Vec<Option<SegmentMap>>,
    id_to_index: BTreeMap<u64, usize>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let mut images = Vec::with_capacity(manifest.images.len());
        let mut labels = Vec::with_capacity(manifest.images.len());
        let mut segs = Vec::with_capacity(manifest.images.len());
        let mut id_to_index = BTreeMap::new();
        for (i, entry) in manifest.images.iter().enumerate() {
            images.push(load_image_png(&root.join(&entry.image))?);
            labels.push(load_label_png(
                &root.join(&entry.label),
                manifest.class_count,
            )?);
            segs.push(match &entry.seg {
                Some(rel) => Some(load_segment_map(&root.join(rel))?),
                None => None,
            });
            id_to_index.insert(entry.id, i);
        }
        Ok(Dataset {
            root,
            manifest,
            images,
            labels,
            segs,
            id_to_index,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.id_to_index.get(&id).copied()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.manifest
            .train
            .iter()
            .filter_map(|id| self.index_of(*id))
            .collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.manifest
            .val
            .iter()
            .filter_map(|id| self.index_of(*id))
            .collect()
    }

    /// Load one video's frames and masks.
    pub fn load_video(&self, video_index: usize) -> Result<VideoScene> {
        let entry = self
            .manifest
            .videos
            .get(video_index)
            .ok_or_else(|| Error::invalid(format!("no video {video_index}")))?;
        let mut frames = Vec::with_capacity(entry.frames.len());
        let mut masks = Vec::with_capacity(entry.masks.len());
        for rel in &entry.frames {
            frames.push(load_image_png(&self.root.join(rel))?);
        }
        for rel in &entry.masks {
            let mask = load_label_png_raw(&self.root.join(rel))?;
            masks.push(mask);
        }
        Ok(VideoScene {
            frames,
            masks,
            object_classes: Vec::new(),
        })
    }
}

/// Save an RGB image as an 8-bit PNG.
pub fn save_image_png(image: &RawImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let c = image.pixel(x, y);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (c[0] * 255.0).round() as u8,
                    (c[1] * 255.0).round() as u8,
                    (c[2] * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {e}")))
}

pub fn load_image_png(path: &Path) -> Result<RawImage> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = Vec::with_capacity(w * h * 3);
    for p in img.pixels() {
        px.push(p[0] as f32 / 255.0);
        px.push(p[1] as f32 / 255.0);
        px.push(p[2] as f32 / 255.0);
    }
    RawImage::new(w, h, px)
}

/// Deterministic 256-entry palette for indexed label PNGs.
fn label_palette() -> Vec<u8> {
    let mut palette = Vec::with_capacity(256 * 3);
    palette.extend_from_slice(&[0, 0, 0]); // background black
    for i in 1..255u32 {
        // golden-ratio hue walk, fixed saturation/value
        let hue = (i as f32 * 0.618_034) % 1.0;
        let (r, g, b) = hsv_to_rgb(hue, 0.75, 0.95);
        palette.extend_from_slice(&[r, g, b]);
    }
    palette.extend_from_slice(&[255, 255, 255]); // ignore id renders white
    palette
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (u8, u8, u8) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    (
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    )
}

/// Save label ids as an indexed 8-bit PNG with the fixed palette.
pub fn save_label_png(labels: &LabelMap, path: &Path) -> Result<()> {
    if labels.ids.iter().any(|&id| id > 255) {
        return Err(Error::invalid("label ids beyond 255 cannot be saved as 8-bit"));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        labels.width as u32,
        labels.height as u32,
    );
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(label_palette());
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, format!("png header: {e}")))?;
    let bytes: Vec<u8> = labels.ids.iter().map(|&id| id as u8).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, format!("png write: {e}")))
}

fn load_label_png_raw(path: &Path) -> Result<LabelMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("png frame: {e}")))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "label png must be 8-bit indexed"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let ids: Vec<u32> = buf[..w * h].iter().map(|&b| b as u32).collect();
    let class_count = ids
        .iter()
        .filter(|&&id| id != DEFAULT_IGNORE_ID as u32)
        .max()
        .map_or(1, |&m| m as usize + 1);
    LabelMap::new(w, h, ids, class_count)
}

/// Load an indexed label PNG with a known vocabulary size.
pub fn load_label_png(path: &Path, class_count: usize) -> Result<LabelMap> {
    let mut map = load_label_png_raw(path)?;
    if map
        .ids
        .iter()
        .any(|&id| id != map.ignore_id && id as usize >= class_count)
    {
        return Err(Error::format(path, "label id outside class vocabulary"));
    }
    map.class_count = class_count;
    Ok(map)
}
