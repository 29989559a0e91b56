//! View transforms for two-view augmentation.
//!
//! A [`ViewTransform`] records the exact geometry (crop rectangle, output
//! size, horizontal flip) plus photometric parameters of one augmented view.
//! The geometric part is what ties view pixels back to source pixels for
//! segment transfer and pixel-identity bookkeeping; the photometric part
//! only ever touches raw images, never embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudoseg::RawImage;

/// One augmented view of a source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub hflip: bool,
    /// Additive brightness shift in [-1, 1]; raw-image rendering only.
    pub brightness: f32,
    /// Multiplicative contrast factor; raw-image rendering only.
    pub contrast: f32,
    /// Gaussian blur sigma; raw-image rendering only.
    pub blur_sigma: f32,
}

impl ViewTransform {
    /// The identity view of a `w`×`h` source.
    pub fn identity(w: usize, h: usize) -> Self {
        ViewTransform {
            crop_x: 0,
            crop_y: 0,
            crop_w: w,
            crop_h: h,
            out_w: w,
            out_h: h,
            hflip: false,
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: 0.0,
        }
    }

    /// Reject transforms that map outside a `src_w`×`src_h` source image.
    pub fn validate_for(&self, src_w: usize, src_h: usize) -> Result<()> {
        if self.crop_w == 0 || self.crop_h == 0 || self.out_w == 0 || self.out_h == 0 {
            return Err(Error::invalid("view transform with empty crop or output"));
        }
        if self.crop_x + self.crop_w > src_w || self.crop_y + self.crop_h > src_h {
            return Err(Error::invalid(format!(
                "crop {}x{}+{}+{} exceeds source {}x{}",
                self.crop_w, self.crop_h, self.crop_x, self.crop_y, src_w, src_h
            )));
        }
        Ok(())
    }

    /// Source pixel coordinates sampled by view pixel (vx, vy).
    ///
    /// Nearest-neighbor sampling at pixel centers; invertible on the crop
    /// in the sense that the mapping is recorded exactly.
    pub fn source_xy(&self, vx: usize, vy: usize) -> (usize, usize) {
        let fx = if self.hflip { self.out_w - 1 - vx } else { vx };
        let sx = self.crop_x + nearest(fx, self.out_w, self.crop_w);
        let sy = self.crop_y + nearest(vy, self.out_h, self.crop_h);
        (sx, sy)
    }

    /// Row-major source pixel index for view pixel (vx, vy).
    pub fn source_index(&self, vx: usize, vy: usize, src_w: usize) -> usize {
        let (sx, sy) = self.source_xy(vx, vy);
        sy * src_w + sx
    }

    /// Render the raw-image content of this view (photometric ops applied).
    pub fn render(&self, image: &RawImage) -> Result<RawImage> {
        self.validate_for(image.width(), image.height())?;
        let src = if self.blur_sigma > 0.0 {
            image.gaussian_smoothed(self.blur_sigma)
        } else {
            image.clone()
        };
        let mut px = Vec::with_capacity(self.out_w * self.out_h * 3);
        for vy in 0..self.out_h {
            for vx in 0..self.out_w {
                let (sx, sy) = self.source_xy(vx, vy);
                let c = src.pixel(sx, sy);
                for ch in 0..3 {
                    let v = (c[ch] - 0.5) * self.contrast + 0.5 + self.brightness;
                    px.push(v.clamp(0.0, 1.0));
                }
            }
        }
        RawImage::new(self.out_w, self.out_h, px)
    }
}

fn nearest(v: usize, out: usize, crop: usize) -> usize {
    // center-aligned nearest sample, clamped into the crop
    let s = ((v as f64 + 0.5) * crop as f64 / out as f64) as usize;
    s.min(crop - 1)
}

/// Augmentation ranges used by the trainer when drawing view transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Uniform range of crop scale relative to `crop_size`.
    pub resize_min: f64,
    pub resize_max: f64,
    /// Side of the square output view.
    pub crop_size: usize,
    pub flip_prob: f64,
    /// Brightness/contrast jitter amplitude.
    pub color_jitter: f64,
    pub blur_min: f64,
    pub blur_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_min: 0.9,
            resize_max: 1.3,
            crop_size: 48,
            flip_prob: 0.5,
            color_jitter: 0.2,
            blur_min: 0.0,
            blur_max: 1.0,
        }
    }
}

impl AugmentConfig {
    /// An identity configuration producing full-frame, untouched views.
    pub fn identity() -> Self {
        AugmentConfig {
            resize_min: 1.0,
            resize_max: 1.0,
            crop_size: 0, // 0 = full frame
            flip_prob: 0.0,
            color_jitter: 0.0,
            blur_min: 0.0,
            blur_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resize_min > 0.0 && self.resize_max >= self.resize_min) {
            return Err(Error::invalid("resize range must satisfy 0 < min <= max"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob must be in [0,1]"));
        }
        if self.blur_min < 0.0 || self.blur_max < self.blur_min {
            return Err(Error::invalid("blur range must satisfy 0 <= min <= max"));
        }
        Ok(())
    }

    /// Draw one view transform for a `src_w`×`src_h` image.
    pub fn sample(&self, src_w: usize, src_h: usize, rng: &mut impl Rng) -> ViewTransform {
        if self.crop_size == 0 {
            // full-frame mode: no geometric change, photometric params still drawn
            let mut t = ViewTransform::identity(src_w, src_h);
            t.hflip = rng.gen_bool(self.flip_prob);
            (t.brightness, t.contrast, t.blur_sigma) = self.sample_photometric(rng);
            return t;
        }
        let out = self.crop_size.min(src_w).min(src_h);
        let scale = rng.gen_range(self.resize_min..=self.resize_max);
        let side = ((out as f64 * scale).round() as usize)
            .clamp(4.min(src_w.min(src_h)), src_w.min(src_h));
        let crop_x = rng.gen_range(0..=src_w - side);
        let crop_y = rng.gen_range(0..=src_h - side);
        let hflip = rng.gen_bool(self.flip_prob);
        let (brightness, contrast, blur_sigma) = self.sample_photometric(rng);
        ViewTransform {
            crop_x,
            crop_y,
            crop_w: side,
            crop_h: side,
            out_w: out,
            out_h: out,
            hflip,
            brightness,
            contrast,
            blur_sigma,
        }
    }

    fn sample_photometric(&self, rng: &mut impl Rng) -> (f32, f32, f32) {
        let j = self.color_jitter;
        let brightness = if j > 0.0 { rng.gen_range(-j..=j) as f32 } else { 0.0 };
        let contrast = if j > 0.0 {
            1.0 + rng.gen_range(-j..=j) as f32
        } else {
            1.0
        };
        let blur = if self.blur_max > 0.0 {
            rng.gen_range(self.blur_min..=self.blur_max) as f32
        } else {
            0.0
        };
        (brightness, contrast, blur)
    }
}
