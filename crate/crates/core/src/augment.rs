//! View augmentation: spatial distortions for images (and degenerate
//! 1x1 "images" holding plain feature vectors), temporal distortions for
//! event-frame sequences, and direct encoding for static inputs.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    /// Random-resized-crop area fraction range; (1.0, 1.0) disables cropping.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Per-channel affine jitter strength r: contrast in [1-r, 1+r],
    /// brightness in [-r, r].
    pub jitter: f64,
    /// Gaussian blur sigma range; (0.0, 0.0) disables blur.
    pub blur_sigma: (f64, f64),
    /// Temporal augmentation applies only to event-frame sequences.
    pub temporal_enabled: bool,
    pub time_reversal_prob: f64,
    /// Per-frame probability of zeroing the frame.
    pub frame_dropout: f64,
    /// Maximum circular time shift (frames).
    pub jitter_max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter: 0.0,
            blur_sigma: (0.0, 0.0),
            temporal_enabled: false,
            time_reversal_prob: 0.0,
            frame_dropout: 0.0,
            jitter_max_shift: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if !(0.0..=1.0).contains(&p) {
                Err(Error::Invalid(format!("{what} must be a probability, got {p}")))
            } else {
                Ok(())
            }
        };
        prob(self.flip_prob, "flip_prob")?;
        prob(self.time_reversal_prob, "time_reversal_prob")?;
        prob(self.frame_dropout, "frame_dropout")?;
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if self.jitter < 0.0 || self.jitter >= 1.0 {
            return Err(Error::Invalid(format!("jitter must be in [0, 1), got {}", self.jitter)));
        }
        let (blo, bhi) = self.blur_sigma;
        if blo < 0.0 || blo > bhi {
            return Err(Error::Invalid(format!("blur sigma range ({blo}, {bhi}) invalid")));
        }
        Ok(())
    }
}

/// One sampled spatial distortion, reusable across the frames of a view.
#[derive(Clone, Debug)]
pub struct SpatialTransform {
    crop: (usize, usize, usize, usize), // y0, x0, crop_h, crop_w
    flip: bool,
    contrast: Vec<f64>,
    brightness: Vec<f64>,
    blur_sigma: f64,
}

impl SpatialTransform {
    pub fn sample(cfg: &AugmentConfig, channels: usize, h: usize, w: usize, rng: &mut Rng) -> SpatialTransform {
        let scale = rng.range(cfg.crop_scale.0, cfg.crop_scale.1);
        let side = scale.sqrt();
        let crop_h = ((h as f64 * side).round() as usize).clamp(1, h);
        let crop_w = ((w as f64 * side).round() as usize).clamp(1, w);
        let y0 = if crop_h < h { rng.below(h - crop_h + 1) } else { 0 };
        let x0 = if crop_w < w { rng.below(w - crop_w + 1) } else { 0 };
        let flip = rng.chance(cfg.flip_prob);
        let mut contrast = Vec::with_capacity(channels);
        let mut brightness = Vec::with_capacity(channels);
        for _ in 0..channels {
            contrast.push(if cfg.jitter > 0.0 { rng.range(1.0 - cfg.jitter, 1.0 + cfg.jitter) } else { 1.0 });
            brightness.push(if cfg.jitter > 0.0 { rng.range(-cfg.jitter, cfg.jitter) } else { 0.0 });
        }
        let blur_sigma =
            if cfg.blur_sigma.1 > 0.0 { rng.range(cfg.blur_sigma.0, cfg.blur_sigma.1) } else { 0.0 };
        SpatialTransform { crop: (y0, x0, crop_h, crop_w), flip, contrast, brightness, blur_sigma }
    }

    /// Apply to one (C, H, W) image: crop+resize, flip, per-channel affine
    /// jitter, separable gaussian blur.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 3 {
            return Err(Error::Shape(format!("spatial augmentation expects (C, H, W), got {:?}", x.shape())));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (y0, x0, ch, cw) = self.crop;
        if y0 + ch > h || x0 + cw > w {
            return Err(Error::Invalid(format!(
                "crop {}x{} at ({y0}, {x0}) exceeds image {h}x{w}",
                ch, cw
            )));
        }
        let mut data = if ch == h && cw == w {
            x.data().to_vec()
        } else {
            resize_bilinear(x.data(), c, h, w, y0, x0, ch, cw)
        };
        if self.flip {
            for ci in 0..c {
                for row in 0..h {
                    let base = (ci * h + row) * w;
                    data[base..base + w].reverse();
                }
            }
        }
        for ci in 0..c {
            let (scale, shift) = (self.contrast[ci], self.brightness[ci]);
            if scale != 1.0 || shift != 0.0 {
                for v in data[ci * h * w..(ci + 1) * h * w].iter_mut() {
                    *v = scale * *v + shift;
                }
            }
        }
        if self.blur_sigma > 0.0 {
            data = gaussian_blur(&data, c, h, w, self.blur_sigma);
        }
        Tensor::new(vec![c, h, w], data)
    }
}

/// Crop region (y0, x0, ch, cw) of each channel, resized back to (h, w).
fn resize_bilinear(
    data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; c * h * w];
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    for ci in 0..c {
        let src = &data[ci * h * w..(ci + 1) * h * w];
        for oy in 0..h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let iy = fy.floor() as usize;
            let ty = fy - iy as f64;
            let iy1 = (iy + 1).min(ch - 1);
            for ox in 0..w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let ix = fx.floor() as usize;
                let tx = fx - ix as f64;
                let ix1 = (ix + 1).min(cw - 1);
                let at = |yy: usize, xx: usize| src[(y0 + yy) * w + (x0 + xx)];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix1) * tx;
                let bottom = at(iy1, ix) * (1.0 - tx) + at(iy1, ix1) * tx;
                out[(ci * h + oy) * w + ox] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Two-pass separable gaussian, kernel radius ceil(2 sigma), edges clamped.
fn gaussian_blur(data: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as i64;
    if radius == 0 {
        return data.to_vec();
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / denom).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let mut tmp = vec![0.0f64; data.len()];
    // horizontal pass
    for ci in 0..c {
        for y in 0..h {
            let base = (ci * h + y) * w;
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * data[base + sx];
                }
                tmp[base + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f64; data.len()];
    // vertical pass
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(ci * h + sy) * w + x];
                }
                out[(ci * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Sample and apply a spatial distortion to one (C, H, W) image.
pub fn augment_spatial(x: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    SpatialTransform::sample(cfg, c, h, w, rng).apply(x)
}

// ------------------------------------------------------------- temporal

/// One sampled temporal distortion, applied identically to both views.
#[derive(Clone, Debug)]
pub struct TemporalTransform {
    pub reverse: bool,
    pub shift: i64,
    pub drop: Vec<bool>,
}

impl TemporalTransform {
    pub fn identity(t: usize) -> TemporalTransform {
        TemporalTransform { reverse: false, shift: 0, drop: vec![false; t] }
    }

    pub fn sample(cfg: &AugmentConfig, t: usize, rng: &mut Rng) -> TemporalTransform {
        if !cfg.temporal_enabled {
            return TemporalTransform::identity(t);
        }
        let reverse = rng.chance(cfg.time_reversal_prob);
        let shift = if cfg.jitter_max_shift > 0 {
            let span = 2 * cfg.jitter_max_shift + 1;
            rng.below(span) as i64 - cfg.jitter_max_shift as i64
        } else {
            0
        };
        let drop = (0..t).map(|_| rng.chance(cfg.frame_dropout)).collect();
        TemporalTransform { reverse, shift, drop }
    }

    /// Reverse, circular-shift, then zero dropped frames (by final position).
    pub fn apply(&self, frames: &[Tensor]) -> Vec<Tensor> {
        let t = frames.len();
        let mut order: Vec<usize> = (0..t).collect();
        if self.reverse {
            order.reverse();
        }
        if self.shift != 0 && t > 0 {
            let s = self.shift.rem_euclid(t as i64) as usize;
            order.rotate_right(s);
        }
        order
            .iter()
            .enumerate()
            .map(|(pos, &src)| {
                if self.drop.get(pos).copied().unwrap_or(false) {
                    Tensor::zeros(frames[src].shape())
                } else {
                    frames[src].clone()
                }
            })
            .collect()
    }
}

/// Direct encoding: a static input repeated across all timesteps.
pub fn encode_static(x: &Tensor, timesteps: usize) -> Vec<Tensor> {
    vec![x.clone(); timesteps]
}
