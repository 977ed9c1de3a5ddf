//! Training-time augmentation: rotation in a bounded degree range,
//! horizontal flip, and random crop-then-resize. Image and mask transform
//! identically; images sample bilinearly, masks nearest-neighbor so they
//! stay strictly binary.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::synth::Sample;

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    /// Rotation angle drawn uniformly from [-rotation_degrees, +rotation_degrees].
    pub rotation_degrees: f64,
    pub hflip_prob: f64,
    /// Side fraction of the random crop; 1.0 disables cropping.
    pub crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_degrees: 20.0, hflip_prob: 0.5, crop_fraction: 0.9 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return Err(Error::Config("rotation_degrees must lie in [0, 180]".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must lie in [0, 1]".into()));
        }
        if !(0.0 < self.crop_fraction && self.crop_fraction <= 1.0) {
            return Err(Error::Config("crop_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Filter {
    Bilinear,
    Nearest,
}

/// Inverse-map resampling: dst(x, y) = src(a*x + b*y + tx, c*x + d*y + ty),
/// with source coordinates clamped to the image border.
fn warp<S: Scalar>(src: &Tensor<S>, m: [f64; 6], filter: Filter) -> Tensor<S> {
    let s = src.shape();
    let (h, w) = (s.h, s.w);
    let mut out = vec![S::ZERO; s.len()];
    let hw = s.hw();
    for c in 0..s.c {
        let plane = &src.data()[c * hw..(c + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                let sx = m[0] * x as f64 + m[1] * y as f64 + m[2];
                let sy = m[3] * x as f64 + m[4] * y as f64 + m[5];
                let v = match filter {
                    Filter::Nearest => {
                        let ix = (sx.round().max(0.0) as usize).min(w - 1);
                        let iy = (sy.round().max(0.0) as usize).min(h - 1);
                        plane[iy * w + ix]
                    }
                    Filter::Bilinear => {
                        let fx = sx.clamp(0.0, (w - 1) as f64);
                        let fy = sy.clamp(0.0, (h - 1) as f64);
                        let x0 = fx.floor() as usize;
                        let y0 = fy.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                        let p00 = plane[y0 * w + x0].to_f64();
                        let p01 = plane[y0 * w + x1].to_f64();
                        let p10 = plane[y1 * w + x0].to_f64();
                        let p11 = plane[y1 * w + x1].to_f64();
                        let top = p00 * (1.0 - ax) + p01 * ax;
                        let bot = p10 * (1.0 - ax) + p11 * ax;
                        S::from_f64(top * (1.0 - ay) + bot * ay)
                    }
                };
                out[c * hw + y * w + x] = v;
            }
        }
    }
    Tensor::from_vec(s, out)
}

fn warp_sample<S: Scalar>(sample: &Sample<S>, m: [f64; 6]) -> Sample<S> {
    Sample {
        image: warp(&sample.image, m, Filter::Bilinear),
        mask: warp(&sample.mask, m, Filter::Nearest),
        id: sample.id.clone(),
    }
}

/// Rotate about the image center by `degrees` (counter-clockwise).
pub fn rotate<S: Scalar>(sample: &Sample<S>, degrees: f64) -> Sample<S> {
    let s = sample.image.shape();
    let (cx, cy) = ((s.w - 1) as f64 / 2.0, (s.h - 1) as f64 / 2.0);
    let th = degrees.to_radians();
    let (cos, sin) = (th.cos(), th.sin());
    // inverse rotation
    let m = [
        cos,
        sin,
        cx - cos * cx - sin * cy,
        -sin,
        cos,
        cy + sin * cx - cos * cy,
    ];
    warp_sample(sample, m)
}

pub fn hflip<S: Scalar>(sample: &Sample<S>) -> Sample<S> {
    let s = sample.image.shape();
    let m = [-1.0, 0.0, (s.w - 1) as f64, 0.0, 1.0, 0.0];
    // mirroring hits exact pixel centers; nearest keeps both exact
    Sample {
        image: warp(&sample.image, m, Filter::Nearest),
        mask: warp(&sample.mask, m, Filter::Nearest),
        id: sample.id.clone(),
    }
}

/// Crop a centered-at-(ox, oy) window of side fraction `frac` and resize
/// back to the original extent.
pub fn crop_resize<S: Scalar>(sample: &Sample<S>, frac: f64, ox: f64, oy: f64) -> Sample<S> {
    let s = sample.image.shape();
    let (h, w) = (s.h as f64, s.w as f64);
    let cw = (w * frac).max(1.0);
    let ch = (h * frac).max(1.0);
    let x0 = ox.clamp(0.0, w - cw);
    let y0 = oy.clamp(0.0, h - ch);
    let sx = if s.w > 1 { (cw - 1.0) / (w - 1.0) } else { 0.0 };
    let sy = if s.h > 1 { (ch - 1.0) / (h - 1.0) } else { 0.0 };
    let m = [sx, 0.0, x0, 0.0, sy, y0];
    warp_sample(sample, m)
}

/// Draw rotation, flip and crop from `draw` and apply them identically to
/// image and mask.
pub fn augment<S: Scalar>(sample: &Sample<S>, cfg: &AugmentConfig, draw: &mut Rng) -> Sample<S> {
    let mut out = sample.clone();
    let theta = draw.range(-cfg.rotation_degrees, cfg.rotation_degrees);
    if theta != 0.0 && cfg.rotation_degrees > 0.0 {
        out = rotate(&out, theta);
    }
    if draw.coin(cfg.hflip_prob) {
        out = hflip(&out);
    }
    if cfg.crop_fraction < 1.0 {
        let s = out.image.shape();
        let cw = s.w as f64 * cfg.crop_fraction;
        let ch = s.h as f64 * cfg.crop_fraction;
        let ox = draw.range(0.0, s.w as f64 - cw);
        let oy = draw.range(0.0, s.h as f64 - ch);
        out = crop_resize(&out, cfg.crop_fraction, ox, oy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SyntheticSpec};

    fn sample() -> Sample<f32> {
        let spec = SyntheticSpec { count: 1, seed: 42, ..SyntheticSpec::default() };
        generate_synthetic(&spec).unwrap().remove(0)
    }

    #[test]
    fn identity_transform_is_exact() {
        let s = sample();
        let r = rotate(&s, 0.0);
        assert_eq!(r.image, s.image);
        assert_eq!(r.mask, s.mask);
        let c = crop_resize(&s, 1.0, 0.0, 0.0);
        assert_eq!(c.image, s.image);
        assert_eq!(c.mask, s.mask);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let f2 = hflip(&hflip(&s));
        assert_eq!(f2.image, s.image);
        assert_eq!(f2.mask, s.mask);
    }

    #[test]
    fn rotation_keeps_masks_binary_and_images_in_range() {
        let s = sample();
        for deg in [-20.0, -7.3, 11.9, 20.0] {
            let r = rotate(&s, deg);
            assert!(r.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(r.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augment_is_deterministic_given_stream() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let a = augment(&s, &cfg, &mut Rng::derive(1, &[2, 3]));
        let b = augment(&s, &cfg, &mut Rng::derive(1, &[2, 3]));
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn crop_zooms_in() {
        let s = sample();
        // a centered crop keeps a (shifted) region; masks stay binary
        let c = crop_resize(&s, 0.5, 16.0, 16.0);
        assert_eq!(c.image.shape(), s.image.shape());
        assert!(c.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(AugmentConfig { crop_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { hflip_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { rotation_degrees: -1.0, ..Default::default() }
            .validate()
            .is_err());
    }
}
