//! Depth-image augmentation: rescale, Laplace noise, cutout, blur and
//! random occlusion, applied on the downscaled image and deterministic per
//! seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::render::DepthFrame;
use crate::seed;

/// Augmentation parameter ranges. Each `(lo, hi)` range is sampled uniformly
/// per application; a range may also sit at its disabled point (see
/// [`AugmentConfig::validate`]).
///
/// The Laplace deviation is expressed in normalized depth units (the network
/// input space, where values are median-subtracted and divided by the object
/// diameter), so the millimeter noise scale is `dev · diameter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rescale_ratio: (f64, f64),
    pub laplace_dev: (f64, f64),
    pub cutout_ratio: (f64, f64),
    pub gaussian_blur_sigma: (f64, f64),
    pub occlusion_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rescale_ratio: (0.2, 0.8),
            laplace_dev: (0.0, 0.01),
            cutout_ratio: (0.01, 0.1),
            gaussian_blur_sigma: (0.0, 1.5),
            occlusion_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// A configuration with every stochastic effect disabled; only the
    /// down/up resample remains (at the given fixed ratio).
    pub fn noise_free(rescale: f64) -> Self {
        Self {
            rescale_ratio: (rescale, rescale),
            laplace_dev: (0.0, 0.0),
            cutout_ratio: (0.0, 0.0),
            gaussian_blur_sigma: (0.0, 0.0),
            occlusion_prob: 0.0,
        }
    }

    /// Ranges must be ordered and stay inside the documented bounds;
    /// `(0, 0)` (or `(1, 1)` for the rescale ratio) marks a disabled step.
    pub fn validate(&self) -> Result<(), DatagenError> {
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        let within = |r: (f64, f64), lo: f64, hi: f64| r.0 >= lo && r.1 <= hi;
        let ok = ordered(self.rescale_ratio)
            && (self.rescale_ratio == (1.0, 1.0) || within(self.rescale_ratio, 0.2, 0.8));
        if !ok {
            return Err(DatagenError::InvalidArgument(format!(
                "rescale_ratio {:?} outside [0.2, 0.8]",
                self.rescale_ratio
            )));
        }
        if !(ordered(self.laplace_dev) && within(self.laplace_dev, 0.0, 0.01)) {
            return Err(DatagenError::InvalidArgument(format!(
                "laplace_dev {:?} outside [0, 0.01]",
                self.laplace_dev
            )));
        }
        let ok = ordered(self.cutout_ratio)
            && (self.cutout_ratio == (0.0, 0.0) || within(self.cutout_ratio, 0.01, 0.1));
        if !ok {
            return Err(DatagenError::InvalidArgument(format!(
                "cutout_ratio {:?} outside [0.01, 0.1]",
                self.cutout_ratio
            )));
        }
        if !(ordered(self.gaussian_blur_sigma) && within(self.gaussian_blur_sigma, 0.0, 1.5)) {
            return Err(DatagenError::InvalidArgument(format!(
                "gaussian_blur_sigma {:?} outside [0, 1.5]",
                self.gaussian_blur_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(DatagenError::InvalidArgument(format!(
                "occlusion_prob {} outside [0, 1]",
                self.occlusion_prob
            )));
        }
        Ok(())
    }
}

/// Mask-aware bilinear resize: background zeros never bleed into the object
/// and object boundary values are renormalized by the resampled coverage.
fn resize_masked(values: &[f32], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f32> {
    let sample = |data: &dyn Fn(usize, usize) -> f64, x: f64, y: f64| -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let get = |ix: i64, iy: i64| -> f64 {
            if ix < 0 || iy < 0 || ix >= w as i64 || iy >= h as i64 {
                0.0
            } else {
                data(ix as usize, iy as usize)
            }
        };
        let (x0, y0) = (x0 as i64, y0 as i64);
        get(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + get(x0 + 1, y0) * fx * (1.0 - fy)
            + get(x0, y0 + 1) * (1.0 - fx) * fy
            + get(x0 + 1, y0 + 1) * fx * fy
    };
    let val = |x: usize, y: usize| f64::from(values[y * w + x]);
    let msk = |x: usize, y: usize| {
        if values[y * w + x] > 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut out = vec![0.0f32; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let m = sample(&msk, src_x, src_y);
            if m >= 0.5 {
                let vm = sample(&|ix, iy| val(ix, iy) * msk(ix, iy), src_x, src_y);
                out[y * nw + x] = (vm / m) as f32;
            }
        }
    }
    out
}

fn laplace_sample(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(1e-300).ln()
}

/// Separable Gaussian blur over the nonzero footprint, renormalized so the
/// background does not pull boundary values toward zero.
fn blur_masked(values: &mut [f32], w: usize, h: usize, sigma: f64) {
    if sigma < 1e-3 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let mask: Vec<f64> = values.iter().map(|&v| f64::from(v > 0.0)).collect();
    let vm: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    let conv = |data: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &k) in kernel.iter().enumerate() {
                    let o = ki as i64 - radius;
                    let (sx, sy) = if horizontal {
                        (x as i64 + o, y as i64)
                    } else {
                        (x as i64, y as i64 + o)
                    };
                    if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                        acc += k * data[sy as usize * w + sx as usize];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let v1 = conv(&conv(&vm, true), false);
    let m1 = conv(&conv(&mask, true), false);
    for i in 0..values.len() {
        if values[i] > 0.0 && m1[i] > 1e-9 {
            values[i] = (v1[i] / m1[i]) as f32;
        }
    }
}

/// Apply the augmentation chain: downscale, then noise / cutout / blur /
/// occlusion on the downscaled image, then upscale to the original size.
/// Zero (background) pixels stay zero except where cutout or occlusion zero
/// more; depth never goes negative. Deterministic per seed.
pub fn augment(
    frame: &DepthFrame,
    cfg: &AugmentConfig,
    diameter_mm: f64,
    seed_value: u64,
) -> Result<DepthFrame, DatagenError> {
    cfg.validate()?;
    let mut rng = seed::rng(seed_value, "augment", 0);
    let (w, h) = (frame.width as usize, frame.height as usize);

    let ratio = rng.gen_range(cfg.rescale_ratio.0..=cfg.rescale_ratio.1);
    let nw = ((w as f64 * ratio).round() as usize).max(8);
    let nh = ((h as f64 * ratio).round() as usize).max(8);
    let mut small = resize_masked(&frame.depth, w, h, nw, nh);

    // Laplace noise on object pixels, in normalized units scaled by the
    // object diameter; clamped at zero.
    let dev = rng.gen_range(cfg.laplace_dev.0..=cfg.laplace_dev.1);
    if dev > 0.0 {
        let scale_mm = dev * diameter_mm;
        for v in small.iter_mut() {
            if *v > 0.0 {
                *v = (f64::from(*v) + laplace_sample(&mut rng, scale_mm)).max(0.0) as f32;
            }
        }
    }

    // Cutout: zero a rectangle covering the drawn fraction of the image.
    let ratio = rng.gen_range(cfg.cutout_ratio.0..=cfg.cutout_ratio.1);
    if ratio > 0.0 {
        let area = ratio * (nw * nh) as f64;
        let aspect = rng.gen_range(0.5..2.0);
        let cw = ((area * aspect).sqrt().round() as usize).clamp(1, nw);
        let ch = ((area / cw as f64).round() as usize).clamp(1, nh);
        let x0 = rng.gen_range(0..=(nw - cw));
        let y0 = rng.gen_range(0..=(nh - ch));
        for y in y0..y0 + ch {
            small[y * nw + x0..y * nw + x0 + cw].fill(0.0);
        }
    }

    let sigma = rng.gen_range(cfg.gaussian_blur_sigma.0..=cfg.gaussian_blur_sigma.1);
    blur_masked(&mut small, nw, nh, sigma);

    // Random square or circle occlusion over the object's bounding box.
    if cfg.occlusion_prob > 0.0 && rng.gen_bool(cfg.occlusion_prob) {
        apply_occlusion(&mut small, nw, nh, &mut rng);
    }

    let up = resize_masked(&small, nw, nh, w, h);
    Ok(DepthFrame::new(
        frame.width,
        frame.height,
        up,
        frame.intrinsics.clone(),
    )?)
}

fn apply_occlusion(small: &mut [f32], nw: usize, nh: usize, rng: &mut impl Rng) {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..nh {
        for x in 0..nw {
            if small[y * nw + x] > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return;
    }
    let bb_area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    // Occluder covers 10–40% of the object's bounding box.
    let area = bb_area * rng.gen_range(0.10..0.40);
    let cx = rng.gen_range(x0 as f64..=(x1 as f64 + 1.0));
    let cy = rng.gen_range(y0 as f64..=(y1 as f64 + 1.0));
    let square = rng.gen_bool(0.5);
    if square {
        let half = area.sqrt() / 2.0;
        for y in 0..nh {
            for x in 0..nw {
                if (x as f64 + 0.5 - cx).abs() <= half && (y as f64 + 0.5 - cy).abs() <= half {
                    small[y * nw + x] = 0.0;
                }
            }
        }
    } else {
        let r2 = area / std::f64::consts::PI;
        for y in 0..nh {
            for x in 0..nw {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r2 {
                    small[y * nw + x] = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;

    fn constant_frame(size: u32, value: f32) -> DepthFrame {
        let intr = CameraIntrinsics::new(500.0, 500.0, size as f64 / 2.0, size as f64 / 2.0, size, size)
            .unwrap();
        DepthFrame::new(size, size, vec![value; (size * size) as usize], intr).unwrap()
    }

    fn disk_frame(size: u32, radius: f64, value: f32) -> DepthFrame {
        let mut f = constant_frame(size, 0.0);
        let c = size as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let dx = f64::from(x) + 0.5 - c;
                let dy = f64::from(y) + 0.5 - c;
                if dx * dx + dy * dy <= radius * radius {
                    f.depth[(y * size + x) as usize] = value;
                }
            }
        }
        f
    }

    // Independent plain bilinear resampler used as the degenerate-config
    // oracle (mask-aware in the same way as the production path).
    fn reference_down_up(frame: &DepthFrame, ratio: f64) -> Vec<f32> {
        let (w, h) = (frame.width as usize, frame.height as usize);
        let nw = ((w as f64 * ratio).round() as usize).max(8);
        let nh = ((h as f64 * ratio).round() as usize).max(8);
        let down = resize_masked(&frame.depth, w, h, nw, nh);
        resize_masked(&down, nw, nh, w, h)
    }

    #[test]
    fn noise_off_config_is_pure_resample() {
        let frame = disk_frame(64, 20.0, 800.0);
        let cfg = AugmentConfig::noise_free(0.5);
        let out = augment(&frame, &cfg, 100.0, 9).unwrap();
        let expect = reference_down_up(&frame, 0.5);
        assert_eq!(out.depth, expect);
    }

    #[test]
    fn deterministic_per_seed() {
        let frame = disk_frame(64, 22.0, 900.0);
        let cfg = AugmentConfig::default();
        let a = augment(&frame, &cfg, 120.0, 5).unwrap();
        let b = augment(&frame, &cfg, 120.0, 5).unwrap();
        assert_eq!(a.depth, b.depth);
        let c = augment(&frame, &cfg, 120.0, 6).unwrap();
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn never_negative_and_zeros_stay_zero() {
        let frame = disk_frame(64, 18.0, 700.0);
        let cfg = AugmentConfig {
            laplace_dev: (0.01, 0.01),
            cutout_ratio: (0.0, 0.0),
            occlusion_prob: 0.0,
            rescale_ratio: (1.0, 1.0),
            gaussian_blur_sigma: (0.0, 0.0),
        };
        for s in 0..20 {
            let out = augment(&frame, &cfg, 150.0, s).unwrap();
            for (i, &v) in out.depth.iter().enumerate() {
                assert!(v >= 0.0);
                if frame.depth[i] == 0.0 {
                    assert_eq!(v, 0.0, "background pixel {i} became {v}");
                }
            }
        }
    }

    #[test]
    fn cutout_area_fraction() {
        let frame = constant_frame(128, 1000.0);
        let cfg = AugmentConfig {
            rescale_ratio: (1.0, 1.0),
            laplace_dev: (0.0, 0.0),
            cutout_ratio: (0.1, 0.1),
            gaussian_blur_sigma: (0.0, 0.0),
            occlusion_prob: 0.0,
        };
        let n = (128 * 128) as f64;
        for s in 0..10 {
            let out = augment(&frame, &cfg, 100.0, s).unwrap();
            let zeroed = out.depth.iter().filter(|&&v| v == 0.0).count() as f64;
            assert!(
                (zeroed / n - 0.1).abs() < 0.01,
                "seed {s}: zeroed fraction {}",
                zeroed / n
            );
        }
    }

    #[test]
    fn occlusion_frequency_matches_probability() {
        let frame = disk_frame(48, 16.0, 600.0);
        let cfg = AugmentConfig {
            rescale_ratio: (1.0, 1.0),
            laplace_dev: (0.0, 0.0),
            cutout_ratio: (0.0, 0.0),
            gaussian_blur_sigma: (0.0, 0.0),
            occlusion_prob: 0.2,
        };
        let trials = 10_000u64;
        let mut occluded = 0u64;
        for s in 0..trials {
            let out = augment(&frame, &cfg, 100.0, s).unwrap();
            if out.depth != frame.depth {
                occluded += 1;
            }
        }
        let f = occluded as f64 / trials as f64;
        assert!((f - 0.2).abs() <= 0.02, "occlusion frequency {f}");
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let mut cfg = AugmentConfig::default();
        cfg.laplace_dev = (0.0, 0.5);
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.rescale_ratio = (0.9, 0.95);
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.occlusion_prob = 1.5;
        assert!(cfg.validate().is_err());
    }
}
