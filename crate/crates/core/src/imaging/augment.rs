use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RawImage;
use crate::error::{Error, Result};
use crate::seed;

/// Random crop, horizontal flip, rotation and color jitter, applied in that
/// order. A `None` range disables the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Side fraction of the crop window; the crop is resized back.
    pub crop: Option<(f64, f64)>,
    pub flip_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: Option<f64>,
    /// Maximum relative change, e.g. 0.1 samples a factor in `[0.9, 1.1]`.
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    /// Set by the caller, never from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            crop: Some((0.85, 1.0)),
            flip_prob: 0.5,
            rotation_deg: Some(10.0),
            brightness: Some(0.1),
            contrast: Some(0.1),
            saturation: Some(0.1),
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        Self {
            crop: None,
            flip_prob: 0.0,
            rotation_deg: None,
            brightness: None,
            contrast: None,
            saturation: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.crop {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::contract(format!("crop range ({lo}, {hi}) is empty")));
            }
            if hi > 1.0 {
                return Err(Error::contract(format!("crop fraction {hi} is larger than the image")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::contract(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        for (name, v) in [
            ("rotation", self.rotation_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::contract(format!(
                        "{name} range {v} must be finite and non-negative"
                    )));
                }
            }
        }
        if self.brightness.is_some_and(|b| b >= 1.0) || self.contrast.is_some_and(|c| c >= 1.0) {
            return Err(Error::contract("brightness and contrast ranges must be below 1"));
        }
        Ok(())
    }
}

struct Planes {
    w: usize,
    h: usize,
    data: Vec<Vec<f32>>,
}

impl Planes {
    fn from(img: &RawImage) -> Self {
        Self {
            w: img.width,
            h: img.height,
            data: (0..img.channels)
                .map(|c| img.plane(c).iter().map(|&v| v as f32).collect())
                .collect(),
        }
    }

    fn to_image(&self) -> RawImage {
        let planes: Vec<Vec<u8>> = self
            .data
            .iter()
            .map(|p| p.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
            .collect();
        RawImage::from_planes(self.w, self.h, &planes).expect("consistent")
    }

    /// Bilinear sample with zero outside the image.
    fn sample(&self, c: usize, x: f32, y: f32) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |xi: f32, yi: f32| {
            if xi < 0.0 || yi < 0.0 || xi >= self.w as f32 || yi >= self.h as f32 {
                0.0
            } else {
                self.data[c][yi as usize * self.w + xi as usize]
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
        let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn crop(p: &Planes, frac: f64, rng: &mut impl Rng) -> Planes {
    let cw = ((p.w as f64 * frac).round() as usize).clamp(1, p.w);
    let ch = ((p.h as f64 * frac).round() as usize).clamp(1, p.h);
    let x0 = rng.gen_range(0..=p.w - cw);
    let y0 = rng.gen_range(0..=p.h - ch);
    if cw == p.w && ch == p.h {
        return Planes {
            w: p.w,
            h: p.h,
            data: p.data.clone(),
        };
    }
    let sx = cw as f32 / p.w as f32;
    let sy = ch as f32 / p.h as f32;
    let data = p
        .data
        .iter()
        .enumerate()
        .map(|(c, _)| {
            let mut out = vec![0.0; p.w * p.h];
            for y in 0..p.h {
                let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f32) + y0 as f32;
                for x in 0..p.w {
                    let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f32) + x0 as f32;
                    out[y * p.w + x] = p.sample(c, src_x, src_y);
                }
            }
            out
        })
        .collect();
    Planes { w: p.w, h: p.h, data }
}

fn flip(p: &mut Planes) {
    for plane in &mut p.data {
        for row in plane.chunks_mut(p.w) {
            row.reverse();
        }
    }
}

fn rotate(p: &Planes, degrees: f64) -> Planes {
    let (s, c) = (degrees.to_radians() as f32).sin_cos();
    let cx = (p.w as f32 - 1.0) / 2.0;
    let cy = (p.h as f32 - 1.0) / 2.0;
    let data = (0..p.data.len())
        .map(|ch| {
            let mut out = vec![0.0; p.w * p.h];
            for y in 0..p.h {
                for x in 0..p.w {
                    let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                    let sx = c * dx + s * dy + cx;
                    let sy = -s * dx + c * dy + cy;
                    out[y * p.w + x] = p.sample(ch, sx, sy);
                }
            }
            out
        })
        .collect();
    Planes { w: p.w, h: p.h, data }
}

fn factor(range: Option<f64>, rng: &mut impl Rng) -> Option<f32> {
    range
        .filter(|&r| r > 0.0)
        .map(|r| rng.gen_range(1.0 - r..=1.0 + r) as f32)
}

fn jitter(p: &mut Planes, brightness: Option<f32>, contrast: Option<f32>, saturation: Option<f32>) {
    if let Some(b) = brightness {
        p.data
            .iter_mut()
            .flatten()
            .for_each(|v| *v = (*v * b).clamp(0.0, 255.0));
    }
    let luma = |p: &Planes| -> Vec<f32> {
        if p.data.len() == 3 {
            (0..p.w * p.h)
                .map(|i| 0.299 * p.data[0][i] + 0.587 * p.data[1][i] + 0.114 * p.data[2][i])
                .collect()
        } else {
            p.data[0].clone()
        }
    };
    if let Some(c) = contrast {
        let l = luma(p);
        let mean = l.iter().sum::<f32>() / l.len().max(1) as f32;
        p.data
            .iter_mut()
            .flatten()
            .for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 255.0));
    }
    if let Some(s) = saturation.filter(|_| p.data.len() == 3) {
        let l = luma(p);
        for plane in &mut p.data {
            for (v, g) in plane.iter_mut().zip(&l) {
                *v = ((*v - g) * s + g).clamp(0.0, 255.0);
            }
        }
    }
}

/// Augments one image. The random stream is keyed by
/// `(params.seed, epoch, sample_id)` alone.
pub fn augment(img: &RawImage, params: &AugmentParams, epoch: u64, sample_id: u64) -> Result<RawImage> {
    params.validate()?;
    let mut rng = seed::rng(params.seed, &[seed::tag("augment"), epoch, sample_id]);
    let mut p = Planes::from(img);
    if let Some((lo, hi)) = params.crop {
        let frac = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        p = crop(&p, frac, &mut rng);
    }
    if params.flip_prob > 0.0 && rng.gen_bool(params.flip_prob) {
        flip(&mut p);
    }
    if let Some(r) = params.rotation_deg.filter(|&r| r > 0.0) {
        let angle = rng.gen_range(-r..=r);
        p = rotate(&p, angle);
    }
    let b = factor(params.brightness, &mut rng);
    let c = factor(params.contrast, &mut rng);
    let s = factor(params.saturation, &mut rng);
    jitter(&mut p, b, c, s);
    Ok(p.to_image())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> RawImage {
        let pixels = (0..12 * 10 * 3).map(|i| (i * 31 % 251) as u8).collect();
        RawImage::new(12, 10, 3, pixels).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        assert_eq!(augment(&img(), &AugmentParams::disabled(), 3, 4).unwrap(), img());
    }

    #[test]
    fn same_coordinates_same_output() {
        let p = AugmentParams {
            seed: 11,
            ..Default::default()
        };
        let a = augment(&img(), &p, 2, 9).unwrap();
        assert_eq!(a, augment(&img(), &p, 2, 9).unwrap());
        assert_ne!(a, augment(&img(), &p, 3, 9).unwrap());
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let p = AugmentParams {
            flip_prob: 1.0,
            ..AugmentParams::disabled()
        };
        let once = augment(&img(), &p, 0, 0).unwrap();
        assert_ne!(once, img());
        assert_eq!(augment(&once, &p, 0, 0).unwrap(), img());
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let p = AugmentParams {
            crop: Some((0.9, 1.2)),
            ..AugmentParams::disabled()
        };
        assert!(augment(&img(), &p, 0, 0).is_err());
    }

    #[test]
    fn full_crop_and_zero_rotation_are_identity() {
        let p = AugmentParams {
            crop: Some((1.0, 1.0)),
            rotation_deg: Some(0.0),
            ..AugmentParams::disabled()
        };
        assert_eq!(augment(&img(), &p, 0, 0).unwrap(), img());
    }
}
