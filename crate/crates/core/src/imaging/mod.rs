//! 8-bit images, file I/O, preprocessing and conventional augmentation.

mod augment;
mod clahe;
mod filters;

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use mmfuse_autograd::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Modality;

pub use augment::{augment, AugmentParams};
pub use clahe::{clahe, ClaheParams};
pub use filters::{denormalize_pm1, median3x3, normalize_pm1};

/// CLAHE for CFP images, median filtering for OCT images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub clahe: Option<ClaheParams>,
    pub median: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clahe: Some(ClaheParams::default()),
            median: true,
        }
    }
}

impl PreprocessConfig {
    pub fn none() -> Self {
        Self {
            clahe: None,
            median: false,
        }
    }
}

pub fn preprocess(img: &RawImage, modality: Modality, config: &PreprocessConfig) -> Result<RawImage> {
    match modality {
        Modality::Cfp => match &config.clahe {
            Some(p) => clahe(img, p),
            None => Ok(img.clone()),
        },
        Modality::Oct if config.median => Ok(median3x3(img)),
        Modality::Oct => Ok(img.clone()),
    }
}

/// Row-major interleaved 8-bit pixels with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::contract(format!(
                "{width}x{height}x{channels} image needs {} pixels, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("consistent")
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel `c` as its own plane.
    pub fn plane(&self, c: usize) -> Vec<u8> {
        self.pixels.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn from_planes(width: usize, height: usize, planes: &[Vec<u8>]) -> Result<Self> {
        let channels = planes.len();
        let mut pixels = vec![0; width * height * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (p, &v) in plane.iter().enumerate() {
                pixels[p * channels + c] = v;
            }
        }
        Self::new(width, height, channels, pixels)
    }

    /// Luma in `[0, 1]` (0.299 R + 0.587 G + 0.114 B for color).
    pub fn to_gray_f64(&self) -> Vec<f64> {
        self.pixels
            .chunks(self.channels)
            .map(|px| match px {
                [g] => *g as f64 / 255.0,
                [r, g, b] => (0.299 * *r as f64 + 0.587 * *g as f64 + 0.114 * *b as f64) / 255.0,
                _ => unreachable!("validated channel count"),
            })
            .collect()
    }

    pub fn to_gray(&self) -> RawImage {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self.to_gray_f64().iter().map(|g| (g * 255.0).round() as u8).collect();
        Self::new(self.width, self.height, 1, pixels).expect("consistent")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(g) => Self::new(w, h, 1, g.into_raw()),
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
                Self::new(w, h, 1, img.to_luma8().into_raw())
            }
            other => Self::new(w, h, 3, other.to_rgb8().into_raw()),
        }
    }

    /// Writes PNG, or binary PGM/PPM for `.pgm`/`.ppm`/`.pnm` paths.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.pixels.clone()).expect("validated"))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.pixels.clone()).expect("validated"))
        };
        dynamic.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Bilinear resize (half-pixel centres), rounded back to 8 bits.
    pub fn resize(&self, width: usize, height: usize) -> RawImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let planes: Vec<Vec<u8>> = (0..self.channels)
            .map(|c| {
                let t = Tensor::from_vec(
                    &[1, self.height, self.width],
                    self.plane(c).iter().map(|&v| v as f64).collect(),
                );
                mmfuse_autograd::nn::resize_bilinear(&t, height, width)
                    .data()
                    .iter()
                    .map(|v| v.round().clamp(0.0, 255.0) as u8)
                    .collect()
            })
            .collect();
        Self::from_planes(width, height, &planes).expect("consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(channels: usize) -> RawImage {
        let pixels = (0..6 * 4 * channels).map(|i| (i * 37 % 256) as u8).collect();
        RawImage::new(6, 4, channels, pixels).unwrap()
    }

    #[test]
    fn png_and_pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (ch, ext) in [(1, "png"), (3, "png"), (1, "pgm"), (3, "ppm")] {
            let img = sample(ch);
            let p = dir.path().join(format!("img{ch}.{ext}"));
            img.save(&p).unwrap();
            assert_eq!(RawImage::load(&p).unwrap(), img, "{ext} with {ch} channels");
        }
    }

    #[test]
    fn planes_round_trip() {
        let img = sample(3);
        let planes: Vec<_> = (0..3).map(|c| img.plane(c)).collect();
        assert_eq!(RawImage::from_planes(6, 4, &planes).unwrap(), img);
    }

    #[test]
    fn bad_sizes_are_rejected() {
        assert!(RawImage::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(RawImage::new(2, 2, 1, vec![0; 3]).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = RawImage::load(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
