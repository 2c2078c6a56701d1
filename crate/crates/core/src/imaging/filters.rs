use mmfuse_autograd::{Real, Tensor};

use super::RawImage;
use crate::error::{Error, Result};

/// 3x3 median with clamp-to-edge borders, applied per channel.
pub fn median3x3(img: &RawImage) -> RawImage {
    let (w, h, ch) = (img.width as isize, img.height as isize, img.channels);
    let mut out = img.clone();
    let mut window = [0u8; 9];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut k = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let sx = (x + dx).clamp(0, w - 1) as usize;
                        let sy = (y + dy).clamp(0, h - 1) as usize;
                        window[k] = img.get(sx, sy, c);
                        k += 1;
                    }
                }
                window.sort_unstable();
                out.set(x as usize, y as usize, c, window[4]);
            }
        }
    }
    out
}

/// `[c, h, w]` tensor with `v / 255` mapped affinely onto `[-1, 1]`.
pub fn normalize_pm1<T: Real>(img: &RawImage) -> Tensor<T> {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut data = vec![T::ZERO; ch * h * w];
    for (p, px) in img.pixels.chunks(ch).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * h * w + p] = T::from_f64((v as f64 / 255.0 - 0.5) / 0.5);
        }
    }
    Tensor::from_vec(&[ch, h, w], data)
}

/// Inverse of [`normalize_pm1`], rounding and clamping to 8 bits.
pub fn denormalize_pm1<T: Real>(t: &Tensor<T>) -> Result<RawImage> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::contract(format!("expected [1|3, h, w], got {s:?}")));
    }
    let (ch, h, w) = (s[0], s[1], s[2]);
    let mut pixels = vec![0u8; ch * h * w];
    for c in 0..ch {
        for p in 0..h * w {
            let v = (t.data()[c * h * w + p].to_f64() * 0.5 + 0.5) * 255.0;
            pixels[p * ch + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RawImage::new(w, h, ch, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_removes_salt_and_keeps_constants() {
        let mut img = RawImage::filled(5, 5, 1, 0);
        img.set(2, 2, 0, 255);
        assert!(median3x3(&img).pixels.iter().all(|&v| v == 0));
        let flat = RawImage::filled(4, 3, 3, 77);
        assert_eq!(median3x3(&flat), flat);
    }

    #[test]
    fn normalization_endpoints() {
        let img = RawImage::new(3, 1, 1, vec![0, 51, 255]).unwrap();
        let t = normalize_pm1::<f64>(&img);
        assert_eq!(t.data()[0], -1.0);
        assert!((t.data()[1] + 0.6).abs() < 1e-12);
        assert_eq!(t.data()[2], 1.0);
        assert_eq!(denormalize_pm1(&t).unwrap(), img);
    }

    #[test]
    fn normalization_is_planar() {
        let img = RawImage::new(2, 1, 3, vec![0, 255, 0, 255, 0, 255]).unwrap();
        let t = normalize_pm1::<f32>(&img);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, 1.0, -1.0, -1.0, 1.0]);
    }
}
