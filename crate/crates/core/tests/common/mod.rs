//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Nothing here calls the code it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mmfuse_core::dataset::ImageRecord;
use mmfuse_core::imaging::RawImage;
use mmfuse_core::{Class, Modality, Provenance};
use rand::Rng;

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, ch: usize) -> RawImage {
    let pixels = (0..w * h * ch).map(|_| rng.gen()).collect();
    RawImage::new(w, h, ch, pixels).unwrap()
}

/// Sorts each clamped 3x3 neighbourhood and takes the fifth value.
pub fn median_oracle(img: &RawImage) -> Vec<u8> {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let at = |x: i64, y: i64, c: usize| {
        let x = x.max(0).min(w as i64 - 1) as usize;
        let y = y.max(0).min(h as i64 - 1) as usize;
        img.pixels[(y * w + x) * ch + c]
    };
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for c in 0..ch {
                let mut v: Vec<u8> = [-1, 0, 1]
                    .iter()
                    .flat_map(|dy| [-1, 0, 1].iter().map(move |dx| (*dx, *dy)))
                    .map(|(dx, dy)| at(x + dx, y + dy, c))
                    .collect();
                v.sort();
                out.push(v[4]);
            }
        }
    }
    out
}

/// Global histogram equalization of one 8-bit plane:
/// `round(255 * (cdf(v) - cdf_min) / (N - cdf_min))`, identity when the
/// image is constant.
pub fn equalize_oracle(plane: &[u8]) -> Vec<u8> {
    let mut hist = [0u64; 256];
    for &v in plane {
        hist[v as usize] += 1;
    }
    let n = plane.len() as u64;
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for i in 0..256 {
        acc += hist[i];
        cdf[i] = acc;
    }
    let cdf_min = *cdf.iter().find(|&&c| c > 0).unwrap();
    if cdf_min == n {
        return plane.to_vec();
    }
    plane
        .iter()
        .map(|&v| {
            let num = (cdf[v as usize] - cdf_min) as f64 * 255.0;
            (num / (n - cdf_min) as f64).round() as u8
        })
        .collect()
}

/// Half-pixel bilinear resize written as a clamped triangle-kernel sum.
pub fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pos = |d: usize, s: usize, o: usize| ((d as f64 + 0.5) * s as f64 / o as f64 - 0.5).clamp(0.0, (s - 1) as f64);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let py = pos(oy, h, oh);
        for ox in 0..ow {
            let px = pos(ox, w, ow);
            let mut acc = 0.0;
            for y in 0..h {
                let ky = (1.0 - (py - y as f64).abs()).max(0.0);
                if ky == 0.0 {
                    continue;
                }
                for x in 0..w {
                    let kx = (1.0 - (px - x as f64).abs()).max(0.0);
                    acc += ky * kx * src[y * w + x];
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// Per-class one-vs-rest counts from a 4x4 confusion matrix indexed
/// `[truth][predicted]`, by direct summation.
pub fn counts(m: &[[u64; 4]; 4], c: usize) -> (u64, u64, u64, u64) {
    let mut tp = 0;
    let mut fneg = 0;
    let mut fpos = 0;
    let mut tn = 0;
    for t in 0..4 {
        for p in 0..4 {
            let v = m[t][p];
            match (t == c, p == c) {
                (true, true) => tp += v,
                (true, false) => fneg += v,
                (false, true) => fpos += v,
                (false, false) => tn += v,
            }
        }
    }
    (tp, fneg, tn, fpos)
}

/// Sensitivity, specificity and harmonic F1, with 0/0 read as 0.
pub fn class_oracle(tp: u64, fneg: u64, tn: u64, fpos: u64) -> (f64, f64, f64) {
    let ratio = |a: u64, b: u64| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let se = ratio(tp, fneg);
    let sp = ratio(tn, fpos);
    let f1 = if se + sp == 0.0 { 0.0 } else { 2.0 * se * sp / (se + sp) };
    (se, sp, f1)
}

pub fn record(id: &str, eye: &str, m: Modality, c: Class, p: Provenance) -> ImageRecord {
    ImageRecord {
        image_id: id.into(),
        eye_id: eye.into(),
        subject_id: format!("s-{eye}"),
        modality: m,
        label: c,
        provenance: p,
        path: format!("{id}.png").into(),
    }
}

/// Up to `max_records` records over random eyes, each eye with one label
/// and provenance and a random number of images per modality.
pub fn random_manifest(rng: &mut impl Rng, max_records: usize) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    let mut eye = 0;
    let target = rng.gen_range(1..=max_records);
    while out.len() < target {
        let class = Class::ALL[rng.gen_range(0..4)];
        let prov = if rng.gen_bool(0.3) {
            Provenance::Synthetic
        } else {
            Provenance::Real
        };
        let eye_id = format!("e{eye}");
        eye += 1;
        for m in [Modality::Cfp, Modality::Oct] {
            for k in 0..rng.gen_range(0..=2) {
                if out.len() == target {
                    break;
                }
                out.push(record(&format!("{eye_id}-{m}-{k}"), &eye_id, m, class, prov));
            }
        }
    }
    out
}

/// Every same-class (CFP, OCT) pair, enumerated.
pub fn enumerate_pairs(records: &[ImageRecord]) -> Vec<(&ImageRecord, &ImageRecord)> {
    let mut out = Vec::new();
    for a in records.iter().filter(|r| r.modality == Modality::Cfp) {
        for b in records.iter().filter(|r| r.modality == Modality::Oct) {
            if a.label == b.label {
                out.push((a, b));
            }
        }
    }
    out
}

/// Eyes of each split as sets.
pub fn eye_sets(split: &[&[ImageRecord]]) -> Vec<BTreeSet<String>> {
    split
        .iter()
        .map(|s| s.iter().map(|r| r.eye_id.clone()).collect())
        .collect()
}

/// Number of distinct eyes per class.
pub fn eyes_per_class(records: &[ImageRecord]) -> BTreeMap<Class, usize> {
    let mut eyes: BTreeMap<Class, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        eyes.entry(r.label).or_default().insert(&r.eye_id);
    }
    eyes.into_iter().map(|(c, e)| (c, e.len())).collect()
}
