//! Procedural two-modality benchmark.
//!
//! Pseudo-CFP images are fundus-like disks, pseudo-OCT images are layered
//! bands. Each class is encoded by one cue per modality:
//!
//! | class  | CFP cue    | OCT cue |
//! |--------|------------|---------|
//! | normal | none       | none    |
//! | dryAMD | drusen     | bumps   |
//! | PCV    | drusen     | dome    |
//! | wetAMD | hemorrhage | dome    |
//!
//! so dryAMD and PCV differ only in OCT, PCV and wetAMD only in CFP, and a
//! single modality can separate at most three of the four classes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Manifest};
use crate::error::{Error, Result};
use crate::imaging::RawImage;
use crate::labels::{Class, Modality, Provenance};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub eyes_per_class: usize,
    pub side: usize,
    pub oct_per_eye: usize,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            eyes_per_class: 56,
            side: 64,
            oct_per_eye: 1,
            noise: 6.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfpCue {
    None,
    Drusen,
    Hemorrhage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OctCue {
    None,
    Bumps,
    Dome,
}

pub fn cues_for(class: Class) -> (CfpCue, OctCue) {
    match class {
        Class::Normal => (CfpCue::None, OctCue::None),
        Class::DryAmd => (CfpCue::Drusen, OctCue::Bumps),
        Class::Pcv => (CfpCue::Drusen, OctCue::Dome),
        Class::WetAmd => (CfpCue::Hemorrhage, OctCue::Dome),
    }
}

/// Inverse of [`cues_for`]; `None` for combinations that never occur.
pub fn class_for(cfp: CfpCue, oct: OctCue) -> Option<Class> {
    Class::ALL.into_iter().find(|&c| cues_for(c) == (cfp, oct))
}

/// Where the cues were drawn, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueTruth {
    pub cfp_cue: CfpCue,
    pub oct_cue: OctCue,
    pub cfp_center: Option<(f64, f64)>,
    pub cfp_radius: f64,
    /// Per OCT image.
    pub oct_centers: Vec<Option<(f64, f64)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthEye {
    pub eye_id: String,
    pub subject_id: String,
    pub label: Class,
    pub cfp: RawImage,
    pub octs: Vec<RawImage>,
    pub truth: CueTruth,
}

struct Canvas {
    side: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(side: usize, channels: usize, fill: &[f64]) -> Self {
        let mut data = Vec::with_capacity(side * side * channels);
        for _ in 0..side * side {
            data.extend_from_slice(&fill[..channels]);
        }
        Self { side, channels, data }
    }

    /// Blends `color` over a disk with a one-pixel soft edge.
    fn disk(&mut self, cx: f64, cy: f64, r: f64, color: &[f64], strength: f64) {
        let s = self.side as isize;
        let (x0, x1) = ((cx - r - 1.0).floor() as isize, (cx + r + 1.0).ceil() as isize);
        let (y0, y1) = ((cy - r - 1.0).floor() as isize, (cy + r + 1.0).ceil() as isize);
        for y in y0.max(0)..=y1.min(s - 1) {
            for x in x0.max(0)..=x1.min(s - 1) {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let a = (r + 0.5 - d).clamp(0.0, 1.0) * strength;
                if a > 0.0 {
                    let i = (y as usize * self.side + x as usize) * self.channels;
                    for c in 0..self.channels {
                        self.data[i + c] += a * (color[c] - self.data[i + c]);
                    }
                }
            }
        }
    }

    fn finish(self, noise: f64, rng: &mut impl Rng) -> RawImage {
        let normal = Normal::new(0.0, noise.max(1e-9)).expect("valid sigma");
        let pixels = self
            .data
            .iter()
            .map(|&v| {
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        RawImage::new(self.side, self.side, self.channels, pixels).expect("consistent")
    }
}

fn render_cfp(side: usize, cue: CfpCue, noise: f64, rng: &mut impl Rng) -> (RawImage, Option<(f64, f64)>, f64) {
    let s = side as f64;
    let mut cv = Canvas::new(side, 3, &[8.0, 4.0, 4.0]);
    let (cx, cy) = (
        s / 2.0 + rng.gen_range(-0.03..0.03) * s,
        s / 2.0 + rng.gen_range(-0.03..0.03) * s,
    );
    let radius = 0.46 * s;
    let base = [
        190.0 + rng.gen_range(-15.0..15.0),
        85.0 + rng.gen_range(-10.0..10.0),
        45.0 + rng.gen_range(-8.0..8.0),
    ];
    for y in 0..side {
        for x in 0..side {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let a = (radius + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                let shade = 1.0 - 0.35 * (d / radius).powi(2);
                let i = (y * side + x) * 3;
                for c in 0..3 {
                    cv.data[i + c] += a * (base[c] * shade - cv.data[i + c]);
                }
            }
        }
    }
    cv.disk(cx, cy, 0.06 * s, &[base[0] * 0.7, base[1] * 0.6, base[2] * 0.6], 0.7);
    let side_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (dx, dy) = (cx + side_sign * 0.24 * s, cy + rng.gen_range(-0.03..0.03) * s);
    for k in 0..4 {
        let angle = (k as f64 + rng.gen_range(-0.2..0.2)) * PI / 2.0 + PI / 4.0;
        let steps = (0.4 * s) as usize;
        for t in 0..steps {
            let bend = 0.15 * (t as f64 / steps as f64) * if k % 2 == 0 { 1.0 } else { -1.0 };
            let (vx, vy) = (
                dx + t as f64 * (angle + bend).cos(),
                dy + t as f64 * (angle + bend).sin(),
            );
            cv.disk(vx, vy, 0.006 * s, &[120.0, 35.0, 25.0], 0.8);
        }
    }
    cv.disk(dx, dy, 0.075 * s, &[245.0, 215.0, 150.0], 1.0);

    let lesion_r = match cue {
        CfpCue::None => 0.0,
        CfpCue::Drusen => 0.11 * s,
        CfpCue::Hemorrhage => rng.gen_range(0.09..0.13) * s,
    };
    let center = (cue != CfpCue::None).then(|| {
        let ang = rng.gen_range(0.0..2.0 * PI);
        let dist = rng.gen_range(0.0..0.18) * s;
        (cx + dist * ang.cos(), cy + dist * ang.sin())
    });
    if let Some((lx, ly)) = center {
        match cue {
            CfpCue::Drusen => {
                for _ in 0..rng.gen_range(7..11) {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    let d = rng.gen_range(0.0..lesion_r);
                    let r = rng.gen_range(0.018..0.03) * s;
                    cv.disk(lx + d * a.cos(), ly + d * a.sin(), r, &[240.0, 220.0, 120.0], 1.0);
                }
            }
            CfpCue::Hemorrhage => {
                cv.disk(lx, ly, lesion_r, &[80.0, 12.0, 8.0], 1.0);
                for _ in 0..3 {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    let r = lesion_r * rng.gen_range(0.4..0.7);
                    cv.disk(
                        lx + lesion_r * 0.7 * a.cos(),
                        ly + lesion_r * 0.7 * a.sin(),
                        r,
                        &[80.0, 12.0, 8.0],
                        1.0,
                    );
                }
            }
            CfpCue::None => {}
        }
    }
    (cv.finish(noise, rng), center, lesion_r)
}

fn gaussian(x: f64, mu: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - mu) / sigma).powi(2)).exp()
}

fn render_oct(side: usize, cue: OctCue, noise: f64, rng: &mut impl Rng) -> (RawImage, Option<(f64, f64)>) {
    let s = side as f64;
    let top0 = rng.gen_range(0.30..0.38) * s;
    let curve = rng.gen_range(-0.15..0.25) * s;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let thickness = rng.gen_range(0.22..0.27) * s;
    let gain = rng.gen_range(0.85..1.15);

    let (n_bumps, height, width) = match cue {
        OctCue::None => (0, 0.0, 1.0),
        OctCue::Bumps => (rng.gen_range(3..6), 0.05 * s, 0.022 * s),
        OctCue::Dome => (1, rng.gen_range(0.14..0.18) * s, rng.gen_range(0.07..0.09) * s),
    };
    let centre_x = rng.gen_range(0.3..0.7) * s;
    let bumps: Vec<f64> = (0..n_bumps)
        .map(|_| {
            if n_bumps == 1 {
                centre_x
            } else {
                centre_x + rng.gen_range(-0.2..0.2) * s
            }
        })
        .collect();
    let lift = |x: f64| bumps.iter().map(|&b| height * gaussian(x, b, width)).sum::<f64>();

    let mut cv = Canvas::new(side, 1, &[18.0]);
    let mut rpe_at_centre = 0.0;
    for x in 0..side {
        let xf = x as f64;
        let u = (xf - s / 2.0) / s;
        let top = top0 + curve * u * u + 0.015 * s * (2.0 * PI * u + phase).sin();
        let rpe_base = top + thickness;
        let e = lift(xf);
        let rpe = rpe_base - e;
        let top_shifted = top - 0.5 * e;
        if (xf - centre_x).abs() < 0.5 {
            rpe_at_centre = rpe;
        }
        for y in 0..side {
            let yf = y as f64;
            let v = if yf < top_shifted {
                18.0
            } else if yf < top_shifted + 0.035 * s {
                175.0
            } else if yf < rpe - 0.035 * s {
                let depth = (yf - top_shifted) / (rpe - top_shifted).max(1.0);
                90.0 + 45.0 * (depth * 3.0 * PI).sin()
            } else if yf < rpe {
                225.0
            } else if yf < rpe_base {
                match cue {
                    OctCue::Dome if e > 0.25 * height => 22.0,
                    _ => 150.0,
                }
            } else {
                let below = (yf - rpe_base) / (0.2 * s);
                (110.0 * (1.0 - below)).max(25.0)
            };
            cv.data[y * side + x] = v * gain;
        }
    }
    // Speckle.
    let speckle = Normal::new(1.0, 0.12).expect("valid sigma");
    for v in &mut cv.data {
        *v *= speckle.sample(rng);
    }
    let center = (cue != OctCue::None).then_some((centre_x, rpe_at_centre));
    (cv.finish(noise, rng), center)
}

fn eye(spec: &SynthSpec, class: Class, index: usize, base_seed: u64) -> SynthEye {
    let mut rng = seed::rng(base_seed, &[seed::tag("synth-eye"), class.index() as u64, index as u64]);
    let (cfp_cue, oct_cue) = cues_for(class);
    let (cfp, cfp_center, cfp_radius) = render_cfp(spec.side, cfp_cue, spec.noise, &mut rng);
    let mut octs = Vec::new();
    let mut oct_centers = Vec::new();
    for _ in 0..spec.oct_per_eye {
        let (img, c) = render_oct(spec.side, oct_cue, spec.noise, &mut rng);
        octs.push(img);
        oct_centers.push(c);
    }
    SynthEye {
        eye_id: format!("{}-{index:04}", class.name()),
        subject_id: format!("subj-{}-{:04}", class.name(), index / 2),
        label: class,
        cfp,
        octs,
        truth: CueTruth {
            cfp_cue,
            oct_cue,
            cfp_center,
            cfp_radius,
            oct_centers,
        },
    }
}

/// All eyes, class-major. Each eye draws from its own seeded stream.
pub fn generate(spec: &SynthSpec, seed: u64) -> Vec<SynthEye> {
    Class::ALL
        .into_iter()
        .flat_map(|c| (0..spec.eyes_per_class).map(move |i| (c, i)))
        .map(|(c, i)| eye(spec, c, i, seed))
        .collect()
}

pub fn cfp_image_id(eye_id: &str) -> String {
    format!("{eye_id}-cfp")
}

pub fn oct_image_id(eye_id: &str, k: usize) -> String {
    format!("{eye_id}-oct{k}")
}

/// Records for generated eyes, with image paths under `images/`.
pub fn records(eyes: &[SynthEye]) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    for e in eyes {
        let mut push = |image_id: String, modality: Modality| {
            out.push(ImageRecord {
                path: PathBuf::from("images").join(format!("{image_id}.png")),
                image_id,
                eye_id: e.eye_id.clone(),
                subject_id: e.subject_id.clone(),
                modality,
                label: e.label,
                provenance: Provenance::Real,
            });
        };
        push(cfp_image_id(&e.eye_id), Modality::Cfp);
        for k in 0..e.octs.len() {
            push(oct_image_id(&e.eye_id, k), Modality::Oct);
        }
    }
    out
}

/// Writes `images/*.png`, `manifest.csv` and `truth.json` under `dir` and
/// returns the manifest path.
pub fn write_benchmark(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<PathBuf> {
    let eyes = generate(spec, seed);
    let recs = records(&eyes);
    let mut i = 0;
    for e in &eyes {
        e.cfp.save(&dir.join(&recs[i].path))?;
        i += 1;
        for img in &e.octs {
            img.save(&dir.join(&recs[i].path))?;
            i += 1;
        }
    }
    let manifest = dir.join("manifest.csv");
    Manifest::write(&manifest, &recs)?;
    let truth: Vec<(&str, &CueTruth)> = eyes.iter().map(|e| (e.eye_id.as_str(), &e.truth)).collect();
    let json = serde_json::to_string_pretty(&truth)? + "\n";
    let truth_path = dir.join("truth.json");
    fs::write(&truth_path, json).map_err(|e| Error::io(format!("writing {}", truth_path.display()), e))?;
    Ok(manifest)
}
