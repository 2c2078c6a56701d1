//! Class activation maps for the single-modal and two-stream classifiers,
//! plus heat-map overlays.
//!
//! For feature maps `F` of shape `[C, m, m]` and the head column `w` of a
//! class, `cam(x, y) = (1 / m^2) * sum_i w[i] * F[i, x, y]`. The grid sums to
//! the logit contributed by that stream.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mmfuse_autograd::nn::{self, Mode};
use mmfuse_autograd::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RawImage;
use crate::labels::{Class, Modality, NUM_CLASSES};
use crate::models::{MmCnn, SingleModalCnn};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub class_id: Class,
    pub modality: Modality,
    pub side: usize,
    /// Row-major `side x side`, unnormalized.
    pub grid: Vec<f64>,
    /// The logit this map decomposes, computed through the pooled path.
    pub source_logit: f64,
}

impl CamMap {
    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.grid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Grid as a `[1, side, side]` tensor.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[1, self.side, self.side], self.grid.clone())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.grid.chunks(self.side) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// CAM of one stream. `features` is `[C, m, m]`; `weights` is the class
/// column of that stream's head, length `C`.
pub fn compute_cam_single(features: &Tensor<f64>, weights: &[f64], class: Class, modality: Modality) -> Result<CamMap> {
    let s = features.shape();
    if s.len() != 3 || s[1] != s[2] || s[0] != weights.len() {
        return Err(Error::contract(format!(
            "cam expects [C, m, m] features and C weights, got {s:?} and {}",
            weights.len()
        )));
    }
    let (c, m) = (s[0], s[1]);
    let area = (m * m) as f64;
    let mut grid = vec![0.0; m * m];
    let mut logit = 0.0;
    for (i, &w) in weights.iter().enumerate().take(c) {
        let map = &features.data()[i * m * m..(i + 1) * m * m];
        let mut mean = 0.0;
        for (g, &f) in grid.iter_mut().zip(map) {
            *g += w * f;
            mean += f;
        }
        logit += w * mean / area;
    }
    for g in &mut grid {
        *g /= area;
    }
    Ok(CamMap {
        class_id: class,
        modality,
        side: m,
        grid,
        source_logit: logit,
    })
}

/// Class column of a `[d, 4]` row-major head, restricted to rows `range`.
pub fn head_column(head: &[f64], rows: std::ops::Range<usize>, class: Class) -> Vec<f64> {
    rows.map(|r| head[r * NUM_CLASSES + class.index()]).collect()
}

/// CFP and OCT maps for one class. `head` is `[2C, 4]`.
pub fn compute_cam_mm(
    cfp_features: &Tensor<f64>,
    oct_features: &Tensor<f64>,
    head: &Tensor<f64>,
    class: Class,
) -> Result<(CamMap, CamMap)> {
    let c = cfp_features.shape()[0];
    if head.shape() != [2 * c, NUM_CLASSES] {
        return Err(Error::contract(format!(
            "head shape {:?} does not match {c} channels per stream",
            head.shape()
        )));
    }
    let wf = head_column(head.data(), 0..c, class);
    let wo = head_column(head.data(), c..2 * c, class);
    Ok((
        compute_cam_single(cfp_features, &wf, class, Modality::Cfp)?,
        compute_cam_single(oct_features, &wo, class, Modality::Oct)?,
    ))
}

/// Everything needed to check and render the two-stream maps of one pair.
#[derive(Clone, Debug)]
pub struct MmCamResult {
    pub scores: [f64; NUM_CLASSES],
    pub cfp_scores: [f64; NUM_CLASSES],
    pub oct_scores: [f64; NUM_CLASSES],
    pub cfp: Vec<CamMap>,
    pub oct: Vec<CamMap>,
}

impl MmCamResult {
    pub fn predicted(&self) -> Class {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.scores[c] > self.scores[best] {
                best = c;
            }
        }
        Class::from_index(best).expect("in range")
    }

    /// Largest `|s - (sum cam_f + sum cam_o)|` over classes.
    pub fn fusion_residual(&self) -> f64 {
        (0..NUM_CLASSES)
            .map(|c| (self.scores[c] - self.cfp[c].total() - self.oct[c].total()).abs())
            .fold(0.0, f64::max)
    }

    /// Largest per-stream `|s_stream - sum cam_stream|` over classes.
    pub fn stream_residual(&self) -> f64 {
        (0..NUM_CLASSES)
            .map(|c| {
                (self.cfp_scores[c] - self.cfp[c].total())
                    .abs()
                    .max((self.oct_scores[c] - self.oct[c].total()).abs())
            })
            .fold(0.0, f64::max)
    }
}

fn row(t: &Tensor<f32>, i: usize) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (o, v) in out.iter_mut().zip(&t.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]) {
        *o = *v as f64;
    }
    out
}

/// Eval-mode maps for every class and every pair in the batch.
pub fn mm_cams(model: &mut MmCnn<f32>, cfp: &Tensor<f32>, oct: &Tensor<f32>) -> Result<Vec<MmCamResult>> {
    let mut tape = Tape::new();
    let a = tape.constant(cfp.clone());
    let b = tape.constant(oct.clone());
    let out = model.forward(&mut tape, a, b, Mode::Eval)?;
    let head = model.store.value(model.head).cast::<f64>();
    let ff = tape.value(out.cfp_features).cast::<f64>();
    let fo = tape.value(out.oct_features).cast::<f64>();
    let n = ff.shape()[0];
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let (fi, oi) = (ff.select(i), fo.select(i));
        let mut cfp_maps = Vec::new();
        let mut oct_maps = Vec::new();
        for class in Class::ALL {
            let (f, o) = compute_cam_mm(&fi, &oi, &head, class)?;
            cfp_maps.push(f);
            oct_maps.push(o);
        }
        results.push(MmCamResult {
            scores: row(tape.value(out.scores), i),
            cfp_scores: row(tape.value(out.cfp_scores), i),
            oct_scores: row(tape.value(out.oct_scores), i),
            cfp: cfp_maps,
            oct: oct_maps,
        });
    }
    Ok(results)
}

/// Eval-mode maps of one class for every image in the batch, with the
/// model logits for that class.
pub fn single_cams(model: &mut SingleModalCnn<f32>, x: &Tensor<f32>, class: Class) -> Result<Vec<(CamMap, f64)>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, Mode::Eval)?;
    let head = model.store.value(model.head).to_f64_vec();
    let c = model.config().channels();
    let w = head_column(&head, 0..c, class);
    let feats = tape.value(out.features).cast::<f64>();
    let logits = tape.value(out.logits);
    (0..feats.shape()[0])
        .map(|i| {
            let cam = compute_cam_single(&feats.select(i), &w, class, model.modality)?;
            Ok((cam, logits.data()[i * NUM_CLASSES + class.index()] as f64))
        })
        .collect()
}

/// Blue-to-red colormap of `t` in `[0, 1]`.
pub fn jet(t: f64) -> [f64; 3] {
    let f = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Min-max normalized map resized to `h x w`, as `[1, h, w]`.
pub fn heat(cam: &CamMap, h: usize, w: usize) -> Tensor<f64> {
    let (lo, hi) = cam.min_max();
    let range = hi - lo;
    let norm: Vec<f64> = cam
        .grid
        .iter()
        .map(|&v| {
            if range > 0.0 && range.is_finite() {
                (v - lo) / range
            } else {
                0.5
            }
        })
        .collect();
    nn::resize_bilinear(&Tensor::from_vec(&[1, cam.side, cam.side], norm), h, w)
}

/// Heat-map overlay as `[3, h, w]` values in `[0, 1]`: the map is min-max
/// normalized (a constant map becomes 0.5), bilinearly resized to the image,
/// colored with [`jet`] and blended at alpha 0.5 onto the grayscale image.
pub fn render_overlay(img: &RawImage, cam: &CamMap) -> Tensor<f64> {
    let up = heat(cam, img.height, img.width);
    let gray = img.to_gray_f64();
    let plane = img.width * img.height;
    let mut out = vec![0.0; 3 * plane];
    for (p, (&t, &g)) in up.data().iter().zip(&gray).enumerate() {
        let color = jet(t.clamp(0.0, 1.0));
        for ch in 0..3 {
            out[ch * plane + p] = 0.5 * g + 0.5 * color[ch];
        }
    }
    Tensor::from_vec(&[3, img.height, img.width], out)
}

/// `[3, h, w]` values in `[0, 1]` to an 8-bit RGB image.
pub fn overlay_to_image(overlay: &Tensor<f64>) -> RawImage {
    let s = overlay.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut pixels = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            pixels.push((overlay.data()[ch * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    RawImage::new(w, h, 3, pixels).expect("consistent size")
}
