use serde::{Deserialize, Serialize};

use super::RawImage;
use crate::error::{Error, Result};

const BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheParams {
    /// Multiple of the uniform bin height `N / 256`.
    pub clip_limit: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles_x: 8,
            tiles_y: 8,
        }
    }
}

/// Equalization lookup of one tile. When every pixel sits in the lowest
/// occupied bin (`cdf_min == N` before clipping) the mapping is the identity.
fn tile_mapping(values: impl Iterator<Item = u8>, clip_limit: f64) -> [f64; BINS] {
    let mut hist = [0.0f64; BINS];
    let mut n = 0usize;
    for v in values {
        hist[v as usize] += 1.0;
        n += 1;
    }
    let total = n as f64;
    let mut identity = [0.0; BINS];
    for (i, m) in identity.iter_mut().enumerate() {
        *m = i as f64;
    }
    if hist.iter().find(|&&h| h > 0.0).map_or(true, |&h| h == total) {
        return identity;
    }
    let clip = clip_limit * total / BINS as f64;
    let mut excess = 0.0;
    for h in &mut hist {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    if excess > 0.0 {
        let share = excess / BINS as f64;
        for h in &mut hist {
            *h += share;
        }
    }
    let mut map = [0.0; BINS];
    let mut cdf = 0.0;
    let mut cdf_min = None;
    let mut cdfs = [0.0; BINS];
    for (i, h) in hist.iter().enumerate() {
        cdf += h;
        cdfs[i] = cdf;
        if cdf_min.is_none() && cdf > 0.0 {
            cdf_min = Some(cdf);
        }
    }
    let cdf_min = cdf_min.unwrap_or(0.0);
    let denom = cdfs[BINS - 1] - cdf_min;
    for (i, m) in map.iter_mut().enumerate() {
        *m = if denom <= 0.0 {
            identity[i]
        } else {
            ((cdfs[i] - cdf_min) / denom * 255.0).clamp(0.0, 255.0)
        };
    }
    map
}

/// Tile bounds along one axis: `[i * len / tiles, (i + 1) * len / tiles)`.
fn bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * len / tiles, (i + 1) * len / tiles)).collect()
}

/// Interpolation neighbours and weight of a pixel coordinate between tile
/// centres; outside the outermost centres the nearest tile is used alone.
fn neighbours(pos: f64, centres: &[f64]) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if pos <= centres[0] {
        return (0, 0, 0.0);
    }
    if pos >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres.iter().rposition(|&c| c <= pos).expect("inside");
    let t = (pos - centres[i]) / (centres[i + 1] - centres[i]);
    (i, i + 1, t)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn clahe_plane(plane: &[u8], width: usize, height: usize, p: &ClaheParams) -> Vec<u8> {
    let (tx, ty) = if width < p.tiles_x || height < p.tiles_y {
        (1, 1)
    } else {
        (p.tiles_x, p.tiles_y)
    };
    let xb = bounds(width, tx);
    let yb = bounds(height, ty);
    let mut maps = Vec::with_capacity(tx * ty);
    for &(y0, y1) in &yb {
        for &(x0, x1) in &xb {
            let values = (y0..y1).flat_map(|y| plane[y * width + x0..y * width + x1].iter().copied());
            maps.push(tile_mapping(values, p.clip_limit));
        }
    }
    let centre = |&(a, b): &(usize, usize)| (a + b) as f64 / 2.0 - 0.5;
    let cx: Vec<f64> = xb.iter().map(centre).collect();
    let cy: Vec<f64> = yb.iter().map(centre).collect();
    let mut out = vec![0u8; plane.len()];
    for y in 0..height {
        let (y0, y1, fy) = neighbours(y as f64, &cy);
        for x in 0..width {
            let (x0, x1, fx) = neighbours(x as f64, &cx);
            let v = plane[y * width + x] as usize;
            let top = lerp(maps[y0 * tx + x0][v], maps[y0 * tx + x1][v], fx);
            let bottom = lerp(maps[y1 * tx + x0][v], maps[y1 * tx + x1][v], fx);
            out[y * width + x] = lerp(top, bottom, fy).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Contrast-limited adaptive histogram equalization, per channel.
pub fn clahe(img: &RawImage, params: &ClaheParams) -> Result<RawImage> {
    if !(params.clip_limit >= 1.0) || params.tiles_x == 0 || params.tiles_y == 0 {
        return Err(Error::contract(format!(
            "clahe needs clip_limit >= 1 and positive tile counts, got {params:?}"
        )));
    }
    let planes: Vec<Vec<u8>> = (0..img.channels)
        .map(|c| clahe_plane(&img.plane(c), img.width, img.height, params))
        .collect();
    RawImage::from_planes(img.width, img.height, &planes)
}
