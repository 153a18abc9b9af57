//! Score map post-processing: non-maximum suppression, edge-response
//! filtering, score thresholding and top-k selection.

use serde::{Deserialize, Serialize};

use crate::features::Keypoint;
use crate::raster::Raster;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Odd NMS window side.
    pub nms_window: usize,
    /// Principal-curvature ratio threshold `r`.
    pub edge_ratio: f64,
    pub min_score: f32,
    pub top_k: usize,
    /// Quadratic subpixel refinement of NMS maxima.
    pub subpixel: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            nms_window: 5,
            edge_ratio: 10.0,
            min_score: 0.2,
            top_k: 1024,
            subpixel: true,
        }
    }
}

/// Window-maximum test shared by NMS and the corner detector.
///
/// A pixel survives when no neighbor within `radius` (Chebyshev) is larger,
/// no earlier neighbor in row-major order is equal, and at least one neighbor
/// is strictly smaller. Plateaus therefore keep their first pixel and
/// constant regions keep none.
pub(crate) fn is_window_max(data: &[f32], width: usize, height: usize, x: usize, y: usize, radius: usize) -> bool {
    let c = data[y * width + x];
    if c.is_nan() {
        return false;
    }
    let mut has_lower = false;
    for yy in y.saturating_sub(radius)..=(y + radius).min(height - 1) {
        for xx in x.saturating_sub(radius)..=(x + radius).min(width - 1) {
            if xx == x && yy == y {
                continue;
            }
            let v = data[yy * width + xx];
            if v > c || (v == c && (yy, xx) < (y, x)) {
                return false;
            }
            if v < c {
                has_lower = true;
            }
        }
    }
    has_lower
}

/// Window maxima of `s`, in row-major order.
pub fn nms(s: &Raster, window: usize, subpixel: bool) -> Vec<Keypoint> {
    assert!(window % 2 == 1 && window >= 3, "NMS window must be odd and >= 3");
    let (w, h) = s.shape();
    let radius = window / 2;
    let data = s.data();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !is_window_max(data, w, h, x, y, radius) {
                continue;
            }
            let (mut fx, mut fy) = (x as f64, y as f64);
            if subpixel && x > 0 && y > 0 && x + 1 < w && y + 1 < h {
                let c = s.get(x, y) as f64;
                fx += parabola_offset(s.get(x - 1, y) as f64, c, s.get(x + 1, y) as f64);
                fy += parabola_offset(s.get(x, y - 1) as f64, c, s.get(x, y + 1) as f64);
            }
            out.push(Keypoint::new(fx, fy, s.get(x, y) as f64));
        }
    }
    out
}

fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// Threshold on `trace^2 / det` for a given curvature ratio `r`.
pub fn edge_threshold(r: f64) -> f64 {
    (r + 1.0).powi(2) / r
}

/// 2x2 Hessian `(dxx, dyy, dxy)` by central differences; `None` on the border.
pub fn hessian_at(s: &Raster, x: usize, y: usize) -> Option<(f64, f64, f64)> {
    let (w, h) = s.shape();
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
        return None;
    }
    let v = |xx: usize, yy: usize| s.get(xx, yy) as f64;
    let c = v(x, y);
    let dxx = v(x + 1, y) - 2.0 * c + v(x - 1, y);
    let dyy = v(x, y + 1) - 2.0 * c + v(x, y - 1);
    let dxy = (v(x + 1, y + 1) - v(x + 1, y - 1) - v(x - 1, y + 1) + v(x - 1, y - 1)) / 4.0;
    Some((dxx, dyy, dxy))
}

/// Drops keypoints whose Hessian has `det <= 0` or `trace^2/det >= (r+1)^2/r`.
/// Keypoints on the one-pixel border are dropped too.
pub fn edge_filter(s: &Raster, keypoints: &[Keypoint], r: f64) -> Vec<Keypoint> {
    assert!(r > 0.0, "edge ratio must be positive");
    let limit = edge_threshold(r);
    keypoints
        .iter()
        .filter(|kp| {
            let (xi, yi) = kp.pixel();
            if xi < 0 || yi < 0 {
                return false;
            }
            match hessian_at(s, xi as usize, yi as usize) {
                Some((dxx, dyy, dxy)) => {
                    let det = dxx * dyy - dxy * dxy;
                    let tr = dxx + dyy;
                    det > 0.0 && tr * tr / det < limit
                }
                None => false,
            }
        })
        .copied()
        .collect()
}

/// Sorts by descending score; ties fall back to row-major pixel order.
pub fn sort_by_score(kps: &mut [Keypoint]) {
    kps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
}

/// NMS, score threshold, edge filter, then the `top_k` highest scores.
pub fn extract(s: &Raster, cfg: &ExtractConfig) -> Vec<Keypoint> {
    let peaks = nms(s, cfg.nms_window, cfg.subpixel);
    let strong: Vec<Keypoint> = peaks
        .into_iter()
        .filter(|k| k.score >= cfg.min_score as f64)
        .collect();
    let mut kept = edge_filter(s, &strong, cfg.edge_ratio);
    sort_by_score(&mut kept);
    kept.truncate(cfg.top_k);
    kept
}
