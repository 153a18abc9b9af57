#![allow(dead_code)]

use nrkd_core::features::{DescriptorSet, Keypoint};
use nrkd_core::raster::Raster;
use nrkd_core::warp::PointWarp;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub w: usize,
    pub h: usize,
    pub s: Vec<f64>,
    pub m: Vec<f64>,
    pub f: Vec<bool>,
}

pub fn random_case(rng: &mut ChaCha8Rng, max_side: usize) -> Case {
    let w = rng.random_range(5..=max_side);
    let h = rng.random_range(5..=max_side);
    let n = w * h;
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut m = vec![0.0; n];
    let mut f = vec![false; n];
    // one target inside the first full patch so some patch is always active
    let i0 = rng.random_range(0..5) * w + rng.random_range(0..5);
    m[i0] = 1.0;
    f[i0] = true;
    for _ in 0..rng.random_range(1..=(n / 8).max(1)) {
        let i = rng.random_range(0..n);
        m[i] = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
        f[i] = true;
    }
    // some target mass off the mask, and some negatives on it
    for i in 0..n {
        if m[i] == 0.0 && rng.random_bool(0.1) {
            m[i] = rng.random_range(0.0..0.3);
        }
        if rng.random_bool(0.1) {
            f[i] = true;
        }
    }
    Case { w, h, s, m, f }
}

pub fn oracle_cossim(c: &Case) -> f64 {
    let sf: Vec<f64> = (0..c.s.len()).map(|i| if c.f[i] { c.s[i] } else { 0.0 }).collect();
    let mf: Vec<f64> = (0..c.s.len()).map(|i| if c.f[i] { c.m[i] } else { 0.0 }).collect();
    let dot: f64 = sf.iter().zip(&mf).map(|(a, b)| a * b).sum();
    let na = sf.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = mf.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

pub fn oracle_simple(c: &Case) -> f64 {
    let mut n = 0;
    let mut acc = 0.0;
    for y in 0..c.h {
        for x in 0..c.w {
            let i = y * c.w + x;
            if c.f[i] {
                acc += (c.s[i] - c.m[i]).powi(2);
                if c.m[i] > 0.0 {
                    n += 1;
                }
            }
        }
    }
    acc / (2.0 * n as f64)
}

pub fn oracle_peak(c: &Case, n: usize) -> f64 {
    let starts = |len: usize| -> Vec<(usize, usize)> {
        (0..len.div_ceil(n))
            .map(|k| (k * n, ((k + 1) * n).min(len)))
            .filter(|(a, b)| 2 * (b - a) >= n)
            .collect()
    };
    let mut terms = Vec::new();
    for (y0, y1) in starts(c.h) {
        for (x0, x1) in starts(c.w) {
            let vals: Vec<f64> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).map(|(y, x)| c.s[y * c.w + x]).collect();
            let active = (y0..y1).any(|y| (x0..x1).any(|x| c.m[y * c.w + x] != 0.0));
            if active {
                let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                terms.push(max - mean);
            }
        }
    }
    1.0 - terms.iter().sum::<f64>() / terms.len() as f64
}

/// Random 16x16 scores whose 5x5 patch maxima lead the runner-up by more than
/// the finite-difference step, so no difference quotient straddles a kink of max.
pub fn separated_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let s: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        let ok = (0..3).all(|py| {
            (0..3).all(|px| {
                let mut v: Vec<f64> = (0..25).map(|k| s[(py * 5 + k / 5) * 16 + px * 5 + k % 5]).collect();
                v.sort_by(|a, b| b.total_cmp(a));
                v[0] - v[1] > 1e-3
            })
        });
        if ok {
            return s;
        }
    }
}

pub fn random_map(rng: &mut ChaCha8Rng, quantized: bool) -> Raster {
    Raster::from_fn(64, 64, |_, _| {
        if quantized {
            rng.random_range(0..12) as f32 / 11.0
        } else {
            rng.random_range(0.0..1.0)
        }
    })
}

/// Brute force: strict max over the clipped window, ties to the first pixel in
/// row-major order, at least one strictly smaller neighbor.
pub fn nms_oracle(s: &Raster, window: usize) -> Vec<(usize, usize)> {
    let r = (window / 2) as i64;
    let (w, h) = (s.width() as i64, s.height() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = s.get(x as usize, y as usize);
            let mut keep = true;
            let mut lower = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || xx < 0 || yy < 0 || xx >= w || yy >= h {
                        continue;
                    }
                    let v = s.get(xx as usize, yy as usize);
                    let earlier = yy * w + xx < y * w + x;
                    if v > c || (v == c && earlier) {
                        keep = false;
                    }
                    lower |= v < c;
                }
            }
            if keep && lower {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

pub fn edge_oracle(s: &Raster, pts: &[(usize, usize)], r: f64) -> Vec<(usize, usize)> {
    let limit = (r + 1.0) * (r + 1.0) / r;
    pts.iter()
        .copied()
        .filter(|&(x, y)| {
            if x == 0 || y == 0 || x + 1 >= s.width() || y + 1 >= s.height() {
                return false;
            }
            let g = |dx: i64, dy: i64| s.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) as f64;
            let dxx = g(1, 0) + g(-1, 0) - 2.0 * g(0, 0);
            let dyy = g(0, 1) + g(0, -1) - 2.0 * g(0, 0);
            let dxy = 0.25 * (g(1, 1) - g(1, -1) - g(-1, 1) + g(-1, -1));
            let det = dxx * dyy - dxy * dxy;
            det > 0.0 && (dxx + dyy).powi(2) / det < limit
        })
        .collect()
}

pub fn pixels(kps: &[Keypoint]) -> Vec<(usize, usize)> {
    kps.iter().map(|k| (k.x as usize, k.y as usize)).collect()
}

/// Peak at the center of a 5x5 map with Hessian diag(a, b) and optional skew.
pub fn quadratic_peak(a: f64, b: f64, c: f64) -> Raster {
    Raster::from_fn(5, 5, |x, y| {
        let (dx, dy) = (x as f64 - 2.0, y as f64 - 2.0);
        (4.0 - 0.5 * (a * dx * dx + b * dy * dy) - c * dx * dy) as f32
    })
}

/// O(n m d) reference: full distance matrix, then nearest/second-nearest scan.
pub fn brute_force(da: &DescriptorSet, db: &DescriptorSet, ratio: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..da.len() {
        let dists: Vec<f64> = (0..db.len())
            .map(|j| {
                da.row(i)
                    .iter()
                    .zip(db.row(j))
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut order: Vec<usize> = (0..db.len()).collect();
        order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
        let best = order[0];
        if db.len() == 1 {
            out.push((i, best));
            continue;
        }
        let d1 = dists[best];
        let d2 = dists[order[1]];
        let r = if d2 > 0.0 { d1 / d2 } else { 1.0 };
        if r < ratio {
            out.push((i, best));
        }
    }
    out
}


/// Dense ground-truth heatmaps computed straight from the definitions:
/// anchor map is the mean of the two binary correct-match maps, each target
/// map is the mean of the transported anchor map and its own binary map,
/// clipped to 1. Returns `(m_a, m_b, m_bp)` as row-major vectors.
pub fn gt_reference(
    t: &nrkd_core::synth::TrainingTriplet,
    da: &DescriptorSet,
    db: &DescriptorSet,
    dbp: &DescriptorSet,
    ratio: f64,
    tol: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = t.anchor.shape();
    let idx = |k: &Keypoint| k.y.round() as usize * w + k.x.round() as usize;
    let correct = |d: &DescriptorSet, g: &nrkd_core::warp::CompositeWarp| {
        let mut on_a = vec![0.0; w * h];
        let mut on_b = vec![0.0; w * h];
        for (i, j) in brute_force(da, d, ratio) {
            let (ka, kb) = (&da.keypoints[i], &d.keypoints[j]);
            let Ok(p) = g.apply_point([ka.x, ka.y]) else { continue };
            if ((p[0] - kb.x).powi(2) + (p[1] - kb.y).powi(2)).sqrt() <= tol {
                on_a[idx(ka)] = 1.0;
                on_b[idx(kb)] = 1.0;
            }
        }
        (on_a, on_b)
    };
    let (a1, b1) = correct(db, &t.warp_1);
    let (a2, b2) = correct(dbp, &t.warp_2);
    let ma: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
    let target = |g: &nrkd_core::warp::CompositeWarp, valid: &nrkd_core::raster::Mask, own: &[f64]| {
        let mut moved = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = ma[y * w + x];
                if v == 0.0 {
                    continue;
                }
                let Ok(q) = g.apply_point([x as f64, y as f64]) else { continue };
                let (qx, qy) = (q[0].round(), q[1].round());
                if !(qx >= 0.0 && qy >= 0.0 && qx < w as f64 && qy < h as f64) {
                    continue;
                }
                let (qx, qy) = (qx as usize, qy as usize);
                if valid.get(qx, qy) {
                    moved[qy * w + qx] = moved[qy * w + qx].max(v);
                }
            }
        }
        moved.iter().zip(own).map(|(m, o)| (0.5 * m + 0.5 * o).min(1.0)).collect::<Vec<f64>>()
    };
    let mb = target(&t.warp_1, &t.validity_1, &b1);
    let mbp = target(&t.warp_2, &t.validity_2, &b2);
    (ma, mb, mbp)
}

pub fn dense_peaks(peaks: &[nrkd_core::heatmap::Peak], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for p in peaks {
        out[p.y * w + p.x] = p.weight;
    }
    out
}

/// Low-frequency test image with values inside (0.2, 0.8).
pub fn smooth_image(w: usize, h: usize, phase: f64) -> Raster {
    Raster::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        let s = (std::f64::consts::TAU * (1.3 * u + phase)).sin() * (std::f64::consts::TAU * (0.9 * v - phase)).cos();
        (0.5 + 0.25 * s + 0.05 * (std::f64::consts::TAU * (u + v)).cos()) as f32
    })
}
