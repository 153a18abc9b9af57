//! Procedural anchor images: piecewise-constant shapes over a shaded
//! background, rendered with 2x2 supersampling.
//!
//! Used when no anchor directory is configured and by the desk-scale suites.

use rand::Rng;

use crate::raster::Raster;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, cos: f64, sin: f64 },
    Triangle { p: [[f64; 2]; 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let lx = dx * cos + dy * sin;
                let ly = -dx * sin + dy * cos;
                lx.abs() <= hw && ly.abs() <= hh
            }
            Shape::Ellipse { cx, cy, a, b, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let lx = dx * cos + dy * sin;
                let ly = -dx * sin + dy * cos;
                (lx / a).powi(2) + (ly / b).powi(2) <= 1.0
            }
            Shape::Triangle { p } => {
                let side = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let d0 = side(p[0], p[1]);
                let d1 = side(p[1], p[2]);
                let d2 = side(p[2], p[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { cx, cy, hw, hh, .. } => {
                let r = (hw * hw + hh * hh).sqrt();
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Ellipse { cx, cy, a, b, .. } => {
                let r = a.max(b);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Triangle { p } => (
                p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min),
                p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min),
                p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max),
                p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max),
            ),
        }
    }
}

/// Renders a random scene of `width x height` pixels with values in `[0, 1]`.
pub fn render_scene<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Raster {
    let (w, h) = (width as f64, height as f64);
    let base = rng.random_range(0.3..0.7);
    let gx = rng.random_range(-0.15..0.15) / w.max(1.0);
    let gy = rng.random_range(-0.15..0.15) / h.max(1.0);
    let mut img = Raster::from_fn(width, height, |x, y| {
        (base + gx * (x as f64 - w / 2.0) + gy * (y as f64 - h / 2.0)) as f32
    });

    let count = (width * height / 250).clamp(6, 400);
    let max_size = (w.min(h) / 5.0).max(5.0);
    for _ in 0..count {
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let s1 = rng.random_range(2.5..max_size);
        let s2 = rng.random_range(2.5..max_size);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect { cx, cy, hw: s1, hh: s2, cos, sin },
            1 => Shape::Ellipse { cx, cy, a: s1, b: s2, cos, sin },
            _ => {
                let mut p = [[0.0; 2]; 3];
                for q in p.iter_mut() {
                    *q = [
                        cx + rng.random_range(-1.5 * s1..1.5 * s1),
                        cy + rng.random_range(-1.5 * s2..1.5 * s2),
                    ];
                }
                Shape::Triangle { p }
            }
        };
        let intensity = rng.random_range(0.0..1.0) as f32;
        paint(&mut img, &shape, intensity);
    }
    img
}

fn paint(img: &mut Raster, shape: &Shape, value: f32) {
    let (x0, y0, x1, y1) = shape.bbox();
    let xs = x0.floor().max(0.0) as usize;
    let ys = y0.floor().max(0.0) as usize;
    let xe = (x1.ceil() + 1.0).min(img.width() as f64).max(0.0) as usize;
    let ye = (y1.ceil() + 1.0).min(img.height() as f64).max(0.0) as usize;
    const OFFS: [f64; 2] = [-0.25, 0.25];
    for y in ys..ye {
        for x in xs..xe {
            let mut hits = 0;
            for oy in OFFS {
                for ox in OFFS {
                    if shape.contains(x as f64 + ox, y as f64 + oy) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let f = hits as f32 / 4.0;
                let old = img.get(x, y);
                img.set(x, y, old * (1.0 - f) + value * f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = render_scene(64, 48, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render_scene(64, 48, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let (lo, hi) = a.min_max();
        assert!(lo >= 0.0 && hi <= 1.0 && hi - lo > 0.2);
    }
}
