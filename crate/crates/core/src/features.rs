//! Base detector/descriptor plugins and the ratio-test matcher.
//!
//! The builtin pair (minimum-eigenvalue corners + normalized 16x16 patches)
//! is intentionally simple; anything stronger plugs in through the external
//! exchange protocol in [`crate::plugin`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::is_window_max;
use crate::raster::Raster;

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("plugin protocol error: {0}")]
    Protocol(String),
    #[error("plugin timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("plugin command failed: {0}")]
    Command(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error("invalid plugin spec: {0}")]
    Spec(String),
}

/// A detected point with subpixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Self { x, y, score }
    }

    /// Nearest integer pixel.
    pub fn pixel(&self) -> (i64, i64) {
        (self.x.round() as i64, self.y.round() as i64)
    }

    pub fn point(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

/// Keypoints with one descriptor row each.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub keypoints: Vec<Keypoint>,
    dim: usize,
    vectors: Vec<f32>,
    /// Input keypoints that could not be described.
    pub dropped: usize,
}

impl DescriptorSet {
    pub fn new(keypoints: Vec<Keypoint>, dim: usize, vectors: Vec<f32>) -> Result<Self, PluginError> {
        if vectors.len() != keypoints.len() * dim {
            return Err(PluginError::Protocol(format!(
                "{} descriptor values for {} keypoints of dimension {}",
                vectors.len(),
                keypoints.len(),
                dim
            )));
        }
        Ok(Self {
            keypoints,
            dim,
            vectors,
            dropped: 0,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            keypoints: Vec::new(),
            dim,
            vectors: Vec::new(),
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim.max(1)).take(self.keypoints.len())
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Rescales rows to unit L2 norm; returns how many needed it.
    /// Zero rows are a protocol error.
    pub fn normalize_rows(&mut self, tol: f32) -> Result<usize, PluginError> {
        let dim = self.dim;
        let mut fixed = 0;
        for (i, row) in self.vectors.chunks_exact_mut(dim.max(1)).enumerate() {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(PluginError::Protocol(format!("descriptor row {i} has norm {norm}")));
            }
            if (norm - 1.0).abs() > tol as f64 {
                fixed += 1;
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        Ok(fixed)
    }

    /// Concatenation of two sets with the same dimension.
    pub fn concat(&self, other: &DescriptorSet) -> DescriptorSet {
        assert_eq!(self.dim, other.dim);
        let mut kps = self.keypoints.clone();
        kps.extend_from_slice(&other.keypoints);
        let mut v = self.vectors.clone();
        v.extend_from_slice(&other.vectors);
        DescriptorSet {
            keypoints: kps,
            dim: self.dim,
            vectors: v,
            dropped: self.dropped + other.dropped,
        }
    }
}

/// A putative correspondence `a -> b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    /// Euclidean distance to the nearest neighbor.
    pub distance: f64,
    /// `d1 / d2`; 0 when `b` has a single descriptor.
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub ratio: f64,
    /// Also require `a` to be the nearest neighbor of `b`.
    pub mutual: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            mutual: false,
        }
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Nearest and second-nearest row of `db` for `q`; ties go to the lower index.
fn two_nearest(q: &[f32], db: &DescriptorSet) -> (usize, f64, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, row) in db.rows().enumerate() {
        let d = l2(q, row);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

/// One-directional nearest neighbor with the distance-ratio test.
///
/// A pair survives when `d1 / d2 < ratio`. When `db` holds a single
/// descriptor there is no second neighbor and the test passes.
pub fn match_ratio(da: &DescriptorSet, db: &DescriptorSet, ratio: f64) -> MatchSet {
    match_with(da, db, &MatchConfig { ratio, mutual: false })
}

pub fn match_with(da: &DescriptorSet, db: &DescriptorSet, cfg: &MatchConfig) -> MatchSet {
    let mut pairs = Vec::new();
    if da.is_empty() || db.is_empty() {
        return MatchSet { pairs };
    }
    assert_eq!(da.dim(), db.dim(), "descriptor dimensions differ");
    for (i, q) in da.rows().enumerate() {
        let (j, d1, d2) = two_nearest(q, db);
        let r = if db.len() == 1 {
            0.0
        } else if d2 > 0.0 {
            d1 / d2
        } else {
            1.0
        };
        if db.len() > 1 && r >= cfg.ratio {
            continue;
        }
        if cfg.mutual {
            let (back, _, _) = two_nearest(db.row(j), da);
            if back != i {
                continue;
            }
        }
        pairs.push(Match {
            index_a: i,
            index_b: j,
            distance: d1,
            ratio: r,
        });
    }
    MatchSet { pairs }
}

/// `round(0.02 * H * W)`, at least 1.
pub fn keypoint_budget(width: usize, height: usize) -> usize {
    ((0.02 * (width * height) as f64).round() as usize).max(1)
}

/// Relative response threshold of the builtin corner detector.
pub const CORNER_QUALITY: f32 = 0.01;
const STRUCTURE_RADIUS: usize = 2;
const STRUCTURE_SIGMA: f32 = 1.0;

/// Minimum eigenvalue of the Gaussian-weighted structure tensor.
pub fn corner_response(image: &Raster) -> Raster {
    let (w, h) = image.shape();
    let mut gx = Raster::new(w, h);
    let mut gy = Raster::new(w, h);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            gx.set(x, y, 0.5 * (image.get(x + 1, y) - image.get(x - 1, y)));
            gy.set(x, y, 0.5 * (image.get(x, y + 1) - image.get(x, y - 1)));
        }
    }
    let r = STRUCTURE_RADIUS as isize;
    let weights: Vec<f32> = (-r..=r)
        .flat_map(|dy| {
            (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f32) / (2.0 * STRUCTURE_SIGMA * STRUCTURE_SIGMA)).exp())
        })
        .collect();
    let margin = STRUCTURE_RADIUS + 1;
    let mut resp = Raster::new(w, h);
    for y in margin..h.saturating_sub(margin) {
        for x in margin..w.saturating_sub(margin) {
            let (mut a, mut b, mut c) = (0.0f32, 0.0f32, 0.0f32);
            let mut k = 0;
            for yy in y - STRUCTURE_RADIUS..=y + STRUCTURE_RADIUS {
                for xx in x - STRUCTURE_RADIUS..=x + STRUCTURE_RADIUS {
                    let (ix, iy) = (gx.get(xx, yy), gy.get(xx, yy));
                    let wt = weights[k];
                    a += wt * ix * ix;
                    b += wt * ix * iy;
                    c += wt * iy * iy;
                    k += 1;
                }
            }
            let half_tr = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            resp.set(x, y, (half_tr - disc).max(0.0));
        }
    }
    resp
}

/// Up to `k` strongest corners after 3x3 maximum suppression, by descending score.
pub fn detect_builtin(image: &Raster, k: usize) -> Vec<Keypoint> {
    let resp = corner_response(image);
    let (w, h) = resp.shape();
    let (_, max) = resp.min_max();
    let floor = (CORNER_QUALITY * max).max(1e-12);
    let data = resp.data();
    let mut kps = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = data[y * w + x];
            if v > floor && is_window_max(data, w, h, x, y, 1) {
                kps.push(Keypoint::new(x as f64, y as f64, v as f64));
            }
        }
    }
    crate::extract::sort_by_score(&mut kps);
    kps.truncate(k);
    kps
}

pub const PATCH_SIZE: usize = 16;
/// Keypoints closer than this to the border are not described.
pub const PATCH_MARGIN: f64 = 8.0;

/// Zero-mean, unit-variance 16x16 patch, flattened and L2-normalized (d = 256).
///
/// Keypoints without a full patch margin, or whose patch is constant, are
/// dropped and counted in [`DescriptorSet::dropped`].
pub fn describe_builtin(image: &Raster, keypoints: &[Keypoint]) -> DescriptorSet {
    let (w, h) = image.shape();
    let dim = PATCH_SIZE * PATCH_SIZE;
    let half = (PATCH_SIZE as f64 - 1.0) / 2.0;
    let mut kept = Vec::new();
    let mut vectors = Vec::new();
    let mut patch = vec![0.0f64; dim];
    for kp in keypoints {
        if kp.x < PATCH_MARGIN
            || kp.y < PATCH_MARGIN
            || kp.x > w as f64 - 1.0 - PATCH_MARGIN
            || kp.y > h as f64 - 1.0 - PATCH_MARGIN
        {
            continue;
        }
        for j in 0..PATCH_SIZE {
            for i in 0..PATCH_SIZE {
                let sx = kp.x + i as f64 - half;
                let sy = kp.y + j as f64 - half;
                patch[j * PATCH_SIZE + i] = image.sample_bilinear(sx, sy).unwrap_or(0.0) as f64;
            }
        }
        let mean = patch.iter().sum::<f64>() / dim as f64;
        let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
        if var < 1e-12 {
            continue;
        }
        let sd = var.sqrt();
        let norm = patch
            .iter()
            .map(|v| ((v - mean) / sd).powi(2))
            .sum::<f64>()
            .sqrt();
        vectors.extend(patch.iter().map(|v| ((v - mean) / sd / norm) as f32));
        kept.push(*kp);
    }
    let dropped = keypoints.len() - kept.len();
    if dropped > 0 {
        log::debug!("describe_builtin dropped {dropped} of {} keypoints", keypoints.len());
    }
    let mut set = DescriptorSet::new(kept, dim, vectors).expect("one row per kept keypoint");
    set.dropped = dropped;
    set
}

/// A detector/descriptor provider used for ground truth and evaluation.
pub trait FeaturePlugin: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, image: &Raster, k: usize) -> Result<Vec<Keypoint>, PluginError>;
    fn describe(&self, image: &Raster, keypoints: &[Keypoint]) -> Result<DescriptorSet, PluginError>;

    fn detect_and_describe(&self, image: &Raster, k: usize) -> Result<DescriptorSet, PluginError> {
        let kps = self.detect(image, k)?;
        self.describe(image, &kps)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinPlugin;

impl FeaturePlugin for BuiltinPlugin {
    fn name(&self) -> &str {
        "builtin"
    }

    fn detect(&self, image: &Raster, k: usize) -> Result<Vec<Keypoint>, PluginError> {
        Ok(detect_builtin(image, k))
    }

    fn describe(&self, image: &Raster, keypoints: &[Keypoint]) -> Result<DescriptorSet, PluginError> {
        Ok(describe_builtin(image, keypoints))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_from_rows(rows: &[Vec<f32>]) -> DescriptorSet {
        let dim = rows[0].len();
        let kps = (0..rows.len()).map(|i| Keypoint::new(i as f64, 0.0, 1.0)).collect();
        DescriptorSet::new(kps, dim, rows.concat()).unwrap()
    }

    fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn budget_rule() {
        assert_eq!(keypoint_budget(400, 300), 2400);
        assert_eq!(keypoint_budget(64, 64), 82);
        assert_eq!(keypoint_budget(3, 3), 1);
    }

    #[test]
    fn constant_image_has_no_corners() {
        assert!(detect_builtin(&Raster::filled(40, 30, 0.5), 100).is_empty());
    }

    #[test]
    fn white_square_has_four_corners() {
        let img = Raster::from_fn(60, 60, |x, y| {
            if (20..40).contains(&x) && (20..40).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        let kps = detect_builtin(&img, 100);
        assert_eq!(kps.len(), 4, "{kps:?}");
        let corners = [[19.5, 19.5], [39.5, 19.5], [19.5, 39.5], [39.5, 39.5]];
        for c in corners {
            let near = kps
                .iter()
                .any(|k| ((k.x - c[0]).powi(2) + (k.y - c[1]).powi(2)).sqrt() <= 2.0);
            assert!(near, "no keypoint near {c:?}: {kps:?}");
        }
    }

    #[test]
    fn detection_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = crate::scene::render_scene(50, 40, &mut rng);
        let pad = |dx: usize, dy: usize| {
            Raster::from_fn(80, 70, |x, y| {
                if x >= dx + 5 && y >= dy + 5 && x < dx + 55 && y < dy + 45 {
                    base.get(x - dx - 5, y - dy - 5)
                } else {
                    0.5
                }
            })
        };
        let a = detect_builtin(&pad(0, 0), 1000);
        let b = detect_builtin(&pad(7, 3), 1000);
        let mut pa: Vec<_> = a.iter().map(|k| (k.x as i64 + 7, k.y as i64 + 3)).collect();
        let mut pb: Vec<_> = b.iter().map(|k| (k.x as i64, k.y as i64)).collect();
        pa.sort();
        pb.sort();
        assert_eq!(pa, pb);
    }

    #[test]
    fn descriptors_are_unit_and_intensity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = crate::scene::render_scene(48, 48, &mut rng);
        let scaled = Raster::from_fn(48, 48, |x, y| 0.5 * img.get(x, y) + 0.2);
        let kps = vec![Keypoint::new(20.0, 21.5, 1.0), Keypoint::new(30.25, 25.0, 1.0)];
        let a = describe_builtin(&img, &kps);
        let b = describe_builtin(&scaled, &kps);
        assert_eq!(a.len(), 2);
        for (ra, rb) in a.rows().zip(b.rows()) {
            let n: f32 = ra.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn describe_drops_border_and_flat_patches() {
        let mut img = Raster::filled(40, 40, 0.3);
        img.set(30, 30, 0.9);
        let kps = vec![
            Keypoint::new(2.0, 20.0, 1.0),
            Keypoint::new(15.0, 15.0, 1.0),
            Keypoint::new(30.0, 30.0, 1.0),
        ];
        let d = describe_builtin(&img, &kps);
        assert_eq!(d.len(), 1);
        assert_eq!(d.dropped, 2);
        assert_eq!(d.keypoints[0], kps[2]);
    }

    #[test]
    fn identical_patches_have_cosine_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tile = crate::scene::render_scene(20, 20, &mut rng);
        let img = Raster::from_fn(40, 20, |x, y| tile.get(x % 20, y));
        let d = describe_builtin(&img, &[Keypoint::new(10.0, 10.0, 1.0), Keypoint::new(30.0, 10.0, 1.0)]);
        let cos: f32 = d.row(0).iter().zip(d.row(1)).map(|(a, b)| a * b).sum();
        assert!((cos - 1.0).abs() < 1e-5);
    }

    #[test]
    fn noise_patches_are_dissimilar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 500;
        let mut low = 0;
        for _ in 0..trials {
            let img = Raster::from_fn(17, 34, |_, _| rng.random::<f32>());
            let d = describe_builtin(&img, &[Keypoint::new(8.0, 8.0, 1.0), Keypoint::new(8.0, 25.0, 1.0)]);
            let cos: f32 = d.row(0).iter().zip(d.row(1)).map(|(a, b)| a * b).sum();
            if cos < 0.5 {
                low += 1;
            }
        }
        assert!(low as f64 >= 0.99 * trials as f64);
    }

    #[test]
    fn one_hot_rows_match_identity() {
        let rows: Vec<Vec<f32>> = (0..6)
            .map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = set_from_rows(&rows);
        let m = match_ratio(&s, &s, 0.8);
        assert_eq!(m.len(), 6);
        for p in &m.pairs {
            assert_eq!(p.index_a, p.index_b);
            assert_eq!(p.distance, 0.0);
            assert_eq!(p.ratio, 0.0);
        }
    }

    #[test]
    fn equidistant_neighbors_fail_ratio() {
        let da = set_from_rows(&[vec![0.0, 0.0, 1.0]]);
        let db = set_from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert!(match_ratio(&da, &db, 0.8).is_empty());
    }

    #[test]
    fn single_candidate_passes() {
        let da = set_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let db = set_from_rows(&[vec![0.6, 0.8]]);
        let m = match_ratio(&da, &db, 0.8);
        assert_eq!(m.len(), 2);
        assert!(m.pairs.iter().all(|p| p.index_b == 0));
    }

    #[test]
    fn permutation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f32>> = (0..10).map(|_| random_unit(&mut rng, 32)).collect();
        let perm = [3usize, 7, 0, 9, 1, 8, 2, 6, 4, 5];
        let shuffled: Vec<Vec<f32>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let m = match_ratio(&set_from_rows(&rows), &set_from_rows(&shuffled), 0.8);
        assert_eq!(m.len(), 10);
        for p in &m.pairs {
            assert_eq!(perm[p.index_b], p.index_a);
        }
    }

    #[test]
    fn mutual_flag_prunes_one_sided_pairs() {
        let da = set_from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1]]);
        let db = set_from_rows(&[vec![0.95, 0.05], vec![-1.0, 0.0]]);
        let plain = match_with(&da, &db, &MatchConfig { ratio: 1.0, mutual: false });
        let mutual = match_with(&da, &db, &MatchConfig { ratio: 1.0, mutual: true });
        assert_eq!(plain.len(), 2);
        assert_eq!(mutual.len(), 1);
    }
}
