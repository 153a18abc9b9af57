//! Thin-plate-spline and homography warps: fitting, point mapping, random
//! sampling and inverse-mapped image resampling.
//!
//! Every warp maps *source* coordinates (the anchor image) to *target*
//! coordinates (the warped image). A [`CompositeWarp`] applies its homography
//! first and its TPS second.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Mask, Raster};

/// A 2D point in pixel coordinates, `[x, y]`.
pub type Point = [f64; 2];

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("point ({x}, {y}) maps to the line at infinity")]
    ProjectiveDivideByZero { x: f64, y: f64 },
    #[error("warp inversion failed for {failed} of {total} pixels")]
    NonInvertibleWarp { failed: usize, total: usize },
    #[error("invalid warp: {0}")]
    Invalid(String),
    #[error("warp file {path}: {message}")]
    File { path: String, message: String },
}

/// Thin-plate radial basis `r^2 log r`, continuously extended with 0 at `r = 0`.
#[inline]
pub fn tps_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Anything that maps a single point.
pub trait PointWarp {
    fn apply_point(&self, p: Point) -> Result<Point, WarpError>;
}

/// Maps every point of `points` through `warp`.
pub fn apply_warp<W: PointWarp + ?Sized>(warp: &W, points: &[Point]) -> Result<Vec<Point>, WarpError> {
    points.iter().map(|&p| warp.apply_point(p)).collect()
}

/// `f(x) = A [x; 1] + sum_i rho(|x - c_i|) w_i`
#[derive(Clone, Debug, PartialEq)]
pub struct TpsWarp {
    affine: [[f64; 3]; 2],
    control_points: Vec<Point>,
    weights: Vec<[f64; 2]>,
}

impl TpsWarp {
    pub fn new(
        affine: [[f64; 3]; 2],
        control_points: Vec<Point>,
        weights: Vec<[f64; 2]>,
    ) -> Result<Self, WarpError> {
        if control_points.len() != weights.len() {
            return Err(WarpError::Invalid(format!(
                "{} control points but {} weight rows",
                control_points.len(),
                weights.len()
            )));
        }
        if control_points.len() < 3 {
            return Err(WarpError::Invalid("a TPS needs at least 3 control points".into()));
        }
        let finite = affine.iter().flatten().all(|v| v.is_finite())
            && control_points.iter().flatten().all(|v| v.is_finite())
            && weights.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(WarpError::Invalid("non-finite TPS parameter".into()));
        }
        Ok(Self {
            affine,
            control_points,
            weights,
        })
    }

    /// Identity warp anchored on the unit square corners.
    pub fn identity() -> Self {
        Self {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            control_points: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            weights: vec![[0.0; 2]; 4],
        }
    }

    pub fn affine(&self) -> &[[f64; 3]; 2] {
        &self.affine
    }

    pub fn control_points(&self) -> &[Point] {
        &self.control_points
    }

    pub fn weights(&self) -> &[[f64; 2]] {
        &self.weights
    }

    /// Frobenius norm of the non-affine coefficients.
    pub fn weight_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w[0] * w[0] + w[1] * w[1])
            .sum::<f64>()
            .sqrt()
    }

    #[inline]
    pub fn eval(&self, p: Point) -> Point {
        let [x, y] = p;
        let a = &self.affine;
        let mut out = [
            a[0][0] * x + a[0][1] * y + a[0][2],
            a[1][0] * x + a[1][1] * y + a[1][2],
        ];
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            let r = ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt();
            let k = tps_kernel(r);
            out[0] += k * w[0];
            out[1] += k * w[1];
        }
        out
    }
}

impl PointWarp for TpsWarp {
    fn apply_point(&self, p: Point) -> Result<Point, WarpError> {
        Ok(self.eval(p))
    }
}

/// Systems whose condition number exceeds this are treated as degenerate.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;

/// Fits the thin-plate spline interpolating `src[i] -> dst[i]`.
///
/// With `regularization = 0` the warp interpolates the control points
/// exactly; a positive value is added to the diagonal of the kernel block,
/// producing a smoothing spline. The system is solved in normalized
/// coordinates (control points centered, unit RMS radius) and converted back
/// to pixel units; the TPS interpolant is invariant under that similarity, so
/// the conversion is exact up to rounding. `regularization` is therefore
/// expressed in normalized units.
pub fn fit_tps(src: &[Point], dst: &[Point], regularization: f64) -> Result<TpsWarp, WarpError> {
    let n = src.len();
    if n != dst.len() {
        return Err(WarpError::Invalid(format!(
            "{} source points but {} target points",
            n,
            dst.len()
        )));
    }
    if n < 3 {
        return Err(WarpError::Invalid("a TPS needs at least 3 control points".into()));
    }
    if !(regularization >= 0.0) || !regularization.is_finite() {
        return Err(WarpError::Invalid("regularization must be finite and >= 0".into()));
    }

    let mean = src.iter().fold([0.0; 2], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    let mean = [mean[0] / n as f64, mean[1] / n as f64];
    let scale = (src
        .iter()
        .map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    if !(scale > 0.0) {
        return Err(WarpError::SingularSystem("all control points coincide".into()));
    }
    let u: Vec<Point> = src
        .iter()
        .map(|p| [(p[0] - mean[0]) / scale, (p[1] - mean[1]) / scale])
        .collect();

    let size = n + 3;
    let mut l = DMatrix::<f64>::zeros(size, size);
    for i in 0..n {
        for j in 0..n {
            let r = ((u[i][0] - u[j][0]).powi(2) + (u[i][1] - u[j][1]).powi(2)).sqrt();
            l[(i, j)] = tps_kernel(r);
        }
        l[(i, i)] += regularization;
        let row = [1.0, u[i][0], u[i][1]];
        for (k, &v) in row.iter().enumerate() {
            l[(i, n + k)] = v;
            l[(n + k, i)] = v;
        }
    }

    let sv = l.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION_NUMBER {
        return Err(WarpError::SingularSystem(format!(
            "condition number {:.3e} (collinear or duplicated control points)",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }

    let mut rhs = DMatrix::<f64>::zeros(size, 2);
    for (i, d) in dst.iter().enumerate() {
        rhs[(i, 0)] = d[0];
        rhs[(i, 1)] = d[1];
    }
    let sol = l
        .lu()
        .solve(&rhs)
        .ok_or_else(|| WarpError::SingularSystem("LU factorization failed".into()))?;

    // Back to pixel units: rho(r / s) = rho(r) / s^2 - ln(s) r^2 / s^2, and the
    // r^2 part collapses to a constant thanks to the side conditions.
    let s2 = scale * scale;
    let ln_s = scale.ln();
    let mut weights = Vec::with_capacity(n);
    let mut shift = [0.0; 2];
    for i in 0..n {
        let w = [sol[(i, 0)], sol[(i, 1)]];
        let norm2 = u[i][0] * u[i][0] + u[i][1] * u[i][1];
        shift[0] += norm2 * w[0];
        shift[1] += norm2 * w[1];
        weights.push([w[0] / s2, w[1] / s2]);
    }
    let mut affine = [[0.0; 3]; 2];
    for k in 0..2 {
        let a0 = sol[(n, k)];
        let ax = sol[(n + 1, k)];
        let ay = sol[(n + 2, k)];
        affine[k] = [
            ax / scale,
            ay / scale,
            a0 - (ax * mean[0] + ay * mean[1]) / scale - ln_s * shift[k],
        ];
    }
    TpsWarp::new(affine, src.to_vec(), weights)
}

/// Projective transform, normalized so the bottom-right entry is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    matrix: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(matrix: [[f64; 3]; 3]) -> Result<Self, WarpError> {
        if !matrix.iter().flatten().all(|v| v.is_finite()) {
            return Err(WarpError::Invalid("non-finite homography entry".into()));
        }
        let m22 = matrix[2][2];
        if m22.abs() < 1e-12 {
            return Err(WarpError::Invalid("homography bottom-right entry is zero".into()));
        }
        let mut m = matrix;
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v /= m22;
            }
        }
        let det = to_na(&m).determinant();
        if det.abs() < 1e-12 {
            return Err(WarpError::Invalid("singular homography".into()));
        }
        Ok(Self { matrix: m })
    }

    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    /// Direct solve of the 8-unknown system for four correspondences.
    pub fn from_four_points(src: &[Point; 4], dst: &[Point; 4]) -> Result<Self, WarpError> {
        let mut a = DMatrix::<f64>::zeros(8, 8);
        let mut b = DVector::<f64>::zeros(8);
        for i in 0..4 {
            let [x, y] = src[i];
            let [u, v] = dst[i];
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| WarpError::SingularSystem("degenerate 4-point configuration".into()))?;
        Self::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    }

    pub fn inverse(&self) -> Self {
        let inv = to_na(&self.matrix)
            .try_inverse()
            .expect("constructor guarantees a nonsingular matrix");
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = inv[(r, c)] / inv[(2, 2)];
            }
        }
        Self { matrix: m }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

fn to_na(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    )
}

impl PointWarp for Homography {
    fn apply_point(&self, p: Point) -> Result<Point, WarpError> {
        let m = &self.matrix;
        let [x, y] = p;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-12 {
            return Err(WarpError::ProjectiveDivideByZero { x, y });
        }
        Ok([
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ])
    }
}

/// Inverse-mapping parameters.
pub const INVERSE_MAX_ITERS: usize = 20;
pub const INVERSE_TOLERANCE_PX: f64 = 0.05;
/// `warp_image` fails when more than this fraction of pixels cannot be inverted.
pub const MAX_INVERSION_FAILURE_FRACTION: f64 = 0.01;

/// Homography followed by a thin-plate spline.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeWarp {
    pub homography: Homography,
    pub tps: TpsWarp,
}

impl CompositeWarp {
    pub fn new(homography: Homography, tps: TpsWarp) -> Self {
        Self { homography, tps }
    }

    pub fn identity() -> Self {
        Self::new(Homography::identity(), TpsWarp::identity())
    }

    /// Finds `x` with `f(x) = y`.
    ///
    /// The TPS part is inverted by Newton iteration (finite-difference
    /// Jacobian, step halving when the residual grows) started at `z = y`,
    /// then the homography is inverted in closed form. Returns `None` when
    /// the iteration does not reach the tolerance.
    pub fn invert_point(&self, y: Point) -> Option<Point> {
        self.invert_with(&self.homography.inverse(), y)
    }

    fn invert_with(&self, h_inv: &Homography, y: Point) -> Option<Point> {
        let resid = |z: Point| {
            let f = self.tps.eval(z);
            [f[0] - y[0], f[1] - y[1]]
        };
        let norm = |r: Point| (r[0] * r[0] + r[1] * r[1]).sqrt();
        let mut z = y;
        let mut r = resid(z);
        for _ in 0..INVERSE_MAX_ITERS {
            if norm(r) <= INVERSE_TOLERANCE_PX {
                return h_inv.apply_point(z).ok();
            }
            const H: f64 = 0.25;
            let fx0 = self.tps.eval([z[0] - H, z[1]]);
            let fx1 = self.tps.eval([z[0] + H, z[1]]);
            let fy0 = self.tps.eval([z[0], z[1] - H]);
            let fy1 = self.tps.eval([z[0], z[1] + H]);
            let (a, c) = ((fx1[0] - fx0[0]) / (2.0 * H), (fx1[1] - fx0[1]) / (2.0 * H));
            let (b, d) = ((fy1[0] - fy0[0]) / (2.0 * H), (fy1[1] - fy0[1]) / (2.0 * H));
            let det = a * d - b * c;
            let step = if det.abs() > 1e-9 {
                [(d * r[0] - b * r[1]) / det, (a * r[1] - c * r[0]) / det]
            } else {
                r
            };
            let mut t = 1.0;
            loop {
                let cand = [z[0] - t * step[0], z[1] - t * step[1]];
                if !cand[0].is_finite() || !cand[1].is_finite() {
                    return None;
                }
                let rc = resid(cand);
                if norm(rc) < norm(r) || t < 1.0 / 64.0 {
                    z = cand;
                    r = rc;
                    break;
                }
                t *= 0.5;
            }
        }
        if norm(r) > INVERSE_TOLERANCE_PX {
            return None;
        }
        h_inv.apply_point(z).ok()
    }

    pub fn to_file(&self) -> WarpFile {
        let m = self.homography.matrix();
        let a = self.tps.affine();
        WarpFile {
            homography: [
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ],
            tps: TpsFile {
                affine: [a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2]],
                control_points: self.tps.control_points().to_vec(),
                weights: self.tps.weights().to_vec(),
            },
        }
    }

    pub fn from_file(f: &WarpFile) -> Result<Self, WarpError> {
        let h = &f.homography;
        let homography = Homography::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], h[8]]])?;
        let a = &f.tps.affine;
        let tps = TpsWarp::new(
            [[a[0], a[1], a[2]], [a[3], a[4], a[5]]],
            f.tps.control_points.clone(),
            f.tps.weights.clone(),
        )?;
        Ok(Self { homography, tps })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("warp serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, WarpError> {
        let f: WarpFile = serde_json::from_str(s).map_err(|e| WarpError::File {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        Self::from_file(&f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WarpError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| WarpError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WarpError> {
        let path = path.as_ref();
        let err = |message: String| WarpError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let f: WarpFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::from_file(&f)
    }
}

impl PointWarp for CompositeWarp {
    fn apply_point(&self, p: Point) -> Result<Point, WarpError> {
        let z = self.homography.apply_point(p)?;
        Ok(self.tps.eval(z))
    }
}

/// On-disk warp document.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WarpFile {
    /// Row-major 3x3.
    pub homography: [f64; 9],
    pub tps: TpsFile,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TpsFile {
    /// Row-major 2x3.
    pub affine: [f64; 6],
    pub control_points: Vec<Point>,
    pub weights: Vec<[f64; 2]>,
}

/// Resamples `image` into the target frame of `warp`.
///
/// Each output pixel is pulled back through the numerically inverted warp
/// and bilinearly sampled. Pixels whose source falls outside the image (or
/// whose inversion did not converge) are 0 and cleared in the returned mask.
pub fn warp_image(
    image: &Raster,
    warp: &CompositeWarp,
    out_shape: (usize, usize),
) -> Result<(Raster, Mask), WarpError> {
    if image.is_empty() {
        return Err(WarpError::Invalid("cannot warp an empty image".into()));
    }
    let (ow, oh) = out_shape;
    let h_inv = warp.homography.inverse();
    let rows: Vec<(Vec<f32>, Vec<bool>, usize)> = (0..oh)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0f32; ow];
            let mut valid = vec![false; ow];
            let mut failed = 0;
            for x in 0..ow {
                match warp.invert_with(&h_inv, [x as f64, y as f64]) {
                    Some(src) => {
                        if let Some(v) = image.sample_bilinear(src[0], src[1]) {
                            vals[x] = v;
                            valid[x] = true;
                        }
                    }
                    None => failed += 1,
                }
            }
            (vals, valid, failed)
        })
        .collect();
    let total = ow * oh;
    let failed: usize = rows.iter().map(|r| r.2).sum();
    if failed as f64 > MAX_INVERSION_FAILURE_FRACTION * total as f64 {
        return Err(WarpError::NonInvertibleWarp { failed, total });
    }
    let mut data = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    for (v, m, _) in rows {
        data.extend(v);
        mask.extend(m);
    }
    Ok((
        Raster::from_vec(ow, oh, data).expect("rows cover the output"),
        Mask::from_vec(ow, oh, mask).expect("rows cover the output"),
    ))
}

/// Random deformation magnitudes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    /// Maximum corner displacement as a fraction of the image diagonal.
    pub max_corner_shift: f64,
    /// TPS control lattice is `grid x grid`.
    pub grid: usize,
    /// Lattice displacement std as a fraction of `min(width, height)`.
    pub tps_sigma: f64,
    /// Ablation switch: skip the TPS stage entirely.
    pub only_homography: bool,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            max_corner_shift: 0.1,
            grid: 8,
            tps_sigma: 0.03,
            only_homography: false,
        }
    }
}

impl WarpConfig {
    pub fn identity() -> Self {
        Self {
            max_corner_shift: 0.0,
            grid: 8,
            tps_sigma: 0.0,
            only_homography: false,
        }
    }
}

fn image_corners(width: usize, height: usize) -> [Point; 4] {
    let (w, h) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

/// Perturbs the four image corners and solves the 4-point homography.
///
/// Each corner moves by at most `max_corner_shift * diagonal`, always away
/// from the image center, so the warped frame stays inside the source view.
pub fn sample_random_homography<R: Rng + ?Sized>(
    cfg: &WarpConfig,
    shape: (usize, usize),
    rng: &mut R,
) -> Homography {
    let (w, h) = shape;
    let diag = ((w * w + h * h) as f64).sqrt();
    let bound = cfg.max_corner_shift * diag;
    if !(bound > 0.0) {
        return Homography::identity();
    }
    let src = image_corners(w, h);
    let outward = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    let mut dst = src;
    for (d, o) in dst.iter_mut().zip(outward) {
        let r = rng.random::<f64>() * bound;
        let theta = rng.random::<f64>() * std::f64::consts::FRAC_PI_2;
        d[0] += o[0] * r * theta.cos();
        d[1] += o[1] * r * theta.sin();
    }
    Homography::from_four_points(&src, &dst).unwrap_or_else(|_| Homography::identity())
}

/// Control lattice used by [`sample_random_tps`].
pub fn control_lattice(grid: usize, shape: (usize, usize)) -> Vec<Point> {
    let grid = grid.max(2);
    let (w, h) = ((shape.0.max(1) - 1) as f64, (shape.1.max(1) - 1) as f64);
    let mut pts = Vec::with_capacity(grid * grid);
    for j in 0..grid {
        for i in 0..grid {
            pts.push([
                w * i as f64 / (grid - 1) as f64,
                h * j as f64 / (grid - 1) as f64,
            ]);
        }
    }
    pts
}

/// Displaces a regular lattice with isotropic Gaussian noise and fits the TPS.
pub fn sample_random_tps<R: Rng + ?Sized>(
    cfg: &WarpConfig,
    shape: (usize, usize),
    rng: &mut R,
) -> TpsWarp {
    let src = control_lattice(cfg.grid, shape);
    let sigma = cfg.tps_sigma * shape.0.min(shape.1) as f64;
    if cfg.only_homography || !(sigma > 0.0) {
        let n = src.len();
        return TpsWarp::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], src, vec![[0.0; 2]; n])
            .expect("lattice has >= 4 points");
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let dst: Vec<Point> = src
        .iter()
        .map(|p| [p[0] + noise.sample(rng), p[1] + noise.sample(rng)])
        .collect();
    fit_tps(&src, &dst, 0.0).expect("a regular lattice is never degenerate")
}

/// Samples `g = tps . homography`.
pub fn sample_composite<R: Rng + ?Sized>(
    cfg: &WarpConfig,
    shape: (usize, usize),
    rng: &mut R,
) -> CompositeWarp {
    let homography = sample_random_homography(cfg, shape, rng);
    let tps = sample_random_tps(cfg, shape, rng);
    CompositeWarp::new(homography, tps)
}
