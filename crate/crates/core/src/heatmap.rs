//! Matching heatmaps: training targets built from descriptor matches that
//! survive the ratio test and land within tolerance under the known warps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{keypoint_budget, match_ratio, FeaturePlugin, Keypoint, MatchSet, PluginError};
use crate::raster::{Mask, Raster, RasterError};
use crate::synth::{pair_dir, read_triplet, Manifest, SynthError, TrainingTriplet};
use crate::warp::{CompositeWarp, PointWarp};

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("no correct matches in triplet")]
    EmptyHeatmap,
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub const GAUSSIAN_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Two-level averaging of the anchor and native maps.
    #[default]
    Graded,
    /// Every peak set to 1.
    Equal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub ratio: f64,
    /// Correct-match tolerance in pixels.
    pub tolerance: f64,
    pub weighting: Weighting,
    /// Keypoint budget override; `round(0.02 H W)` when absent.
    pub budget: Option<usize>,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            tolerance: 3.0,
            weighting: Weighting::Graded,
            budget: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub weight: f64,
}

/// Sparse weighted peaks plus their Gaussian rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingHeatmap {
    pub peaks: Vec<Peak>,
    pub values: Raster,
}

impl MatchingHeatmap {
    pub fn from_peaks(peaks: Vec<Peak>, width: usize, height: usize) -> Self {
        let values = render_peaks(&peaks, width, height);
        Self { peaks, values }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn save(&self, png: &Path) -> Result<(), HeatmapError> {
        self.values.save_png16(png)?;
        let sidecar = png.with_extension("json");
        let file = HeatmapFile {
            width: self.width(),
            height: self.height(),
            sigma: GAUSSIAN_SIGMA,
            peaks: self.peaks.clone(),
        };
        std::fs::write(&sidecar, serde_json::to_string_pretty(&file).expect("heatmap serializes")).map_err(|source| {
            HeatmapError::Io {
                path: sidecar.clone(),
                source,
            }
        })
    }

    /// Loads from the JSON sidecar next to `png` and re-renders the raster.
    pub fn load(png: &Path) -> Result<Self, HeatmapError> {
        let sidecar = png.with_extension("json");
        let file = load_sidecar(&sidecar)?;
        Ok(Self::from_peaks(file.peaks, file.width, file.height))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapFile {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub peaks: Vec<Peak>,
}

fn load_sidecar(path: &Path) -> Result<HeatmapFile, HeatmapError> {
    let text = std::fs::read_to_string(path).map_err(|source| HeatmapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| HeatmapError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Rendering kernel value at integer offset `(dx, dy)`, center normalized to 1.
pub fn kernel_value(dx: i64, dy: i64) -> f64 {
    (-((dx * dx + dy * dy) as f64) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp()
}

/// Max-composited 3x3 Gaussian bumps; the center of each bump equals its weight.
pub fn render_peaks(peaks: &[Peak], width: usize, height: usize) -> Raster {
    let mut out = Raster::new(width, height);
    for p in peaks {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let x = p.x as i64 + dx;
                let y = p.y as i64 + dy;
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                let v = (p.weight * kernel_value(dx, dy)) as f32;
                let (x, y) = (x as usize, y as usize);
                if v > out.get(x, y) {
                    out.set(x, y, v);
                }
            }
        }
    }
    out
}

/// Pixel locations of correct matches on both images (the sets `C_i`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectMatchSet {
    pub a: Vec<(usize, usize)>,
    pub b: Vec<(usize, usize)>,
    /// Number of correct pairs (before deduplicating pixels).
    pub pairs: usize,
}

fn pixel_of(k: &Keypoint) -> (usize, usize) {
    let (x, y) = k.pixel();
    (x.max(0) as usize, y.max(0) as usize)
}

/// A pair `(i, j)` is correct when `|g(kps_a[i]) - kps_b[j]| <= tol`.
pub fn correct_matches(
    matches: &MatchSet,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    g: &CompositeWarp,
    tol: f64,
) -> CorrectMatchSet {
    let mut a = std::collections::BTreeSet::new();
    let mut b = std::collections::BTreeSet::new();
    let mut pairs = 0;
    for m in &matches.pairs {
        let ka = &kps_a[m.index_a];
        let kb = &kps_b[m.index_b];
        let Ok(p) = g.apply_point(ka.point()) else { continue };
        let d = ((p[0] - kb.x).powi(2) + (p[1] - kb.y).powi(2)).sqrt();
        if d <= tol {
            pairs += 1;
            a.insert(pixel_of(ka));
            b.insert(pixel_of(kb));
        }
    }
    // Row-major order.
    let order = |s: std::collections::BTreeSet<(usize, usize)>| {
        let mut v: Vec<_> = s.into_iter().collect();
        v.sort_by_key(|&(x, y)| (y, x));
        v
    };
    CorrectMatchSet {
        a: order(a),
        b: order(b),
        pairs,
    }
}

/// Sparse map keyed by `(y, x)` so iteration is row-major.
type PeakMap = BTreeMap<(usize, usize), f64>;

fn binary(locs: &[(usize, usize)]) -> PeakMap {
    locs.iter().map(|&(x, y)| ((y, x), 1.0)).collect()
}

fn to_peaks(m: &PeakMap) -> Vec<Peak> {
    m.iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(&(y, x), &weight)| Peak { x, y, weight })
        .collect()
}

/// Moves peaks through `g`, rounding to the nearest pixel. Peaks leaving the
/// target or landing on invalid pixels are dropped; collisions keep the max.
pub fn transport_peaks(m: &[Peak], g: &CompositeWarp, valid: &Mask) -> Vec<Peak> {
    let mut out = PeakMap::new();
    for p in m {
        let Ok(q) = g.apply_point([p.x as f64, p.y as f64]) else { continue };
        if !q[0].is_finite() || !q[1].is_finite() || !valid.contains_point(q[0], q[1]) {
            continue;
        }
        let key = (q[1].round() as usize, q[0].round() as usize);
        let e = out.entry(key).or_insert(0.0);
        *e = e.max(p.weight);
    }
    to_peaks(&out)
}

/// All intermediate products of building one triplet's heatmaps.
#[derive(Clone, Debug)]
pub struct TripletHeatmaps {
    pub m_a: MatchingHeatmap,
    pub m_b: MatchingHeatmap,
    pub m_bp: MatchingHeatmap,
    pub correct_ab: CorrectMatchSet,
    pub correct_abp: CorrectMatchSet,
}

/// Combines correct-match sets into the anchor and target heatmaps.
pub fn compose_heatmaps(
    triplet: &TrainingTriplet,
    correct_ab: CorrectMatchSet,
    correct_abp: CorrectMatchSet,
    weighting: Weighting,
) -> Result<TripletHeatmaps, HeatmapError> {
    let (w, h) = triplet.anchor.shape();
    let ma1 = binary(&correct_ab.a);
    let ma2 = binary(&correct_abp.a);
    let mut ma = PeakMap::new();
    for (k, v) in ma1.iter().chain(ma2.iter()) {
        *ma.entry(*k).or_insert(0.0) += v / 2.0;
    }
    let ma_peaks = to_peaks(&ma);

    let target = |g: &CompositeWarp, valid: &Mask, native: &[(usize, usize)]| {
        let mut m = PeakMap::new();
        for p in transport_peaks(&ma_peaks, g, valid) {
            *m.entry((p.y, p.x)).or_insert(0.0) += p.weight / 2.0;
        }
        for (k, v) in binary(native) {
            *m.entry(k).or_insert(0.0) += v / 2.0;
        }
        for v in m.values_mut() {
            *v = match weighting {
                Weighting::Graded => v.min(1.0),
                Weighting::Equal => 1.0,
            };
        }
        to_peaks(&m)
    };
    let mb = target(&triplet.warp_1, &triplet.validity_1, &correct_ab.b);
    let mbp = target(&triplet.warp_2, &triplet.validity_2, &correct_abp.b);
    if mb.is_empty() || mbp.is_empty() {
        return Err(HeatmapError::EmptyHeatmap);
    }
    let ma_peaks = match weighting {
        Weighting::Graded => ma_peaks,
        Weighting::Equal => ma_peaks.into_iter().map(|p| Peak { weight: 1.0, ..p }).collect(),
    };
    Ok(TripletHeatmaps {
        m_a: MatchingHeatmap::from_peaks(ma_peaks, w, h),
        m_b: MatchingHeatmap::from_peaks(mb, w, h),
        m_bp: MatchingHeatmap::from_peaks(mbp, w, h),
        correct_ab,
        correct_abp,
    })
}

/// Detect, describe and match over the triplet, then compose the heatmaps.
pub fn build_triplet_heatmaps(
    triplet: &TrainingTriplet,
    plugin: &dyn FeaturePlugin,
    cfg: &HeatmapConfig,
) -> Result<TripletHeatmaps, HeatmapError> {
    let (w, h) = triplet.anchor.shape();
    let k = cfg.budget.unwrap_or_else(|| keypoint_budget(w, h));
    let da = plugin.detect_and_describe(&triplet.anchor, k)?;
    let db = plugin.detect_and_describe(&triplet.warped_1, k)?;
    let dbp = plugin.detect_and_describe(&triplet.warped_2, k)?;
    let m_ab = match_ratio(&da, &db, cfg.ratio);
    let m_abp = match_ratio(&da, &dbp, cfg.ratio);
    let c_ab = correct_matches(&m_ab, &da.keypoints, &db.keypoints, &triplet.warp_1, cfg.tolerance);
    let c_abp = correct_matches(&m_abp, &da.keypoints, &dbp.keypoints, &triplet.warp_2, cfg.tolerance);
    compose_heatmaps(triplet, c_ab, c_abp, cfg.weighting)
}

pub const MH_A: &str = "mh_A.png";
pub const MH_B: &str = "mh_B.png";
pub const MH_BP: &str = "mh_Bp.png";

pub fn save_triplet_heatmaps(dir: &Path, hm: &TripletHeatmaps) -> Result<(), HeatmapError> {
    hm.m_a.save(&dir.join(MH_A))?;
    hm.m_b.save(&dir.join(MH_B))?;
    hm.m_bp.save(&dir.join(MH_BP))?;
    Ok(())
}

/// `(M_b, M_b')` of a pair directory.
pub fn load_targets(dir: &Path) -> Result<(MatchingHeatmap, MatchingHeatmap), HeatmapError> {
    Ok((MatchingHeatmap::load(&dir.join(MH_B))?, MatchingHeatmap::load(&dir.join(MH_BP))?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub config_hash: String,
    pub built: Vec<String>,
    /// Triplets without any correct match.
    pub skipped: Vec<String>,
    pub peaks_b: usize,
    pub peaks_bp: usize,
}

pub const SUMMARY_FILE: &str = "heatmaps.json";

/// Builds heatmaps for every triplet of a dataset, in parallel.
pub fn build_dataset(
    dataset_dir: &Path,
    plugin: &dyn FeaturePlugin,
    cfg: &HeatmapConfig,
) -> Result<BuildSummary, HeatmapError> {
    let manifest = Manifest::load(dataset_dir)?;
    let results: Vec<(String, Option<(usize, usize)>)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let dir = pair_dir(dataset_dir, &e.id);
            let t = read_triplet(&dir)?;
            match build_triplet_heatmaps(&t, plugin, cfg) {
                Ok(hm) => {
                    save_triplet_heatmaps(&dir, &hm)?;
                    Ok((e.id.clone(), Some((hm.m_b.peaks.len(), hm.m_bp.peaks.len()))))
                }
                Err(HeatmapError::EmptyHeatmap) => {
                    log::warn!("triplet {}: no correct matches, skipped", e.id);
                    for f in [MH_A, MH_B, MH_BP] {
                        let _ = std::fs::remove_file(dir.join(f));
                        let _ = std::fs::remove_file(dir.join(f).with_extension("json"));
                    }
                    Ok((e.id.clone(), None))
                }
                Err(err) => Err(err),
            }
        })
        .collect::<Result<_, HeatmapError>>()?;
    let mut summary = BuildSummary {
        config_hash: crate::util::config_hash(cfg),
        ..Default::default()
    };
    for (id, r) in results {
        match r {
            Some((nb, nbp)) => {
                summary.built.push(id);
                summary.peaks_b += nb;
                summary.peaks_bp += nbp;
            }
            None => summary.skipped.push(id),
        }
    }
    let path = dataset_dir.join(SUMMARY_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|source| HeatmapError::Io { path, source })?;
    Ok(summary)
}
