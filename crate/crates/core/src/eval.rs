//! Repeatability, matching score and mean matching accuracy over image pairs
//! with known ground-truth geometry, plus the benchmark runner.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{extract, ExtractConfig};
use crate::features::{match_with, FeaturePlugin, Keypoint, MatchConfig, MatchSet, PluginError};
use crate::model::{ModelError, UNet};
use crate::raster::{Mask, Raster, RasterError};
use crate::warp::{CompositeWarp, Point, PointWarp, WarpError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no keypoint of one image falls in the shared view")]
    NoSharedView,
    #[error("{path}: {message}")]
    DatasetFormat { path: PathBuf, message: String },
    #[error("pair {pair}: recount disagrees ({message})")]
    Verification { pair: String, message: String },
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pixel-level correspondences `a -> b`, keyed by rounded coordinates.
#[derive(Clone, Debug, Default)]
pub struct DenseCorrespondence {
    forward: HashMap<(i64, i64), Point>,
    backward: HashMap<(i64, i64), Point>,
}

fn key(p: Point) -> (i64, i64) {
    (p[0].round() as i64, p[1].round() as i64)
}

impl DenseCorrespondence {
    pub fn from_rows(rows: &[[f64; 4]]) -> Self {
        let mut out = Self::default();
        for r in rows {
            out.forward.insert(key([r[0], r[1]]), [r[2], r[3]]);
            out.backward.insert(key([r[2], r[3]]), [r[0], r[1]]);
        }
        out
    }

    /// Reads `xa,ya,xb,yb` rows; a non-numeric first line is a header.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            match vals {
                Ok(v) if v.len() == 4 => rows.push([v[0], v[1], v[2], v[3]]),
                Err(_) if n == 0 => continue,
                _ => {
                    return Err(EvalError::DatasetFormat {
                        path: path.to_path_buf(),
                        message: format!("line {}: expected xa,ya,xb,yb", n + 1),
                    })
                }
            }
        }
        Ok(Self::from_rows(&rows))
    }

    fn lookup(map: &HashMap<(i64, i64), Point>, p: Point) -> Option<Point> {
        let k = key(p);
        let q = map.get(&k)?;
        Some([q[0] + p[0] - k.0 as f64, q[1] + p[1] - k.1 as f64])
    }
}

#[derive(Clone, Debug)]
pub enum GroundTruth {
    Warp(CompositeWarp),
    Dense(DenseCorrespondence),
}

impl GroundTruth {
    pub fn forward(&self, p: Point) -> Option<Point> {
        match self {
            GroundTruth::Warp(g) => g.apply_point(p).ok(),
            GroundTruth::Dense(d) => DenseCorrespondence::lookup(&d.forward, p),
        }
    }

    pub fn backward(&self, p: Point) -> Option<Point> {
        match self {
            GroundTruth::Warp(g) => g.invert_point(p),
            GroundTruth::Dense(d) => DenseCorrespondence::lookup(&d.backward, p),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub image_a: Raster,
    pub image_b: Raster,
    pub gt: GroundTruth,
    pub valid_a: Option<Mask>,
    pub valid_b: Option<Mask>,
}

impl EvalPair {
    /// Reads `a.png`, `b.png`, `warp.json` or `corr.csv`, and optional
    /// `valid_a.png` / `valid_b.png`.
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let fmt = |p: PathBuf, m: String| EvalError::DatasetFormat { path: p, message: m };
        let need = |name: &str| -> Result<PathBuf, EvalError> {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(fmt(p, "missing".into()))
            }
        };
        let image_a = Raster::load(need("a.png")?).map_err(|e| fmt(dir.join("a.png"), e.to_string()))?;
        let image_b = Raster::load(need("b.png")?).map_err(|e| fmt(dir.join("b.png"), e.to_string()))?;
        let (wp, cp) = (dir.join("warp.json"), dir.join("corr.csv"));
        let gt = if wp.exists() {
            GroundTruth::Warp(CompositeWarp::load(&wp).map_err(|e| fmt(wp.clone(), e.to_string()))?)
        } else if cp.exists() {
            GroundTruth::Dense(DenseCorrespondence::load(&cp)?)
        } else {
            return Err(fmt(wp, "neither warp.json nor corr.csv present".into()));
        };
        let mask = |name: &str, img: &Raster| -> Result<Option<Mask>, EvalError> {
            let p = dir.join(name);
            if !p.exists() {
                return Ok(None);
            }
            let m = Mask::load(&p).map_err(|e| fmt(p.clone(), e.to_string()))?;
            if (m.width(), m.height()) != img.shape() {
                return Err(fmt(p, "mask size differs from image".into()));
            }
            Ok(Some(m))
        };
        Ok(Self {
            id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            valid_a: mask("valid_a.png", &image_a)?,
            valid_b: mask("valid_b.png", &image_b)?,
            image_a,
            image_b,
            gt,
        })
    }

    pub fn view(&self) -> SharedView<'_> {
        SharedView {
            gt: &self.gt,
            size_a: self.image_a.shape(),
            size_b: self.image_b.shape(),
            valid_a: self.valid_a.as_ref(),
            valid_b: self.valid_b.as_ref(),
        }
    }
}

/// Geometry needed to decide which keypoints both images can see.
#[derive(Clone, Copy)]
pub struct SharedView<'a> {
    pub gt: &'a GroundTruth,
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
    pub valid_a: Option<&'a Mask>,
    pub valid_b: Option<&'a Mask>,
}

fn inside(p: Point, size: (usize, usize), mask: Option<&Mask>) -> bool {
    let (w, h) = size;
    if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64) {
        return false;
    }
    mask.is_none_or(|m| m.get(p[0].round() as usize, p[1].round() as usize))
}

impl SharedView<'_> {
    /// Location in `b` of an `a` keypoint that lands inside `b`'s valid area.
    pub fn transport_a(&self, k: &Keypoint) -> Option<Point> {
        if !inside(k.point(), self.size_a, self.valid_a) {
            return None;
        }
        self.gt.forward(k.point()).filter(|&q| inside(q, self.size_b, self.valid_b))
    }

    pub fn b_is_shared(&self, k: &Keypoint) -> bool {
        inside(k.point(), self.size_b, self.valid_b)
            && self
                .gt
                .backward(k.point())
                .is_some_and(|q| inside(q, self.size_a, self.valid_a))
    }
}

fn dist(p: Point, k: &Keypoint) -> f64 {
    ((p[0] - k.x).powi(2) + (p[1] - k.y).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Repeatability {
    pub rr: f64,
    /// One-to-one pairs within tolerance.
    pub potential: usize,
    pub shared_a: usize,
    pub shared_b: usize,
}

/// Greedy one-to-one pairing: `a` keypoints in descending score order each
/// take the nearest unpaired `b` keypoint within `tol`.
pub fn repeatability(kps_a: &[Keypoint], kps_b: &[Keypoint], view: &SharedView, tol: f64) -> Result<Repeatability, EvalError> {
    let mut a: Vec<(usize, Point)> = kps_a
        .iter()
        .enumerate()
        .filter_map(|(i, k)| view.transport_a(k).map(|q| (i, q)))
        .collect();
    let b: Vec<usize> = (0..kps_b.len()).filter(|&j| view.b_is_shared(&kps_b[j])).collect();
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::NoSharedView);
    }
    a.sort_by(|x, y| kps_a[y.0].score.total_cmp(&kps_a[x.0].score).then(x.0.cmp(&y.0)));
    let mut used = vec![false; kps_b.len()];
    let mut potential = 0;
    for (_, q) in &a {
        let mut best: Option<(usize, f64)> = None;
        for &j in &b {
            let d = dist(*q, &kps_b[j]);
            if !used[j] && d <= tol && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            potential += 1;
        }
    }
    Ok(Repeatability {
        rr: potential as f64 / a.len().min(b.len()) as f64,
        potential,
        shared_a: a.len(),
        shared_b: b.len(),
    })
}

/// Denominator of MMA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmaDefinition {
    /// correct / putative matches
    #[default]
    Standard,
    /// correct / one-to-one repeatable pairs
    Possible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchScores {
    pub ms: f64,
    pub mma: f64,
    pub n_matches: usize,
    pub n_correct: usize,
    /// MMA had a zero denominator and is reported as 0.
    pub undefined_mma: bool,
}

pub fn is_correct(kps_a: &[Keypoint], kps_b: &[Keypoint], m: (usize, usize), view: &SharedView, tol: f64) -> bool {
    view.transport_a(&kps_a[m.0]).is_some_and(|q| dist(q, &kps_b[m.1]) <= tol)
}

pub fn matching_metrics(
    matches: &MatchSet,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    view: &SharedView,
    tol: f64,
    definition: MmaDefinition,
) -> Result<MatchScores, EvalError> {
    let rep = repeatability(kps_a, kps_b, view, tol)?;
    let n_correct = matches
        .pairs
        .iter()
        .filter(|m| is_correct(kps_a, kps_b, (m.index_a, m.index_b), view, tol))
        .count();
    let denom = match definition {
        MmaDefinition::Standard => matches.len(),
        MmaDefinition::Possible => rep.potential,
    };
    let (mma, undefined_mma) = if denom == 0 {
        (0.0, true)
    } else {
        ((n_correct as f64 / denom as f64).min(1.0), false)
    };
    Ok(MatchScores {
        ms: n_correct as f64 / rep.shared_a.min(rep.shared_b) as f64,
        mma,
        n_matches: matches.len(),
        n_correct,
        undefined_mma,
    })
}

/// Produces keypoints for the benchmark.
pub trait Detector: Send + Sync {
    fn name(&self) -> String;
    fn detect(&self, image: &Raster, k: usize) -> Result<Vec<Keypoint>, EvalError>;
}

/// Trained network followed by score-map extraction.
pub struct NetDetector {
    pub model: UNet,
    pub extract: ExtractConfig,
}

impl NetDetector {
    pub fn score_and_extract(&self, image: &Raster, k: usize) -> Result<(Raster, Vec<Keypoint>), EvalError> {
        let s = self.model.forward(image)?;
        let cfg = ExtractConfig {
            top_k: k,
            ..self.extract.clone()
        };
        let kps = extract(&s, &cfg);
        Ok((s, kps))
    }
}

impl Detector for NetDetector {
    fn name(&self) -> String {
        "net".into()
    }

    fn detect(&self, image: &Raster, k: usize) -> Result<Vec<Keypoint>, EvalError> {
        Ok(self.score_and_extract(image, k)?.1)
    }
}

/// A plugin's own detector.
pub struct PluginDetector(pub Arc<dyn FeaturePlugin>);

impl Detector for PluginDetector {
    fn name(&self) -> String {
        self.0.name().to_string()
    }

    fn detect(&self, image: &Raster, k: usize) -> Result<Vec<Keypoint>, EvalError> {
        Ok(self.0.detect(image, k)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_kpts: usize,
    pub tol: f64,
    pub matching: MatchConfig,
    pub mma_definition: MmaDefinition,
    pub extract: ExtractConfig,
    /// Write `viz/` and `plots/`.
    pub visualize: bool,
    /// Fraction of pairs recounted by the naive reference after each run.
    pub verify_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_kpts: 1024,
            tol: 3.0,
            matching: MatchConfig::default(),
            mma_definition: MmaDefinition::Standard,
            extract: ExtractConfig::default(),
            visualize: true,
            verify_fraction: 0.05,
        }
    }
}

/// Thresholds of the MMA curve in `plots/`.
pub const MMA_CURVE_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub rr: f64,
    pub ms: f64,
    pub mma: f64,
    pub n_kpts_a: usize,
    pub n_kpts_b: usize,
    pub n_matches: usize,
    pub n_correct: usize,
    pub undefined_mma: bool,
    pub mma_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub descriptor: String,
    pub config: EvalConfig,
    pub mean_rr: f64,
    pub mean_ms: f64,
    pub mean_mma: f64,
    pub pairs: Vec<PairResult>,
    /// Pairs re-verified by the naive recount.
    pub verified: Vec<String>,
}

struct PairOutput {
    result: PairResult,
    kps_a: Vec<Keypoint>,
    kps_b: Vec<Keypoint>,
    matches: MatchSet,
}

fn evaluate_pair(
    pair: &EvalPair,
    detector: &dyn Detector,
    plugin: &dyn FeaturePlugin,
    cfg: &EvalConfig,
) -> Result<PairOutput, EvalError> {
    let det_a = detector.detect(&pair.image_a, cfg.num_kpts)?;
    let det_b = detector.detect(&pair.image_b, cfg.num_kpts)?;
    let view = pair.view();
    let rep = repeatability(&det_a, &det_b, &view, cfg.tol)?;
    let da = plugin.describe(&pair.image_a, &det_a)?;
    let db = plugin.describe(&pair.image_b, &det_b)?;
    let matches = match_with(&da, &db, &cfg.matching);
    let scores = matching_metrics(&matches, &da.keypoints, &db.keypoints, &view, cfg.tol, cfg.mma_definition)?;
    let mma_curve = MMA_CURVE_THRESHOLDS
        .iter()
        .map(|&t| {
            if matches.is_empty() {
                return 0.0;
            }
            let c = matches
                .pairs
                .iter()
                .filter(|m| is_correct(&da.keypoints, &db.keypoints, (m.index_a, m.index_b), &view, t))
                .count();
            c as f64 / matches.len() as f64
        })
        .collect();
    Ok(PairOutput {
        result: PairResult {
            id: pair.id.clone(),
            rr: rep.rr,
            ms: scores.ms,
            mma: scores.mma,
            n_kpts_a: det_a.len(),
            n_kpts_b: det_b.len(),
            n_matches: scores.n_matches,
            n_correct: scores.n_correct,
            undefined_mma: scores.undefined_mma,
            mma_curve,
        },
        kps_a: da.keypoints,
        kps_b: db.keypoints,
        matches,
    })
}

/// Straightforward recount of the match metrics: every match is transported
/// and checked on its own, shared-view counts come from full scans.
fn recount(out: &PairOutput, pair: &EvalPair, cfg: &EvalConfig) -> Result<(), EvalError> {
    let view = pair.view();
    let mut correct = 0;
    for m in &out.matches.pairs {
        let ka = &out.kps_a[m.index_a];
        let kb = &out.kps_b[m.index_b];
        if let Some(q) = view.transport_a(ka) {
            if ((q[0] - kb.x).powi(2) + (q[1] - kb.y).powi(2)).sqrt() <= cfg.tol {
                correct += 1;
            }
        }
    }
    let sa = out.kps_a.iter().filter(|k| view.transport_a(k).is_some()).count();
    let sb = out.kps_b.iter().filter(|k| view.b_is_shared(k)).count();
    let r = &out.result;
    let ms = correct as f64 / sa.min(sb).max(1) as f64;
    let bad = |message: String| EvalError::Verification {
        pair: r.id.clone(),
        message,
    };
    if correct != r.n_correct {
        return Err(bad(format!("correct {correct} vs {}", r.n_correct)));
    }
    if (ms - r.ms).abs() > 1e-12 {
        return Err(bad(format!("ms {ms} vs {}", r.ms)));
    }
    if cfg.mma_definition == MmaDefinition::Standard && !r.undefined_mma {
        let mma = correct as f64 / out.matches.len() as f64;
        if (mma - r.mma).abs() > 1e-12 {
            return Err(bad(format!("mma {mma} vs {}", r.mma)));
        }
    }
    Ok(())
}

/// Pair directories of a dataset, sorted by name.
pub fn pair_dirs(dataset: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dataset)
        .map_err(io_err(dataset))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("a.png").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(EvalError::DatasetFormat {
            path: dataset.to_path_buf(),
            message: "no pair directories with a.png".into(),
        });
    }
    Ok(dirs)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const PAIRS_FILE: &str = "pairs.csv";

pub fn run_benchmark(
    dataset: &Path,
    detector: &dyn Detector,
    plugin: &dyn FeaturePlugin,
    cfg: &EvalConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    let dirs = pair_dirs(dataset)?;
    let pairs: Vec<EvalPair> = dirs.iter().map(|d| EvalPair::load(d)).collect::<Result<_, _>>()?;
    let outputs: Vec<PairOutput> = pairs
        .par_iter()
        .map(|p| evaluate_pair(p, detector, plugin, cfg))
        .collect::<Result<_, _>>()?;

    let n_verify = ((pairs.len() as f64 * cfg.verify_fraction).ceil() as usize).clamp(1, pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, pairs.len(), n_verify).into_vec();
    picked.sort_unstable();
    for &i in &picked {
        recount(&outputs[i], &pairs[i], cfg)?;
    }

    let results: Vec<PairResult> = outputs.iter().map(|o| o.result.clone()).collect();
    let report = EvalReport {
        detector: detector.name(),
        descriptor: plugin.name().to_string(),
        config: cfg.clone(),
        mean_rr: mean(results.iter().map(|r| r.rr)),
        mean_ms: mean(results.iter().map(|r| r.ms)),
        mean_mma: mean(results.iter().map(|r| r.mma)),
        pairs: results,
        verified: picked.iter().map(|&i| pairs[i].id.clone()).collect(),
    };
    if let Some(out) = out_dir {
        write_report(out, &report)?;
        if cfg.visualize {
            let viz = out.join("viz");
            std::fs::create_dir_all(&viz).map_err(io_err(&viz))?;
            for (p, o) in pairs.iter().zip(&outputs) {
                let path = viz.join(format!("{}.png", p.id));
                draw_matches(p, o, cfg.tol)
                    .save(&path)
                    .map_err(|source| EvalError::Raster(RasterError::Write { path: path.clone(), source }))?;
            }
            write_plots(&out.join("plots"), &report)?;
        }
    }
    Ok(report)
}

pub fn write_report(out: &Path, report: &EvalReport) -> Result<(), EvalError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let p = out.join(REPORT_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(report).expect("report serializes")).map_err(io_err(&p))?;
    let p = out.join(PAIRS_FILE);
    let mut f = std::fs::File::create(&p).map_err(io_err(&p))?;
    let mut text = String::from("id,rr,ms,mma,n_kpts_a,n_kpts_b,n_matches,n_correct,undefined_mma\n");
    for r in &report.pairs {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.id, r.rr, r.ms, r.mma, r.n_kpts_a, r.n_kpts_b, r.n_matches, r.n_correct, r.undefined_mma
        ));
    }
    f.write_all(text.as_bytes()).map_err(io_err(&p))
}

fn gray(v: f32) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
            img.put_pixel(xi as u32, yi as u32, color);
        }
    }
}

/// Side-by-side images, green lines for correct matches and red for wrong ones.
fn draw_matches(pair: &EvalPair, out: &PairOutput, tol: f64) -> RgbImage {
    let (wa, ha) = pair.image_a.shape();
    let (wb, hb) = pair.image_b.shape();
    let mut img = RgbImage::new((wa + wb) as u32, ha.max(hb) as u32);
    for y in 0..ha {
        for x in 0..wa {
            img.put_pixel(x as u32, y as u32, gray(pair.image_a.get(x, y)));
        }
    }
    for y in 0..hb {
        for x in 0..wb {
            img.put_pixel((wa + x) as u32, y as u32, gray(pair.image_b.get(x, y)));
        }
    }
    let view = pair.view();
    for m in &out.matches.pairs {
        let ka = &out.kps_a[m.index_a];
        let kb = &out.kps_b[m.index_b];
        let color = if is_correct(&out.kps_a, &out.kps_b, (m.index_a, m.index_b), &view, tol) {
            Rgb([0, 200, 0])
        } else {
            Rgb([220, 0, 0])
        };
        draw_line(&mut img, (ka.x, ka.y), (kb.x + wa as f64, kb.y), color);
    }
    img
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 200;
const PLOT_MARGIN: u32 = 20;

fn plot_canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (x0, y0) = (PLOT_MARGIN as f64, (PLOT_H - PLOT_MARGIN) as f64);
    draw_line(&mut img, (x0, y0), ((PLOT_W - PLOT_MARGIN) as f64, y0), axis);
    draw_line(&mut img, (x0, y0), (x0, PLOT_MARGIN as f64), axis);
    img
}

fn plot_y(v: f64) -> f64 {
    let span = (PLOT_H - 2 * PLOT_MARGIN) as f64;
    (PLOT_H - PLOT_MARGIN) as f64 - v.clamp(0.0, 1.0) * span
}

/// `mma_curve.png`: mean MMA against the pixel threshold (1..10 px).
/// `per_pair.png`: RR (blue), MS (orange) and MMA (green) bars per pair.
pub fn write_plots(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let save = |img: RgbImage, name: &str| -> Result<(), EvalError> {
        let p = dir.join(name);
        img.save(&p)
            .map_err(|source| EvalError::Raster(RasterError::Write { path: p.clone(), source }))
    };

    let mut curve = plot_canvas();
    let n = MMA_CURVE_THRESHOLDS.len();
    let span = (PLOT_W - 2 * PLOT_MARGIN) as f64;
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v = mean(report.pairs.iter().map(|p| p.mma_curve.get(i).copied().unwrap_or(0.0)));
            (PLOT_MARGIN as f64 + span * i as f64 / (n - 1) as f64, plot_y(v))
        })
        .collect();
    for w in pts.windows(2) {
        draw_line(&mut curve, w[0], w[1], Rgb([0, 90, 200]));
    }
    save(curve, "mma_curve.png")?;

    let mut bars = plot_canvas();
    let np = report.pairs.len().max(1) as f64;
    let slot = span / np;
    let colors = [Rgb([40, 90, 200]), Rgb([240, 140, 20]), Rgb([30, 160, 60])];
    for (i, p) in report.pairs.iter().enumerate() {
        for (k, v) in [p.rr, p.ms, p.mma].into_iter().enumerate() {
            let left = PLOT_MARGIN as f64 + slot * (i as f64 + k as f64 / 3.0);
            let right = left + slot / 3.0;
            let mut x = left;
            while x < right.max(left + 1.0) {
                draw_line(&mut bars, (x, plot_y(0.0)), (x, plot_y(v)), colors[k]);
                x += 1.0;
            }
        }
    }
    save(bars, "per_pair.png")
}

/// Writes a pair directory in the benchmark layout.
pub fn write_pair(dir: &Path, a: &Raster, b: &Raster, gt: &CompositeWarp, valid_b: Option<&Mask>) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    a.save_png16(dir.join("a.png"))?;
    b.save_png16(dir.join("b.png"))?;
    gt.save(dir.join("warp.json"))?;
    if let Some(m) = valid_b {
        m.save_png(dir.join("valid_b.png"))?;
    }
    Ok(())
}

/// Synthetic benchmark: procedural anchor `a`, its augmented warp `b` and
/// the warp as ground truth, one directory per pair.
pub fn generate_eval_pairs(cfg: &crate::synth::SynthConfig, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let t = crate::synth::triplet_for_index(cfg, &[], crate::util::derive_seed(seed, i as u64))?;
            let dir = out_dir.join(format!("pair_{i:04}"));
            write_pair(&dir, &t.anchor, &t.warped_1, &t.warp_1, Some(&t.validity_1))?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Match;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint::new(x, y, 1.0)
    }

    fn identity_view(gt: &GroundTruth) -> SharedView<'_> {
        SharedView {
            gt,
            size_a: (100, 100),
            size_b: (100, 100),
            valid_a: None,
            valid_b: None,
        }
    }

    #[test]
    fn repeatability_hand_case() {
        let gt = GroundTruth::Warp(CompositeWarp::identity());
        let v = identity_view(&gt);
        let a: Vec<_> = (0..5).map(|i| kp(10.0 + 15.0 * i as f64, 50.0)).collect();
        let mut b = a.clone();
        b[3] = kp(b[3].x, 60.0);
        b[4] = kp(b[4].x, 40.0);
        let r = repeatability(&a, &b, &v, 3.0).unwrap();
        assert_eq!(r.potential, 3);
        assert_eq!(r.rr, 0.6);
        let far: Vec<_> = a.iter().map(|k| kp(k.x, k.y + 3.5)).collect();
        assert_eq!(repeatability(&a, &far, &v, 3.0).unwrap().rr, 0.0);
    }

    #[test]
    fn two_of_three_matches() {
        let gt = GroundTruth::Warp(CompositeWarp::identity());
        let v = identity_view(&gt);
        let a: Vec<_> = (0..10).map(|i| kp(5.0 + 9.0 * i as f64, 20.0)).collect();
        let b = a.clone();
        let m = |i, j| Match {
            index_a: i,
            index_b: j,
            distance: 0.0,
            ratio: 0.0,
        };
        let ms = MatchSet {
            pairs: vec![m(0, 0), m(1, 1), m(2, 5)],
        };
        let s = matching_metrics(&ms, &a, &b, &v, 3.0, MmaDefinition::Standard).unwrap();
        assert_eq!(s.mma, 2.0 / 3.0);
        assert_eq!(s.ms, 0.2);
        let none = matching_metrics(&MatchSet::default(), &a, &b, &v, 3.0, MmaDefinition::Standard).unwrap();
        assert!(none.undefined_mma && none.mma == 0.0);
        let alt = matching_metrics(&ms, &a, &b, &v, 3.0, MmaDefinition::Possible).unwrap();
        assert_eq!(alt.mma, 0.2);
    }

    #[test]
    fn no_shared_view_is_an_error() {
        let gt = GroundTruth::Warp(CompositeWarp::identity());
        let v = identity_view(&gt);
        let r = repeatability(&[kp(150.0, 10.0)], &[kp(10.0, 10.0)], &v, 3.0);
        assert!(matches!(r, Err(EvalError::NoSharedView)));
    }

    #[test]
    fn dense_lookup_keeps_subpixel_offset() {
        let d = DenseCorrespondence::from_rows(&[[10.0, 10.0, 30.0, 12.0]]);
        let gt = GroundTruth::Dense(d);
        assert_eq!(gt.forward([10.25, 9.75]), Some([30.25, 11.75]));
        assert_eq!(gt.backward([30.0, 12.0]), Some([10.0, 10.0]));
        assert_eq!(gt.forward([50.0, 50.0]), None);
    }
}
