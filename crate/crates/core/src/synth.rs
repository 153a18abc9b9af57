//! Training triplets `(A, B, B')` with known warps `g`, `g'` and photometric
//! augmentation, and the on-disk dataset layout that holds them.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Mask, Raster, RasterError};
use crate::scene::render_scene;
use crate::util::{config_hash, derive_seed};
use crate::warp::{sample_composite, warp_image, CompositeWarp, WarpConfig, WarpError};

/// Attempts after the first one when a sampled warp cannot be inverted.
pub const WARP_RETRIES: usize = 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("no anchor images found in {0}")]
    NoAnchors(PathBuf),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Random photometric transform ranges. Each range is `[lo, hi]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    /// Additive offset drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Multiplicative contrast about mid-gray.
    pub contrast: [f32; 2],
    pub gamma: [f32; 2],
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: [f32; 2],
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: [0.8, 1.2],
            gamma: [0.8, 1.25],
            noise_std: [0.0, 0.02],
        }
    }
}

impl PhotometricConfig {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: [1.0, 1.0],
            gamma: [1.0, 1.0],
            noise_std: [0.0, 0.0],
        }
    }

    fn validate(&self) -> Result<(), String> {
        let ranges = [self.contrast, self.gamma, self.noise_std];
        if !self.brightness.is_finite() || self.brightness < 0.0 {
            return Err("brightness must be finite and >= 0".into());
        }
        if ranges.iter().flatten().any(|v| !v.is_finite()) || ranges.iter().any(|r| r[0] > r[1]) {
            return Err("photometric ranges must be finite with lo <= hi".into());
        }
        if self.gamma[0] <= 0.0 || self.noise_std[0] < 0.0 {
            return Err("gamma must be > 0 and noise_std >= 0".into());
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Brightness offset, contrast scale, gamma, then additive noise; clamped to `[0, 1]`.
///
/// Steps whose sampled parameter is the identity are skipped, so an
/// all-identity config returns the input unchanged.
pub fn photometric_augment<R: Rng + ?Sized>(image: &Raster, cfg: &PhotometricConfig, rng: &mut R) -> Raster {
    let mut rng = rng;
    let beta = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let alpha = draw(&mut rng, cfg.contrast);
    let gamma = draw(&mut rng, cfg.gamma);
    let sigma = draw(&mut rng, cfg.noise_std);
    let noise = (sigma > 0.0).then(|| Normal::new(0.0f32, sigma).expect("finite sigma"));

    let mut out = image.clone();
    for v in out.data_mut() {
        let mut x = *v;
        if beta != 0.0 {
            x += beta;
        }
        if alpha != 1.0 {
            x = (x - 0.5) * alpha + 0.5;
        }
        x = x.clamp(0.0, 1.0);
        if gamma != 1.0 {
            x = x.powf(gamma);
        }
        if let Some(n) = &noise {
            x += n.sample(&mut rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    out
}

/// Anchor plus two warped, augmented views.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet {
    pub anchor: Raster,
    pub warped_1: Raster,
    pub warped_2: Raster,
    /// `g`: anchor -> `warped_1`.
    pub warp_1: CompositeWarp,
    /// `g'`: anchor -> `warped_2`.
    pub warp_2: CompositeWarp,
    pub validity_1: Mask,
    pub validity_2: Mask,
}

fn warped_view<R: Rng + ?Sized>(
    anchor: &Raster,
    cfg: &WarpConfig,
    rng: &mut R,
) -> Result<(Raster, Mask, CompositeWarp), WarpError> {
    let shape = anchor.shape();
    let mut last = None;
    for _ in 0..=WARP_RETRIES {
        let g = sample_composite(cfg, shape, rng);
        match warp_image(anchor, &g, shape) {
            Ok((img, mask)) => return Ok((img, mask, g)),
            Err(e @ WarpError::NonInvertibleWarp { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn augment_valid<R: Rng + ?Sized>(img: &Raster, mask: &Mask, cfg: &PhotometricConfig, rng: &mut R) -> Raster {
    let mut out = photometric_augment(img, cfg, rng);
    for (v, &ok) in out.data_mut().iter_mut().zip(mask.data()) {
        if !ok {
            *v = 0.0;
        }
    }
    out
}

/// Samples independent `g`, `g'`, resamples the anchor through each and
/// augments both views. Invalid pixels stay 0 after augmentation.
pub fn generate_triplet<R: Rng + ?Sized>(
    anchor: &Raster,
    warp_cfg: &WarpConfig,
    photo_cfg: &PhotometricConfig,
    rng: &mut R,
) -> Result<TrainingTriplet, SynthError> {
    if let Err(message) = photo_cfg.validate() {
        return Err(SynthError::Format {
            path: PathBuf::from("<photometric config>"),
            message,
        });
    }
    let (b, valid_b, g) = warped_view(anchor, warp_cfg, rng)?;
    let (bp, valid_bp, gp) = warped_view(anchor, warp_cfg, rng)?;
    let warped_1 = augment_valid(&b, &valid_b, photo_cfg, rng);
    let warped_2 = augment_valid(&bp, &valid_bp, photo_cfg, rng);
    Ok(TrainingTriplet {
        anchor: anchor.clone(),
        warped_1,
        warped_2,
        warp_1: g,
        warp_2: gp,
        validity_1: valid_b,
        validity_2: valid_bp,
    })
}

/// Dataset generation settings (the `[synth]` section of a run config).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Directory of anchor images; procedural scenes when absent.
    pub anchors_dir: Option<PathBuf>,
    pub warp: WarpConfig,
    pub photometric: PhotometricConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            width: 400,
            height: 300,
            anchors_dir: None,
            warp: WarpConfig::default(),
            photometric: PhotometricConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dataset_dir: &Path) -> Result<Self, SynthError> {
        let path = dataset_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| SynthError::Format {
            path,
            message: e.to_string(),
        })
    }

    pub fn save(&self, dataset_dir: &Path) -> Result<(), SynthError> {
        let path = dataset_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io_err(&path))
    }
}

pub fn pair_dir(dataset_dir: &Path, id: &str) -> PathBuf {
    dataset_dir.join("pairs").join(id)
}

fn list_anchor_images(dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SynthError::NoAnchors(dir.to_path_buf()));
    }
    Ok(files)
}

/// Writes one triplet in the `pairs/<id>/` layout.
pub fn write_triplet(dir: &Path, t: &TrainingTriplet) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    t.anchor.save_png8(dir.join("A.png"))?;
    t.warped_1.save_png8(dir.join("B.png"))?;
    t.warped_2.save_png8(dir.join("Bp.png"))?;
    t.warp_1.save(dir.join("g.json"))?;
    t.warp_2.save(dir.join("gp.json"))?;
    t.validity_1.save_png(dir.join("valid_B.png"))?;
    t.validity_2.save_png(dir.join("valid_Bp.png"))?;
    Ok(())
}

/// Reads a triplet written by [`write_triplet`].
pub fn read_triplet(dir: &Path) -> Result<TrainingTriplet, SynthError> {
    Ok(TrainingTriplet {
        anchor: Raster::load(dir.join("A.png"))?,
        warped_1: Raster::load(dir.join("B.png"))?,
        warped_2: Raster::load(dir.join("Bp.png"))?,
        warp_1: CompositeWarp::load(dir.join("g.json"))?,
        warp_2: CompositeWarp::load(dir.join("gp.json"))?,
        validity_1: Mask::load(dir.join("valid_B.png"))?,
        validity_2: Mask::load(dir.join("valid_Bp.png"))?,
    })
}

/// Generates the anchor for triplet `index` and the triplet itself.
pub fn triplet_for_index(
    cfg: &SynthConfig,
    anchors: &[PathBuf],
    seed: u64,
) -> Result<TrainingTriplet, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = if anchors.is_empty() {
        render_scene(cfg.width, cfg.height, &mut rng)
    } else {
        let pick = (seed % anchors.len() as u64) as usize;
        Raster::load(&anchors[pick])?.resized(cfg.width, cfg.height)
    };
    // Stored PNGs are 8-bit; warp the quantized anchor so files agree with warps.
    let anchor = anchor.quantized8();
    generate_triplet(&anchor, &cfg.warp, &cfg.photometric, &mut rng)
}

/// Generates `cfg.count` triplets under `out_dir` and writes `manifest.json`.
///
/// Triplet `i` uses the seed `derive_seed(seed, i)`, so the output does not
/// depend on the number of worker threads.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest, SynthError> {
    std::fs::create_dir_all(out_dir.join("pairs")).map_err(io_err(out_dir))?;
    let anchors = match &cfg.anchors_dir {
        Some(d) => list_anchor_images(d)?,
        None => Vec::new(),
    };
    let entries: Vec<ManifestEntry> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let id = format!("{i:06}");
            let s = derive_seed(seed, i as u64);
            let t = triplet_for_index(cfg, &anchors, s)?;
            write_triplet(&pair_dir(out_dir, &id), &t)?;
            Ok(ManifestEntry { id, seed: s })
        })
        .collect::<Result<_, SynthError>>()?;
    let manifest = Manifest {
        config_hash: config_hash(cfg),
        seed,
        width: cfg.width,
        height: cfg.height,
        entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |x, y| {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            0.5 + 0.3 * (6.0 * u).sin() * (5.0 * v).cos()
        })
    }

    #[test]
    fn identity_photometric_is_noop() {
        let img = smooth_image(30, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(photometric_augment(&img, &PhotometricConfig::identity(), &mut rng), img);
    }

    #[test]
    fn photometric_is_deterministic_and_clamped() {
        let img = smooth_image(30, 20);
        let cfg = PhotometricConfig {
            brightness: 0.5,
            contrast: [0.5, 2.0],
            gamma: [0.5, 2.0],
            noise_std: [0.0, 0.2],
        };
        let a = photometric_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = photometric_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let (lo, hi) = a.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn brightness_shift_is_bounded() {
        let img = smooth_image(40, 30);
        let cfg = PhotometricConfig {
            brightness: 0.08,
            ..PhotometricConfig::identity()
        };
        let base = img.mean();
        let mut shifts = Vec::new();
        for seed in 0..100 {
            let out = photometric_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let d = out.mean() - base;
            assert!(d.abs() <= 0.08 + 1e-6, "{d}");
            shifts.push(d);
        }
        // Both signs occur, so the offset is actually drawn from the range.
        assert!(shifts.iter().any(|&d| d > 0.02) && shifts.iter().any(|&d| d < -0.02));
    }

    #[test]
    fn identity_configs_give_identical_views() {
        let img = smooth_image(32, 24);
        let t = generate_triplet(
            &img,
            &WarpConfig::identity(),
            &PhotometricConfig::identity(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(t.warped_1, img);
        assert_eq!(t.warped_2, img);
        assert_eq!(t.validity_1.count(), 32 * 24);
    }

    #[test]
    fn triplets_are_deterministic() {
        let img = smooth_image(48, 40);
        let run = |s| {
            generate_triplet(
                &img,
                &WarpConfig::default(),
                &PhotometricConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(s),
            )
            .unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9).warped_1, run(10).warped_1);
    }

    #[test]
    fn default_config_keeps_most_pixels_valid() {
        let mut valid = 0usize;
        let mut total = 0usize;
        for s in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let anchor = render_scene(64, 48, &mut rng);
            let t = generate_triplet(&anchor, &WarpConfig::default(), &PhotometricConfig::default(), &mut rng)
                .unwrap();
            valid += t.validity_1.count() + t.validity_2.count();
            total += 2 * 64 * 48;
        }
        let frac = valid as f64 / total as f64;
        assert!(frac >= 0.95, "valid fraction {frac}");
    }

    #[test]
    fn correspondence_is_consistent_with_resampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let anchor = render_scene(80, 60, &mut rng);
        let t = generate_triplet(&anchor, &WarpConfig::default(), &PhotometricConfig::identity(), &mut rng)
            .unwrap();
        use crate::warp::PointWarp;
        for y in (0..60).step_by(7) {
            for x in (0..80).step_by(7) {
                if !t.validity_1.get(x, y) {
                    continue;
                }
                let src = t.warp_1.invert_point([x as f64, y as f64]).unwrap();
                let fwd = t.warp_1.apply_point(src).unwrap();
                let err = ((fwd[0] - x as f64).powi(2) + (fwd[1] - y as f64).powi(2)).sqrt();
                assert!(err <= 0.05 + 1e-9, "{err}");
            }
        }
    }

    #[test]
    fn dataset_layout_and_reproducibility() {
        let cfg = SynthConfig {
            count: 3,
            width: 32,
            height: 32,
            ..SynthConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(&cfg, 5, d1.path()).unwrap();
        let m2 = generate_dataset(&cfg, 5, d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.entries.len(), 3);
        for e in &m1.entries {
            let p = pair_dir(d1.path(), &e.id);
            for f in ["A.png", "B.png", "Bp.png", "g.json", "gp.json", "valid_B.png", "valid_Bp.png"] {
                assert!(p.join(f).exists(), "{f}");
                let a = std::fs::read(p.join(f)).unwrap();
                let b = std::fs::read(pair_dir(d2.path(), &e.id).join(f)).unwrap();
                assert_eq!(a, b, "{f} differs");
            }
            let t = read_triplet(&p).unwrap();
            assert_eq!(t.anchor.shape(), (32, 32));
        }
    }
}
