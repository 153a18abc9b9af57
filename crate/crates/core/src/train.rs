//! Siamese detector training on `(B, M_b)` / `(B', M_b')` pairs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{HeatmapError, HeatmapFile, MatchingHeatmap, Peak, MH_A, MH_B, MH_BP};
use crate::loss::{sample_negative_mask, total_loss, LossConfig, LossError};
use crate::model::{reflect_pad, ModelError, UNet, SIZE_MULTIPLE};
use crate::nn::Tensor;
use crate::raster::{Mask, Raster, RasterError};
use crate::synth::{pair_dir, Manifest, SynthError};
use crate::warp::{CompositeWarp, PointWarp, WarpError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no usable training triplets ({0})")]
    EmptyDataset(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// Images per step in Siamese mode (two views per triplet).
    pub batch: usize,
    /// Views whose heatmap has fewer peaks are not used.
    pub min_peaks: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    /// Feed both warped views through the shared network each step.
    pub siamese: bool,
    /// Weight of the cross-view score agreement term; 0 disables it.
    pub consistency_weight: f64,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.006,
            lr_decay: 0.9,
            lr_decay_every: 500,
            epochs: 7,
            batch: 12,
            min_peaks: 32,
            max_steps: None,
            siamese: true,
            consistency_weight: 0.0,
            checkpoint_every: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch < 2 || self.batch % 2 != 0 {
            return Err(TrainError::InvalidConfig("batch must be even and >= 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(TrainError::InvalidConfig("learning-rate schedule".into()));
        }
        if self.consistency_weight < 0.0 || !self.consistency_weight.is_finite() {
            return Err(TrainError::InvalidConfig("consistency_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Triplets drawn per step.
    pub fn triplets_per_step(&self) -> usize {
        self.batch / 2
    }

    /// Images forwarded per step.
    pub fn images_per_step(&self) -> usize {
        if self.siamese {
            self.batch
        } else {
            self.batch / 2
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.lr_decay.powi((step / self.lr_decay_every) as i32)
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub loss_cossim: f64,
    pub loss_simple: f64,
    pub loss_peak: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss,loss_cossim,loss_simple,loss_peak,lr";

impl StepMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.loss_cossim, self.loss_simple, self.loss_peak, self.lr
        )
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))?;
        if v.len() != 6 {
            return Err(TrainError::InvalidConfig(format!("{}: bad row `{line}`", path.display())));
        }
        out.push(StepMetrics {
            step: v[0] as usize,
            loss: v[1],
            loss_cossim: v[2],
            loss_simple: v[3],
            loss_peak: v[4],
            lr: v[5],
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct View {
    image: PathBuf,
    valid: PathBuf,
    peaks: Vec<Peak>,
}

#[derive(Clone, Debug)]
struct TripletRef {
    dir: PathBuf,
    b: View,
    bp: View,
}

fn load_peaks(path: &Path) -> Result<HeatmapFile, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Triplets with heatmaps, keeping those whose used views carry enough peaks.
fn collect_triplets(dataset: &Path, cfg: &TrainConfig) -> Result<(Vec<TripletRef>, usize), TrainError> {
    let manifest = Manifest::load(dataset)?;
    let mut out = Vec::new();
    let mut discarded = 0;
    for e in &manifest.entries {
        let dir = pair_dir(dataset, &e.id);
        let hb = dir.join(MH_B).with_extension("json");
        let hbp = dir.join(MH_BP).with_extension("json");
        if !hb.exists() || !hbp.exists() {
            discarded += 1;
            continue;
        }
        let b = load_peaks(&hb)?.peaks;
        let bp = load_peaks(&hbp)?.peaks;
        let enough = b.len() >= cfg.min_peaks && (!cfg.siamese || bp.len() >= cfg.min_peaks);
        if !enough {
            discarded += 1;
            continue;
        }
        out.push(TripletRef {
            b: View {
                image: dir.join("B.png"),
                valid: dir.join("valid_B.png"),
                peaks: b,
            },
            bp: View {
                image: dir.join("Bp.png"),
                valid: dir.join("valid_Bp.png"),
                peaks: bp,
            },
            dir,
        });
    }
    Ok((out, discarded))
}

struct LoadedView {
    image: Raster,
    target: Vec<f64>,
    valid: Vec<bool>,
    peaks: Vec<Peak>,
}

fn load_view(v: &View) -> Result<LoadedView, TrainError> {
    let image = Raster::load(&v.image)?;
    let (w, h) = image.shape();
    let valid = Mask::load(&v.valid)?;
    let target = MatchingHeatmap::from_peaks(v.peaks.clone(), w, h)
        .values
        .data()
        .iter()
        .map(|&x| x as f64)
        .collect();
    Ok(LoadedView {
        image,
        target,
        valid: valid.data().to_vec(),
        peaks: v.peaks.clone(),
    })
}

/// Adam state over the model's parameter list.
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &UNet, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, model: &mut UNet, lr: f64) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                p.value[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub triplets: usize,
    pub discarded: usize,
    pub images_per_step: usize,
    pub metrics: Vec<StepMetrics>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.loss)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const WEIGHTS_FILE: &str = "model.nrkw";

/// Mean squared disagreement of the two views' scores at the anchor peaks.
/// Returns the value and adds its gradient into `gb`, `gbp`.
fn consistency_term(
    anchor_peaks: &[Peak],
    g: &CompositeWarp,
    gp: &CompositeWarp,
    sb: &[f64],
    sbp: &[f64],
    width: usize,
    height: usize,
    gb: &mut [f64],
    gbp: &mut [f64],
    weight: f64,
) -> f64 {
    let idx = |q: [f64; 2]| -> Option<usize> {
        let (x, y) = (q[0].round(), q[1].round());
        (x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64).then(|| y as usize * width + x as usize)
    };
    let pairs: Vec<(usize, usize)> = anchor_peaks
        .iter()
        .filter_map(|p| {
            let a = [p.x as f64, p.y as f64];
            let i = idx(g.apply_point(a).ok()?)?;
            let j = idx(gp.apply_point(a).ok()?)?;
            Some((i, j))
        })
        .collect();
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut value = 0.0;
    for &(i, j) in &pairs {
        let d = sb[i] - sbp[j];
        value += d * d / n;
        gb[i] += weight * 2.0 * d / n;
        gbp[j] -= weight * 2.0 * d / n;
    }
    weight * value
}

/// Trains `model` in place. Writes `metrics.csv`, checkpoints and the final
/// weights under `out_dir` when given.
pub fn train(
    dataset: &Path,
    model: &mut UNet,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let (triplets, discarded) = collect_triplets(dataset, cfg)?;
    if triplets.is_empty() {
        return Err(TrainError::EmptyDataset(format!(
            "{discarded} triplets lack heatmaps or have fewer than {} peaks",
            cfg.min_peaks
        )));
    }
    let per_step = cfg.triplets_per_step().min(triplets.len());
    let steps_per_epoch = triplets.len().div_ceil(per_step);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch);

    let mut metrics_out = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
            let p = d.join(METRICS_FILE);
            let mut f = std::fs::File::create(&p).map_err(io_err(&p))?;
            writeln!(f, "{METRICS_HEADER}").map_err(io_err(&p))?;
            Some((f, p))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model, cfg);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut metrics = Vec::with_capacity(total_steps);

    for step in 1..=total_steps {
        let mut picked = Vec::with_capacity(per_step);
        while picked.len() < per_step {
            if cursor >= order.len() {
                order = (0..triplets.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let mut views = Vec::new();
        for &t in &picked {
            views.push(load_view(&triplets[t].b)?);
            if cfg.siamese {
                views.push(load_view(&triplets[t].bp)?);
            }
        }
        let (w, h) = views[0].image.shape();
        if views.iter().any(|v| v.image.shape() != (w, h)) {
            return Err(TrainError::InvalidConfig("training images differ in size".into()));
        }
        let pw = w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let ph = h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let mut data = Vec::with_capacity(views.len() * pw * ph);
        for v in &views {
            if (pw, ph) == (w, h) {
                data.extend_from_slice(v.image.data());
            } else {
                data.extend_from_slice(reflect_pad(&v.image, pw, ph).data());
            }
        }
        let x = Tensor::from_vec(views.len(), 1, ph, pw, data);

        model.zero_grad();
        let (scores, cache) = model.forward_batch(x, true)?;
        let cache = cache.expect("training forward keeps activations");

        let crop = |i: usize| -> Vec<f64> {
            let item = scores.item(i);
            (0..h)
                .flat_map(|y| item[y * pw..y * pw + w].iter().map(|&v| v as f64))
                .collect()
        };
        let t_count = picked.len() as f64;
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(views.len());
        let (mut lsum, mut csum, mut ssum, mut psum) = (0.0, 0.0, 0.0, 0.0);
        for (i, v) in views.iter().enumerate() {
            let s = crop(i);
            let mut f = sample_negative_mask(&v.peaks, &v.target, Some(&v.valid), w, h, &mut rng)?;
            // invalid pixels never contribute, positives included
            for (k, &ok) in f.iter_mut().zip(&v.valid) {
                *k &= ok;
            }
            let tl = total_loss(&s, &v.target, &f, w, h, loss_cfg)?;
            lsum += tl.value;
            csum += tl.cossim;
            ssum += tl.simple;
            psum += tl.peak;
            grads.push(tl.grad.into_iter().map(|g| g / t_count).collect());
        }
        if cfg.siamese && cfg.consistency_weight > 0.0 {
            for (k, &t) in picked.iter().enumerate() {
                let dir = &triplets[t].dir;
                let anchor = load_peaks(&dir.join(MH_A).with_extension("json"))?.peaks;
                let g = CompositeWarp::load(dir.join("g.json"))?;
                let gp = CompositeWarp::load(dir.join("gp.json"))?;
                let (sb, sbp) = (crop(2 * k), crop(2 * k + 1));
                let (mut gb, mut gbp) = (vec![0.0; w * h], vec![0.0; w * h]);
                let val = consistency_term(
                    &anchor,
                    &g,
                    &gp,
                    &sb,
                    &sbp,
                    w,
                    h,
                    &mut gb,
                    &mut gbp,
                    cfg.consistency_weight,
                );
                lsum += val;
                for (a, b) in grads[2 * k].iter_mut().zip(&gb) {
                    *a += b / t_count;
                }
                for (a, b) in grads[2 * k + 1].iter_mut().zip(&gbp) {
                    *a += b / t_count;
                }
            }
        }
        let loss = lsum / t_count;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }

        let mut dscores = Tensor::zeros(views.len(), 1, ph, pw);
        for (i, g) in grads.iter().enumerate() {
            let item = &mut dscores.data[i * ph * pw..(i + 1) * ph * pw];
            for y in 0..h {
                for x in 0..w {
                    item[y * pw + x] = g[y * w + x] as f32;
                }
            }
        }
        model.backward(&dscores, cache);
        let lr = cfg.lr_at(step - 1);
        adam.step(model, lr);

        let m = StepMetrics {
            step,
            loss,
            loss_cossim: csum / t_count,
            loss_simple: ssum / t_count,
            loss_peak: psum / t_count,
            lr,
        };
        log::debug!("step {step}: loss {loss:.5}");
        if let Some((f, p)) = metrics_out.as_mut() {
            writeln!(f, "{}", m.csv_row()).map_err(io_err(p))?;
        }
        metrics.push(m);

        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total_steps {
                let cdir = d.join("checkpoints");
                std::fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
                model.save(&cdir.join(format!("step_{step:06}.nrkw")))?;
            }
        }
    }
    if let Some(d) = out_dir {
        model.save(&d.join(WEIGHTS_FILE))?;
    }
    Ok(TrainReport {
        steps: total_steps,
        triplets: triplets.len(),
        discarded,
        images_per_step: cfg.images_per_step().min(per_step * if cfg.siamese { 2 } else { 1 }),
        metrics,
    })
}

/// Fraction of heatmap peak centers with a local maximum of the predicted
/// score map (3x3 window) within `radius` pixels, over every used view.
pub fn peak_recall(dataset: &Path, model: &UNet, cfg: &TrainConfig, radius: f64) -> Result<f64, TrainError> {
    let (triplets, _) = collect_triplets(dataset, cfg)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for t in &triplets {
        let views: &[&View] = if cfg.siamese { &[&t.b, &t.bp] } else { &[&t.b] };
        for v in views {
            let img = Raster::load(&v.image)?;
            let s = model.forward(&img)?;
            let maxima = crate::extract::nms(&s, 3, false);
            for p in &v.peaks {
                total += 1;
                let near = maxima.iter().any(|k| {
                    let (dx, dy) = (k.x - p.x as f64, k.y - p.y as f64);
                    dx * dx + dy * dy <= radius * radius
                });
                hit += near as usize;
            }
        }
    }
    if total == 0 {
        return Err(TrainError::EmptyDataset("no heatmap peaks".into()));
    }
    Ok(hit as f64 / total as f64)
}
