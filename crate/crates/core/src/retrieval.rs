//! Bag-of-visual-words retrieval: k-means vocabulary, per-image word
//! histograms and exact nearest-neighbor ranking.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{Detector, EvalError};
use crate::features::{DescriptorSet, FeaturePlugin, PluginError};
use crate::raster::{Raster, RasterError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("{available} descriptors cannot seed {needed} visual words")]
    InsufficientDescriptors { needed: usize, available: usize },
    #[error("vocabulary needs at least 2 words, got {0}")]
    VocabularyTooSmall(usize),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("no images in {0}")]
    EmptyDirectory(PathBuf),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    size: usize,
    dim: usize,
    centers: Vec<f32>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

const VOCAB_MAGIC: &[u8; 4] = b"NRKV";

impl Vocabulary {
    pub fn new(size: usize, dim: usize, centers: Vec<f32>) -> Result<Self, RetrievalError> {
        if size < 2 {
            return Err(RetrievalError::VocabularyTooSmall(size));
        }
        if centers.len() != size * dim || centers.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::Format {
                path: PathBuf::from("<vocabulary>"),
                message: format!("{} values for {size}x{dim} finite centers", centers.len()),
            });
        }
        Ok(Self { size, dim, centers })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f32] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest center; ties go to the lower index.
    pub fn assign(&self, v: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.size {
            let d = sq_dist(v, self.center(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut buf = Vec::with_capacity(12 + 4 * self.centers.len());
        buf.extend_from_slice(VOCAB_MAGIC);
        buf.extend_from_slice(&(self.size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.centers {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io_err(path))?;
        let bad = |m: &str| RetrievalError::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if buf.len() < 12 || &buf[..4] != VOCAB_MAGIC {
            return Err(bad("not an NRKV vocabulary"));
        }
        let size = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        if buf.len() != 12 + 4 * size * dim {
            return Err(bad("length does not match header"));
        }
        let centers = buf[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(size, dim, centers).map_err(|e| bad(&e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansInfo {
    pub iterations: usize,
    pub inertia: f64,
}

pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_REL_TOL: f64 = 1e-4;

/// k-means with k-means++ seeding over the rows of every set.
pub fn build_vocabulary<R: Rng + ?Sized>(
    sets: &[DescriptorSet],
    size: usize,
    rng: &mut R,
) -> Result<(Vocabulary, KmeansInfo), RetrievalError> {
    if size < 2 {
        return Err(RetrievalError::VocabularyTooSmall(size));
    }
    let rows: Vec<&[f32]> = sets.iter().flat_map(|s| s.rows()).collect();
    if rows.len() < size {
        return Err(RetrievalError::InsufficientDescriptors {
            needed: size,
            available: rows.len(),
        });
    }
    let dim = rows[0].len();

    // k-means++ seeding
    let mut chosen = vec![rng.random_range(0..rows.len())];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, rows[chosen[0]])).collect();
    while chosen.len() < size {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if t < d {
                        break;
                    }
                    t -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every remaining row duplicates a center
            let free: Vec<usize> = (0..rows.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, rows[pick]));
        }
    }
    let mut centers: Vec<f32> = chosen.iter().flat_map(|&i| rows[i].iter().copied()).collect();

    let mut prev = f64::INFINITY;
    let mut info = KmeansInfo {
        iterations: 0,
        inertia: 0.0,
    };
    for it in 1..=KMEANS_MAX_ITERS {
        let vocab = Vocabulary {
            size,
            dim,
            centers: centers.clone(),
        };
        let assign: Vec<(usize, f64)> = rows.par_iter().map(|r| vocab.assign(r)).collect();
        let inertia: f64 = assign.iter().map(|a| a.1).sum();
        info = KmeansInfo { iterations: it, inertia };
        let mut sums = vec![0.0f64; size * dim];
        let mut counts = vec![0usize; size];
        for (r, &(c, _)) in rows.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(r.iter()) {
                *s += *v as f64;
            }
        }
        for c in 0..size {
            if counts[c] > 0 {
                for k in 0..dim {
                    centers[c * dim + k] = (sums[c * dim + k] / counts[c] as f64) as f32;
                }
            }
        }
        let converged = inertia == 0.0 || (prev - inertia).abs() <= KMEANS_REL_TOL * prev;
        prev = inertia;
        if converged {
            break;
        }
    }
    Ok((Vocabulary::new(size, dim, centers)?, info))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub histogram: Vec<f64>,
    /// No descriptors were available; the histogram is all zeros.
    pub degenerate: bool,
}

/// Raw word counts of a descriptor set.
pub fn word_counts(ds: &DescriptorSet, vocab: &Vocabulary) -> Vec<f64> {
    let mut h = vec![0.0; vocab.size()];
    for r in ds.rows() {
        h[vocab.assign(r).0] += 1.0;
    }
    h
}

/// Hard-assigned word histogram, optionally idf-weighted, L2-normalized.
pub fn global_descriptor(ds: &DescriptorSet, vocab: &Vocabulary, idf: Option<&[f64]>) -> GlobalDescriptor {
    global_from_counts(word_counts(ds, vocab), idf)
}

pub fn global_from_counts(mut h: Vec<f64>, idf: Option<&[f64]>) -> GlobalDescriptor {
    if let Some(w) = idf {
        for (v, w) in h.iter_mut().zip(w) {
            *v *= w;
        }
    }
    let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return GlobalDescriptor {
            histogram: h,
            degenerate: true,
        };
    }
    h.iter_mut().for_each(|v| *v /= n);
    GlobalDescriptor {
        histogram: h,
        degenerate: false,
    }
}

/// `ln(N / df)` per word over gallery count vectors; unseen words get 0.
pub fn idf_weights(counts: &[Vec<f64>], size: usize) -> Vec<f64> {
    let n = counts.len() as f64;
    (0..size)
        .map(|w| {
            let df = counts.iter().filter(|c| c[w] > 0.0).count();
            if df == 0 {
                0.0
            } else {
                (n / df as f64).ln()
            }
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// The `k` gallery entries closest to `q`, ascending distance, ties by index.
pub fn query(gallery: &[GlobalDescriptor], q: &GlobalDescriptor, k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (i, euclid(&g.histogram, &q.histogram)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// Fraction of queries whose label appears among the first `k` results.
pub fn accuracy_at_k(rankings: &[Vec<usize>], query_labels: &[String], gallery_labels: &[String], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(query_labels)
        .filter(|(r, l)| r.iter().take(k).any(|&g| &gallery_labels[g] == *l))
        .count();
    hits as f64 / rankings.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub vocab_size: usize,
    pub num_kpts: usize,
    pub idf: bool,
    /// K values reported.
    pub ks: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_kpts: 1024,
            idf: false,
            ks: vec![1, 5, 10, 20],
        }
    }
}

/// Object label of an image file: the stem up to the first `_`.
pub fn label_of(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.split('_').next().unwrap_or_default().to_string()
}

pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, RetrievalError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(RetrievalError::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(out)
}

/// Detects and describes every image in `paths`.
pub fn describe_all(
    paths: &[PathBuf],
    detector: &dyn Detector,
    plugin: &dyn FeaturePlugin,
    k: usize,
) -> Result<Vec<DescriptorSet>, RetrievalError> {
    paths
        .par_iter()
        .map(|p| {
            let img = Raster::load(p)?;
            let kps = detector.detect(&img, k)?;
            Ok(plugin.describe(&img, &kps)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub path: PathBuf,
    pub label: String,
    pub descriptor: GlobalDescriptor,
}

/// Persisted gallery: vocabulary file name, idf weights and descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryIndex {
    pub vocabulary: String,
    pub idf: Option<Vec<f64>>,
    pub kmeans: KmeansInfo,
    pub entries: Vec<GalleryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub path: PathBuf,
    pub label: String,
    pub ranking: Vec<usize>,
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub accuracy: BTreeMap<usize, f64>,
    pub queries: Vec<QueryResult>,
}

pub const VOCAB_FILE: &str = "vocabulary.nrkv";
pub const INDEX_FILE: &str = "gallery.json";
pub const RETRIEVAL_REPORT_FILE: &str = "retrieval.json";

/// Builds the vocabulary on the gallery, indexes it and ranks every query.
pub fn run_retrieval(
    gallery_dir: &Path,
    query_dir: &Path,
    detector: &dyn Detector,
    plugin: &dyn FeaturePlugin,
    cfg: &RetrievalConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(GalleryIndex, RetrievalReport), RetrievalError> {
    let gallery_paths = list_images(gallery_dir)?;
    let query_paths = list_images(query_dir)?;
    let gallery_sets = describe_all(&gallery_paths, detector, plugin, cfg.num_kpts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, kmeans) = build_vocabulary(&gallery_sets, cfg.vocab_size, &mut rng)?;
    let counts: Vec<Vec<f64>> = gallery_sets.iter().map(|s| word_counts(s, &vocab)).collect();
    let idf = cfg.idf.then(|| idf_weights(&counts, vocab.size()));
    let entries: Vec<GalleryEntry> = gallery_paths
        .iter()
        .zip(counts)
        .map(|(p, c)| GalleryEntry {
            path: p.clone(),
            label: label_of(p),
            descriptor: global_from_counts(c, idf.as_deref()),
        })
        .collect();
    let gallery: Vec<GlobalDescriptor> = entries.iter().map(|e| e.descriptor.clone()).collect();
    let gallery_labels: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();

    let query_sets = describe_all(&query_paths, detector, plugin, cfg.num_kpts)?;
    let queries: Vec<QueryResult> = query_paths
        .iter()
        .zip(&query_sets)
        .map(|(p, s)| {
            let g = global_descriptor(s, &vocab, idf.as_deref());
            let r = query(&gallery, &g, gallery.len());
            QueryResult {
                path: p.clone(),
                label: label_of(p),
                ranking: r.iter().map(|x| x.0).collect(),
                distances: r.iter().map(|x| x.1).collect(),
            }
        })
        .collect();
    let rankings: Vec<Vec<usize>> = queries.iter().map(|q| q.ranking.clone()).collect();
    let labels: Vec<String> = queries.iter().map(|q| q.label.clone()).collect();
    let accuracy = cfg
        .ks
        .iter()
        .map(|&k| (k, accuracy_at_k(&rankings, &labels, &gallery_labels, k)))
        .collect();
    let index = GalleryIndex {
        vocabulary: VOCAB_FILE.into(),
        idf,
        kmeans,
        entries,
    };
    let report = RetrievalReport { accuracy, queries };
    if let Some(out) = out_dir {
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        vocab.save(&out.join(VOCAB_FILE))?;
        for (name, text) in [
            (INDEX_FILE, serde_json::to_string_pretty(&index)),
            (RETRIEVAL_REPORT_FILE, serde_json::to_string_pretty(&report)),
        ] {
            let p = out.join(name);
            std::fs::write(&p, text.expect("serializes")).map_err(io_err(&p))?;
        }
    }
    Ok((index, report))
}

/// Synthetic retrieval set: `objects` procedural scenes as the gallery and
/// one warped, photometrically augmented view of each as a query.
pub fn generate_retrieval_set(
    cfg: &crate::synth::SynthConfig,
    seed: u64,
    gallery_dir: &Path,
    query_dir: &Path,
) -> Result<(), RetrievalError> {
    for d in [gallery_dir, query_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let t = crate::synth::triplet_for_index(cfg, &[], crate::util::derive_seed(seed, i as u64))
                .map_err(EvalError::from)?;
            t.anchor.save_png8(gallery_dir.join(format!("obj{i:03}.png")))?;
            t.warped_1.save_png8(query_dir.join(format!("obj{i:03}_q.png")))?;
            Ok(())
        })
        .collect()
}
