//! U-Net score-map regressor and its weight file.
//!
//! Layout for the default dims: three encoder levels (32, 64, 128 channels at
//! 1, 1/2, 1/4 resolution) and a 128-channel bottleneck at 1/8, each with two
//! 3x3 conv + batch-norm + ReLU layers and 2x2 max pooling in between. The
//! decoder walks the widths `decoder_dims` back up: bilinear 2x upsampling,
//! a conv, concatenation with the matching encoder output, then two convs.
//! A 1x1 conv and a sigmoid produce the score map.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Param, Tensor};
use crate::raster::Raster;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0} is not implemented")]
    Unimplemented(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {width}x{height} is not divisible by {multiple}")]
    ShapeError {
        width: usize,
        height: usize,
        multiple: usize,
    },
    #[error("weight file config does not match: {0}")]
    ConfigMismatch(String),
    #[error("corrupt weight file {path}: {message}")]
    CorruptFile { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Plain,
    DcnEncoder,
    DcnDecoder,
    DcnAll,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_dims: Vec<usize>,
    pub decoder_dims: Vec<usize>,
    pub variant: Variant,
    /// Reflect-pad inputs to a multiple of 8 and crop the output back.
    pub pad_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_dims: vec![1, 32, 64, 128],
            decoder_dims: vec![128, 64, 32, 1],
            variant: Variant::Plain,
            pad_input: true,
        }
    }
}

/// Spatial dims must be multiples of this (three poolings).
pub const SIZE_MULTIPLE: usize = 8;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.variant != Variant::Plain {
            return Err(ModelError::Unimplemented(format!("deformable conv variant {:?}", self.variant)));
        }
        let e = &self.encoder_dims;
        let d = &self.decoder_dims;
        if e.len() != 4 || d.len() != 4 {
            return Err(ModelError::InvalidConfig("encoder_dims and decoder_dims need 4 entries".into()));
        }
        if e[0] != 1 || d[3] != 1 {
            return Err(ModelError::InvalidConfig("input and output must have 1 channel".into()));
        }
        if d[0] != e[3] {
            return Err(ModelError::InvalidConfig("decoder_dims[0] must equal encoder_dims[3]".into()));
        }
        if e.iter().chain(d).any(|&c| c == 0) {
            return Err(ModelError::InvalidConfig("zero channel count".into()));
        }
        Ok(())
    }

    /// Output widths of the three decoder stages.
    fn stage_widths(&self) -> [usize; 3] {
        let d = &self.decoder_dims;
        [d[1], d[2], d[2]]
    }
}

/// 3x3 conv (no bias) + batch norm + ReLU.
#[derive(Clone, Debug)]
struct ConvBn {
    cout: usize,
    weight: Param,
    gamma: Param,
    beta: Param,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
}

struct ConvBnCache {
    x: Tensor,
    y: Tensor,
    bn: nn::BnCache,
}

impl ConvBn {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let w: Vec<f32> = (0..cout * cin * 9).map(|_| dist.sample(rng) as f32).collect();
        Self {
            cout,
            weight: Param::new(format!("{name}.weight"), vec![cout, cin, 3, 3], w),
            gamma: Param::new(format!("{name}.gamma"), vec![cout], vec![1.0; cout]),
            beta: Param::new(format!("{name}.beta"), vec![cout], vec![0.0; cout]),
            running_mean: vec![0.0; cout],
            running_var: vec![1.0; cout],
        }
    }

    fn forward(&mut self, x: Tensor, train: bool) -> (Tensor, Option<ConvBnCache>) {
        let z = nn::conv_forward(&x, &self.weight.value, None, self.cout, 3);
        let (mut y, bn) = nn::bn_forward(
            &z,
            &self.gamma.value,
            &self.beta.value,
            &mut self.running_mean,
            &mut self.running_var,
            train,
        );
        nn::relu_inplace(&mut y);
        match bn {
            Some(bn) => (y.clone(), Some(ConvBnCache { x, y, bn })),
            None => (y, None),
        }
    }

    fn backward(&mut self, mut dy: Tensor, cache: ConvBnCache) -> Tensor {
        nn::relu_backward_inplace(&mut dy, &cache.y);
        let dz = nn::bn_backward(&dy, &cache.bn, &self.gamma.value, &mut self.gamma.grad, &mut self.beta.grad);
        nn::conv_backward(&cache.x, &self.weight.value, &dz, 3, &mut self.weight.grad, None)
    }

    fn params_mut(&mut self) -> [&mut Param; 3] {
        [&mut self.weight, &mut self.gamma, &mut self.beta]
    }

    fn params(&self) -> [&Param; 3] {
        [&self.weight, &self.gamma, &self.beta]
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvBn,
    conv1: ConvBn,
    conv2: ConvBn,
}

struct StageCache {
    up_x_shape: (usize, usize),
    up: ConvBnCache,
    skip_c: usize,
    conv1: ConvBnCache,
    conv2: ConvBnCache,
}

/// Per-layer activations kept for the backward pass.
pub struct ForwardCache {
    enc: Vec<[ConvBnCache; 2]>,
    pool_args: Vec<(Vec<u32>, usize, usize)>,
    bottleneck: [ConvBnCache; 2],
    dec: Vec<StageCache>,
    head_x: Tensor,
    /// Sigmoid output, `n x 1 x h x w`.
    pub scores: Tensor,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: ModelConfig,
    enc: Vec<[ConvBn; 2]>,
    bottleneck: [ConvBn; 2],
    dec: Vec<DecoderStage>,
    head_w: Param,
    head_b: Param,
}

/// Builds a model with Kaiming-normal conv weights drawn from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<UNet, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = &cfg.encoder_dims;
    let mut enc = Vec::new();
    for l in 0..3 {
        let name = format!("enc{l}");
        enc.push([
            ConvBn::new(&format!("{name}.0"), e[l], e[l + 1], &mut rng),
            ConvBn::new(&format!("{name}.1"), e[l + 1], e[l + 1], &mut rng),
        ]);
    }
    let bottleneck = [
        ConvBn::new("mid.0", e[3], e[3], &mut rng),
        ConvBn::new("mid.1", e[3], e[3], &mut rng),
    ];
    let widths = cfg.stage_widths();
    let mut dec = Vec::new();
    let mut cin = e[3];
    for (s, &cout) in widths.iter().enumerate() {
        let skip = e[3 - s];
        let name = format!("dec{s}");
        dec.push(DecoderStage {
            up: ConvBn::new(&format!("{name}.up"), cin, cout, &mut rng),
            conv1: ConvBn::new(&format!("{name}.0"), cout + skip, cout, &mut rng),
            conv2: ConvBn::new(&format!("{name}.1"), cout, cout, &mut rng),
        });
        cin = cout;
    }
    let std = (2.0 / cin as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let hw: Vec<f32> = (0..cin).map(|_| dist.sample(&mut rng) as f32).collect();
    Ok(UNet {
        cfg: cfg.clone(),
        enc,
        bottleneck,
        dec,
        head_w: Param::new("head.weight", vec![1, cin, 1, 1], hw),
        head_b: Param::new("head.bias", vec![1], vec![0.0]),
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Reflect-pads to `(w, h)`, keeping the original at the top-left.
pub fn reflect_pad(img: &Raster, w: usize, h: usize) -> Raster {
    let (iw, ih) = img.shape();
    Raster::from_fn(w, h, |x, y| img.get(reflect(x as isize, iw), reflect(y as isize, ih)))
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

impl UNet {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for lvl in &self.enc {
            for c in lvl {
                out.extend(c.params());
            }
        }
        for c in &self.bottleneck {
            out.extend(c.params());
        }
        for s in &self.dec {
            for c in [&s.up, &s.conv1, &s.conv2] {
                out.extend(c.params());
            }
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for lvl in &mut self.enc {
            for c in lvl.iter_mut() {
                out.extend(c.params_mut());
            }
        }
        for c in &mut self.bottleneck {
            out.extend(c.params_mut());
        }
        for s in &mut self.dec {
            out.extend(s.up.params_mut());
            out.extend(s.conv1.params_mut());
            out.extend(s.conv2.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn conv_bns(&self) -> Vec<&ConvBn> {
        let mut v: Vec<&ConvBn> = Vec::new();
        for lvl in &self.enc {
            v.extend(lvl.iter());
        }
        v.extend(self.bottleneck.iter());
        for s in &self.dec {
            v.extend([&s.up, &s.conv1, &s.conv2]);
        }
        v
    }

    fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut v: Vec<&mut ConvBn> = Vec::new();
        for lvl in &mut self.enc {
            v.extend(lvl.iter_mut());
        }
        v.extend(self.bottleneck.iter_mut());
        for s in &mut self.dec {
            v.push(&mut s.up);
            v.push(&mut s.conv1);
            v.push(&mut s.conv2);
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Batch forward on `n x 1 x h x w` with `h`, `w` multiples of 8.
    /// `train` uses batch statistics and keeps the activations for [`UNet::backward`].
    pub fn forward_batch(&mut self, x: Tensor, train: bool) -> Result<(Tensor, Option<ForwardCache>), ModelError> {
        if x.h % SIZE_MULTIPLE != 0 || x.w % SIZE_MULTIPLE != 0 {
            return Err(ModelError::ShapeError {
                width: x.w,
                height: x.h,
                multiple: SIZE_MULTIPLE,
            });
        }
        assert_eq!(x.c, 1, "single-channel input");
        let mut enc_caches = Vec::new();
        let mut pool_args = Vec::new();
        let mut skips = Vec::new();
        let mut h = x;
        for lvl in self.enc.iter_mut() {
            let (a, ca) = lvl[0].forward(h, train);
            let (b, cb) = lvl[1].forward(a, train);
            let (p, arg) = nn::maxpool2_forward(&b);
            pool_args.push((arg, b.h, b.w));
            skips.push(b);
            if train {
                enc_caches.push([ca.unwrap(), cb.unwrap()]);
            }
            h = p;
        }
        let (a, ca) = self.bottleneck[0].forward(h, train);
        let (mut h, cb) = self.bottleneck[1].forward(a, train);
        let mid_cache = if train { Some([ca.unwrap(), cb.unwrap()]) } else { None };
        let mut dec_caches = Vec::new();
        for (s, stage) in self.dec.iter_mut().enumerate() {
            let skip = &skips[2 - s];
            let up_x_shape = (h.h, h.w);
            let u = nn::upsample2_forward(&h);
            let (u, cu) = stage.up.forward(u, train);
            let cat = nn::concat(&u, skip);
            let (a, c1) = stage.conv1.forward(cat, train);
            let (b, c2) = stage.conv2.forward(a, train);
            if train {
                dec_caches.push(StageCache {
                    up_x_shape,
                    up: cu.unwrap(),
                    skip_c: skip.c,
                    conv1: c1.unwrap(),
                    conv2: c2.unwrap(),
                });
            }
            h = b;
        }
        let mut z = nn::conv_forward(&h, &self.head_w.value, Some(&self.head_b.value), 1, 1);
        z.data.iter_mut().for_each(|v| *v = nn::sigmoid(*v));
        if !train {
            return Ok((z, None));
        }
        let cache = ForwardCache {
            enc: enc_caches,
            pool_args,
            bottleneck: mid_cache.unwrap(),
            dec: dec_caches,
            head_x: h,
            scores: z.clone(),
        };
        Ok((z, Some(cache)))
    }

    /// Accumulates parameter gradients given `dL/dS` for the sigmoid output.
    pub fn backward(&mut self, d_scores: &Tensor, cache: ForwardCache) {
        let ForwardCache {
            enc,
            pool_args,
            bottleneck,
            dec,
            head_x,
            scores,
        } = cache;
        assert!(d_scores.same_shape(&scores));
        let mut dz = d_scores.clone();
        for (g, &s) in dz.data.iter_mut().zip(&scores.data) {
            *g *= s * (1.0 - s);
        }
        let mut dh = nn::conv_backward(
            &head_x,
            &self.head_w.value,
            &dz,
            1,
            &mut self.head_w.grad,
            Some(&mut self.head_b.grad),
        );
        let mut dskips: Vec<Option<Tensor>> = vec![None, None, None];
        for (s, sc) in dec.into_iter().enumerate().rev() {
            let stage = &mut self.dec[s];
            let da = stage.conv2.backward(dh, sc.conv2);
            let dcat = stage.conv1.backward(da, sc.conv1);
            let (du, dskip) = nn::split(&dcat, dcat.c - sc.skip_c);
            dskips[2 - s] = Some(dskip);
            let du = stage.up.backward(du, sc.up);
            let d = nn::upsample2_backward(&du);
            debug_assert_eq!((d.h, d.w), sc.up_x_shape);
            dh = d;
        }
        let [m0, m1] = bottleneck;
        let da = self.bottleneck[1].backward(dh, m1);
        dh = self.bottleneck[0].backward(da, m0);
        for (l, [c0, c1]) in enc.into_iter().enumerate().rev() {
            let (arg, ph, pw) = &pool_args[l];
            let mut db = nn::maxpool2_backward(&dh, arg, *ph, *pw);
            nn::add_inplace(&mut db, dskips[l].as_ref().expect("decoder fills every skip"));
            let da = self.enc[l][1].backward(db, c1);
            dh = self.enc[l][0].backward(da, c0);
        }
    }

    /// Inference on one image. Non-multiple-of-8 inputs are reflect-padded
    /// and the output is cropped back when `pad_input` is set.
    pub fn forward(&self, image: &Raster) -> Result<Raster, ModelError> {
        let out = self.forward_many(std::slice::from_ref(image))?;
        Ok(out.into_iter().next().expect("one output"))
    }

    /// Inference on images that share a shape.
    pub fn forward_many(&self, images: &[Raster]) -> Result<Vec<Raster>, ModelError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (w, h) = images[0].shape();
        assert!(images.iter().all(|i| i.shape() == (w, h)), "images must share a shape");
        let (pw, ph) = if self.cfg.pad_input {
            (round_up(w, SIZE_MULTIPLE), round_up(h, SIZE_MULTIPLE))
        } else {
            (w, h)
        };
        let mut data = Vec::with_capacity(images.len() * pw * ph);
        for img in images {
            if (pw, ph) == (w, h) {
                data.extend_from_slice(img.data());
            } else {
                data.extend_from_slice(reflect_pad(img, pw, ph).data());
            }
        }
        let x = Tensor::from_vec(images.len(), 1, ph, pw, data);
        let mut this = self.clone();
        let (s, _) = this.forward_batch(x, false)?;
        Ok((0..images.len())
            .map(|i| {
                let item = s.item(i);
                Raster::from_fn(w, h, |x, y| item[y * pw + x])
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes();
        std::fs::write(path, bytes).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<UNet, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_bytes(&bytes, expected).map_err(|e| match e {
            ModelError::CorruptFile { message, .. } => ModelError::CorruptFile {
                path: path.display().to_string(),
                message,
            },
            e => e,
        })
    }

    /// Every stored array: trainable parameters followed by batch-norm running statistics.
    fn blobs(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.value.as_slice()))
            .collect();
        for c in self.conv_bns() {
            let base = c.weight.name.trim_end_matches(".weight");
            out.push((format!("{base}.running_mean"), vec![c.cout], &c.running_mean));
            out.push((format!("{base}.running_var"), vec![c.cout], &c.running_var));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs = self.blobs();
        let header = WeightHeader {
            config: self.cfg.clone(),
            config_hash: crate::util::config_hash(&self.cfg),
            tensors: blobs
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let hj = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hj.len() as u32).to_le_bytes());
        out.extend_from_slice(&hj);
        for (_, _, v) in blobs {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<UNet, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptFile {
            path: "<memory>".into(),
            message: m.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != WEIGHT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != WEIGHT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(corrupt("truncated header"));
        }
        let header: WeightHeader =
            serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
        if crate::util::config_hash(&header.config) != header.config_hash {
            return Err(corrupt("config hash does not match header config"));
        }
        if let Some(exp) = expected {
            if exp != &header.config {
                return Err(ModelError::ConfigMismatch(format!(
                    "file has {:?}/{:?}, expected {:?}/{:?}",
                    header.config.encoder_dims, header.config.decoder_dims, exp.encoder_dims, exp.decoder_dims
                )));
            }
        }
        let mut model = build_model(&header.config, 0)?;
        let layout: Vec<(String, Vec<usize>)> =
            model.blobs().into_iter().map(|(n, s, _)| (n, s)).collect();
        let stored: Vec<(String, Vec<usize>)> =
            header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if layout != stored {
            return Err(ModelError::ConfigMismatch("tensor layout differs from config".into()));
        }
        let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let body = &bytes[12 + hlen..];
        if body.len() != total * 4 {
            return Err(corrupt(&format!("{} payload bytes, expected {}", body.len(), total * 4)));
        }
        let mut vals = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for p in model.params_mut() {
            for v in p.value.iter_mut() {
                *v = vals.next().expect("length checked");
            }
        }
        for c in model.conv_bns_mut() {
            for v in c.running_mean.iter_mut().chain(c.running_var.iter_mut()) {
                *v = vals.next().expect("length checked");
            }
        }
        Ok(model)
    }
}

pub const WEIGHT_MAGIC: &[u8; 4] = b"NRKW";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder_dims: vec![1, 4, 4, 8],
            decoder_dims: vec![8, 4, 4, 1],
            ..Default::default()
        }
    }

    #[test]
    fn dcn_variants_are_unimplemented() {
        for v in [Variant::DcnEncoder, Variant::DcnDecoder, Variant::DcnAll] {
            let cfg = ModelConfig { variant: v, ..Default::default() };
            assert!(matches!(build_model(&cfg, 0), Err(ModelError::Unimplemented(_))));
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_model(&tiny(), 7).unwrap();
        let b = build_model(&tiny(), 7).unwrap();
        let c = build_model(&tiny(), 8).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn padded_output_keeps_shape_and_range() {
        let m = build_model(&tiny(), 1).unwrap();
        let img = Raster::from_fn(21, 13, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        let s = m.forward(&img).unwrap();
        assert_eq!(s.shape(), (21, 13));
        let (lo, hi) = s.min_max();
        assert!(lo > 0.0 && hi < 1.0);
        assert_eq!(m.forward(&img).unwrap(), s);
    }

    #[test]
    fn unpadded_bad_shape_errors() {
        let cfg = ModelConfig { pad_input: false, ..tiny() };
        let m = build_model(&cfg, 1).unwrap();
        assert!(matches!(
            m.forward(&Raster::new(20, 16)),
            Err(ModelError::ShapeError { .. })
        ));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn weight_round_trip_and_errors() {
        let m = build_model(&tiny(), 3).unwrap();
        let bytes = m.to_bytes();
        let back = UNet::from_bytes(&bytes, Some(&tiny())).unwrap();
        let img = Raster::from_fn(16, 16, |x, y| ((x ^ y) % 5) as f32 / 4.0);
        assert_eq!(m.forward(&img).unwrap(), back.forward(&img).unwrap());
        assert!(matches!(
            UNet::from_bytes(&bytes[..bytes.len() - 3], None),
            Err(ModelError::CorruptFile { .. })
        ));
        assert!(matches!(
            UNet::from_bytes(&bytes, Some(&ModelConfig::default())),
            Err(ModelError::ConfigMismatch(_))
        ));
    }

    /// Finite differences through the whole network, one probe per parameter
    /// tensor. ReLU kinks and f32 rounding make single probes noisy, so a small
    /// fraction of misses is tolerated.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny();
        let mut m = build_model(&cfg, 5).unwrap();
        let x = Tensor::from_vec(
            2,
            1,
            8,
            8,
            (0..128).map(|i| ((i * 37 % 17) as f32) / 16.0).collect(),
        );
        let r: Vec<f32> = (0..128).map(|i| ((i * 13 % 7) as f32 - 3.0) / 3.0).collect();
        let loss = |m: &mut UNet| -> f64 {
            let (s, _) = m.forward_batch(x.clone(), true).unwrap();
            s.data.iter().zip(&r).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        m.zero_grad();
        let (_, cache) = m.forward_batch(x.clone(), true).unwrap();
        m.backward(&Tensor::from_vec(2, 1, 8, 8, r.clone()), cache.unwrap());
        let n = m.params().len();
        let eps = 1e-3f32;
        let mut misses = Vec::new();
        for pi in 0..n {
            let j = 1.min(m.params()[pi].value.len() - 1);
            let analytic = m.params()[pi].grad[j] as f64;
            let mut mp = m.clone();
            mp.params_mut()[pi].value[j] += eps;
            let mut mm = m.clone();
            mm.params_mut()[pi].value[j] -= eps;
            let fd = (loss(&mut mp) - loss(&mut mm)) / (2.0 * eps as f64);
            if (fd - analytic).abs() > 0.05 * fd.abs().max(analytic.abs()) + 0.01 {
                misses.push(format!("{}: fd {fd} vs {analytic}", m.params()[pi].name));
            }
        }
        assert!(misses.len() * 10 <= n, "{misses:?}");
    }
}
