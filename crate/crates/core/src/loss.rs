//! Detector training losses with analytic gradients w.r.t. the score map.
//!
//! All maps are flat row-major `f64` slices of one image. `F` is the
//! sampling mask: the positive peak pixels plus as many sampled negatives.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::Peak;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("target is zero under the sampling mask")]
    DegenerateTarget,
    #[error("no patch contains a nonzero target pixel")]
    NoActivePatches,
    #[error("only {available} eligible negative pixels for {needed} positives")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("map sizes differ: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// A loss value and its gradient w.r.t. every score-map pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check(s: &[f64], m: &[f64], f: Option<&[bool]>) -> Result<(), LossError> {
    if s.len() != m.len() || f.is_some_and(|f| f.len() != s.len()) {
        return Err(LossError::ShapeMismatch(format!(
            "S {} M {} F {:?}",
            s.len(),
            m.len(),
            f.map(|f| f.len())
        )));
    }
    Ok(())
}

/// `1 - cos(S*F, M*F)`.
pub fn loss_cossim(s: &[f64], m: &[f64], f: &[bool]) -> Result<LossTerm, LossError> {
    check(s, m, Some(f))?;
    let (mut dot, mut ss, mut mm) = (0.0, 0.0, 0.0);
    for i in 0..s.len() {
        if f[i] {
            dot += s[i] * m[i];
            ss += s[i] * s[i];
            mm += m[i] * m[i];
        }
    }
    if mm == 0.0 {
        return Err(LossError::DegenerateTarget);
    }
    let mut grad = vec![0.0; s.len()];
    if ss == 0.0 {
        return Ok(LossTerm { value: 1.0, grad });
    }
    let (ns, nm) = (ss.sqrt(), mm.sqrt());
    let cos = dot / (ns * nm);
    for i in 0..s.len() {
        if f[i] {
            grad[i] = -(m[i] / (ns * nm) - cos * s[i] / ss);
        }
    }
    Ok(LossTerm { value: 1.0 - cos, grad })
}

/// Positives under the mask: pixels in `F` with a nonzero target.
pub fn positive_count(m: &[f64], f: &[bool]) -> usize {
    m.iter().zip(f).filter(|(&v, &k)| k && v > 0.0).count()
}

/// `sum((S*F - M*F)^2) / 2n` with `n` the number of positives under `F`.
pub fn loss_simple(s: &[f64], m: &[f64], f: &[bool]) -> Result<LossTerm, LossError> {
    check(s, m, Some(f))?;
    let n = positive_count(m, f);
    if n == 0 {
        return Err(LossError::DegenerateTarget);
    }
    let n = n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; s.len()];
    for i in 0..s.len() {
        if f[i] {
            let d = s[i] - m[i];
            value += d * d;
            grad[i] = d / n;
        }
    }
    Ok(LossTerm {
        value: value / (2.0 * n),
        grad,
    })
}

/// Patch extents along one axis: full `n`-wide steps from 0, plus a trailing
/// partial patch when it is at least half as wide.
pub fn patch_spans(len: usize, n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + n).min(len);
        if end - start == n || 2 * (end - start) >= n {
            out.push((start, end));
        }
        start += n;
    }
    out
}

/// `1 - mean over active patches of (max S - mean S)` on the raw score map,
/// accumulated as the mean of `1 - max + mean` per patch.
/// A patch is active when it holds a nonzero target pixel.
pub fn loss_peak(s: &[f64], m: &[f64], width: usize, height: usize, n: usize) -> Result<LossTerm, LossError> {
    check(s, m, None)?;
    if s.len() != width * height {
        return Err(LossError::ShapeMismatch(format!("{} pixels for {width}x{height}", s.len())));
    }
    if n < 3 || n % 2 == 0 {
        return Err(LossError::InvalidConfig(format!("peak window {n} must be odd and >= 3")));
    }
    let mut patches = Vec::new();
    for &(y0, y1) in &patch_spans(height, n) {
        for &(x0, x1) in &patch_spans(width, n) {
            let active = (y0..y1).any(|y| (x0..x1).any(|x| m[y * width + x] != 0.0));
            if active {
                patches.push((x0, x1, y0, y1));
            }
        }
    }
    if patches.is_empty() {
        return Err(LossError::NoActivePatches);
    }
    let np = patches.len() as f64;
    let mut grad = vec![0.0; s.len()];
    let mut acc = 0.0;
    for &(x0, x1, y0, y1) in &patches {
        let count = ((x1 - x0) * (y1 - y0)) as f64;
        let mut best = y0 * width + x0;
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * width + x;
                sum += s[i];
                if s[i] > s[best] {
                    best = i;
                }
            }
        }
        acc += (1.0 - s[best]) + sum / count;
        for y in y0..y1 {
            for x in x0..x1 {
                grad[y * width + x] += 1.0 / (np * count);
            }
        }
        grad[best] -= 1.0 / np;
    }
    Ok(LossTerm { value: acc / np, grad })
}

/// Which terms enter the weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossCombination {
    /// cossim + simple + peak
    #[default]
    All,
    CossimSimple,
    CossimPeak,
    SimplePeak,
    Cossim,
    Simple,
}

impl LossCombination {
    /// `(cossim, simple, peak)` switches.
    pub fn terms(self) -> (bool, bool, bool) {
        match self {
            LossCombination::All => (true, true, true),
            LossCombination::CossimSimple => (true, true, false),
            LossCombination::CossimPeak => (true, false, true),
            LossCombination::SimplePeak => (false, true, true),
            LossCombination::Cossim => (true, false, false),
            LossCombination::Simple => (false, true, false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cossim: f64,
    pub lambda_simple: f64,
    pub lambda_peak: f64,
    pub peak_window: usize,
    pub combination: LossCombination,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cossim: 3.0,
            lambda_simple: 1.0,
            lambda_peak: 0.3,
            peak_window: 5,
            combination: LossCombination::All,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let l = [self.lambda_cossim, self.lambda_simple, self.lambda_peak];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::InvalidConfig("lambdas must be finite and >= 0".into()));
        }
        if self.peak_window < 3 || self.peak_window % 2 == 0 {
            return Err(LossError::InvalidConfig("peak_window must be odd and >= 3".into()));
        }
        Ok(())
    }
}

/// Weighted sum and its parts. Disabled terms report 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub cossim: f64,
    pub simple: f64,
    pub peak: f64,
    pub grad: Vec<f64>,
}

pub fn total_loss(
    s: &[f64],
    m: &[f64],
    f: &[bool],
    width: usize,
    height: usize,
    cfg: &LossConfig,
) -> Result<TotalLoss, LossError> {
    cfg.validate()?;
    let (use_c, use_s, use_p) = cfg.combination.terms();
    let mut out = TotalLoss {
        value: 0.0,
        cossim: 0.0,
        simple: 0.0,
        peak: 0.0,
        grad: vec![0.0; s.len()],
    };
    let add = |t: LossTerm, lambda: f64, slot: &mut f64, out_v: &mut f64, grad: &mut [f64]| {
        *slot = t.value;
        *out_v += lambda * t.value;
        for (g, d) in grad.iter_mut().zip(&t.grad) {
            *g += lambda * d;
        }
    };
    if use_c {
        let t = loss_cossim(s, m, f)?;
        add(t, cfg.lambda_cossim, &mut out.cossim, &mut out.value, &mut out.grad);
    }
    if use_s {
        let t = loss_simple(s, m, f)?;
        add(t, cfg.lambda_simple, &mut out.simple, &mut out.value, &mut out.grad);
    }
    if use_p {
        let t = loss_peak(s, m, width, height, cfg.peak_window)?;
        add(t, cfg.lambda_peak, &mut out.peak, &mut out.value, &mut out.grad);
    }
    Ok(out)
}

/// Positives at the peak pixels plus `n` negatives drawn without replacement
/// from valid zero-target pixels outside every positive's 3x3 neighborhood.
pub fn sample_negative_mask<R: Rng + ?Sized>(
    peaks: &[Peak],
    m: &[f64],
    valid: Option<&[bool]>,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<Vec<bool>, LossError> {
    if m.len() != width * height || valid.is_some_and(|v| v.len() != m.len()) {
        return Err(LossError::ShapeMismatch("negative sampling inputs".into()));
    }
    let mut f = vec![false; m.len()];
    let mut blocked = vec![false; m.len()];
    for p in peaks.iter().filter(|p| p.weight > 0.0) {
        if p.x >= width || p.y >= height {
            return Err(LossError::ShapeMismatch(format!("peak ({}, {}) outside map", p.x, p.y)));
        }
        f[p.y * width + p.x] = true;
        for y in p.y.saturating_sub(1)..=(p.y + 1).min(height - 1) {
            for x in p.x.saturating_sub(1)..=(p.x + 1).min(width - 1) {
                blocked[y * width + x] = true;
            }
        }
    }
    let n = f.iter().filter(|&&v| v).count();
    let eligible: Vec<usize> = (0..m.len())
        .filter(|&i| !blocked[i] && m[i] == 0.0 && valid.is_none_or(|v| v[i]))
        .collect();
    if eligible.len() < n {
        return Err(LossError::InsufficientNegatives {
            needed: n,
            available: eligible.len(),
        });
    }
    for j in rand::seq::index::sample(rng, eligible.len(), n) {
        f[eligible[j]] = true;
    }
    Ok(f)
}
