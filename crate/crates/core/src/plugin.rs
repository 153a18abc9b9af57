//! External detector/descriptor plugins and the file exchange format.
//!
//! A plugin is a shell command template. Each invocation gets a fresh work
//! directory and a JSON request file; the command writes keypoints as CSV
//! (`x,y,score`) and descriptors as a little-endian `NRKD` binary.

use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::features::{BuiltinPlugin, DescriptorSet, FeaturePlugin, Keypoint, PluginError};
use crate::raster::Raster;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"NRKD";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
/// Rows whose norm differs from 1 by more than this are renormalized.
pub const UNIT_NORM_TOLERANCE: f32 = 1e-5;

fn io_err(path: &Path, source: std::io::Error) -> PluginError {
    PluginError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_keypoints_csv(path: &Path, kps: &[Keypoint]) -> Result<(), PluginError> {
    let mut s = String::from("x,y,score\n");
    for k in kps {
        s.push_str(&format!("{:.6},{:.6},{:.6}\n", k.x, k.y, k.score));
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

/// Reads `x,y,score` rows. A non-numeric first line is treated as a header.
pub fn read_keypoints_csv(path: &Path) -> Result<Vec<Keypoint>, PluginError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
        match parsed {
            Some(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => {
                out.push(Keypoint::new(v[0], v[1], v[2]))
            }
            None if i == 0 => continue,
            _ => {
                return Err(PluginError::Protocol(format!(
                    "{}:{}: expected `x,y,score`, got `{line}`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<(), PluginError> {
    let mut buf = Vec::with_capacity(12 + set.vectors().len() * 4);
    buf.extend_from_slice(DESCRIPTOR_MAGIC);
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    for v in set.vectors() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Returns `(n, d, row-major values)`.
pub fn read_descriptors(path: &Path) -> Result<(usize, usize, Vec<f32>), PluginError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != DESCRIPTOR_MAGIC {
        return Err(PluginError::Protocol(format!("{}: missing NRKD header", path.display())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + n * d * 4;
    if bytes.len() != expected {
        return Err(PluginError::Protocol(format!(
            "{}: {} bytes, expected {expected} for {n}x{d}",
            path.display(),
            bytes.len()
        )));
    }
    let vals: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(PluginError::Protocol(format!("{}: non-finite descriptor value", path.display())));
    }
    Ok((n, d, vals))
}

/// Checks keypoints against the image bounds and builds a validated set.
pub fn assemble(
    keypoints: Vec<Keypoint>,
    n: usize,
    d: usize,
    vectors: Vec<f32>,
    width: usize,
    height: usize,
) -> Result<DescriptorSet, PluginError> {
    check_bounds(&keypoints, width, height)?;
    if n != keypoints.len() {
        return Err(PluginError::Protocol(format!(
            "{n} descriptors for {} keypoints",
            keypoints.len()
        )));
    }
    if d == 0 && n > 0 {
        return Err(PluginError::Protocol("descriptor dimension is 0".into()));
    }
    let mut set = DescriptorSet::new(keypoints, d, vectors)?;
    let fixed = set.normalize_rows(UNIT_NORM_TOLERANCE)?;
    if fixed > 0 {
        log::warn!("plugin returned {fixed} non-unit descriptor rows; renormalized");
    }
    Ok(set)
}

fn check_bounds(kps: &[Keypoint], width: usize, height: usize) -> Result<(), PluginError> {
    for (i, k) in kps.iter().enumerate() {
        if !k.in_bounds(width, height) {
            return Err(PluginError::Protocol(format!(
                "keypoint {i} at ({}, {}) outside {width}x{height}",
                k.x, k.y
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginMode {
    /// Write keypoints only.
    Detect,
    /// Describe the given keypoints; may rewrite the keypoint file if some are dropped.
    Describe,
    /// Write both keypoints and descriptors.
    DetectDescribe,
}

impl fmt::Display for PluginMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PluginMode::Detect => "detect",
            PluginMode::Describe => "describe",
            PluginMode::DetectDescribe => "detect_describe",
        })
    }
}

#[derive(Serialize)]
struct Request<'a> {
    mode: PluginMode,
    image: &'a Path,
    k: usize,
    in_kpts: &'a Path,
    out_kpts: &'a Path,
    out_desc: &'a Path,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PluginKind {
    Builtin,
    External { template: String, timeout: Duration },
}

/// A named plugin as given on the command line: `name=<command template>`.
///
/// The template may use `{image}`, `{k}`, `{mode}`, `{request}`, `{workdir}`,
/// `{in_kpts}`, `{out_kpts}` and `{out_desc}`. The literal command `builtin`
/// selects the builtin detector/descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct PluginSpec {
    pub name: String,
    pub kind: PluginKind,
}

impl PluginSpec {
    pub fn builtin() -> Self {
        Self {
            name: "builtin".into(),
            kind: PluginKind::Builtin,
        }
    }

    pub fn external(name: impl Into<String>, template: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: PluginKind::External {
                template: template.into(),
                timeout: DEFAULT_TIMEOUT,
            },
        }
    }

    pub fn with_timeout(mut self, t: Duration) -> Self {
        if let PluginKind::External { timeout, .. } = &mut self.kind {
            *timeout = t;
        }
        self
    }

    pub fn parse(s: &str) -> Result<Self, PluginError> {
        let (name, cmd) = s
            .split_once('=')
            .ok_or_else(|| PluginError::Spec(format!("expected name=command, got `{s}`")))?;
        let name = name.trim();
        let cmd = cmd.trim();
        if name.is_empty() || cmd.is_empty() {
            return Err(PluginError::Spec(format!("empty name or command in `{s}`")));
        }
        if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(PluginError::Spec(format!("invalid plugin name `{name}`")));
        }
        if cmd == "builtin" {
            return Ok(Self {
                name: name.into(),
                kind: PluginKind::Builtin,
            });
        }
        Ok(Self::external(name, cmd))
    }

    pub fn instantiate(&self) -> Arc<dyn FeaturePlugin> {
        match &self.kind {
            PluginKind::Builtin => Arc::new(BuiltinPlugin),
            PluginKind::External { template, timeout } => Arc::new(ExternalPlugin {
                name: self.name.clone(),
                template: template.clone(),
                timeout: *timeout,
            }),
        }
    }
}

/// Root for plugin work directories: `$NRKD_CACHE/plugins` or the system temp dir.
pub fn work_root() -> PathBuf {
    match std::env::var_os("NRKD_CACHE") {
        Some(p) if !p.is_empty() => PathBuf::from(p).join("plugins"),
        _ => std::env::temp_dir().join("nrkd-plugins"),
    }
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

#[derive(Clone, Debug)]
pub struct ExternalPlugin {
    pub name: String,
    pub template: String,
    pub timeout: Duration,
}

struct Invocation {
    _dir: tempfile::TempDir,
    out_kpts: PathBuf,
    out_desc: PathBuf,
}

impl ExternalPlugin {
    fn invoke(
        &self,
        mode: PluginMode,
        image: &Path,
        k: usize,
        in_kpts: Option<&[Keypoint]>,
    ) -> Result<Invocation, PluginError> {
        let root = work_root();
        std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let dir = tempfile::Builder::new()
            .prefix(&format!("{}-", self.name))
            .tempdir_in(&root)
            .map_err(|e| io_err(&root, e))?;
        let wd = dir.path();
        let in_path = wd.join("in_kpts.csv");
        let out_kpts = wd.join("kpts.csv");
        let out_desc = wd.join("desc.bin");
        let request = wd.join("request.json");
        if let Some(kps) = in_kpts {
            write_keypoints_csv(&in_path, kps)?;
        }
        let req = Request {
            mode,
            image,
            k,
            in_kpts: &in_path,
            out_kpts: &out_kpts,
            out_desc: &out_desc,
        };
        std::fs::write(&request, serde_json::to_vec_pretty(&req).expect("request serializes"))
            .map_err(|e| io_err(&request, e))?;

        let cmd = self
            .template
            .replace("{image}", &shell_quote(image))
            .replace("{k}", &k.to_string())
            .replace("{mode}", &mode.to_string())
            .replace("{request}", &shell_quote(&request))
            .replace("{workdir}", &shell_quote(wd))
            .replace("{in_kpts}", &shell_quote(&in_path))
            .replace("{out_kpts}", &shell_quote(&out_kpts))
            .replace("{out_desc}", &shell_quote(&out_desc));
        log::debug!("plugin {}: {cmd}", self.name);

        let log_path = wd.join("plugin.log");
        let log_file = std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        let log_err = log_file.try_clone().map_err(|e| io_err(&log_path, e))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .current_dir(wd)
            .stdin(Stdio::null())
            .stdout(log_file)
            .stderr(log_err)
            .spawn()
            .map_err(|e| PluginError::Command(format!("cannot spawn `{cmd}`: {e}")))?;
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(s)) => break s,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(PluginError::Timeout(self.timeout));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(PluginError::Command(e.to_string())),
            }
        };
        if !status.success() {
            let tail = std::fs::read_to_string(&log_path).unwrap_or_default();
            let tail: String = tail.lines().rev().take(5).collect::<Vec<_>>().join(" | ");
            return Err(PluginError::Command(format!(
                "plugin `{}` exited with {status}: {tail}",
                self.name
            )));
        }
        Ok(Invocation {
            _dir: dir,
            out_kpts,
            out_desc,
        })
    }

    /// Detects and describes in one call.
    pub fn run(&self, image_path: &Path, k: usize) -> Result<DescriptorSet, PluginError> {
        let (w, h) = image_dims(image_path)?;
        let inv = self.invoke(PluginMode::DetectDescribe, image_path, k, None)?;
        let kps = read_keypoints_csv(&inv.out_kpts)?;
        let (n, d, v) = read_descriptors(&inv.out_desc)?;
        assemble(kps, n, d, v, w, h)
    }

    pub fn detect_file(&self, image_path: &Path, k: usize) -> Result<Vec<Keypoint>, PluginError> {
        let (w, h) = image_dims(image_path)?;
        let inv = self.invoke(PluginMode::Detect, image_path, k, None)?;
        let kps = read_keypoints_csv(&inv.out_kpts)?;
        check_bounds(&kps, w, h)?;
        Ok(kps)
    }

    pub fn describe_file(&self, image_path: &Path, keypoints: &[Keypoint]) -> Result<DescriptorSet, PluginError> {
        let (w, h) = image_dims(image_path)?;
        let inv = self.invoke(PluginMode::Describe, image_path, keypoints.len(), Some(keypoints))?;
        let kps = if inv.out_kpts.exists() {
            read_keypoints_csv(&inv.out_kpts)?
        } else {
            keypoints.to_vec()
        };
        let (n, d, v) = read_descriptors(&inv.out_desc)?;
        let mut set = assemble(kps, n, d, v, w, h)?;
        set.dropped = keypoints.len().saturating_sub(set.len());
        Ok(set)
    }

    fn with_temp_image<T>(
        &self,
        image: &Raster,
        f: impl FnOnce(&Path) -> Result<T, PluginError>,
    ) -> Result<T, PluginError> {
        let root = work_root();
        std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let dir = tempfile::Builder::new()
            .prefix("img-")
            .tempdir_in(&root)
            .map_err(|e| io_err(&root, e))?;
        let p = dir.path().join("image.png");
        image.save_png16(&p)?;
        f(&p)
    }
}

fn image_dims(path: &Path) -> Result<(usize, usize), PluginError> {
    let (w, h) = image::image_dimensions(path).map_err(|e| PluginError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    Ok((w as usize, h as usize))
}

/// Runs an external plugin in detect+describe mode on an image file.
pub fn run_external_plugin(spec: &PluginSpec, image_path: &Path, k: usize) -> Result<DescriptorSet, PluginError> {
    match &spec.kind {
        PluginKind::External { template, timeout } => ExternalPlugin {
            name: spec.name.clone(),
            template: template.clone(),
            timeout: *timeout,
        }
        .run(image_path, k),
        PluginKind::Builtin => Err(PluginError::Spec(format!("plugin `{}` is builtin", spec.name))),
    }
}

impl FeaturePlugin for ExternalPlugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, image: &Raster, k: usize) -> Result<Vec<Keypoint>, PluginError> {
        self.with_temp_image(image, |p| self.detect_file(p, k))
    }

    fn describe(&self, image: &Raster, keypoints: &[Keypoint]) -> Result<DescriptorSet, PluginError> {
        self.with_temp_image(image, |p| self.describe_file(p, keypoints))
    }

    fn detect_and_describe(&self, image: &Raster, k: usize) -> Result<DescriptorSet, PluginError> {
        self.with_temp_image(image, |p| self.run(p, k))
    }
}

/// Writes a set to the exchange pair `<stem>.csv` + `<stem>.bin`.
pub fn save_exchange(stem: &Path, set: &DescriptorSet) -> Result<(), PluginError> {
    write_keypoints_csv(&stem.with_extension("csv"), &set.keypoints)?;
    write_descriptors(&stem.with_extension("bin"), set)
}

pub fn load_exchange(stem: &Path) -> Result<DescriptorSet, PluginError> {
    let kps = read_keypoints_csv(&stem.with_extension("csv"))?;
    let (n, d, v) = read_descriptors(&stem.with_extension("bin"))?;
    if n != kps.len() {
        return Err(PluginError::Protocol(format!("{n} descriptors for {} keypoints", kps.len())));
    }
    DescriptorSet::new(kps, d, v)
}
