//! Samples, directory and manifest loading, the synthetic multi-camera
//! generator, and the read-access log behind the data-free contract.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::Image;
use crate::colorstats::ColorStats;
use crate::raster;
use crate::rng::substream;
use crate::transfer::transfer_to;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub identity: Option<u32>,
    pub camera: Option<u32>,
    /// File path or synthetic tag.
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Naming {
    /// `<id>_c<cam>s<seq>_<frame>_<k>.<ext>`
    MarketStyle,
    /// `manifest.csv` in the directory with header `path,identity,camera`.
    Manifest,
}

impl std::str::FromStr for Naming {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "market_style" | "market" => Ok(Naming::MarketStyle),
            "manifest" => Ok(Naming::Manifest),
            _ => Err(Error::InvalidArgument(format!("unknown naming {s:?}"))),
        }
    }
}

#[derive(Debug, Default)]
pub struct Loaded {
    pub samples: Vec<Sample>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

/// Identity and camera from a Market-1501 style file name. Negative
/// identities (junk/distractor images) come back as `None`.
pub fn parse_market_name(name: &str) -> Option<(Option<u32>, u32)> {
    let (id, rest) = name.split_once('_')?;
    let id: i64 = id.parse().ok()?;
    let rest = rest.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let cam = digits.parse().ok()?;
    Some((u32::try_from(id).ok(), cam))
}

fn is_raster(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm" | "pnm" | "jpg" | "jpeg")
    )
}

pub fn load_directory(dir: &Path, naming: Naming) -> Result<Loaded> {
    match naming {
        Naming::MarketStyle => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir).map_err(crate::error::at(dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_raster(p))
                .collect();
            paths.sort();
            let decoded: Vec<Option<Sample>> = paths
                .par_iter()
                .map(|p| {
                    let name = p.file_name()?.to_str()?;
                    let parsed = parse_market_name(name);
                    let image = raster::read_image(p).ok()?;
                    Some(Sample {
                        image,
                        identity: parsed.and_then(|(id, _)| id),
                        camera: parsed.map(|(_, c)| c),
                        source: p.display().to_string(),
                    })
                })
                .collect();
            let skipped = decoded.iter().filter(|s| s.is_none()).count();
            Ok(Loaded { samples: decoded.into_iter().flatten().collect(), skipped })
        }
        Naming::Manifest => load_manifest(&dir.join("manifest.csv")),
    }
}

pub const MANIFEST_HEADER: &str = "path,identity,camera";

fn parse_opt_u32(field: &str) -> std::result::Result<Option<u32>, String> {
    let f = field.trim();
    if f.is_empty() {
        Ok(None)
    } else {
        f.parse().map(Some).map_err(|e| format!("{f:?}: {e}"))
    }
}

/// Manifest CSV; relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(crate::error::at(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(err(1, format!("expected header {MANIFEST_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 || fields[0].trim().is_empty() {
            return Err(err(i + 1, "expected path,identity,camera".into()));
        }
        let identity = parse_opt_u32(fields[1]).map_err(|m| err(i + 1, m))?;
        let camera = parse_opt_u32(fields[2]).map_err(|m| err(i + 1, m))?;
        rows.push((base.join(fields[0].trim()), identity, camera));
    }
    let decoded: Vec<Option<Sample>> = rows
        .par_iter()
        .map(|(p, identity, camera)| {
            let image = raster::read_image(p).ok()?;
            Some(Sample { image, identity: *identity, camera: *camera, source: p.display().to_string() })
        })
        .collect();
    let skipped = decoded.iter().filter(|s| s.is_none()).count();
    Ok(Loaded { samples: decoded.into_iter().flatten().collect(), skipped })
}

/// Target lαβ statistics of one synthetic camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraStyle {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn default_images() -> usize {
    2
}
fn default_height() -> usize {
    64
}
fn default_width() -> usize {
    32
}
fn default_jitter() -> f64 {
    0.03
}
fn default_true() -> bool {
    true
}

/// Description of a synthetic multi-camera identity set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub cameras: Vec<CameraStyle>,
    pub identities: usize,
    /// First identity number; keeps identities of different sets disjoint.
    #[serde(default)]
    pub identity_offset: u32,
    /// Images per identity per camera.
    #[serde(default = "default_images")]
    pub images_per_identity: usize,
    /// Seed for identity appearance and camera scenes.
    #[serde(default)]
    pub texture_seed: u64,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Std of per-image perturbation of the camera's target means.
    #[serde(default = "default_jitter")]
    pub style_jitter: f64,
    /// Emit camera labels.
    #[serde(default = "default_true")]
    pub camera_labels: bool,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InvalidArgument("synthetic spec needs at least one camera".into()));
        }
        if self.identities == 0 || self.images_per_identity == 0 {
            return Err(Error::InvalidArgument("synthetic spec needs identities and images".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::InvalidArgument("synthetic images must be at least 4×4".into()));
        }
        for c in &self.cameras {
            ColorStats::new(c.mean, c.std)?;
        }
        if !self.style_jitter.is_finite() || self.style_jitter < 0.0 {
            return Err(Error::InvalidArgument("style jitter must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

struct Appearance {
    top: [f64; 3],
    bottom: [f64; 3],
    /// Split row between top and bottom garments, as a fraction of the body.
    split: f64,
    stripe: Option<f64>,
}

/// Camera background: a coarse block layout blended between two colors,
/// overlaid with stripes. Coordinates are relative to the image size so the
/// layout survives resizing and grid pooling.
struct Scene {
    base: [f64; 3],
    tint: [f64; 3],
    blocks: Vec<f64>,
    /// Stripe frequency in cycles per image side.
    freq: f64,
    angle: f64,
    phase: f64,
}

const SCENE_ROWS: usize = 6;
const SCENE_COLS: usize = 3;

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn render(spec: &SynthSpec, person: &Appearance, scene: &Scene, rng: &mut impl Rng) -> Image {
    let (h, w) = (spec.height, spec.width);
    let dx = rng.random_range(-0.06..0.06) * w as f64;
    let dy = rng.random_range(-0.04..0.04) * h as f64;
    let light = rng.random_range(0.85..1.15);
    let (top, bottom) = (0.14 * h as f64 + dy, 0.97 * h as f64 + dy);
    let (left, right) = (0.16 * w as f64 + dx, 0.84 * w as f64 + dx);
    let split = top + person.split * (bottom - top);
    let head = (0.5 * w as f64 + dx, top - 0.05 * h as f64, 0.08 * w as f64 + 0.03 * h as f64);
    let (s, c) = scene.angle.sin_cos();
    let px = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let noise = rng.random_range(-0.04..0.04);
            let inside = x >= left && x < right && y >= top && y < bottom;
            let hd = ((x - head.0).powi(2) + (y - head.1).powi(2)).sqrt();
            let rgb = if inside {
                let mut col = if y < split { person.top } else { person.bottom };
                if let Some(f) = person.stripe {
                    if y < split && ((y - top) * f).sin() > 0.6 {
                        col = col.map(|v| v * 0.6);
                    }
                }
                col.map(|v| v * light)
            } else if hd < head.2 {
                [0.8, 0.62, 0.5].map(|v| v * light)
            } else {
                let (u, v) = (x / w as f64, y / h as f64);
                let block = scene.blocks[((v * SCENE_ROWS as f64) as usize).min(SCENE_ROWS - 1) * SCENE_COLS
                    + ((u * SCENE_COLS as f64) as usize).min(SCENE_COLS - 1)];
                let wave = (std::f64::consts::TAU * scene.freq * (u * c + v * s) + scene.phase).sin();
                let t = (block + 0.2 * wave).clamp(0.0, 1.0);
                [0, 1, 2].map(|k| scene.base[k] * (1.0 - t) + scene.tint[k] * t)
            };
            rgb.map(|v| (v + noise).clamp(0.0, 1.0))
        })
        .collect();
    Image::new(h, w, px).expect("rendered values are in range")
}

/// Generate every (identity, camera, image) combination. Each identity has a
/// two-garment appearance in the central region; each camera has a fixed
/// background scene. The rendered image is then moved to the camera's
/// target statistics, perturbed per image by `style_jitter`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut look_rng = substream(spec.texture_seed, "identities", spec.identity_offset as u64);
    let people: Vec<Appearance> = (0..spec.identities)
        .map(|_| Appearance {
            top: random_color(&mut look_rng),
            bottom: random_color(&mut look_rng),
            split: look_rng.random_range(0.4..0.6),
            stripe: if look_rng.random_bool(0.5) { Some(look_rng.random_range(0.8..1.6)) } else { None },
        })
        .collect();
    let scenes: Vec<Scene> = (0..spec.cameras.len())
        .map(|c| {
            let mut r = substream(spec.texture_seed, "scene", c as u64);
            Scene {
                base: random_color(&mut r),
                tint: random_color(&mut r),
                blocks: (0..SCENE_ROWS * SCENE_COLS).map(|_| if r.random_bool(0.5) { 0.0 } else { 1.0 }).collect(),
                freq: r.random_range(1.0..3.0),
                angle: r.random_range(0.0..std::f64::consts::PI),
                phase: r.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    let jobs: Vec<(usize, usize, usize)> = (0..spec.identities)
        .flat_map(|p| (0..spec.cameras.len()).flat_map(move |c| (0..spec.images_per_identity).map(move |k| (p, c, k))))
        .collect();
    jobs.par_iter()
        .map(|&(p, c, k)| {
            let id = spec.identity_offset + p as u32;
            let mut r = substream(seed, "render", ((id as u64) << 32) | ((c as u64) << 16) | k as u64);
            let raw = render(spec, &people[p], &scenes[c], &mut r);
            let style = spec.cameras[c];
            let mut mean = style.mean;
            for m in &mut mean {
                *m += spec.style_jitter * standard_normal(&mut r);
            }
            let std = style.std.map(|s| s * (1.0 + 0.5 * spec.style_jitter * standard_normal(&mut r)).max(0.1));
            let image = transfer_to(&raw, &ColorStats::new(mean, std)?)?;
            Ok(Sample {
                image,
                identity: Some(id),
                camera: spec.camera_labels.then_some(c as u32),
                source: format!("synth:{id}:c{c}:{k}"),
            })
        })
        .collect()
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Market-style file name for a sample.
pub fn market_file_name(identity: u32, camera: u32, index: usize, ext: &str) -> String {
    format!("{identity:04}_c{camera}s1_{index:06}_00.{ext}")
}

/// When a read happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Phase {
    /// Training of the given task (index into the stream).
    Train(usize),
    /// Evaluation after the given task finished.
    Eval(usize),
}

/// Counts of image reads keyed by (phase, owning task).
#[derive(Debug, Default)]
pub struct AccessLog {
    reads: Mutex<BTreeMap<(Phase, usize), u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessRow {
    pub phase: Phase,
    pub owner: usize,
    pub reads: u64,
}

impl AccessLog {
    pub fn record(&self, phase: Phase, owner: usize, count: u64) {
        *self.reads.lock().unwrap().entry((phase, owner)).or_default() += count;
    }

    pub fn rows(&self) -> Vec<AccessRow> {
        self.reads.lock().unwrap().iter().map(|(&(phase, owner), &reads)| AccessRow { phase, owner, reads }).collect()
    }

    /// Training-phase reads of data owned by an earlier task.
    pub fn violations(&self) -> Vec<AccessRow> {
        self.rows()
            .into_iter()
            .filter(|r| matches!(r.phase, Phase::Train(t) if r.owner < t))
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("phase,task,owner,reads\n");
        for r in self.rows() {
            let (p, t) = match r.phase {
                Phase::Train(t) => ("train", t),
                Phase::Eval(t) => ("eval", t),
            };
            out.push_str(&format!("{p},{t},{},{}\n", r.owner, r.reads));
        }
        out
    }
}

/// A task's samples behind the access log: pixel data is only reachable
/// through [`AuditedSet::read`].
#[derive(Debug)]
pub struct AuditedSet<'a> {
    owner: usize,
    samples: &'a [Sample],
    log: &'a AccessLog,
}

impl<'a> AuditedSet<'a> {
    pub fn new(owner: usize, samples: &'a [Sample], log: &'a AccessLog) -> Self {
        Self { owner, samples, log }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    /// Labels and metadata, without touching pixels.
    pub fn meta(&self, i: usize) -> (Option<u32>, Option<u32>) {
        (self.samples[i].identity, self.samples[i].camera)
    }

    pub fn read(&self, phase: Phase, i: usize) -> &'a Image {
        self.log.record(phase, self.owner, 1);
        &self.samples[i].image
    }

    pub fn read_all(&self, phase: Phase) -> Vec<&'a Image> {
        self.log.record(phase, self.owner, self.samples.len() as u64);
        self.samples.iter().map(|s| &s.image).collect()
    }
}
