//! First and second moments of lαβ channels, camera-level summaries and
//! raw-channel histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::colorspace::{Image, LabImage};
use crate::{Error, Result};

/// Floor applied to every spread of a [`StatDistribution`].
pub const JITTER_FLOOR: f64 = 0.02;

/// Default fraction of height and width removed from the center for
/// [`Region::Frame`].
pub const DEFAULT_CROP_FRACTION: f64 = 0.5;

/// Camera id given to samples that carry no camera label.
pub const UNLABELED_CAMERA: &str = "unlabeled";

/// Per-channel mean and population standard deviation in lαβ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ColorStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        let s = Self { mean, std };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().chain(&self.std).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("color statistics"));
        }
        if self.std.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument("negative standard deviation".into()));
        }
        Ok(())
    }

    /// `[μ0, μ1, μ2, σ0, σ1, σ2]`
    pub fn to_array(&self) -> [f64; 6] {
        let [m0, m1, m2] = self.mean;
        let [s0, s1, s2] = self.std;
        [m0, m1, m2, s0, s1, s2]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self { mean: [v[0], v[1], v[2]], std: [v[3], v[4], v[5]] }
    }
}

/// Which pixels contribute to statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Full,
    /// Everything outside a centered box of `crop_fraction·H × crop_fraction·W`.
    Frame { crop_fraction: f64 },
}

impl Region {
    /// Frame region; a fraction of 0 degenerates to [`Region::Full`].
    pub fn frame(crop_fraction: f64) -> Result<Self> {
        if crop_fraction == 0.0 {
            return Ok(Region::Full);
        }
        if !(crop_fraction > 0.0 && crop_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop fraction {crop_fraction} outside (0, 1)"
            )));
        }
        Ok(Region::Frame { crop_fraction })
    }

    /// Half-open `(rows, cols)` of the excluded center box, if any.
    pub fn center_box(&self, height: usize, width: usize) -> Option<((usize, usize), (usize, usize))> {
        match *self {
            Region::Full => None,
            Region::Frame { crop_fraction } => {
                let bh = ((crop_fraction * height as f64).round() as usize).min(height);
                let bw = ((crop_fraction * width as f64).round() as usize).min(width);
                let top = (height - bh) / 2;
                let left = (width - bw) / 2;
                Some(((top, top + bh), (left, left + bw)))
            }
        }
    }

    pub fn contains(&self, height: usize, width: usize, row: usize, col: usize) -> bool {
        match self.center_box(height, width) {
            None => true,
            Some(((r0, r1), (c0, c1))) => !((r0..r1).contains(&row) && (c0..c1).contains(&col)),
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    /// `full` or `frame:<fraction>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "full" => Ok(Region::Full),
            None if s == "frame" => Region::frame(DEFAULT_CROP_FRACTION),
            Some(("frame", f)) => {
                let f = f
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("crop fraction {f:?}: {e}")))?;
                Region::frame(f)
            }
            _ => Err(Error::InvalidArgument(format!("unknown region {s:?}"))),
        }
    }
}

/// Streaming per-channel moments (count, mean, sum of squared deviations).
/// Merging follows the parallel-axis rule so partial results combine exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: [f64; 3],
    pub m2: [f64; 3],
}

impl Moments {
    pub fn from_pixels<'a>(pixels: impl IntoIterator<Item = &'a [f64; 3]>) -> Self {
        let mut m = Moments::default();
        for p in pixels {
            m.push(*p);
        }
        m
    }

    pub fn push(&mut self, p: [f64; 3]) {
        self.count += 1;
        let n = self.count as f64;
        for c in 0..3 {
            let d = p[c] - self.mean[c];
            self.mean[c] += d / n;
            self.m2[c] += d * (p[c] - self.mean[c]);
        }
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut out = Moments { count: self.count + other.count, ..Default::default() };
        for c in 0..3 {
            let d = other.mean[c] - self.mean[c];
            out.mean[c] = self.mean[c] + d * nb / n;
            out.m2[c] = self.m2[c] + other.m2[c] + d * d * na * nb / n;
        }
        out
    }

    /// Population statistics.
    pub fn stats(&self) -> Result<ColorStats> {
        if self.count == 0 {
            return Err(Error::Empty("pixel selection"));
        }
        let n = self.count as f64;
        Ok(ColorStats { mean: self.mean, std: self.m2.map(|v| (v / n).max(0.0).sqrt()) })
    }
}

/// Mean and population std of the pixels selected by `region`.
pub fn image_stats(lab: &LabImage, region: Region) -> Result<ColorStats> {
    let (h, w) = (lab.height(), lab.width());
    let selected = lab
        .pixels()
        .iter()
        .enumerate()
        .filter(|(i, _)| region.contains(h, w, i / w, i % w))
        .map(|(_, p)| p);
    Moments::from_pixels(selected).stats()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraStats {
    pub camera_id: String,
    pub stats: ColorStats,
    pub image_count: usize,
}

/// Pool all pixels of each camera's images. Samples without a camera label
/// share the [`UNLABELED_CAMERA`] entry. Output is ordered by camera id.
pub fn camera_summary<'a, I>(samples: I) -> Result<Vec<CameraStats>>
where
    I: IntoIterator<Item = (&'a LabImage, Option<&'a str>)>,
{
    let mut groups: BTreeMap<&str, (Moments, usize)> = BTreeMap::new();
    for (lab, cam) in samples {
        let entry = groups.entry(cam.unwrap_or(UNLABELED_CAMERA)).or_default();
        entry.0 = entry.0.merge(&Moments::from_pixels(lab.pixels()));
        entry.1 += 1;
    }
    if groups.is_empty() {
        return Err(Error::Empty("camera summary input"));
    }
    groups
        .into_iter()
        .map(|(id, (m, n))| {
            Ok(CameraStats { camera_id: id.to_string(), stats: m.stats()?, image_count: n })
        })
        .collect()
}

/// Independent Gaussian over the six stat components of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatDistribution {
    pub mean: [f64; 6],
    pub spread: [f64; 6],
}

/// Sample mean and (n−1) sample std of each component, spreads floored at
/// [`JITTER_FLOOR`].
pub fn batch_stat_model(batch: &[ColorStats]) -> Result<StatDistribution> {
    if batch.is_empty() {
        return Err(Error::Empty("stat batch"));
    }
    let n = batch.len() as f64;
    let mut mean = [0.0; 6];
    for s in batch {
        for (m, v) in mean.iter_mut().zip(s.to_array()) {
            *m += v / n;
        }
    }
    let mut spread = [JITTER_FLOOR; 6];
    if batch.len() > 1 {
        for k in 0..6 {
            let ss: f64 = batch.iter().map(|s| (s.to_array()[k] - mean[k]).powi(2)).sum();
            spread[k] = (ss / (n - 1.0)).sqrt().max(JITTER_FLOOR);
        }
    }
    Ok(StatDistribution { mean, spread })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" | "r" => Ok(Channel::R),
            "G" | "g" => Ok(Channel::G),
            "B" | "b" => Ok(Channel::B),
            _ => Err(Error::InvalidArgument(format!("unknown channel {s:?}"))),
        }
    }
}

/// Frequencies of one raw sRGB channel over equal-width bins on `[0, 1]`.
pub fn channel_histogram(images: &[&Image], channel: Channel, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidArgument("histogram needs at least 2 bins".into()));
    }
    if images.is_empty() {
        return Err(Error::Empty("histogram image list"));
    }
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    for img in images {
        for p in img.pixels() {
            let v = p[channel.index()];
            let b = ((v * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
            total += 1;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// Wasserstein-1 distance between two histograms on the same equal-width
/// bins over `[0, 1]`: bin width times the L1 distance of the CDFs.
pub fn histogram_w1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let width = 1.0 / a.len() as f64;
    let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += x;
        cb += y;
        acc += (ca - cb).abs();
    }
    acc * width
}

pub const STATS_CSV_HEADER: &str = "name,l_mean,alpha_mean,beta_mean,l_std,alpha_std,beta_std";

pub fn stats_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a ColorStats)>) -> String {
    let mut out = String::from(STATS_CSV_HEADER);
    out.push('\n');
    for (name, s) in rows {
        let v = s.to_array();
        let _ = writeln!(out, "{name},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5]);
    }
    out
}

/// Parse a stats CSV produced by [`stats_csv`].
pub fn parse_stats_csv(text: &str) -> Result<Vec<(String, ColorStats)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == STATS_CSV_HEADER => {}
        _ => return Err(Error::Format("stats CSV missing header".into())),
    }
    lines
        .map(|(no, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Format(format!("line {}: expected 7 fields", no + 1)));
            }
            let mut v = [0.0; 6];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("line {}: {e}", no + 1)))?;
            }
            let s = ColorStats::from_array(v);
            s.validate()?;
            Ok((fields[0].to_string(), s))
        })
        .collect()
}

pub const HISTOGRAM_CSV_HEADER: &str = "bin,lower,upper,frequency";

pub fn histogram_csv(freq: &[f64]) -> String {
    let n = freq.len() as f64;
    let mut out = String::from(HISTOGRAM_CSV_HEADER);
    out.push('\n');
    for (i, f) in freq.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{f}", i as f64 / n, (i + 1) as f64 / n);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CameraDoc {
    camera: BTreeMap<String, CameraEntry>,
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    image_count: usize,
    mean: [f64; 3],
    std: [f64; 3],
}

/// TOML document with one `[camera.<id>]` table per camera.
pub fn camera_summary_toml(cams: &[CameraStats]) -> String {
    let doc = CameraDoc {
        camera: cams
            .iter()
            .map(|c| {
                (
                    c.camera_id.clone(),
                    CameraEntry { image_count: c.image_count, mean: c.stats.mean, std: c.stats.std },
                )
            })
            .collect(),
    };
    toml::to_string(&doc).expect("camera summary serializes")
}

pub fn parse_camera_summary_toml(text: &str) -> Result<Vec<CameraStats>> {
    let doc: CameraDoc = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    doc.camera
        .into_iter()
        .map(|(id, e)| {
            Ok(CameraStats {
                camera_id: id,
                stats: ColorStats::new(e.mean, e.std)?,
                image_count: e.image_count,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::srgb_to_lab;
    use proptest::prelude::*;

    fn lab(h: usize, w: usize, data: Vec<[f64; 3]>) -> LabImage {
        LabImage::new(h, w, data).unwrap()
    }

    #[test]
    fn two_point_population_stats() {
        let s = image_stats(&lab(2, 1, vec![[0.0; 3], [1.0, 0.0, 0.0]]), Region::Full).unwrap();
        assert_eq!(s.mean[0], 0.5);
        assert_eq!(s.std[0], 0.5);
    }

    #[test]
    fn constant_image_has_zero_std() {
        let s = image_stats(&lab(3, 3, vec![[0.3, -0.1, 0.2]; 9]), Region::Full).unwrap();
        assert_eq!(s.std, [0.0; 3]);
    }

    #[test]
    fn frame_selects_border_of_4x4() {
        // Hand-listed border of a 4×4 grid.
        let border = [0, 1, 2, 3, 4, 7, 8, 11, 12, 13, 14, 15];
        let data: Vec<[f64; 3]> = (0..16).map(|i| [i as f64, (i * i) as f64, 0.0]).collect();
        let img = lab(4, 4, data.clone());
        let got = image_stats(&img, Region::frame(0.5).unwrap()).unwrap();

        let n = border.len() as f64;
        for c in 0..2 {
            let mean = border.iter().map(|&i| data[i][c]).sum::<f64>() / n;
            let var = border.iter().map(|&i| (data[i][c] - mean).powi(2)).sum::<f64>() / n;
            assert!((got.mean[c] - mean).abs() < 1e-12);
            assert!((got.std[c] - var.sqrt()).abs() < 1e-12);
        }
        let count = (0..16).filter(|i| Region::frame(0.5).unwrap().contains(4, 4, i / 4, i % 4)).count();
        assert_eq!(count, 12);
    }

    #[test]
    fn empty_frame_is_an_error() {
        // 1×1: the rounded center box covers the single pixel.
        let img = lab(1, 1, vec![[0.0; 3]]);
        assert!(matches!(image_stats(&img, Region::frame(0.6).unwrap()), Err(Error::Empty(_))));
    }

    #[test]
    fn region_parsing() {
        assert_eq!("full".parse::<Region>().unwrap(), Region::Full);
        assert_eq!("frame:0.25".parse::<Region>().unwrap(), Region::Frame { crop_fraction: 0.25 });
        assert_eq!("frame:0".parse::<Region>().unwrap(), Region::Full);
        assert!("frame:1.0".parse::<Region>().is_err());
        assert!("middle".parse::<Region>().is_err());
    }

    #[test]
    fn frame_of_constant_image_equals_full() {
        let img = lab(8, 4, vec![[0.1, 0.2, 0.3]; 32]);
        assert_eq!(
            image_stats(&img, Region::Full).unwrap(),
            image_stats(&img, Region::frame(0.5).unwrap()).unwrap()
        );
    }

    #[test]
    fn camera_summary_two_constant_cameras() {
        let a = srgb_to_lab(&Image::filled(4, 2, [0.2; 3]).unwrap()).unwrap();
        let b = srgb_to_lab(&Image::filled(4, 2, [0.8; 3]).unwrap()).unwrap();
        let cams = camera_summary([(&a, Some("A")), (&b, Some("B"))]).unwrap();
        assert_eq!(cams.len(), 2);
        assert!(cams[0].stats.mean[0] < cams[1].stats.mean[0]);
        for c in &cams {
            assert!(c.stats.std.iter().all(|&s| s < 1e-12));
        }
    }

    #[test]
    fn camera_summary_pools_pixels() {
        let a = lab(1, 2, vec![[0.0; 3], [1.0; 3]]);
        let b = lab(2, 2, vec![[2.0; 3]; 4]);
        let cams = camera_summary([(&a, Some("0")), (&b, Some("0"))]).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].image_count, 2);
        // Concatenated pixels: 0, 1, 2, 2, 2, 2.
        let px = [0.0, 1.0, 2.0, 2.0, 2.0, 2.0];
        let mean = px.iter().sum::<f64>() / 6.0;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((cams[0].stats.mean[0] - mean).abs() < 1e-12);
        assert!((cams[0].stats.std[0] - var.sqrt()).abs() < 1e-12);
        // Weighted mean of the per-image means.
        let weighted = (0.5 * 2.0 + 2.0 * 4.0) / 6.0;
        assert!((cams[0].stats.mean[0] - weighted).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_samples_share_one_entry() {
        let a = lab(1, 1, vec![[0.0; 3]]);
        let b = lab(1, 1, vec![[1.0; 3]]);
        let cams = camera_summary([(&a, None), (&b, None)]).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].camera_id, UNLABELED_CAMERA);
    }

    #[test]
    fn camera_summary_rejects_empty() {
        assert!(camera_summary(std::iter::empty()).is_err());
    }

    #[test]
    fn batch_model_floor_and_sample_std() {
        let s = ColorStats::new([0.1; 3], [0.2; 3]).unwrap();
        let m = batch_stat_model(&[s, s, s]).unwrap();
        assert_eq!(m.spread, [JITTER_FLOOR; 6]);

        let single = batch_stat_model(&[s]).unwrap();
        assert_eq!(single.mean, s.to_array());
        assert_eq!(single.spread, [JITTER_FLOOR; 6]);

        let a = ColorStats::new([0.0, 0.0, 0.0], [0.1; 3]).unwrap();
        let b = ColorStats::new([1.0, 0.0, 0.0], [0.1; 3]).unwrap();
        let m = batch_stat_model(&[a, b]).unwrap();
        assert_eq!(m.mean[0], 0.5);
        // n−1 convention: sqrt(0.5) rather than 0.5.
        assert!((m.spread[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(batch_stat_model(&[]).is_err());
    }

    #[test]
    fn histogram_constant_and_validation() {
        let img = Image::filled(4, 4, [0.5; 3]).unwrap();
        let h = channel_histogram(&[&img], Channel::R, 10).unwrap();
        assert_eq!(h[5], 1.0);
        assert_eq!(h.iter().filter(|&&f| f > 0.0).count(), 1);
        assert!(channel_histogram(&[&img], Channel::R, 1).is_err());
        assert!(channel_histogram(&[], Channel::R, 10).is_err());
    }

    #[test]
    fn histogram_of_uniform_noise_is_flat() {
        use rand::Rng;
        let mut rng = crate::seeded(7);
        let n = 64 * 64;
        let px: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let img = Image::new(64, 64, px).unwrap();
        let h = channel_histogram(&[&img], Channel::G, 10).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // Binomial(n, 0.1) frequency std = sqrt(0.09 / n).
        let sd = (0.1f64 * 0.9 / n as f64).sqrt();
        for f in h {
            assert!((f - 0.1).abs() <= 3.0 * sd, "{f}");
        }
    }

    #[test]
    fn w1_of_shifted_point_masses() {
        let mut a = vec![0.0; 10];
        let mut b = vec![0.0; 10];
        a[2] = 1.0;
        b[5] = 1.0;
        assert!((histogram_w1(&a, &b) - 0.3).abs() < 1e-12);
        assert_eq!(histogram_w1(&a, &a), 0.0);
    }

    #[test]
    fn stats_csv_round_trip() {
        let s = ColorStats::new([0.1, -0.2, 0.3], [0.01, 0.02, 0.03]).unwrap();
        let text = stats_csv([("img", &s)]);
        assert_eq!(parse_stats_csv(&text).unwrap(), vec![("img".to_string(), s)]);
        assert!(parse_stats_csv("x,y\n").is_err());
    }

    #[test]
    fn camera_toml_round_trip() {
        let cams = vec![CameraStats {
            camera_id: "3".into(),
            stats: ColorStats::new([0.1, -0.2, 0.3], [0.01, 0.02, 0.03]).unwrap(),
            image_count: 4,
        }];
        assert_eq!(parse_camera_summary_toml(&camera_summary_toml(&cams)).unwrap(), cams);
    }

    proptest! {
        #[test]
        fn partition_merge_matches_full(
            px in proptest::collection::vec([-2.0..2.0f64, -1.0..1.0f64, -1.0..1.0f64], 2..60),
            cut in 0.0..1.0f64,
        ) {
            let k = ((px.len() as f64 * cut) as usize).clamp(1, px.len() - 1);
            let full = Moments::from_pixels(&px);
            let merged = Moments::from_pixels(&px[..k]).merge(&Moments::from_pixels(&px[k..]));
            let (a, b) = (full.stats().unwrap(), merged.stats().unwrap());
            for c in 0..3 {
                prop_assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
                prop_assert!((a.std[c] - b.std[c]).abs() < 1e-9);
            }
        }

        #[test]
        fn camera_summary_is_order_invariant(
            vals in proptest::collection::vec((0.0..1.0f64, 0u8..3), 1..12),
            rot in 0usize..12,
        ) {
            let imgs: Vec<(LabImage, String)> = vals
                .iter()
                .map(|&(v, c)| (lab(1, 2, vec![[v, -v, 0.5 * v], [v * v, 0.0, v]]), c.to_string()))
                .collect();
            let a = camera_summary(imgs.iter().map(|(l, c)| (l, Some(c.as_str())))).unwrap();
            let mut rotated = imgs.clone();
            rotated.rotate_left(rot % imgs.len());
            let b = camera_summary(rotated.iter().map(|(l, c)| (l, Some(c.as_str())))).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x.camera_id, &y.camera_id);
                for c in 0..3 {
                    prop_assert!((x.stats.mean[c] - y.stats.mean[c]).abs() < 1e-12);
                    prop_assert!((x.stats.std[c] - y.stats.std[c]).abs() < 1e-9);
                }
            }
        }
    }
}
