//! Moment-matching color transfer in lαβ.
//!
//! Every channel is standardized with the source moments and re-scaled to the
//! target moments. Clamping only happens on the way back to sRGB.

use rayon::prelude::*;

use crate::colorspace::{lab_to_srgb, srgb_to_lab, Image, LabImage};
use crate::colorstats::{image_stats, ColorStats, Region};
use crate::{Error, Result};

/// Lower bound on the source std used for normalization, in lαβ units.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Per-channel affine map `x ↦ (x − μs)/max(σs, ε)·σt + μt`.
#[derive(Debug, Clone, Copy)]
pub struct ChannelMap {
    scale: [f64; 3],
    offset: [f64; 3],
}

impl ChannelMap {
    pub fn new(source: &ColorStats, target: &ColorStats) -> Result<Self> {
        if !source.mean.iter().chain(&source.std).chain(&target.mean).chain(&target.std).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("transfer statistics"));
        }
        let mut scale = [0.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            scale[c] = target.std[c] / source.std[c].max(SIGMA_FLOOR);
            offset[c] = target.mean[c] - source.mean[c] * scale[c];
        }
        Ok(Self { scale, offset })
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale[0] + self.offset[0],
            p[1] * self.scale[1] + self.offset[1],
            p[2] * self.scale[2] + self.offset[2],
        ]
    }
}

/// Transfer in lαβ without any clamping.
pub fn transfer_lab(lab: &LabImage, source: &ColorStats, target: &ColorStats) -> Result<LabImage> {
    let map = ChannelMap::new(source, target)?;
    let data = lab.pixels().par_iter().map(|&p| map.apply(p)).collect();
    LabImage::new(lab.height(), lab.width(), data)
}

/// Re-target `img` from `source` moments to `target` moments.
pub fn transfer_to_stats(img: &Image, source: &ColorStats, target: &ColorStats) -> Result<Image> {
    let map = ChannelMap::new(source, target)?;
    let lab = srgb_to_lab(img)?;
    let data: Vec<[f64; 3]> = lab.pixels().par_iter().map(|&p| map.apply(p)).collect();
    lab_to_srgb(&LabImage::new(lab.height(), lab.width(), data)?)
}

/// Transfer using the image's own full-image statistics as the source.
pub fn transfer_to(img: &Image, target: &ColorStats) -> Result<Image> {
    let lab = srgb_to_lab(img)?;
    let source = image_stats(&lab, Region::Full)?;
    lab_to_srgb(&transfer_lab(&lab, &source, target)?)
}

/// Transfer whose source statistics come from the image border only, so a
/// dominant color in the centered subject does not bias the shift. The map
/// is still applied to every pixel. A fraction of 0 is the plain transfer.
pub fn object_agnostic_transfer(img: &Image, target: &ColorStats, crop_fraction: f64) -> Result<Image> {
    let lab = srgb_to_lab(img)?;
    let source = image_stats(&lab, Region::frame(crop_fraction)?)?;
    lab_to_srgb(&transfer_lab(&lab, &source, target)?)
}
