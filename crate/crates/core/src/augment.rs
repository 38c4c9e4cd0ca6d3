//! Batch-level color augmentations.
//!
//! - Color re-sampling: each image is pushed to statistics drawn from a
//!   Gaussian fitted over the batch; the original statistics are kept as the
//!   prompter's regression target.
//! - Color shuffling: statistics are permuted within the batch and each image
//!   takes on another's style.
//!
//! All random draws happen up front in one sequential pass; the transfers
//! themselves run in parallel.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::colorspace::{lab_to_srgb, srgb_to_lab, Image, LabImage};
use crate::colorstats::{batch_stat_model, image_stats, ColorStats, Region, StatDistribution};
use crate::transfer::transfer_lab;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Resampled {
    pub image: Image,
    /// Statistics of the image before corruption.
    pub original: ColorStats,
    /// Statistics the image was transferred to.
    pub drawn: ColorStats,
}

/// An image already converted to lαβ, with its full-frame statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub lab: LabImage,
    pub stats: ColorStats,
}

/// Convert a batch once so repeated re-sampling skips the forward conversion.
pub fn prepare(batch: &[Image]) -> Result<Vec<Prepared>> {
    batch
        .par_iter()
        .map(|img| {
            let lab = srgb_to_lab(img)?;
            let stats = image_stats(&lab, Region::Full)?;
            Ok(Prepared { lab, stats })
        })
        .collect()
}

/// Draw one stats vector per image from `model`; std components are
/// truncated at zero.
pub fn draw_stats<R: Rng + ?Sized>(model: &StatDistribution, count: usize, rng: &mut R) -> Vec<ColorStats> {
    let normals: Vec<Normal<f64>> = (0..6)
        .map(|k| Normal::new(model.mean[k], model.spread[k]).expect("spread is positive and finite"))
        .collect();
    (0..count)
        .map(|_| {
            let mut v = [0.0; 6];
            for (slot, n) in v.iter_mut().zip(&normals) {
                *slot = n.sample(rng);
            }
            for s in &mut v[3..] {
                *s = s.max(0.0);
            }
            ColorStats::from_array(v)
        })
        .collect()
}

pub fn color_resample<R: Rng + ?Sized>(batch: &[Image], rng: &mut R) -> Result<Vec<Resampled>> {
    if batch.is_empty() {
        return Err(Error::Empty("re-sampling batch"));
    }
    resample_prepared(&prepare(batch)?.iter().collect::<Vec<_>>(), rng)
}

/// Re-sampling over pre-converted images; same draws as [`color_resample`].
pub fn resample_prepared<R: Rng + ?Sized>(batch: &[&Prepared], rng: &mut R) -> Result<Vec<Resampled>> {
    if batch.is_empty() {
        return Err(Error::Empty("re-sampling batch"));
    }
    let originals: Vec<ColorStats> = batch.iter().map(|p| p.stats).collect();
    let model = batch_stat_model(&originals)?;
    let drawn = draw_stats(&model, batch.len(), rng);
    batch
        .par_iter()
        .zip(drawn.par_iter())
        .map(|(p, target)| {
            let image = lab_to_srgb(&transfer_lab(&p.lab, &p.stats, target)?)?;
            Ok(Resampled { image, original: p.stats, drawn: *target })
        })
        .collect()
}

/// Transfer image `i` to the statistics of image `perm[i]`.
pub fn shuffle_with_permutation(batch: &[Image], perm: &[usize]) -> Result<Vec<Image>> {
    if perm.len() != batch.len() {
        return Err(Error::InvalidArgument("permutation length differs from batch".into()));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    let labs = prepare(batch)?;
    perm.par_iter()
        .enumerate()
        .map(|(i, &j)| lab_to_srgb(&transfer_lab(&labs[i].lab, &labs[i].stats, &labs[j].stats)?))
        .collect()
}

pub fn color_shuffle<R: Rng + ?Sized>(batch: &[Image], rng: &mut R) -> Result<Vec<Image>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("color shuffling needs at least 2 images".into()));
    }
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    shuffle_with_permutation(batch, &perm)
}
