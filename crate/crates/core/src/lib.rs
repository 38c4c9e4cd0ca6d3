//! Color-statistics prompting for continual, data-free adaptation of
//! re-identification embeddings.
//!
//! The crate is organized bottom-up:
//!
//! - [`colorspace`]: sRGB ⇄ lαβ conversion.
//! - [`colorstats`]: per-image and per-camera lαβ moments, histograms.
//! - [`transfer`]: moment-matching color transfer and its frame-only variant.
//! - [`augment`]: batch-level color re-sampling and shuffling.
//! - [`nn`]: the small fully-connected network and Adam optimizer shared by
//!   the prompter and the embedding model.
//! - [`prompter`]: the color-statistics regressor and the prompter pool.
//! - [`embed`]: embedding model, prototype memory, contrastive loss,
//!   density clustering and retrieval metrics.
//! - [`pipeline`]: the continual task loop.
//! - [`dataset`], [`raster`], [`config`]: ingest, synthetic data, file formats.

pub mod augment;
pub mod checkpoint;
pub mod colorspace;
pub mod colorstats;
pub mod config;
pub mod dataset;
pub mod embed;
mod error;
pub mod nn;
pub mod pipeline;
pub mod prompter;
pub mod raster;
mod rng;
pub mod transfer;

pub use colorspace::{lab_to_srgb, srgb_to_lab, Image, LabImage};
pub use colorstats::{ColorStats, Region};
pub use error::{Error, Result};
pub use rng::{seeded, SeededRng};
