//! The continual task loop: supervised source training, unsupervised
//! adaptation with cluster-level contrastive learning, rehearsal of earlier
//! tasks through transferred twins, evaluation and reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::color_shuffle;
use crate::checkpoint::{self, Kind};
use crate::colorspace::{srgb_to_lab, Image};
use crate::colorstats::{camera_summary, image_stats, ColorStats, Region};
use crate::config::{DataSource, Rehearsal, StreamConfig, TaskConfig, TrainingConfig};
use crate::dataset::{load_directory, synth_generate, AccessLog, AccessRow, AuditedSet, Phase, Sample};
use crate::embed::{
    cluster_pseudo_labels, evaluate_retrieval, init_memory_from_clusters, init_memory_from_labels, memory_update,
    EmbedNet, EmbedTrainer, Probe, PrototypeMemory, PseudoLabeling, RetrievalMetrics, Term,
};
use crate::prompter::{prompter_recover, PrompterNet, PrompterPool, PrompterTrainer};
use crate::rng::substream;
use crate::transfer::{object_agnostic_transfer, transfer_to};
use crate::{Error, Result, SeededRng};

/// A task's training images and held-out query/gallery split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

/// Query = first image of every (identity, camera) pair, gallery = the rest.
pub fn split_query_gallery(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let mut seen = BTreeSet::new();
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for s in samples {
        if seen.insert((s.identity, s.camera)) {
            query.push(s);
        } else {
            gallery.push(s);
        }
    }
    (query, gallery)
}

/// Load or generate a data source. Synthetic sources derive their render
/// seed from `seed`; their held-out split always carries camera labels,
/// which retrieval needs for the same-camera exclusion, even when the
/// training split hides them.
pub fn materialize(source: &DataSource, seed: u64) -> Result<TaskData> {
    match source {
        DataSource::Synth { spec, test_identities } => {
            let train = synth_generate(spec, seed)?;
            let mut test_spec = spec.clone();
            test_spec.identity_offset = spec.identity_offset + spec.identities as u32;
            test_spec.identities = (*test_identities).max(1);
            test_spec.camera_labels = true;
            let (query, gallery) = split_query_gallery(synth_generate(&test_spec, seed ^ 0x5eed)?);
            Ok(TaskData { train, query, gallery })
        }
        DataSource::Directory { train, query, gallery, naming } => Ok(TaskData {
            train: load_directory(train, *naming)?.samples,
            query: load_directory(query, *naming)?.samples,
            gallery: load_directory(gallery, *naming)?.samples,
        }),
    }
}

/// Per-image geometric augmentation, drawn once and applied identically to
/// an image and its transferred twin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub flip: bool,
    pub shift: (isize, isize),
    /// Erased rectangle (top, left, height, width) and its fill color.
    pub erase: Option<([usize; 4], [f64; 3])>,
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry { flip: false, shift: (0, 0), erase: None };

    pub fn draw<R: Rng + ?Sized>(height: usize, width: usize, cfg: &TrainingConfig, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let max_dy = (cfg.crop_shift * height as f64).floor() as i64;
        let max_dx = (cfg.crop_shift * width as f64).floor() as i64;
        let shift = (rng.random_range(-max_dy..=max_dy) as isize, rng.random_range(-max_dx..=max_dx) as isize);
        let erase = if rng.random::<f64>() < cfg.erase_prob {
            let area = rng.random_range(0.02..0.2) * (height * width) as f64;
            let aspect: f64 = rng.random_range(0.3..3.3);
            let eh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
            let ew = ((area / aspect).sqrt().round() as usize).clamp(1, width);
            let top = rng.random_range(0..=height - eh);
            let left = rng.random_range(0..=width - ew);
            Some(([top, left, eh, ew], [rng.random(), rng.random(), rng.random()]))
        } else {
            None
        };
        Geometry { flip, shift, erase }
    }

    pub fn apply(&self, img: &Image) -> Image {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let (h, w) = (img.height(), img.width());
        let px = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                if let Some(([t, l, eh, ew], fill)) = self.erase {
                    if (t..t + eh).contains(&r) && (l..l + ew).contains(&c) {
                        return fill;
                    }
                }
                let sr = (r as isize + self.shift.0).clamp(0, h as isize - 1) as usize;
                let sc = (c as isize + self.shift.1).clamp(0, w as isize - 1) as usize;
                let sc = if self.flip { w - 1 - sc } else { sc };
                img.pixel(sr, sc)
            })
            .collect();
        Image::from_raw(h, w, px).expect("same dimensions")
    }
}

/// Source of transfer targets for the twins of a batch.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    /// Predicted original statistics from one prompter.
    Prompter(&'a PrompterNet),
    /// A fixed set of statistics; each image draws one uniformly.
    Stats(&'a [ColorStats]),
}

impl Guidance<'_> {
    /// Build twins of `images`. Statistic choices are drawn sequentially
    /// from `rng`, transfers then run in parallel.
    pub fn twins<R: Rng + ?Sized>(&self, images: &[Image], object_agnostic: Option<f64>, rng: &mut R) -> Result<Vec<Image>> {
        match *self {
            Guidance::Prompter(net) => images.par_iter().map(|img| prompter_recover(net, img)).collect(),
            Guidance::Stats(stats) => {
                if stats.is_empty() {
                    return Err(Error::Empty("guidance statistics"));
                }
                let picks: Vec<usize> = images.iter().map(|_| rng.random_range(0..stats.len())).collect();
                images
                    .par_iter()
                    .zip(&picks)
                    .map(|(img, &k)| match object_agnostic {
                        Some(f) => object_agnostic_transfer(img, &stats[k], f),
                        None => transfer_to(img, &stats[k]),
                    })
                    .collect()
            }
        }
    }
}

/// One row per training batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub task: usize,
    pub epoch: usize,
    pub batch: usize,
    /// Weighted contrastive objective; `None` for prompter-only epochs.
    pub embed_loss: Option<f64>,
    pub prompter_loss: Option<f64>,
}

/// Clustering and rehearsal choices of one adaptation epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub task: usize,
    pub epoch: usize,
    pub eps: f64,
    pub clusters: usize,
    pub outliers: usize,
    /// Index of the earlier task whose prompter or summary guided the twins.
    pub rehearsed_task: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    /// Task after which the model was evaluated.
    pub after_task: String,
    pub dataset: String,
    pub map: f64,
    pub rank1: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RunReport {
    pub seed: u64,
    pub rehearsal: String,
    pub tasks: Vec<String>,
    pub losses: Vec<LossRow>,
    pub epochs: Vec<EpochRow>,
    pub eval: Vec<EvalRow>,
    /// Task ids of the prompter pool, in order.
    pub pool: Vec<String>,
    pub access: Vec<AccessRow>,
    /// Training-phase reads of earlier tasks' data.
    pub violations: u64,
    /// Set when the stream aborted.
    pub error: Option<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl RunReport {
    pub fn eval_entry(&self, after_task: &str, dataset: &str) -> Option<&EvalRow> {
        self.eval.iter().find(|r| r.after_task == after_task && r.dataset == dataset)
    }

    pub fn losses_csv(&self) -> String {
        let mut out = String::from("task,epoch,batch,embed_loss,prompter_loss\n");
        for r in &self.losses {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.tasks[r.task],
                r.epoch,
                r.batch,
                fmt_opt(r.embed_loss),
                fmt_opt(r.prompter_loss)
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("after_task,dataset,map,rank1,evaluated,skipped\n");
        for r in &self.eval {
            out.push_str(&format!(
                "{},{},{:?},{:?},{},{}\n",
                r.after_task, r.dataset, r.map, r.rank1, r.evaluated, r.skipped
            ));
        }
        out
    }

    pub fn access_csv(&self) -> String {
        let mut out = String::from("phase,task,owner,reads\n");
        for r in &self.access {
            let (p, t) = match r.phase {
                Phase::Train(t) => ("train", t),
                Phase::Eval(t) => ("eval", t),
            };
            out.push_str(&format!("{p},{t},{},{}\n", r.owner, r.reads));
        }
        out
    }

    /// Write `losses.csv`, `eval.csv`, `access.csv` and `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("losses.csv"), self.losses_csv())?;
        std::fs::write(dir.join("eval.csv"), self.eval_csv())?;
        std::fs::write(dir.join("access.csv"), self.access_csv())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), json + "\n")?;
        Ok(())
    }
}

/// Settings of one task run that do not come from its config.
#[derive(Debug, Clone, Copy)]
pub struct TaskContext<'a> {
    pub index: usize,
    pub seed: u64,
    pub training: &'a TrainingConfig,
    pub log: &'a AccessLog,
}

impl TaskContext<'_> {
    fn rng(&self, purpose: &str, epoch: usize) -> SeededRng {
        substream(self.seed, purpose, ((self.index as u64) << 32) | epoch as u64)
    }
}

/// Output of a task run.
#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub net: EmbedNet,
    pub prompter: Option<PrompterNet>,
    pub losses: Vec<LossRow>,
    pub epochs: Vec<EpochRow>,
}

/// Originals weighted `1 − λ` and twins weighted `λ`; without twins the
/// originals carry full weight.
pub fn mixed_terms<'a>(originals: &'a [Image], twins: Option<&'a [Image]>, labels: &[usize], lambda: f64) -> Vec<Term<'a>> {
    match twins {
        None => originals.iter().zip(labels).map(|(image, &label)| Term { image, label, weight: 1.0 }).collect(),
        Some(tw) => originals
            .iter()
            .zip(labels)
            .map(|(image, &label)| Term { image, label, weight: 1.0 - lambda })
            .chain(tw.iter().zip(labels).map(|(image, &label)| Term { image, label, weight: lambda }))
            .collect(),
    }
}

fn update_memory(memory: &mut PrototypeMemory, features: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    let n = labels.len();
    let batch: Vec<(&[f64], usize)> = features.iter().enumerate().map(|(i, f)| (f.as_slice(), labels[i % n])).collect();
    memory_update(memory, &batch)
}

fn prompter_samples(images: &[Image], resample: bool, rng: &mut SeededRng) -> Result<Vec<(Image, ColorStats)>> {
    if resample {
        Ok(crate::augment::color_resample(images, rng)?.into_iter().map(|r| (r.image, r.original)).collect())
    } else {
        images
            .par_iter()
            .map(|img| Ok((img.clone(), image_stats(&srgb_to_lab(img)?, Region::Full)?)))
            .collect()
    }
}

/// Extra prompter epochs over the task's training images.
fn prompter_epochs(
    trainer: &mut PrompterTrainer,
    data: &AuditedSet<'_>,
    cfg: &TaskConfig,
    ctx: &TaskContext<'_>,
    first_epoch: usize,
    losses: &mut Vec<LossRow>,
) -> Result<()> {
    let phase = Phase::Train(ctx.index);
    let bs = ctx.training.prompter_batch_size;
    for e in 0..ctx.training.prompter_epochs {
        let epoch = first_epoch + e;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ctx.rng("prompter-order", epoch));
        let mut rng = ctx.rng("prompter", epoch);
        for (b, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<Image> = chunk.iter().map(|&i| data.read(phase, i).clone()).collect();
            let loss = trainer.step_on(&prompter_samples(&images, cfg.resample, &mut rng)?)?;
            losses.push(LossRow { task: ctx.index, epoch, batch: b, embed_loss: None, prompter_loss: Some(loss) });
        }
    }
    Ok(())
}

fn read_augmented(data: &AuditedSet<'_>, idx: &[usize], phase: Phase, cfg: &TrainingConfig, rng: &mut SeededRng) -> Vec<Image> {
    let raw: Vec<&Image> = idx.iter().map(|&i| data.read(phase, i)).collect();
    let geo: Vec<Geometry> = raw.iter().map(|im| Geometry::draw(im.height(), im.width(), cfg, rng)).collect();
    raw.par_iter().zip(&geo).map(|(im, g)| g.apply(im)).collect()
}

/// Optional twin guidance for supervised training: each image gets a twin
/// with probability `prob`.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceGuidance<'a> {
    pub stats: &'a [ColorStats],
    pub prob: f64,
}

fn train_supervised(
    net: EmbedNet,
    data: &AuditedSet<'_>,
    cfg: &TaskConfig,
    ctx: &TaskContext<'_>,
    mut prompter: Option<&mut PrompterTrainer>,
    references: Option<ReferenceGuidance<'_>>,
) -> Result<TaskOutput> {
    let phase = Phase::Train(ctx.index);
    let mut classes = BTreeMap::new();
    let mut labels = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let id = data.meta(i).0.ok_or_else(|| {
            Error::InvalidArgument(format!("task {:?}: supervised training needs identity labels", cfg.id))
        })?;
        let next = classes.len();
        labels.push(*classes.entry(id).or_insert(next));
    }
    if data.is_empty() {
        return Err(Error::Empty("supervised training set"));
    }
    let mut trainer = EmbedTrainer::new(net, cfg.lr());
    let bs = cfg.batch_size();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let features = trainer.net.embed_all(&data.read_all(phase));
        let mut memory =
            init_memory_from_labels(&features, &labels, classes.len(), ctx.training.tau, ctx.training.alpha)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ctx.rng("order", epoch));
        let mut geo_rng = ctx.rng("geometry", epoch);
        let mut shuffle_rng = ctx.rng("shuffle", epoch);
        let mut twin_rng = ctx.rng("twins", epoch);
        let mut prompter_rng = ctx.rng("prompter", epoch);
        for (b, chunk) in order.chunks(bs).enumerate() {
            let images = read_augmented(data, chunk, phase, ctx.training, &mut geo_rng);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut terms: Vec<Term<'_>> = Vec::new();
            let mut term_labels = Vec::new();
            let shuffled = if cfg.shuffle_pretrain && images.len() >= 2 {
                Some(color_shuffle(&images, &mut shuffle_rng)?)
            } else {
                None
            };
            let twins = match references {
                Some(r) if r.prob > 0.0 => {
                    let with: Vec<bool> = images.iter().map(|_| twin_rng.random::<f64>() < r.prob).collect();
                    let picked: Vec<Image> = images.iter().zip(&with).filter(|(_, &w)| w).map(|(i, _)| i.clone()).collect();
                    let out = Guidance::Stats(r.stats).twins(&picked, cfg.object_agnostic, &mut twin_rng)?;
                    Some((with, out))
                }
                _ => None,
            };
            match &twins {
                None => {
                    terms.extend(mixed_terms(&images, None, &batch_labels, cfg.lambda));
                    term_labels.extend(&batch_labels);
                }
                Some((with, out)) => {
                    let mut k = 0;
                    for (i, img) in images.iter().enumerate() {
                        let w = if with[i] { 1.0 - cfg.lambda } else { 1.0 };
                        terms.push(Term { image: img, label: batch_labels[i], weight: w });
                        term_labels.push(batch_labels[i]);
                    }
                    for (i, &w) in with.iter().enumerate() {
                        if w {
                            terms.push(Term { image: &out[k], label: batch_labels[i], weight: cfg.lambda });
                            term_labels.push(batch_labels[i]);
                            k += 1;
                        }
                    }
                }
            }
            if let Some(s) = &shuffled {
                terms.extend(mixed_terms(s, None, &batch_labels, 0.0));
                term_labels.extend(&batch_labels);
            }
            let step = trainer.step(&terms, &memory, images.len())?;
            let batch: Vec<(&[f64], usize)> =
                step.features.iter().zip(&term_labels).map(|(f, &l)| (f.as_slice(), l)).collect();
            memory_update(&mut memory, &batch)?;
            let prompter_loss = match prompter.as_deref_mut() {
                Some(p) if images.len() >= 2 => Some(p.step_on(&prompter_samples(&images, cfg.resample, &mut prompter_rng)?)?),
                _ => None,
            };
            losses.push(LossRow { task: ctx.index, epoch, batch: b, embed_loss: Some(step.loss), prompter_loss });
        }
    }
    Ok(TaskOutput { net: trainer.net, prompter: None, losses, epochs: Vec::new() })
}

/// Supervised training over ground-truth identities; memory prototypes are
/// re-initialized from class means every epoch. When `prompter` is given it
/// is trained on the same batches and returned.
pub fn run_source_task(
    net: EmbedNet,
    data: &AuditedSet<'_>,
    cfg: &TaskConfig,
    ctx: &TaskContext<'_>,
    prompter: Option<PrompterNet>,
) -> Result<TaskOutput> {
    if !cfg.supervised {
        return Err(Error::InvalidArgument(format!("task {:?} is not supervised", cfg.id)));
    }
    let mut trainer = prompter.map(|p| PrompterTrainer::new(p, ctx.training.prompter_lr));
    let mut out = train_supervised(net, data, cfg, ctx, trainer.as_mut(), None)?;
    if let Some(t) = trainer.as_mut() {
        prompter_epochs(t, data, cfg, ctx, cfg.epochs, &mut out.losses)?;
    }
    out.prompter = trainer.map(|t| t.net);
    Ok(out)
}

/// Retrain on a labeled set with twins that take the statistics of randomly
/// drawn unlabeled reference images. References contribute statistics only.
pub fn few_shot_style_adapt(
    net: EmbedNet,
    references: &[Image],
    data: &AuditedSet<'_>,
    cfg: &TaskConfig,
    ctx: &TaskContext<'_>,
    prob: f64,
) -> Result<TaskOutput> {
    if references.is_empty() {
        return Err(Error::Empty("reference images"));
    }
    let stats: Vec<ColorStats> = references
        .par_iter()
        .map(|r| image_stats(&srgb_to_lab(r)?, Region::Full))
        .collect::<Result<_>>()?;
    train_supervised(net, data, cfg, ctx, None, Some(ReferenceGuidance { stats: &stats, prob }))
}

/// Rehearsal material available to an adaptation task.
#[derive(Debug, Clone, Copy)]
pub enum Rehearse<'a> {
    None,
    /// Prompters of all earlier tasks; one is drawn per epoch.
    Pool(&'a PrompterPool),
    /// Per-camera statistics of each earlier task; one task is drawn per
    /// epoch, then one camera per image.
    Summaries(&'a [Vec<ColorStats>]),
    /// Stored images of earlier tasks, clustered and trained together with
    /// the current data.
    Replay(&'a [AuditedSet<'a>], &'a [(usize, usize)]),
}

/// Uniform draw of the pool entry used in one epoch.
pub fn draw_rehearsed_task(pool_len: usize, seed: u64, task: usize, epoch: usize) -> usize {
    let mut rng = substream(seed, "pool-draw", ((task as u64) << 32) | epoch as u64);
    rng.random_range(0..pool_len)
}

/// Cluster with `eps`, relaxing it by ×1.5 up to `retries` times when no
/// cluster forms.
pub fn cluster_with_relaxation(features: &[Vec<f64>], training: &TrainingConfig) -> Result<PseudoLabeling> {
    let mut eps = training.eps;
    for attempt in 0..=training.eps_retries {
        let labeling = cluster_pseudo_labels(features, eps, training.min_samples)?;
        if labeling.cluster_count() > 0 {
            return Ok(labeling);
        }
        if attempt < training.eps_retries {
            eps = (eps * 1.5).min(2.0);
        }
    }
    Err(Error::NoClusters { eps, min_samples: training.min_samples })
}

/// Unsupervised adaptation: per epoch embed, cluster, re-initialize the
/// memory, draw rehearsal guidance, then train on clustered samples and
/// their transferred twins. This task's prompter trains on the same batches.
pub fn run_adaptation_task(
    net: EmbedNet,
    rehearse: Rehearse<'_>,
    data: &AuditedSet<'_>,
    cfg: &TaskConfig,
    ctx: &TaskContext<'_>,
    prompter: Option<PrompterNet>,
) -> Result<TaskOutput> {
    if cfg.supervised {
        return Err(Error::InvalidArgument(format!("task {:?} is supervised", cfg.id)));
    }
    if let Rehearse::Pool(p) = rehearse {
        if p.is_empty() {
            return Err(Error::Empty("prompter pool"));
        }
    }
    if data.is_empty() {
        return Err(Error::Empty("adaptation training set"));
    }
    let phase = Phase::Train(ctx.index);
    // (set, index) pairs: set 0 is the current task, the rest are replayed.
    let mut sets: Vec<&AuditedSet<'_>> = vec![data];
    let mut items: Vec<(usize, usize)> = (0..data.len()).map(|i| (0, i)).collect();
    if let Rehearse::Replay(stored, buffer) = rehearse {
        for &(owner, i) in buffer {
            let pos = sets.iter().position(|s| s.owner() == owner).unwrap_or_else(|| {
                sets.push(&stored[stored.iter().position(|s| s.owner() == owner).expect("buffer owner")]);
                sets.len() - 1
            });
            items.push((pos, i));
        }
    }
    let mut trainer = EmbedTrainer::new(net, cfg.lr());
    let mut ptrainer = prompter.map(|p| PrompterTrainer::new(p, ctx.training.prompter_lr));
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        let all: Vec<&Image> = items.iter().map(|&(s, i)| sets[s].read(phase, i)).collect();
        let features = trainer.net.embed_all(&all);
        let labeling = cluster_with_relaxation(&features, ctx.training)?;
        let mut memory = init_memory_from_clusters(&features, &labeling, ctx.training.tau, ctx.training.alpha)?;
        let (rehearsed, guidance) = match rehearse {
            Rehearse::Pool(p) => {
                let j = draw_rehearsed_task(p.len(), ctx.seed, ctx.index, epoch);
                (Some(j), Some(Guidance::Prompter(&p.entries()[j].1)))
            }
            Rehearse::Summaries(s) if !s.is_empty() => {
                let j = draw_rehearsed_task(s.len(), ctx.seed, ctx.index, epoch);
                (Some(j), Some(Guidance::Stats(&s[j])))
            }
            _ => (None, None),
        };
        let guidance = guidance.filter(|_| cfg.lambda > 0.0);
        epochs.push(EpochRow {
            task: ctx.index,
            epoch,
            eps: labeling.eps,
            clusters: labeling.cluster_count(),
            outliers: labeling.outliers(),
            rehearsed_task: rehearsed,
        });

        let mut order: Vec<usize> = (0..items.len()).filter(|&k| labeling.labels[k].is_some()).collect();
        order.shuffle(&mut ctx.rng("order", epoch));
        let mut geo_rng = ctx.rng("geometry", epoch);
        let mut twin_rng = ctx.rng("twins", epoch);
        let mut prompter_rng = ctx.rng("prompter", epoch);
        for (b, chunk) in order.chunks(cfg.batch_size()).enumerate() {
            let raw: Vec<&Image> = chunk.iter().map(|&k| all[k]).collect();
            let geo: Vec<Geometry> =
                raw.iter().map(|im| Geometry::draw(im.height(), im.width(), ctx.training, &mut geo_rng)).collect();
            let images: Vec<Image> = raw.par_iter().zip(&geo).map(|(im, g)| g.apply(im)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&k| labeling.labels[k].expect("clustered")).collect();
            let twins = match guidance {
                Some(g) => Some(g.twins(&images, cfg.object_agnostic, &mut twin_rng)?),
                None => None,
            };
            let terms = mixed_terms(&images, twins.as_deref(), &labels, cfg.lambda);
            let step = trainer.step(&terms, &memory, images.len())?;
            update_memory(&mut memory, &step.features, &labels)?;
            let current: Vec<Image> =
                chunk.iter().zip(&images).filter(|(&k, _)| items[k].0 == 0).map(|(_, im)| im.clone()).collect();
            let prompter_loss = match ptrainer.as_mut() {
                Some(p) if current.len() >= 2 => Some(p.step_on(&prompter_samples(&current, cfg.resample, &mut prompter_rng)?)?),
                _ => None,
            };
            losses.push(LossRow { task: ctx.index, epoch, batch: b, embed_loss: Some(step.loss), prompter_loss });
        }
    }
    if let Some(t) = ptrainer.as_mut() {
        prompter_epochs(t, data, cfg, ctx, cfg.epochs, &mut losses)?;
    }
    Ok(TaskOutput { net: trainer.net, prompter: ptrainer.map(|t| t.net), losses, epochs })
}

/// A held-out query/gallery pair.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub owner: usize,
    pub query: &'a [Sample],
    pub gallery: &'a [Sample],
}

fn probes(net: &EmbedNet, samples: &[Sample], owner: usize, phase: Phase, log: &AccessLog) -> Vec<Probe> {
    let labeled: Vec<&Sample> = samples.iter().filter(|s| s.identity.is_some()).collect();
    log.record(phase, owner, labeled.len() as u64);
    let feats = net.embed_all(&labeled.iter().map(|s| &s.image).collect::<Vec<_>>());
    labeled
        .iter()
        .zip(feats)
        .map(|(s, feature)| Probe { feature, identity: s.identity.expect("filtered"), camera: s.camera })
        .collect()
}

/// Retrieval metrics of `net` on a held-out set, logging the reads.
pub fn evaluate(net: &EmbedNet, set: EvalSet<'_>, phase: Phase, log: &AccessLog) -> RetrievalMetrics {
    let q = probes(net, set.query, set.owner, phase, log);
    let g = probes(net, set.gallery, set.owner, phase, log);
    evaluate_retrieval(&q, &g)
}

/// Reservoir update of the replay buffer with every training index of `owner`.
fn reservoir_update(buffer: &mut Vec<(usize, usize)>, seen: &mut u64, capacity: usize, owner: usize, n: usize, rng: &mut SeededRng) {
    for i in 0..n {
        *seen += 1;
        if buffer.len() < capacity {
            buffer.push((owner, i));
        } else {
            let j = rng.random_range(0..*seen);
            if (j as usize) < capacity {
                buffer[j as usize] = (owner, i);
            }
        }
    }
}

/// Everything a finished stream produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub net: EmbedNet,
    pub pool: PrompterPool,
}

fn data_seed(seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    substream(seed, "data", index as u64).next_u64()
}

/// Run every task in order, evaluating after each on all tasks so far and
/// the unseen sets. With `out`, the report, pool and per-task embedding
/// checkpoints are written there; on failure the partial report is still
/// written and the error returned.
pub fn run_stream(cfg: &StreamConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let tasks: Vec<TaskData> = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| materialize(&t.data, data_seed(cfg.seed, i)))
        .collect::<Result<_>>()?;
    let unseen: Vec<TaskData> = cfg
        .unseen
        .iter()
        .enumerate()
        .map(|(u, s)| materialize(&s.data, data_seed(cfg.seed, cfg.tasks.len() + u)))
        .collect::<Result<_>>()?;
    let mut report = RunReport {
        seed: cfg.seed,
        rehearsal: format!("{:?}", cfg.rehearsal),
        tasks: cfg.tasks.iter().map(|t| t.id.clone()).collect(),
        ..Default::default()
    };
    let log = AccessLog::default();
    let mut state = StreamState {
        net: EmbedNet::new(&mut substream(cfg.seed, "embed-init", 0)),
        pool: PrompterPool::new(),
        summaries: Vec::new(),
        buffer: Vec::new(),
        seen: 0,
    };
    let result = run_tasks(cfg, &tasks, &unseen, &log, &mut state, &mut report, out);
    report.pool = state.pool.task_ids().map(String::from).collect();
    report.access = log.rows();
    report.violations = log.violations().iter().map(|r| r.reads).sum();
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    if let Some(dir) = out {
        report.write(dir)?;
        if cfg.rehearsal == Rehearsal::Prompter {
            state.pool.save(&dir.join("pool.bin"))?;
        }
    }
    result?;
    Ok(RunOutcome { report, net: state.net, pool: state.pool })
}

struct StreamState {
    net: EmbedNet,
    pool: PrompterPool,
    summaries: Vec<Vec<ColorStats>>,
    buffer: Vec<(usize, usize)>,
    seen: u64,
}

fn run_tasks(
    cfg: &StreamConfig,
    tasks: &[TaskData],
    unseen: &[TaskData],
    log: &AccessLog,
    state: &mut StreamState,
    report: &mut RunReport,
    out: Option<&Path>,
) -> Result<()> {
    let sets: Vec<AuditedSet<'_>> = tasks.iter().enumerate().map(|(i, t)| AuditedSet::new(i, &t.train, log)).collect();
    for (t, task) in cfg.tasks.iter().enumerate() {
        let ctx = TaskContext { index: t, seed: cfg.seed, training: &cfg.training, log };
        let prompter = (cfg.rehearsal == Rehearsal::Prompter)
            .then(|| PrompterNet::new(&mut substream(cfg.seed, "prompter-init", t as u64)));
        let net = state.net.clone();
        let output = if t == 0 {
            run_source_task(net, &sets[0], task, &ctx, prompter)?
        } else {
            let rehearse = match cfg.rehearsal {
                Rehearsal::Baseline => Rehearse::None,
                Rehearsal::Prompter => Rehearse::Pool(&state.pool),
                Rehearsal::CameraSummary => Rehearse::Summaries(&state.summaries),
                Rehearsal::Replay => Rehearse::Replay(&sets[..t], &state.buffer),
            };
            run_adaptation_task(net, rehearse, &sets[t], task, &ctx, prompter)?
        };
        state.net = output.net;
        report.losses.extend(output.losses);
        report.epochs.extend(output.epochs);
        match cfg.rehearsal {
            Rehearsal::Prompter => {
                let p = output.prompter.expect("prompter trained in prompter mode");
                state.pool.push(task.id.clone(), p)?;
            }
            Rehearsal::CameraSummary => {
                let data = &sets[t];
                let labs: Vec<_> = data
                    .read_all(Phase::Train(t))
                    .par_iter()
                    .map(|im| srgb_to_lab(im))
                    .collect::<Result<_>>()?;
                let cams: Vec<Option<String>> = (0..data.len()).map(|i| data.meta(i).1.map(|c| c.to_string())).collect();
                let summary = camera_summary(labs.iter().zip(&cams).map(|(l, c)| (l, c.as_deref())))?;
                state.summaries.push(summary.into_iter().map(|c| c.stats).collect());
            }
            Rehearsal::Replay => {
                let mut rng = substream(cfg.seed, "reservoir", t as u64);
                let n = sets[t].len();
                reservoir_update(&mut state.buffer, &mut state.seen, cfg.training.replay_capacity, t, n, &mut rng);
            }
            Rehearsal::Baseline => {}
        }

        let phase = Phase::Eval(t);
        for (d, data) in tasks.iter().enumerate().take(t + 1) {
            let m = evaluate(&state.net, EvalSet { owner: d, query: &data.query, gallery: &data.gallery }, phase, log);
            report.eval.push(eval_row(&task.id, &cfg.tasks[d].id, m));
        }
        for (u, data) in unseen.iter().enumerate() {
            let owner = tasks.len() + u;
            let m = evaluate(&state.net, EvalSet { owner, query: &data.query, gallery: &data.gallery }, phase, log);
            report.eval.push(eval_row(&task.id, &cfg.unseen[u].id, m));
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            state.net.save(&checkpoint_path(dir, &task.id))?;
        }
    }
    Ok(())
}

/// Embedding checkpoint written after a task.
pub fn checkpoint_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("model_{task_id}.bin"))
}

fn eval_row(after: &str, dataset: &str, m: RetrievalMetrics) -> EvalRow {
    EvalRow {
        after_task: after.to_string(),
        dataset: dataset.to_string(),
        map: m.map,
        rank1: m.rank1,
        evaluated: m.evaluated,
        skipped: m.skipped,
    }
}

/// Load a stream's final pool or an embedding checkpoint.
pub fn load_embed(path: &Path) -> Result<EmbedNet> {
    EmbedNet::from_mlp(
        checkpoint::read_file(path, Kind::EmbedModel)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Corrupt("empty model container".into()))?
            .1,
    )
}
