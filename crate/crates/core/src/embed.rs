//! Embedding model and cluster-level contrastive machinery: prototype
//! memory with momentum updates, the prototype contrastive loss, density
//! clustering for pseudo-labels, and cross-camera retrieval metrics.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rayon::prelude::*;

use crate::colorspace::Image;
use crate::nn::{grid_features, Adam, Mlp, DEFAULT_LR, GRID_INPUTS};
use crate::{Error, Result};

pub const EMBED_DIM: usize = 64;
pub const EMBED_LAYERS: [usize; 3] = [GRID_INPUTS, 128, EMBED_DIM];
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_EPS: f64 = 0.5;
pub const DEFAULT_MIN_SAMPLES: usize = 4;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale to unit length; the zero vector maps to the normalized all-ones vector.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n < 1e-12 {
        let u = 1.0 / (v.len() as f64).sqrt();
        return vec![u; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNet {
    mlp: Mlp,
}

impl EmbedNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { mlp: Mlp::new(&EMBED_LAYERS, rng).expect("fixed layer sizes are valid") }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.sizes().len() < 2 || mlp.input_len() != GRID_INPUTS {
            return Err(Error::InvalidArgument(format!("embedding expects {GRID_INPUTS} inputs")));
        }
        mlp.check_finite()?;
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_len()
    }

    pub fn embed(&self, img: &Image) -> Vec<f64> {
        normalize(&self.mlp.forward(&grid_features(img)))
    }

    pub fn embed_all(&self, imgs: &[&Image]) -> Vec<Vec<f64>> {
        imgs.par_iter().map(|img| self.embed(img)).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::write_file(path, crate::checkpoint::Kind::EmbedModel, &[("embed", &self.mlp)])
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut entries = crate::checkpoint::read_file(path, crate::checkpoint::Kind::EmbedModel)?;
        if entries.len() != 1 {
            return Err(Error::Corrupt(format!("expected 1 model, found {}", entries.len())));
        }
        Self::from_mlp(entries.pop().unwrap().1)
    }
}

/// One unit-norm prototype per class, with temperature and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    prototypes: Vec<Vec<f64>>,
    pub tau: f64,
    pub alpha: f64,
    /// Re-project prototypes to the unit sphere after each update.
    pub renormalize: bool,
}

impl PrototypeMemory {
    pub fn new(prototypes: Vec<Vec<f64>>, tau: f64, alpha: f64) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::Empty("prototype memory"));
        }
        let d = prototypes[0].len();
        if d == 0 || prototypes.iter().any(|p| p.len() != d) {
            return Err(Error::Dimensions("prototypes must share a non-zero dimension".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("momentum {alpha} outside [0, 1]")));
        }
        Ok(Self { prototypes, tau, alpha, renormalize: true })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.prototypes.len() {
            return Err(Error::LabelOutOfRange { label, classes: self.prototypes.len() });
        }
        Ok(())
    }

    /// Softmax over `⟨f, cᵢ⟩/τ`, computed with max subtraction.
    fn softmax(&self, f: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self.prototypes.iter().map(|c| dot(f, c) / self.tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

/// `−log softmax(⟨f, c⟩/τ)[label]`.
pub fn contrastive_loss(f: &[f64], memory: &PrototypeMemory, label: usize) -> Result<f64> {
    memory.check_label(label)?;
    let logits: Vec<f64> = memory.prototypes.iter().map(|c| dot(f, c) / memory.tau).collect();
    Ok(logits_loss(&logits, label))
}

/// Cross-entropy of raw logits; exposed so shift invariance can be tested
/// on the logits directly.
pub fn logits_loss(logits: &[f64], label: usize) -> f64 {
    let pos = logits[label];
    let m = logits.iter().map(|l| l - pos).fold(f64::NEG_INFINITY, f64::max);
    if m <= 0.0 {
        // ln(1 + Σⱼ≠₊ e^(sⱼ−s₊)) keeps precision when the positive dominates.
        let rest: f64 = logits.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, l)| (l - pos).exp()).sum();
        rest.ln_1p()
    } else {
        m + logits.iter().map(|l| (l - pos - m).exp()).sum::<f64>().ln()
    }
}

/// `∂L/∂f = (Σᵢ pᵢ cᵢ − c⁺)/τ`, prototypes held constant.
pub fn contrastive_grad(f: &[f64], memory: &PrototypeMemory, label: usize) -> Result<Vec<f64>> {
    memory.check_label(label)?;
    let p = memory.softmax(f);
    let mut g = vec![0.0; f.len()];
    for (pi, c) in p.iter().zip(&memory.prototypes) {
        for (gj, cj) in g.iter_mut().zip(c) {
            *gj += pi * cj;
        }
    }
    for (gj, cj) in g.iter_mut().zip(&memory.prototypes[label]) {
        *gj = (*gj - cj) / memory.tau;
    }
    Ok(g)
}

/// Momentum update, once per class present in the batch:
/// `cᵢ ← α·cᵢ + (1−α)·mean{f : label(f) = i}`, then renormalized.
pub fn memory_update(memory: &mut PrototypeMemory, batch: &[(&[f64], usize)]) -> Result<()> {
    let mut groups: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, label) in batch {
        memory.check_label(*label)?;
        let e = groups.entry(*label).or_insert_with(|| (vec![0.0; f.len()], 0));
        for (a, v) in e.0.iter_mut().zip(f.iter()) {
            *a += v;
        }
        e.1 += 1;
    }
    let alpha = memory.alpha;
    for (label, (sum, n)) in groups {
        let c = &mut memory.prototypes[label];
        for (cj, sj) in c.iter_mut().zip(&sum) {
            *cj = alpha * *cj + (1.0 - alpha) * sj / n as f64;
        }
        if memory.renormalize {
            *c = normalize(c);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeling {
    /// Cluster index per sample, `None` for outliers.
    pub labels: Vec<Option<usize>>,
    pub eps: f64,
    pub min_samples: usize,
}

impl PseudoLabeling {
    pub fn cluster_count(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// Density clustering over cosine distance `1 − ⟨a, b⟩`. A point is core if
/// at least `min_samples` points (itself included) lie within `eps`. Clusters
/// are numbered in order of their first core point.
pub fn cluster_pseudo_labels(features: &[Vec<f64>], eps: f64, min_samples: usize) -> Result<PseudoLabeling> {
    if features.is_empty() {
        return Err(Error::Empty("clustering input"));
    }
    let n = features.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| 1.0 - dot(&features[i], &features[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    Ok(PseudoLabeling { labels, eps, min_samples })
}

/// Prototype per cluster: the normalized mean of its members.
pub fn init_memory_from_clusters(
    features: &[Vec<f64>],
    labeling: &PseudoLabeling,
    tau: f64,
    alpha: f64,
) -> Result<PrototypeMemory> {
    let k = labeling.cluster_count();
    if k == 0 {
        return Err(Error::NoClusters { eps: labeling.eps, min_samples: labeling.min_samples });
    }
    let d = features[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    for (f, l) in features.iter().zip(&labeling.labels) {
        if let Some(l) = l {
            for (s, v) in sums[*l].iter_mut().zip(f) {
                *s += v;
            }
        }
    }
    PrototypeMemory::new(sums.iter().map(|s| normalize(s)).collect(), tau, alpha)
}

/// Prototype per class from ground-truth labels `0..classes`.
pub fn init_memory_from_labels(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    tau: f64,
    alpha: f64,
) -> Result<PrototypeMemory> {
    let labeling = PseudoLabeling { labels: labels.iter().map(|&l| Some(l)).collect(), eps: 0.0, min_samples: 1 };
    let mut m = init_memory_from_clusters(features, &labeling, tau, alpha)?;
    if m.len() != classes {
        return Err(Error::InvalidArgument(format!("expected {classes} classes, found {}", m.len())));
    }
    m.renormalize = true;
    Ok(m)
}

/// One weighted contrastive term of a training batch.
#[derive(Debug, Clone)]
pub struct Term<'a> {
    pub image: &'a Image,
    pub label: usize,
    pub weight: f64,
}

/// Embedding network with its optimizer.
#[derive(Debug, Clone)]
pub struct EmbedTrainer {
    pub net: EmbedNet,
    opt: Adam,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `Σ wᵢ·L(fᵢ) / batch_size`.
    pub loss: f64,
    /// Features from the forward pass, one per term.
    pub features: Vec<Vec<f64>>,
}

impl EmbedTrainer {
    pub fn new(net: EmbedNet, lr: f64) -> Self {
        let n = net.mlp.params().len();
        Self { net, opt: Adam::new(lr, n) }
    }

    pub fn with_default_lr(net: EmbedNet) -> Self {
        Self::new(net, DEFAULT_LR)
    }

    /// Weighted objective over `terms`, normalized by `batch_size`, and its
    /// gradient with respect to the network parameters.
    pub fn loss_and_grad(
        net: &EmbedNet,
        terms: &[Term<'_>],
        memory: &PrototypeMemory,
        batch_size: usize,
    ) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        for t in terms {
            memory.check_label(t.label)?;
        }
        let scale = 1.0 / batch_size.max(1) as f64;
        let inputs: Vec<Vec<f64>> = terms.par_iter().map(|t| grid_features(t.image)).collect();
        let grad = net.mlp.batch_gradient(terms.len(), |i, mlp| {
            let t = &terms[i];
            if t.weight == 0.0 {
                return None;
            }
            let trace = mlp.forward_trace(&inputs[i]);
            let z = trace.output();
            let norm = dot(z, z).sqrt().max(1e-12);
            let f: Vec<f64> = z.iter().map(|v| v / norm).collect();
            let g = contrastive_grad(&f, memory, t.label).expect("label checked");
            // ∂f/∂z = (I − f fᵀ)/‖z‖
            let fg = dot(&f, &g);
            let gz: Vec<f64> = g.iter().zip(&f).map(|(gi, fi)| (gi - fi * fg) / norm * t.weight * scale).collect();
            Some((trace, gz))
        });
        let features: Vec<Vec<f64>> = inputs.par_iter().map(|x| normalize(&net.mlp.forward(x))).collect();
        let mut loss = 0.0;
        for (t, f) in terms.iter().zip(&features) {
            if t.weight != 0.0 {
                loss += t.weight * contrastive_loss(f, memory, t.label)?;
            }
        }
        Ok((loss * scale, grad, features))
    }

    /// One Adam step on the weighted contrastive objective. The memory is
    /// read only; the caller updates it with the returned features.
    pub fn step(&mut self, terms: &[Term<'_>], memory: &PrototypeMemory, batch_size: usize) -> Result<StepOutput> {
        let (loss, grad, features) = Self::loss_and_grad(&self.net, terms, memory, batch_size)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("embedding loss {loss}")));
        }
        self.opt.step(self.net.mlp.params_mut(), &grad);
        Ok(StepOutput { loss, features })
    }
}

/// A retrieval probe: feature plus identity and optional camera.
#[derive(Debug, Clone)]
pub struct Probe {
    pub feature: Vec<f64>,
    pub identity: u32,
    pub camera: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    /// Queries that contributed to the averages.
    pub evaluated: usize,
    /// Queries without any valid positive after exclusion.
    pub skipped: usize,
}

/// Cosine ranking with same-identity-same-camera exclusion. Ties keep
/// gallery order.
pub fn evaluate_retrieval(query: &[Probe], gallery: &[Probe]) -> RetrievalMetrics {
    let per_query: Vec<Option<(f64, f64)>> = query
        .par_iter()
        .map(|q| {
            let mut ranked: Vec<(f64, bool)> = gallery
                .iter()
                .filter(|g| !(g.identity == q.identity && g.camera.is_some() && g.camera == q.camera))
                .map(|g| (cosine(&q.feature, &g.feature), g.identity == q.identity))
                .collect();
            let positives = ranked.iter().filter(|(_, p)| *p).count();
            if positives == 0 {
                return None;
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut hits = 0;
            let mut ap = 0.0;
            for (k, (_, pos)) in ranked.iter().enumerate() {
                if *pos {
                    hits += 1;
                    ap += hits as f64 / (k + 1) as f64;
                }
            }
            Some((ap / positives as f64, if ranked[0].1 { 1.0 } else { 0.0 }))
        })
        .collect();
    let valid: Vec<(f64, f64)> = per_query.iter().flatten().copied().collect();
    let n = valid.len();
    if n == 0 {
        return RetrievalMetrics { skipped: query.len(), ..Default::default() };
    }
    RetrievalMetrics {
        map: valid.iter().map(|v| v.0).sum::<f64>() / n as f64,
        rank1: valid.iter().map(|v| v.1).sum::<f64>() / n as f64,
        evaluated: n,
        skipped: query.len() - n,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = (dot(a, a) * dot(b, b)).sqrt();
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
        normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn uniform_similarity_gives_log_n() {
        let mem = PrototypeMemory::new(vec![unit(5, 1), unit(5, 2), unit(5, 3), unit(5, 4)], 0.05, 0.2).unwrap();
        let l = contrastive_loss(&unit(5, 0), &mem, 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mem = PrototypeMemory::new(vec![unit(3, 1)], 0.05, 0.2).unwrap();
        assert_eq!(contrastive_loss(&unit(3, 0), &mem, 0).unwrap(), 0.0);
    }

    #[test]
    fn aligned_positive_loss() {
        let mem = PrototypeMemory::new(vec![unit(2, 0), unit(2, 1)], 0.05, 0.2).unwrap();
        let l = contrastive_loss(&unit(2, 0), &mem, 0).unwrap();
        let expect = (-20f64).exp().ln_1p();
        assert!((l - expect).abs() < 1e-18, "{l} vs {expect}");
        assert!((l - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn label_out_of_range() {
        let mem = PrototypeMemory::new(vec![unit(2, 0)], 0.05, 0.2).unwrap();
        assert!(matches!(contrastive_loss(&unit(2, 0), &mem, 1), Err(Error::LabelOutOfRange { .. })));
        assert!(contrastive_grad(&unit(2, 0), &mem, 3).is_err());
    }

    #[test]
    fn memory_validation() {
        assert!(PrototypeMemory::new(vec![], 0.05, 0.2).is_err());
        assert!(PrototypeMemory::new(vec![unit(2, 0)], 0.0, 0.2).is_err());
        assert!(PrototypeMemory::new(vec![unit(2, 0)], 0.05, 1.5).is_err());
        assert!(PrototypeMemory::new(vec![unit(2, 0), unit(3, 0)], 0.05, 0.2).is_err());
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = crate::seeded(12);
        for _ in 0..10 {
            let protos: Vec<Vec<f64>> = (0..5).map(|_| random_unit(&mut rng, 6)).collect();
            let mem = PrototypeMemory::new(protos, 0.3, 0.2).unwrap();
            let f = random_unit(&mut rng, 6);
            let label = rng.random_range(0..5);
            let g = contrastive_grad(&f, &mem, label).unwrap();
            let h = 1e-5;
            for j in 0..6 {
                let mut fp = f.clone();
                fp[j] += h;
                let mut fm = f.clone();
                fm[j] -= h;
                let fd = (contrastive_loss(&fp, &mem, label).unwrap() - contrastive_loss(&fm, &mem, label).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6) < 1e-4, "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn uniform_grad_points_away_from_positive() {
        let protos = vec![unit(4, 1), unit(4, 2), unit(4, 3)];
        let mem = PrototypeMemory::new(protos.clone(), 0.05, 0.2).unwrap();
        let g = contrastive_grad(&unit(4, 0), &mem, 1).unwrap();
        for j in 0..4 {
            let mean = protos.iter().map(|p| p[j]).sum::<f64>() / 3.0;
            let expect = -(protos[1][j] - mean) / 0.05;
            assert!((g[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_vanishes_as_temperature_grows() {
        let mut rng = crate::seeded(1);
        let protos: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 4)).collect();
        let f = random_unit(&mut rng, 4);
        let norm = |tau: f64| {
            let mem = PrototypeMemory::new(protos.clone(), tau, 0.2).unwrap();
            dot(&contrastive_grad(&f, &mem, 0).unwrap(), &contrastive_grad(&f, &mem, 0).unwrap()).sqrt()
        };
        assert!(norm(1e3) < 1e-2 * norm(1.0));
        assert!(norm(1e6) < 1e-5);
    }

    #[test]
    fn momentum_update_arithmetic() {
        let mut mem = PrototypeMemory::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.05, 0.2).unwrap();
        mem.renormalize = false;
        let f = [0.0, 1.0];
        memory_update(&mut mem, &[(&f, 0)]).unwrap();
        assert_eq!(mem.prototypes()[0], vec![0.2, 0.8]);
        assert_eq!(mem.prototypes()[1], vec![0.0, 1.0]);

        let mut mem = PrototypeMemory::new(vec![vec![1.0, 0.0]], 0.05, 0.2).unwrap();
        memory_update(&mut mem, &[(&f, 0)]).unwrap();
        let c = &mem.prototypes()[0];
        assert!((c[0] - 0.242_535_625).abs() < 1e-9 && (c[1] - 0.970_142_5).abs() < 1e-7);
        assert!((dot(c, c).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn momentum_one_and_empty_batch_are_no_ops() {
        let start = PrototypeMemory::new(vec![vec![1.0, 0.0]], 0.05, 1.0).unwrap();
        let mut mem = start.clone();
        memory_update(&mut mem, &[(&[0.0, 1.0], 0)]).unwrap();
        assert_eq!(mem, start);
        let mut mem = PrototypeMemory::new(vec![vec![1.0, 0.0]], 0.05, 0.2).unwrap();
        let before = mem.clone();
        memory_update(&mut mem, &[]).unwrap();
        assert_eq!(mem, before);
    }

    #[test]
    fn batch_mean_applied_once_per_class() {
        let mut mem = PrototypeMemory::new(vec![vec![1.0, 0.0, 0.0]], 0.05, 0.5).unwrap();
        mem.renormalize = false;
        memory_update(&mut mem, &[(&[0.0, 1.0, 0.0], 0), (&[0.0, 0.0, 1.0], 0)]).unwrap();
        assert_eq!(mem.prototypes()[0], vec![0.5, 0.25, 0.25]);
    }

    fn bundle(rng: &mut impl Rng, center: &[f64], n: usize, jitter: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| normalize(&center.iter().map(|c| c + rng.random_range(-jitter..jitter)).collect::<Vec<_>>()))
            .collect()
    }

    // Brute-force oracle: connected components of the core graph plus
    // border attachment, computed by repeated relaxation.
    fn oracle_partition(f: &[Vec<f64>], eps: f64, min: usize) -> Vec<Option<usize>> {
        let n = f.len();
        let near = |i: usize, j: usize| 1.0 - dot(&f[i], &f[j]) <= eps;
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min).collect();
        let mut comp: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if core[i] && core[j] && near(i, j) && comp[j] < comp[i] {
                        comp[i] = comp[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (0..n)
            .map(|i| {
                if core[i] {
                    Some(comp[i])
                } else {
                    (0..n).find(|&j| core[j] && near(i, j)).map(|j| comp[j])
                }
            })
            .collect()
    }

    fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
        let n = a.len();
        (0..n).all(|i| {
            (a[i].is_none() == b[i].is_none())
                && (0..n).all(|j| a[i].is_none() || a[j].is_none() || ((a[i] == a[j]) == (b[i] == b[j])))
        })
    }

    #[test]
    fn antipodal_bundles_form_two_clusters() {
        let mut rng = crate::seeded(5);
        let mut f = bundle(&mut rng, &[1.0, 0.0, 0.0, 0.0], 10, 0.1);
        f.extend(bundle(&mut rng, &[-1.0, 0.0, 0.0, 0.0], 10, 0.1));
        let p = cluster_pseudo_labels(&f, 0.3, 4).unwrap();
        assert_eq!(p.cluster_count(), 2);
        assert_eq!(p.outliers(), 0);
        assert!(same_partition(&p.labels, &oracle_partition(&f, 0.3, 4)));
    }

    #[test]
    fn identical_vectors_one_cluster_and_min_samples_above_n() {
        let f = vec![unit(3, 0); 6];
        assert_eq!(cluster_pseudo_labels(&f, 0.1, 3).unwrap().cluster_count(), 1);
        let p = cluster_pseudo_labels(&f, 0.1, 7).unwrap();
        assert_eq!(p.outliers(), 6);
        assert!(cluster_pseudo_labels(&[], 0.1, 1).is_err());
    }

    #[test]
    fn init_from_clusters() {
        let f = vec![unit(2, 0), unit(2, 1)];
        let one = PseudoLabeling { labels: vec![Some(0), Some(0)], eps: 0.5, min_samples: 1 };
        let m = init_memory_from_clusters(&f, &one, 0.05, 0.2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.prototypes()[0][0] - h).abs() < 1e-15 && (m.prototypes()[0][1] - h).abs() < 1e-15);

        let singletons = cluster_pseudo_labels(&f, 0.0, 1).unwrap();
        let m = init_memory_from_clusters(&f, &singletons, 0.05, 0.2).unwrap();
        assert_eq!(m.prototypes(), &f[..]);

        let none = PseudoLabeling { labels: vec![None, None], eps: 0.5, min_samples: 4 };
        assert!(matches!(init_memory_from_clusters(&f, &none, 0.05, 0.2), Err(Error::NoClusters { .. })));
    }

    #[test]
    fn init_matches_brute_force_mean() {
        let mut rng = crate::seeded(9);
        let f: Vec<Vec<f64>> = (0..12).map(|_| random_unit(&mut rng, 5)).collect();
        let labels: Vec<Option<usize>> = (0..12).map(|i| if i % 5 == 4 { None } else { Some(i % 3) }).collect();
        let p = PseudoLabeling { labels: labels.clone(), eps: 0.5, min_samples: 2 };
        let m = init_memory_from_clusters(&f, &p, 0.05, 0.2).unwrap();
        for k in 0..3 {
            let mut s = vec![0.0; 5];
            for i in 0..12 {
                if labels[i] == Some(k) {
                    for j in 0..5 {
                        s[j] += f[i][j];
                    }
                }
            }
            let n = dot(&s, &s).sqrt();
            for j in 0..5 {
                assert!((m.prototypes()[k][j] - s[j] / n).abs() < 1e-12);
            }
        }
    }

    fn probe(feature: Vec<f64>, identity: u32, camera: u32) -> Probe {
        Probe { feature, identity, camera: Some(camera) }
    }

    #[test]
    fn duplicate_in_other_camera_is_perfect() {
        let q = [probe(unit(3, 0), 1, 0)];
        let g = [probe(unit(3, 1), 2, 1), probe(unit(3, 0), 1, 1), probe(unit(3, 0), 1, 0)];
        let m = evaluate_retrieval(&q, &g);
        assert_eq!((m.map, m.rank1, m.evaluated), (1.0, 1.0, 1));
    }

    #[test]
    fn hand_ranked_average_precision() {
        // Query A ranks gallery [+, −, +, −] → AP = (1/1 + 2/3)/2.
        // Query B ranks gallery [−, −, −, +] → AP = 1/4, rank-1 miss.
        let g = vec![
            probe(vec![1.0, 0.0], 1, 1),
            probe(vec![0.9, 0.1], 2, 1),
            probe(vec![0.7, 0.3], 1, 2),
            probe(vec![0.0, 1.0], 3, 1),
        ];
        let qa = probe(vec![1.0, 0.0], 1, 0);
        let qb = probe(vec![0.8, 0.2], 3, 0);
        let m = evaluate_retrieval(&[qa, qb], &g);
        let expect = ((1.0 + 2.0 / 3.0) / 2.0 + 0.25) / 2.0;
        assert!((m.map - expect).abs() < 1e-12, "{}", m.map);
        assert_eq!(m.rank1, 0.5);
    }

    #[test]
    fn identical_embeddings_follow_gallery_order() {
        let g: Vec<Probe> = [(2, 1), (1, 1), (3, 1), (1, 2)].iter().map(|&(i, c)| probe(unit(2, 0), i, c)).collect();
        let q = probe(unit(2, 0), 1, 0);
        let m = evaluate_retrieval(&[q], &g);
        // Ranked order is the gallery order: positives at ranks 2 and 4.
        assert_eq!(m.rank1, 0.0);
        assert!((m.map - (0.5 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn query_without_positives_is_skipped() {
        let q = [probe(unit(2, 0), 1, 0), probe(unit(2, 0), 5, 0)];
        let g = [probe(unit(2, 0), 1, 1), probe(unit(2, 0), 5, 0)];
        let m = evaluate_retrieval(&q, &g);
        assert_eq!((m.evaluated, m.skipped), (1, 1));
    }

    #[test]
    fn embed_outputs_unit_vectors() {
        let net = EmbedNet::new(&mut crate::seeded(3));
        let img = Image::filled(16, 8, [0.2, 0.7, 0.4]).unwrap();
        let f = net.embed(&img);
        assert_eq!(f.len(), EMBED_DIM);
        assert!((dot(&f, &f).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut rng = crate::seeded(31);
        let net = EmbedNet::new(&mut rng);
        let imgs: Vec<Image> = (0..3)
            .map(|_| {
                let px = (0..32 * 16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
                Image::new(32, 16, px).unwrap()
            })
            .collect();
        let protos: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, EMBED_DIM)).collect();
        let mem = PrototypeMemory::new(protos, 0.05, 0.2).unwrap();
        let terms: Vec<Term> = imgs
            .iter()
            .enumerate()
            .map(|(i, im)| Term { image: im, label: i % 4, weight: 0.25 + 0.5 * i as f64 })
            .collect();
        let (_, grad, _) = EmbedTrainer::loss_and_grad(&net, &terms, &mem, 3).unwrap();
        let loss_at = |n: &EmbedNet| EmbedTrainer::loss_and_grad(n, &terms, &mem, 3).unwrap().0;
        let h = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let i = rng.random_range(0..grad.len());
            if grad[i].abs() < 1e-6 {
                continue;
            }
            let mut plus = net.clone();
            plus.mlp_mut().params_mut()[i] += h;
            let mut minus = net.clone();
            minus.mlp_mut().params_mut()[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(rel < 1e-4, "param {i}: {fd} vs {}", grad[i]);
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn loss_is_shift_invariant(logits in proptest::collection::vec(-30.0..30.0f64, 2..8), shift in -50.0..50.0f64) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            prop_assert!((logits_loss(&logits, 0) - logits_loss(&shifted, 0)).abs() < 1e-9);
        }

        #[test]
        fn loss_positive_with_two_or_more_classes(seed in 0u64..500, classes in 2usize..6) {
            let mut rng = crate::seeded(seed);
            let mem = PrototypeMemory::new((0..classes).map(|_| random_unit(&mut rng, 4)).collect(), 0.05, 0.2).unwrap();
            let f = random_unit(&mut rng, 4);
            prop_assert!(contrastive_loss(&f, &mem, 0).unwrap() > 0.0);
        }

        #[test]
        fn prototypes_stay_unit_norm(seed in 0u64..500, rounds in 1usize..20) {
            let mut rng = crate::seeded(seed);
            let mut mem = PrototypeMemory::new((0..3).map(|_| random_unit(&mut rng, 5)).collect(), 0.05, 0.2).unwrap();
            for _ in 0..rounds {
                let feats: Vec<(Vec<f64>, usize)> = (0..4).map(|_| (random_unit(&mut rng, 5), rng.random_range(0..3))).collect();
                let batch: Vec<(&[f64], usize)> = feats.iter().map(|(f, l)| (f.as_slice(), *l)).collect();
                memory_update(&mut mem, &batch).unwrap();
            }
            for c in mem.prototypes() {
                prop_assert!((dot(c, c).sqrt() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn clustering_is_permutation_stable(seed in 0u64..200, rot in 0usize..24) {
            let mut rng = crate::seeded(seed);
            let mut f = bundle(&mut rng, &[1.0, 0.0, 0.0], 8, 0.3);
            f.extend(bundle(&mut rng, &[0.0, 1.0, 0.0], 8, 0.3));
            f.extend(bundle(&mut rng, &[0.0, 0.0, 1.0], 8, 0.6));
            let a = cluster_pseudo_labels(&f, 0.15, 3).unwrap();
            let mut g = f.clone();
            g.rotate_left(rot);
            let b = cluster_pseudo_labels(&g, 0.15, 3).unwrap();
            let mut b_back = b.labels.clone();
            b_back.rotate_right(rot);
            // Border points reachable from two clusters may attach to either,
            // so compare core points only.
            let core: Vec<bool> = (0..f.len())
                .map(|i| f.iter().filter(|o| 1.0 - dot(&f[i], o) <= 0.15).count() >= 3)
                .collect();
            let pick = |l: &[Option<usize>]| -> Vec<Option<usize>> {
                l.iter().zip(&core).map(|(x, c)| if *c { *x } else { None }).collect()
            };
            prop_assert!(same_partition(&pick(&a.labels), &pick(&b_back)));
            prop_assert!(same_partition(&pick(&a.labels), &pick(&oracle_partition(&f, 0.15, 3))));
        }

        #[test]
        fn metrics_scale_invariant(seed in 0u64..200, scale in 0.1..10.0f64) {
            let mut rng = crate::seeded(seed);
            let mk = |rng: &mut crate::SeededRng, n: usize| -> Vec<Probe> {
                (0..n).map(|i| Probe { feature: random_unit(rng, 4), identity: (i % 3) as u32, camera: Some((i % 2) as u32) }).collect()
            };
            let q = mk(&mut rng, 6);
            let g = mk(&mut rng, 12);
            let scaled: Vec<Probe> = g.iter().map(|p| Probe { feature: p.feature.iter().map(|v| v * scale).collect(), ..p.clone() }).collect();
            prop_assert_eq!(evaluate_retrieval(&q, &g), evaluate_retrieval(&q, &scaled));
        }
    }
}
