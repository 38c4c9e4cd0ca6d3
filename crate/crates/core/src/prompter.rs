//! The prompter: a small regressor from image content to the image's lαβ
//! color statistics, trained to undo color re-sampling.
//!
//! Architecture: 16×8 mean-pooled grid (384 inputs) → 128 → 64 → 6, ReLU
//! between layers. Outputs 0..3 are the channel means, outputs 3..6 are
//! log-std, so the predicted std is always positive. The loss is the mean
//! squared error over (μ, σ), not over log-σ.

use std::path::Path;

use rand::Rng;

use crate::augment::{color_resample, resample_prepared, Prepared};
use crate::checkpoint::{self, Kind};
use crate::colorspace::Image;
use crate::colorstats::ColorStats;
use crate::nn::{grid_features, Adam, Mlp, Trace, DEFAULT_LR, GRID_INPUTS};
use crate::transfer::transfer_to;
use crate::{Error, Result};

pub const PROMPTER_LAYERS: [usize; 4] = [GRID_INPUTS, 128, 64, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct PrompterNet {
    mlp: Mlp,
}

/// Mean squared error over the six (μ, σ) components.
pub fn prompter_loss(pred: &ColorStats, target: &ColorStats) -> f64 {
    pred.to_array().iter().zip(target.to_array()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 6.0
}

fn stats_from_output(out: &[f64]) -> ColorStats {
    ColorStats { mean: [out[0], out[1], out[2]], std: [out[3].exp(), out[4].exp(), out[5].exp()] }
}

impl PrompterNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { mlp: Mlp::new(&PROMPTER_LAYERS, rng).expect("fixed layer sizes are valid") }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.sizes() != PROMPTER_LAYERS {
            return Err(Error::InvalidArgument(format!(
                "prompter expects layers {PROMPTER_LAYERS:?}, got {:?}",
                mlp.sizes()
            )));
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

    pub fn forward(&self, img: &Image) -> Result<ColorStats> {
        self.mlp.check_finite()?;
        let out = self.mlp.forward(&grid_features(img));
        let stats = stats_from_output(&out);
        stats.validate()?;
        Ok(stats)
    }

    /// Last hidden layer activations, used as a retrieval feature when
    /// probing how much identity information the prompter carries.
    pub fn penultimate(&self, img: &Image) -> Vec<f64> {
        self.mlp.penultimate(&grid_features(img))
    }

    fn sample_grad(&self, img: &Image, target: &ColorStats, scale: f64) -> (Trace, Vec<f64>, f64) {
        let trace = self.mlp.forward_trace(&grid_features(img));
        let out = trace.output();
        let pred = stats_from_output(out);
        let (p, t) = (pred.to_array(), target.to_array());
        let mut g = vec![0.0; 6];
        for k in 0..6 {
            let d = 2.0 * (p[k] - t[k]) / 6.0 * scale;
            // σ = exp(y) ⇒ ∂σ/∂y = σ
            g[k] = if k < 3 { d } else { d * p[k] };
        }
        (trace, g, prompter_loss(&pred, target))
    }

    /// Batch objective `(1/N)·Σ loss(forward(xᵢ), tᵢ)` and its gradient.
    pub fn loss_and_grad(&self, samples: &[(Image, ColorStats)]) -> (f64, Vec<f64>) {
        let n = samples.len() as f64;
        let losses = std::sync::Mutex::new(vec![0.0; samples.len()]);
        let grad = self.mlp.batch_gradient(samples.len(), |i, _| {
            let (img, t) = &samples[i];
            let (trace, g, l) = self.sample_grad(img, t, 1.0 / n);
            losses.lock().unwrap()[i] = l;
            Some((trace, g))
        });
        // Summed in index order so the value is thread-count independent.
        let loss = losses.into_inner().unwrap().iter().sum::<f64>() / n;
        (loss, grad)
    }

    pub fn batch_loss(&self, samples: &[(Image, ColorStats)]) -> f64 {
        samples
            .iter()
            .map(|(img, t)| {
                let out = self.mlp.forward(&grid_features(img));
                prompter_loss(&stats_from_output(&out), t)
            })
            .sum::<f64>()
            / samples.len() as f64
    }
}

/// A prompter together with its optimizer state.
#[derive(Debug, Clone)]
pub struct PrompterTrainer {
    pub net: PrompterNet,
    opt: Adam,
}

impl PrompterTrainer {
    pub fn new(net: PrompterNet, lr: f64) -> Self {
        let n = net.mlp.params().len();
        Self { net, opt: Adam::new(lr, n) }
    }

    pub fn with_default_lr(net: PrompterNet) -> Self {
        Self::new(net, DEFAULT_LR)
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.lr = lr;
    }

    /// Corrupt the batch by color re-sampling, regress the original
    /// statistics from the corrupted images, and take one Adam step.
    /// Returns the pre-update batch loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[Image], rng: &mut R) -> Result<f64> {
        let corrupted = color_resample(batch, rng)?;
        let samples: Vec<(Image, ColorStats)> = corrupted.into_iter().map(|r| (r.image, r.original)).collect();
        self.step_on(&samples)
    }

    /// [`Self::train_step`] over images converted once with [`crate::augment::prepare`].
    pub fn train_step_prepared<R: Rng + ?Sized>(&mut self, batch: &[&Prepared], rng: &mut R) -> Result<f64> {
        let corrupted = resample_prepared(batch, rng)?;
        let samples: Vec<(Image, ColorStats)> = corrupted.into_iter().map(|r| (r.image, r.original)).collect();
        self.step_on(&samples)
    }

    /// One Adam step on already-prepared `(input, target)` pairs.
    pub fn step_on(&mut self, samples: &[(Image, ColorStats)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("prompter batch"));
        }
        let (loss, grad) = self.net.loss_and_grad(samples);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "prompter loss {loss} at step {}",
                self.opt.steps() + 1
            )));
        }
        self.opt.step(self.net.mlp.params_mut(), &grad);
        Ok(loss)
    }
}

/// Transfer `img` to the statistics the prompter predicts for it, using the
/// image's own full-frame statistics as the source.
pub fn prompter_recover(net: &PrompterNet, img: &Image) -> Result<Image> {
    let stats = net.forward(img)?;
    transfer_to(img, &stats)
}

/// Prompters of completed tasks, in task order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrompterPool {
    entries: Vec<(String, PrompterNet)>,
}

impl PrompterPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, task_id: impl Into<String>, net: PrompterNet) -> Result<()> {
        let id = task_id.into();
        if self.entries.iter().any(|(t, _)| *t == id) {
            return Err(Error::InvalidArgument(format!("task {id:?} already in pool")));
        }
        self.entries.push((id, net));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, PrompterNet)] {
        &self.entries
    }

    pub fn get(&self, task_id: &str) -> Option<&PrompterNet> {
        self.entries.iter().find(|(t, _)| t == task_id).map(|(_, n)| n)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let refs: Vec<(&str, &Mlp)> = self.entries.iter().map(|(t, n)| (t.as_str(), &n.mlp)).collect();
        checkpoint::encode(Kind::PrompterPool, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pool = PrompterPool::new();
        for (id, mlp) in checkpoint::decode(bytes, Kind::PrompterPool)? {
            let net = PrompterNet::from_mlp(mlp).map_err(|e| Error::Corrupt(e.to_string()))?;
            pool.push(id, net).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(crate::error::at(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::srgb_to_lab;
    use crate::colorstats::{image_stats, Region};

    fn textured(seed: u64, base: [f64; 3]) -> Image {
        let mut rng = crate::seeded(seed);
        let px = (0..32 * 16)
            .map(|_| base.map(|b: f64| (b + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)))
            .collect();
        Image::new(32, 16, px).unwrap()
    }

    #[test]
    fn loss_conventions() {
        let a = ColorStats::new([1.0, 0.0, 0.0], [1.0; 3]).unwrap();
        let b = ColorStats::new([0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(prompter_loss(&a, &a), 0.0);
        assert!((prompter_loss(&a, &b) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(prompter_loss(&a, &b), prompter_loss(&b, &a));
    }

    #[test]
    fn output_std_is_positive() {
        let net = PrompterNet::new(&mut crate::seeded(1));
        for s in 0..5 {
            let stats = net.forward(&textured(s, [0.3, 0.5, 0.7])).unwrap();
            assert!(stats.std.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn zero_weights_expose_last_bias() {
        let mut net = PrompterNet::new(&mut crate::seeded(1));
        let p = net.mlp_mut().params_mut();
        p.iter_mut().for_each(|v| *v = 0.0);
        let n = p.len();
        p[n - 6..].copy_from_slice(&[0.1, -0.2, 0.3, 0.0, -1.0, 0.5]);
        let s = net.forward(&textured(0, [0.5; 3])).unwrap();
        assert_eq!(s.mean, [0.1, -0.2, 0.3]);
        assert_eq!(s.std, [1.0, (-1.0f64).exp(), 0.5f64.exp()]);
    }

    #[test]
    fn within_cell_permutation_does_not_change_output() {
        // 32×16 image: each grid cell is 2×2 pixels. Swap pixels inside cells.
        let img = textured(3, [0.4, 0.4, 0.6]);
        let mut px = img.pixels().to_vec();
        for r in (0..32).step_by(2) {
            for c in (0..16).step_by(2) {
                px.swap(r * 16 + c, (r + 1) * 16 + c + 1);
            }
        }
        let swapped = Image::new(32, 16, px).unwrap();
        let net = PrompterNet::new(&mut crate::seeded(2));
        let (a, b) = (net.forward(&img).unwrap(), net.forward(&swapped).unwrap());
        for k in 0..3 {
            assert!((a.mean[k] - b.mean[k]).abs() < 1e-12);
            assert!((a.std[k] - b.std[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_weights_rejected() {
        let mut net = PrompterNet::new(&mut crate::seeded(1));
        net.mlp_mut().params_mut()[0] = f64::NAN;
        assert!(net.forward(&textured(0, [0.5; 3])).is_err());
        assert!(PrompterNet::from_mlp(net.mlp().clone()).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = crate::seeded(7);
        let mut net = PrompterNet::new(&mut rng);
        for p in net.mlp_mut().params_mut() {
            *p *= 0.5;
        }
        let batch: Vec<Image> = (0..3).map(|i| textured(i, [0.2 + 0.2 * i as f64, 0.5, 0.4])).collect();
        let samples: Vec<(Image, ColorStats)> = color_resample(&batch, &mut rng)
            .unwrap()
            .into_iter()
            .map(|r| (r.image, r.original))
            .collect();
        let (_, grad) = net.loss_and_grad(&samples);
        let n = grad.len();
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..200 {
            let i = rng.random_range(0..n);
            if grad[i].abs() < 1e-7 {
                continue;
            }
            let mut plus = net.clone();
            plus.mlp_mut().params_mut()[i] += h;
            let mut minus = net.clone();
            minus.mlp_mut().params_mut()[i] -= h;
            let fd = (plus.batch_loss(&samples) - minus.batch_loss(&samples)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
            checked += 1;
            if checked == 20 {
                break;
            }
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn zero_lr_leaves_weights_bit_exact() {
        let net = PrompterNet::new(&mut crate::seeded(5));
        let mut trainer = PrompterTrainer::new(net.clone(), 0.0);
        let batch: Vec<Image> = (0..4).map(|i| textured(i, [0.5, 0.3, 0.3])).collect();
        let loss = trainer.train_step(&batch, &mut crate::seeded(0)).unwrap();
        assert!(loss.is_finite());
        assert_eq!(trainer.net, net);
    }

    #[test]
    fn recover_untrained_is_total() {
        let net = PrompterNet::new(&mut crate::seeded(8));
        let out = prompter_recover(&net, &textured(1, [0.3, 0.6, 0.2])).unwrap();
        let s = image_stats(&srgb_to_lab(&out).unwrap(), Region::Full).unwrap();
        assert!(s.validate().is_ok());
    }

    #[test]
    fn pool_round_trip() {
        let mut rng = crate::seeded(3);
        let mut pool = PrompterPool::new();
        pool.push("t1", PrompterNet::new(&mut rng)).unwrap();
        pool.push("t2", PrompterNet::new(&mut rng)).unwrap();
        assert!(pool.push("t1", PrompterNet::new(&mut rng)).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        pool.save(&path).unwrap();
        let back = PrompterPool::load(&path).unwrap();
        assert_eq!(back, pool);
        let probe = textured(9, [0.5, 0.4, 0.3]);
        assert_eq!(back.get("t2").unwrap().forward(&probe).unwrap(), pool.get("t2").unwrap().forward(&probe).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        assert!(PrompterPool::from_bytes(&bytes[..bytes.len() / 2]).is_err());

        let empty = PrompterPool::new();
        assert_eq!(PrompterPool::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }
}
