use crate::cbb::orthonormal_rows;
use crate::error::{CbbError, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// One synthetic domain: class content plus a label-correlated confounder
/// ("style") plus isotropic noise, at feature-map level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    pub n_samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub content_strength: f64,
    pub confounder_strength: f64,
    /// With probability `|corr|` the confounder copies the label (or its
    /// successor modulo `n_classes` when negative); otherwise it is uniform.
    /// Zero makes the confounder independent of the label.
    pub confounder_label_corr: f64,
    pub noise_std: f64,
    /// Share of each content pattern's energy that is constant over space.
    /// The rest is a fixed zero-mean sign pattern over positions, so mean
    /// pooling sees only `sqrt(content_uniform)` of the content amplitude.
    pub content_uniform: f64,
    /// Seed for the draws of labels, confounders and noise.
    pub seed: u64,
    /// Seed for the content and style patterns. Domains meant to be
    /// compared must share it.
    pub pattern_seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            channels: 32,
            height: 4,
            width: 4,
            n_classes: 4,
            content_strength: 1.0,
            confounder_strength: 2.0,
            confounder_label_corr: 0.95,
            noise_std: 1.5,
            content_uniform: 1.0,
            seed: 0,
            pattern_seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn n_positions(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CbbError::Param(m));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!(
                "spatial extent {}x{} is empty",
                self.height, self.width
            ));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if 2 * self.n_classes > self.channels {
            return bad(format!(
                "{} classes need {} orthogonal patterns but only {} channels",
                self.n_classes,
                2 * self.n_classes,
                self.channels
            ));
        }
        if self.confounder_label_corr.is_nan() || self.confounder_label_corr.abs() > 1.0 {
            return bad(format!(
                "confounder_label_corr {} outside [-1, 1]",
                self.confounder_label_corr
            ));
        }
        if !(0.0..=1.0).contains(&self.content_uniform) {
            return bad(format!(
                "content_uniform {} outside [0, 1]",
                self.content_uniform
            ));
        }
        for (name, v) in [
            ("content_strength", self.content_strength),
            ("confounder_strength", self.confounder_strength),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Features `B x N x C` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Confounder value per sample, kept for diagnostics.
    pub confounders: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rank() != 3 || features.shape()[0] != labels.len() {
            return Err(CbbError::Shape(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(CbbError::Param(format!(
                "label {bad} outside 0..{n_classes}"
            )));
        }
        let confounders = vec![0; labels.len()];
        Ok(Self {
            features,
            labels,
            confounders,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let row = self.features.numel() / self.len();
        let mut shape = self.features.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.features.data()[i * row..(i + 1) * row]);
        }
        Self {
            features: Tensor::new(shape, data).expect("rows of a valid tensor"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            confounders: idx.iter().map(|&i| self.confounders[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Fraction of samples whose confounder equals their label.
    pub fn confounder_agreement(&self) -> f64 {
        let hits = self
            .labels
            .iter()
            .zip(&self.confounders)
            .filter(|(y, z)| y == z)
            .count();
        hits as f64 / self.len() as f64
    }
}

/// Fixed per-class content and per-value style patterns, each `N x C`.
#[derive(Debug, Clone)]
pub struct Patterns {
    pub content: Vec<Tensor>,
    pub style: Vec<Tensor>,
}

/// Content patterns are unit channel directions laid over a class-specific
/// spatial profile; style patterns are unit channel directions, constant
/// over space. All channel directions are mutually orthogonal.
pub fn patterns(spec: &DomainSpec) -> Patterns {
    let (n, c, k) = (spec.n_positions(), spec.channels, spec.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.pattern_seed);
    let dirs = orthonormal_rows(2 * k, c, &mut rng);
    let dir = |i: usize| &dirs.data()[i * c..(i + 1) * c];
    let content = (0..k)
        .map(|cls| {
            let profile = spatial_profile(n, spec.content_uniform, &mut rng);
            let data = profile
                .iter()
                .flat_map(|&s| dir(cls).iter().map(move |d| s * d))
                .collect();
            Tensor::new([n, c], data).expect("finite pattern")
        })
        .collect();
    let style = (0..k)
        .map(|z| {
            let data = (0..n).flat_map(|_| dir(k + z).iter().copied()).collect();
            Tensor::new([n, c], data).expect("finite pattern")
        })
        .collect();
    Patterns { content, style }
}

/// Per-position amplitudes `sqrt(u) + sqrt(1 - u) * r` where `r` is a
/// shuffled, zero-mean sign pattern with unit root-mean-square.
fn spatial_profile(n: usize, uniform: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut signs: Vec<f64> = (0..n)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    if n % 2 == 1 {
        // An odd count cannot balance; zero one entry and rescale.
        signs[n - 1] = 0.0;
    }
    signs.shuffle(rng);
    let rms = (signs.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let (a, b) = (uniform.sqrt(), (1.0 - uniform).sqrt());
    signs
        .into_iter()
        .map(|r| a + if rms > 0.0 { b * r / rms } else { 0.0 })
        .collect()
}

fn draw_confounder(rng: &mut ChaCha8Rng, label: usize, corr: f64, k: usize) -> usize {
    if rng.random::<f64>() < corr.abs() {
        if corr >= 0.0 {
            label
        } else {
            (label + 1) % k
        }
    } else {
        rng.random_range(0..k)
    }
}

pub fn generate_domain(spec: &DomainSpec) -> Result<LabeledBatch> {
    spec.validate()?;
    let pats = patterns(spec);
    let (b, n, c, k) = (
        spec.n_samples,
        spec.n_positions(),
        spec.channels,
        spec.n_classes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Vec::with_capacity(b);
    let mut confounders = Vec::with_capacity(b);
    let mut data = Vec::with_capacity(b * n * c);
    for _ in 0..b {
        let y = rng.random_range(0..k);
        let z = draw_confounder(&mut rng, y, spec.confounder_label_corr, k);
        let (content, style) = (pats.content[y].data(), pats.style[z].data());
        for i in 0..n * c {
            let eps: f64 = StandardNormal.sample(&mut rng);
            data.push(
                spec.content_strength * content[i]
                    + spec.confounder_strength * style[i]
                    + spec.noise_std * eps,
            );
        }
        labels.push(y);
        confounders.push(z);
    }
    Ok(LabeledBatch {
        features: Tensor::new([b, n, c], data)?,
        labels,
        confounders,
        n_classes: k,
    })
}
