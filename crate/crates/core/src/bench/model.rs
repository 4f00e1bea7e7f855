use super::data::LabeledBatch;
use crate::autodiff::{Sgd, SgdConfig, Tape, Var};
use crate::cbb::{
    cbb_forward, cbb_infer_parts, precompute_projection, CbbConfig, CbbParams, CbbVars, InferParts,
};
use crate::error::{shape_err, CbbError, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Linear head on mean-pooled input features.
    Baseline,
    /// The block, then the same mean pooling and linear head.
    Cbb,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Cbb => "cbb",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const HEAD_INIT_STD: f64 = 0.01;

/// A classifier: optional block followed by mean pooling and `logits = p W + b`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub kind: ModelKind,
    pub block: Option<CbbParams>,
    /// `C x n_classes`.
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub height: usize,
    pub width: usize,
}

struct Recorded {
    logits: Var,
    block: Option<CbbVars>,
    head_w: Var,
    head_b: Var,
}

impl Classifier {
    pub fn init(
        kind: ModelKind,
        block: &CbbConfig,
        n_classes: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = block.channels;
        let head_w =
            Tensor::randn([c, n_classes], HEAD_INIT_STD, &mut rng).with_requires_grad(true);
        let head_b = Tensor::zeros([n_classes]).with_requires_grad(true);
        let block = match kind {
            ModelKind::Baseline => None,
            ModelKind::Cbb => Some(CbbParams::init(&CbbConfig {
                seed,
                ..block.clone()
            })?),
        };
        Ok(Self {
            kind,
            block,
            head_w,
            head_b,
            height,
            width,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head_b.numel()
    }

    pub fn channels(&self) -> usize {
        self.head_w.shape()[0]
    }

    fn check_batch(&self, batch: &LabeledBatch) -> Result<()> {
        let want = [self.height * self.width, self.channels()];
        if batch.features.shape()[1..] != want {
            return Err(shape_err(format!(
                "batch features {:?} incompatible with model expecting B x {} x {}",
                batch.features.shape(),
                want[0],
                want[1]
            )));
        }
        if batch.n_classes != self.n_classes() {
            return Err(shape_err(format!(
                "batch has {} classes, head has {}",
                batch.n_classes,
                self.n_classes()
            )));
        }
        Ok(())
    }

    fn record(&self, tape: &mut Tape, features: &Tensor) -> Result<Recorded> {
        let x = tape.constant(features.clone());
        let (pooled_from, block) = match &self.block {
            Some(p) => {
                let vars = p.register(tape);
                let trace = cbb_forward(tape, x, &vars, self.height, self.width)?;
                (trace.output, Some(vars))
            }
            None => (x, None),
        };
        let b = features.shape()[0];
        let pooled = tape.mean_axis(pooled_from, 1)?;
        let pooled = tape.reshape(pooled, &[b, self.channels()])?;
        let head_w = tape.leaf(self.head_w.clone());
        let head_b = tape.leaf(self.head_b.clone());
        let logits = tape.matmul(pooled, head_w)?;
        let logits = tape.add_row(logits, head_b)?;
        Ok(Recorded {
            logits,
            block,
            head_w,
            head_b,
        })
    }

    /// Block output via the training-time path.
    pub fn block_forward(&self, features: &Tensor) -> Result<Option<Tensor>> {
        let Some(p) = &self.block else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let vars = p.register(&mut tape);
        let trace = cbb_forward(&mut tape, x, &vars, self.height, self.width)?;
        Ok(Some(tape.value(trace.output).clone()))
    }

    /// Block output via the cached-projection inference path.
    pub fn block_infer(&self, features: &Tensor) -> Result<Option<InferParts>> {
        let Some(p) = &self.block else {
            return Ok(None);
        };
        let cache = precompute_projection(p)?;
        Ok(Some(cbb_infer_parts(
            features,
            p,
            &cache,
            self.height,
            self.width,
        )?))
    }

    /// Untracked logits, `B x n_classes`; the block runs on its inference path.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let pooled_from = match self.block_infer(features)? {
            Some(parts) => parts.output,
            None => features.clone(),
        };
        let b = features.shape()[0];
        let pooled = kernels::sum_axis(&pooled_from, 1)?;
        let scale = 1.0 / (self.height * self.width) as f64;
        let pooled: Vec<f64> = pooled.data().iter().map(|v| v * scale).collect();
        let pooled = Tensor::new([b, self.channels()], pooled)?;
        let mut logits = kernels::matmul(&pooled, &self.head_w)?;
        let bias = self.head_b.data();
        for row in logits.data_mut().chunks_mut(bias.len()) {
            row.iter_mut().zip(bias).for_each(|(l, b)| *l += b);
        }
        Ok(logits)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        let k = self.n_classes();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    fn learnables_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = match &mut self.block {
            Some(p) => p.learnables_mut(),
            None => Vec::new(),
        };
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    /// Cross-entropy of the batch; also accumulates gradients into every
    /// learnable.
    fn loss_and_grads(&mut self, batch: &LabeledBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &batch.features)?;
        let loss = tape.cross_entropy(rec.logits, &batch.labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        if let (Some(p), Some(vars)) = (&mut self.block, &rec.block) {
            p.collect_grads(&mut tape, vars)?;
        }
        let gw = tape
            .take_grad(rec.head_w)
            .unwrap_or_else(|| vec![0.0; self.head_w.numel()]);
        let gb = tape
            .take_grad(rec.head_b)
            .unwrap_or_else(|| vec![0.0; self.head_b.numel()]);
        self.head_w.accumulate_grad(&gw)?;
        self.head_b.accumulate_grad(&gb)?;
        Ok(value)
    }

    /// Cross-entropy without touching gradients.
    pub fn loss(&self, batch: &LabeledBatch) -> Result<f64> {
        self.check_batch(batch)?;
        let logits = self.logits(&batch.features)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let loss = tape.cross_entropy(l, &batch.labels)?;
        Ok(tape.value(loss).data()[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size; `0` trains full batch.
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 100,
            sgd: SgdConfig::default(),
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Minibatch SGD on cross-entropy. Batches are reshuffled every epoch from
/// `seed`. A non-finite loss or parameter stops training with a
/// [`CbbError::Training`].
pub fn train(
    model: &mut Classifier,
    source: &LabeledBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    model.check_batch(source)?;
    let n = source.len();
    let bs = if cfg.batch_size == 0 {
        n
    } else {
        cfg.batch_size.min(n)
    };
    let mut opt = Sgd::new(cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7a1b);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let batch = source.select(chunk);
            let loss = model
                .loss_and_grads(&batch)
                .map_err(|e| diverged(epoch, &epoch_loss, e))?;
            if !loss.is_finite() {
                return Err(diverged(
                    epoch,
                    &epoch_loss,
                    CbbError::NonFinite("cross_entropy"),
                ));
            }
            total += loss * chunk.len() as f64;
            let mut params = model.learnables_mut();
            opt.step(&mut params)
                .map_err(|e| diverged(epoch, &epoch_loss, e))?;
        }
        epoch_loss.push(total / n as f64);
    }
    Ok(TrainLog { epoch_loss })
}

fn diverged(epoch: usize, history: &[f64], cause: CbbError) -> CbbError {
    let recent: Vec<String> = history
        .iter()
        .rev()
        .take(3)
        .rev()
        .map(|l| format!("{l:.4e}"))
        .collect();
    CbbError::Training {
        epoch,
        detail: format!("{cause}; recent epoch losses [{}]", recent.join(", ")),
    }
}

/// Argmax accuracy in `[0, 1]`.
pub fn evaluate(model: &Classifier, batch: &LabeledBatch) -> Result<f64> {
    model.check_batch(batch)?;
    let pred = model.predict(&batch.features)?;
    let hits = pred
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}
