//! Losses, the optimizer, learning-rate schedule, and the training loops
//! for every method in the comparison hierarchy: zero-shot, linear probing,
//! input/output adapters, proxy tokens, low-rank adaptation, last-layers
//! and full fine-tuning.

mod metrics;
mod run;

pub use metrics::{evaluate_classification, evaluate_retrieval, recall_from_similarity};
pub use run::{
    adapter_gradients_for_batch, eval_features, frozen_batch_entry_grads, train_graybox,
    train_whitebox, whitebox_eval_features, GrayboxOutcome, TrainPair, WhiteboxOutcome,
};

use thiserror::Error;

use crate::adapters::{AdapterConfig, AdapterError};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, VarId};
use crate::vault::{ClientError, VaultError, TEMPERATURE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config error: {0}")]
    Config(String),
    #[error("loss became NaN at epoch {epoch}, step {step}; aborting (lr too high or inputs corrupt)")]
    NanLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Training method selector, ordered by how much of the backbone it may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Frozen model, no adaptation.
    Zs,
    /// Output adapters only (sealed access suffices).
    Lp,
    /// Input + output adapters through the sealed boundary.
    Dga,
    /// Per-layer proxy tokens through the sealed boundary.
    Lga,
    /// Low-rank attention attachments (owner mode).
    Lora,
    /// Last-n-blocks fine-tuning (owner mode).
    Llft(usize),
    /// Full fine-tuning (owner mode).
    Ft,
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Zs => "zs".into(),
            Method::Lp => "lp".into(),
            Method::Dga => "dga".into(),
            Method::Lga => "lga".into(),
            Method::Lora => "lora".into(),
            Method::Llft(n) => format!("llft{n}"),
            Method::Ft => "ft".into(),
        }
    }

    /// Access shade, mirroring the comparison table rows.
    pub fn shade(self) -> &'static str {
        match self {
            Method::Ft | Method::Llft(_) | Method::Lora => "white",
            Method::Lga => "lightgray",
            Method::Dga => "darkgray",
            Method::Lp | Method::Zs => "black",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub lr0: f64,
    pub decay: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub adapters: AdapterConfig,
    /// Low-rank baseline rank; None derives it from the adapter budget.
    pub lora_rank: Option<usize>,
    /// Evaluate on the test split every n-th epoch (plus epoch 0 and the
    /// final epoch). 1 evaluates every epoch.
    pub eval_every: usize,
    /// Stop after the first evaluation whose R@1 reaches this threshold.
    pub stop_at_test_r1: Option<f64>,
}

impl TrainConfig {
    /// Method defaults: AdamW, lr 1e-4 decaying by 0.93 per epoch to a
    /// floor of 1e-6, batch 32, weight decay 0.01.
    pub fn new(method: Method, seed: u64) -> Self {
        let adapters = match method {
            Method::Lga => AdapterConfig::lga(1),
            Method::Lp => AdapterConfig::linear_probe(),
            _ => AdapterConfig::dga(),
        };
        TrainConfig {
            method,
            lr0: 1e-4,
            decay: 0.93,
            lr_min: 1e-6,
            epochs: 10,
            batch: 32,
            seed,
            weight_decay: 0.01,
            temperature: TEMPERATURE,
            adapters,
            lora_rank: None,
            eval_every: 1,
            stop_at_test_r1: None,
        }
    }
}

/// Exponentially decayed learning rate with a floor:
/// `max(lr0 * decay^epoch, lr_min)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    (config.lr0 * config.decay.powi(epoch as i32)).max(config.lr_min)
}

/// One line of the metrics history: `epoch split metric value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        // Shortest round-trippable float formatting keeps reruns
        // byte-identical.
        format!("{} {} {} {:?}", self.epoch, self.split, self.metric, self.value)
    }

    pub fn parse_line(line: &str) -> Option<MetricRecord> {
        let mut parts = line.split_whitespace();
        let epoch = parts.next()?.parse().ok()?;
        let split = parts.next()?.to_string();
        let metric = parts.next()?.to_string();
        let value = parts.next()?.parse().ok()?;
        Some(MetricRecord {
            epoch,
            split,
            metric,
            value,
        })
    }
}

// ---- optimizer ----

/// Decoupled-weight-decay Adam with bias correction. Moments live next to
/// the parameter order fixed at construction; decay flags mark which slots
/// receive the decay term (bias/token/gain parameters do not).
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
    decays: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: &[(Vec<usize>, bool)], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: shapes
                .iter()
                .map(|(dims, _)| (Tensor::zeros(dims), Tensor::zeros(dims)))
                .collect(),
            decays: shapes.iter().map(|(_, d)| *d).collect(),
        }
    }

    /// Applies one update step in-place. `params` and `grads` must follow
    /// the construction order.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.moments.len());
        assert_eq!(grads.len(), self.moments.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            debug_assert_eq!(param.dims(), grad.dims());
            let (m, v) = &mut self.moments[slot];
            let decay = if self.decays[slot] {
                self.weight_decay
            } else {
                0.0
            };
            for i in 0..param.numel() {
                let g = grad.data()[i].to_f64();
                let mi = self.beta1 * m.data()[i].to_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i].to_f64() + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = T::from_f64(mi);
                v.data_mut()[i] = T::from_f64(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let theta = param.data()[i].to_f64();
                let update = mhat / (vhat.sqrt() + self.eps) + decay * theta;
                param.data_mut()[i] = T::from_f64(theta - lr * update);
            }
        }
    }
}

// ---- loss ----

/// Records symmetric InfoNCE on the tape over unit-norm feature rows:
/// mean of row-wise and column-wise cross entropy of the scaled similarity
/// logits, diagonal as the positive pair.
pub fn infonce_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    img_feats: VarId,
    txt_feats: VarId,
    temperature: f64,
) -> Result<VarId, TrainError> {
    let n = tape.dims(img_feats)[0];
    if n < 2 {
        return Err(TrainError::Config(
            "contrastive batch needs at least 2 pairs".into(),
        ));
    }
    let targets: Vec<usize> = (0..n).collect();
    let txt_t = tape.transpose(txt_feats)?;
    let sims = tape.matmul(img_feats, txt_t)?;
    let logits = tape.scale(sims, T::from_f64(temperature));
    let rows = tape.cross_entropy_logits(logits, &targets)?;
    let logits_t = tape.transpose(logits)?;
    let cols = tape.cross_entropy_logits(logits_t, &targets)?;
    let sum = tape.add(rows, cols)?;
    Ok(tape.scale(sum, T::from_f64(0.5)))
}

/// Value-only convenience over already-normalized feature matrices.
pub fn infonce_loss<T: Scalar>(
    img_feats: &Tensor<T>,
    txt_feats: &Tensor<T>,
    temperature: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let img = tape.constant(img_feats.clone());
    let txt = tape.constant(txt_feats.clone());
    let loss = infonce_on_tape(&mut tape, img, txt, temperature)?;
    Ok(tape.value(loss).data()[0].to_f64())
}
