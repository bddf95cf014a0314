//! Two-phase training: the denoising stack against frozen encoder features,
//! then end-to-end fine-tuning on the classification objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::PairedExample;
use crate::denoise::denoise_loss;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{predict_from_logits, Mode, StackedDebert};
use crate::tensor::{cross_entropy, Adam, AdamConfig, Tensor};
use crate::tokenize::{encode, TokenSequence, Vocabulary};

const PHASE1_STREAM: u64 = 1;
const PHASE2_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase1_weight_decay: f64,
    pub phase2_epochs: usize,
    pub phase2_lr: f64,
    /// Fraction of phase-2 steps spent warming up.
    pub warmup: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the reconstruction loss added to the phase-2 objective.
    pub lambda: f64,
    /// Also train phase 2 on complete sentences as labelled examples.
    pub include_complete: bool,
    /// Phase 2 updates the classifier head only.
    pub head_only: bool,
}

impl Default for TrainConfig {
    /// Desk-scale settings: a from-scratch encoder needs far more than the
    /// three low-learning-rate epochs used to fine-tune a pretrained one.
    fn default() -> Self {
        Self {
            phase1_epochs: 500,
            phase1_lr: 1e-3,
            phase1_weight_decay: 1e-5,
            phase2_epochs: 20,
            phase2_lr: 1e-3,
            warmup: 0.1,
            batch_size: 8,
            seed: 0,
            lambda: 0.0,
            include_complete: false,
            head_only: false,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning settings for a pretrained encoder.
    pub fn full_scale() -> Self {
        Self {
            phase1_epochs: 100,
            phase1_lr: 1e-3,
            phase1_weight_decay: 1e-5,
            phase2_epochs: 3,
            phase2_lr: 2e-5,
            warmup: 0.1,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase2_epochs == 0 {
            return Err(Error::Config("phase2_epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::Config(format!(
                "warmup {} outside [0, 1]",
                self.warmup
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("phase1_lr", self.phase1_lr),
            ("phase2_lr", self.phase2_lr),
            ("phase1_weight_decay", self.phase1_weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `ceil(warmup · total)` steps, then
/// linear decay to 0 at `total`.
pub fn warmup_linear_lr(step: usize, total: usize, warmup: f64, peak: f64) -> f64 {
    let w = (warmup * total as f64).ceil() as usize;
    if step < w {
        peak * step as f64 / w as f64
    } else if total <= w {
        peak
    } else {
        peak * total.saturating_sub(step) as f64 / (total - w) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub phase: u8,
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        json!({"epoch": self.epoch, "phase": self.phase, "loss": self.loss, "lr": self.lr})
            .to_string()
    }
}

/// Disables gradient tracking on `params` for the lifetime of the guard.
struct Frozen(Vec<Tensor>);

impl Frozen {
    fn new(params: Vec<Tensor>) -> Self {
        let tracked: Vec<Tensor> = params.into_iter().filter(Tensor::requires_grad).collect();
        for p in &tracked {
            p.set_requires_grad(false);
        }
        Self(tracked)
    }
}

impl Drop for Frozen {
    fn drop(&mut self) {
        for p in &self.0 {
            p.set_requires_grad(true);
        }
    }
}

fn encode_for(model: &StackedDebert, vocab: &Vocabulary, sentence: &str) -> Result<TokenSequence> {
    encode(sentence, vocab, model.config.encoder.max_len)
}

/// Lays `[H, L]` feature blocks side by side as one `[H, B·L]` tensor.
fn side_by_side(blocks: &[&[f64]], hidden: usize, len: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(hidden * len * blocks.len());
    for h in 0..hidden {
        for block in blocks {
            out.extend_from_slice(&block[h * len..(h + 1) * len]);
        }
    }
    Tensor::new(&[hidden, len * blocks.len()], out)
}

/// Trains the denoising stack to map `h_inc` onto `h_comp`. The encoder is
/// frozen, so both embeddings are computed once up front. Returns one record
/// per epoch with the mean batch MSE.
pub fn train_phase1(
    model: &StackedDebert,
    vocab: &Vocabulary,
    pairs: &[PairedExample],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("phase 1 needs at least one pair".into()));
    }
    let (hidden, len) = (model.config.encoder.hidden, model.config.encoder.max_len);
    let mut inc = Vec::with_capacity(pairs.len());
    let mut comp = Vec::with_capacity(pairs.len());
    {
        let _frozen = Frozen::new(model.encoder_params());
        for (i, pair) in pairs.iter().enumerate() {
            let complete = pair
                .complete
                .as_deref()
                .ok_or_else(|| Error::Data(format!("pair {i} has no complete sentence")))?;
            inc.push(
                model
                    .intermediate(&encode_for(model, vocab, &pair.incomplete)?)?
                    .to_vec(),
            );
            comp.push(
                model
                    .intermediate(&encode_for(model, vocab, complete)?)?
                    .to_vec(),
            );
        }
    }

    let params = model.denoise_params();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.phase1_lr,
        weight_decay: cfg.phase1_weight_decay,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PHASE1_STREAM);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(cfg.phase1_epochs);
    for epoch in 1..=cfg.phase1_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x: Vec<&[f64]> = batch.iter().map(|&i| inc[i].as_slice()).collect();
            let y: Vec<&[f64]> = batch.iter().map(|&i| comp[i].as_slice()).collect();
            let x = side_by_side(&x, hidden, len)?;
            let y = side_by_side(&y, hidden, len)?;
            let loss = denoise_loss(&model.denoise.forward(&x)?, &y)?;
            total += loss.item() * batch.len() as f64;
            loss.backward()?;
            adam.step(&params)?;
        }
        log.push(LogRecord {
            phase: 1,
            epoch,
            loss: total / pairs.len() as f64,
            lr: cfg.phase1_lr,
        });
    }
    Ok(log)
}

struct Phase2Example {
    input: TokenSequence,
    label: usize,
    target: Option<TokenSequence>,
}

/// End-to-end fine-tuning on incomplete sentences with cross-entropy plus
/// `lambda` times the reconstruction loss. Batch losses are averaged over
/// the batch.
pub fn train_phase2(
    model: &StackedDebert,
    vocab: &Vocabulary,
    data: &[PairedExample],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("phase 2 needs at least one example".into()));
    }
    let num_classes = model.head.num_classes();
    let mut examples = Vec::new();
    for e in data {
        if e.label >= num_classes {
            return Err(Error::Label(format!(
                "label {} outside 0..{num_classes}",
                e.label
            )));
        }
        let target = e
            .complete
            .as_deref()
            .map(|c| encode_for(model, vocab, c))
            .transpose()?;
        examples.push(Phase2Example {
            input: encode_for(model, vocab, &e.incomplete)?,
            label: e.label,
            target: target.clone(),
        });
        if cfg.include_complete {
            if let Some(t) = target {
                examples.push(Phase2Example {
                    input: t,
                    label: e.label,
                    target: None,
                });
            }
        }
    }
    let use_reconstruction = cfg.lambda > 0.0 && model.mode == Mode::Stacked;

    let params = if cfg.head_only {
        model.head_params()
    } else {
        model.active_params()
    };
    let _frozen = cfg.head_only.then(|| {
        let mut rest = model.encoder_params();
        rest.extend(model.denoise_params());
        rest.extend(model.post_params());
        Frozen::new(rest)
    });

    let mut adam = Adam::new(AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PHASE2_STREAM);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.phase2_epochs;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.phase2_epochs);
    for epoch in 1..=cfg.phase2_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = warmup_linear_lr(step, total_steps, cfg.warmup, cfg.phase2_lr);
            adam.set_lr(lr);
            let mut loss: Option<Tensor> = None;
            for &i in batch {
                let ex = &examples[i];
                let fwd = model.forward(&ex.input)?;
                let mut term = cross_entropy(&fwd.logits, &[ex.label])?;
                if use_reconstruction {
                    if let (Some(target), Some(partial)) = (&ex.target, &fwd.partial) {
                        let h_comp = model.intermediate(target)?;
                        term = term.add(&denoise_loss(partial, &h_comp)?.scale(cfg.lambda))?;
                    }
                }
                loss = Some(match loss {
                    None => term,
                    Some(acc) => acc.add(&term)?,
                });
            }
            let loss = loss
                .expect("non-empty batch")
                .scale(1.0 / batch.len() as f64);
            total += loss.item() * batch.len() as f64;
            loss.backward()?;
            adam.step(&params)?;
            step += 1;
        }
        log.push(LogRecord {
            phase: 2,
            epoch,
            loss: total / examples.len() as f64,
            lr,
        });
    }
    Ok(log)
}

/// Phase 1 (stacked mode only) followed by phase 2.
pub fn fit(
    model: &StackedDebert,
    vocab: &Vocabulary,
    train: &[PairedExample],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    let mut log = Vec::new();
    if model.mode == Mode::Stacked && cfg.phase1_epochs > 0 {
        log.extend(train_phase1(model, vocab, train, cfg)?);
    }
    log.extend(train_phase2(model, vocab, train, cfg)?);
    Ok(log)
}

/// Predicted label for each sentence.
pub fn predict_labels<S: AsRef<str>>(
    model: &StackedDebert,
    vocab: &Vocabulary,
    sentences: &[S],
) -> Result<Vec<usize>> {
    let _frozen = Frozen::new(model.named_params().into_iter().map(|(_, t)| t).collect());
    sentences
        .iter()
        .map(|s| {
            let fwd = model.forward(&encode_for(model, vocab, s.as_ref())?)?;
            Ok(predict_from_logits(&fwd.logits)?.1)
        })
        .collect()
}

/// Confusion matrix of predictions on the incomplete sentences.
pub fn evaluate(
    model: &StackedDebert,
    vocab: &Vocabulary,
    test: &[PairedExample],
) -> Result<ConfusionMatrix> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let sentences: Vec<&str> = test.iter().map(|e| e.incomplete.as_str()).collect();
    let predicted = predict_labels(model, vocab, &sentences)?;
    let mut cm = ConfusionMatrix::new(model.head.num_classes());
    for (e, p) in test.iter().zip(predicted) {
        cm.record(e.label, p)?;
    }
    Ok(cm)
}
