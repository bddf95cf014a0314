//! The full classifier: vanilla encoder, optional denoising block with
//! post-reconstruction transformers, and a softmax head on the `[CLS]`
//! column.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::denoise::{refine, Activation, DenoiseDims, DenoiseInit, DenoiseStack};
use crate::encoder::{encode_intermediate, BlockParams, EncoderConfig, EncoderParams, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{truncated_normal, Tensor};
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Denoising block bypassed: `h_rec = h_inc`.
    Baseline,
    #[default]
    Stacked,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Stacked => "stacked",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "stacked" => Ok(Mode::Stacked),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoise: DenoiseDims,
    pub activation: Activation,
    pub denoise_init: DenoiseInit,
    pub post_layers: usize,
}

impl ModelConfig {
    /// Default denoise dims `(H, H/4, H/8, H/16)` and as many
    /// post-reconstruction blocks as vanilla blocks.
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            denoise: DenoiseDims::for_hidden(encoder.hidden),
            activation: Activation::Identity,
            denoise_init: DenoiseInit::Bert,
            post_layers: encoder.num_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoise.validate()?;
        if self.denoise.dims[0] != self.encoder.hidden {
            return Err(Error::Config(format!(
                "denoise input width {} differs from hidden size {}",
                self.denoise.dims[0], self.encoder.hidden
            )));
        }
        Ok(())
    }
}

/// `o = Wᵀ t + b` with `W:[H, N_C]`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, num_classes: usize) -> Self {
        Self {
            weight: Tensor::param(
                &[hidden, num_classes],
                truncated_normal(rng, hidden * num_classes, INIT_STD),
            )
            .expect("shape"),
            bias: Tensor::param(&[num_classes], vec![0.0; num_classes]).expect("shape"),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    /// `t:[1, H]` → logits `[1, N_C]`.
    pub fn logits(&self, t: &Tensor) -> Result<Tensor> {
        t.matmul(&self.weight)?.add_broadcast(&self.bias)
    }
}

/// Class probabilities and the argmax label, lowest index on ties.
pub fn predict_from_logits(logits: &Tensor) -> Result<(Vec<f64>, usize)> {
    let probs = logits.softmax(logits.rank() - 1)?.to_vec();
    let mut label = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[label] {
            label = i;
        }
    }
    Ok((probs, label))
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub h_inc: Tensor,
    /// `h'_rec`, present in stacked mode.
    pub partial: Option<Tensor>,
    pub h_rec: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct StackedDebert {
    pub config: ModelConfig,
    pub mode: Mode,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub denoise: DenoiseStack,
    pub post: Vec<BlockParams>,
}

impl StackedDebert {
    /// Parameters are drawn in the order encoder, head, denoise, post, so a
    /// baseline and a stacked model built from the same seed share their
    /// encoder and head initialisation.
    pub fn init<R: Rng>(rng: &mut R, config: ModelConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        if enc.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                enc.num_classes
            )));
        }
        let encoder = EncoderParams::init(rng, enc);
        let head = ClassifierHead::init(rng, enc.hidden, enc.num_classes);
        let denoise =
            DenoiseStack::init_with(rng, config.denoise, config.activation, config.denoise_init)?;
        let post = (0..config.post_layers)
            .map(|_| BlockParams::init(rng, enc.hidden, enc.ff_size))
            .collect();
        Ok(Self {
            config,
            mode,
            encoder,
            head,
            denoise,
            post,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.config.encoder.num_heads
    }

    /// `h_inc` (or `h_comp`) for one sentence, `[H, L]`.
    pub fn intermediate(&self, seq: &TokenSequence) -> Result<Tensor> {
        encode_intermediate(seq, &self.encoder, self.num_heads())
    }

    /// Everything after the vanilla encoder.
    pub fn forward_from_intermediate(&self, h_inc: Tensor, keep: &[bool]) -> Result<Forward> {
        let (partial, h_rec) = match self.mode {
            Mode::Baseline => (None, h_inc.clone()),
            Mode::Stacked => {
                let partial = self.denoise.forward(&h_inc)?;
                let h_rec = refine(&partial, keep, &self.post, self.num_heads())?;
                (Some(partial), h_rec)
            }
        };
        let cls = h_rec.transpose()?.slice_rows(0, 1)?;
        let logits = self.head.logits(&cls)?;
        Ok(Forward {
            h_inc,
            partial,
            h_rec,
            logits,
        })
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<Forward> {
        let h_inc = self.intermediate(seq)?;
        self.forward_from_intermediate(h_inc, &seq.keep_mask())
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<(Vec<f64>, usize)> {
        predict_from_logits(&self.forward(seq)?.logits)
    }

    pub fn encoder_params(&self) -> Vec<Tensor> {
        self.encoder
            .named_params()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    pub fn head_params(&self) -> Vec<Tensor> {
        vec![self.head.weight.clone(), self.head.bias.clone()]
    }

    pub fn denoise_params(&self) -> Vec<Tensor> {
        self.denoise
            .named_params()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    pub fn post_params(&self) -> Vec<Tensor> {
        self.post
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.named_params(&format!("post.block{i}")))
            .map(|(_, t)| t)
            .collect()
    }

    /// Every learned array, in a stable order. All of them are stored, even
    /// the denoise block of a baseline model.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params();
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out.extend(self.denoise.named_params());
        for (i, b) in self.post.iter().enumerate() {
            out.extend(b.named_params(&format!("post.block{i}")));
        }
        out
    }

    /// Parameters that influence the output in the current mode.
    pub fn active_params(&self) -> Vec<Tensor> {
        let mut out = self.encoder_params();
        if self.mode == Mode::Stacked {
            out.extend(self.denoise_params());
            out.extend(self.post_params());
        }
        out.extend(self.head_params());
        out
    }
}
