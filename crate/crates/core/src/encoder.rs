//! Input embeddings and post-layernorm bidirectional transformer blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{truncated_normal, Tensor};
use crate::tokenize::TokenSequence;

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub max_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary and class count.
    pub fn toy(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            hidden: 64,
            max_len: 32,
            num_layers: 2,
            num_heads: 4,
            ff_size: 128,
            vocab_size,
            num_classes,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden", self.hidden),
            ("max_len", self.max_len),
            ("num_heads", self.num_heads),
            ("ff_size", self.ff_size),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if self.hidden < 2 {
            return Err(Error::Config(
                "hidden size must be >= 2 for layernorm".into(),
            ));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be >= 3".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

fn weight<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::param(&[rows, cols], truncated_normal(rng, rows * cols, INIT_STD)).expect("shape")
}

fn bias(n: usize) -> Tensor {
    Tensor::param(&[n], vec![0.0; n]).expect("shape")
}

fn gain(n: usize) -> Tensor {
    Tensor::param(&[n], vec![1.0; n]).expect("shape")
}

/// `x · w + b` for row-major activations `x:[L, in]`.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_broadcast(b)
}

/// Weights of one transformer block. Projection matrices are `[in, out]`.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl BlockParams {
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, ff: usize) -> Self {
        Self {
            wq: weight(rng, hidden, hidden),
            bq: bias(hidden),
            wk: weight(rng, hidden, hidden),
            bk: bias(hidden),
            wv: weight(rng, hidden, hidden),
            bv: bias(hidden),
            wo: weight(rng, hidden, hidden),
            bo: bias(hidden),
            ln1_gain: gain(hidden),
            ln1_bias: bias(hidden),
            w1: weight(rng, hidden, ff),
            b1: bias(ff),
            w2: weight(rng, ff, hidden),
            b2: bias(hidden),
            ln2_gain: gain(hidden),
            ln2_bias: bias(hidden),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub segment_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: &EncoderConfig) -> Self {
        let h = cfg.hidden;
        Self {
            token_embedding: weight(rng, cfg.vocab_size, h),
            segment_embedding: weight(rng, 2, h),
            position_embedding: weight(rng, cfg.max_len, h),
            blocks: (0..cfg.num_layers)
                .map(|_| BlockParams::init(rng, h, cfg.ff_size))
                .collect(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (
                "encoder.token_embedding".to_string(),
                self.token_embedding.clone(),
            ),
            (
                "encoder.segment_embedding".to_string(),
                self.segment_embedding.clone(),
            ),
            (
                "encoder.position_embedding".to_string(),
                self.position_embedding.clone(),
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("encoder.block{i}")));
        }
        out
    }
}

/// `tok[id_t] + seg[seg_t] + pos[t]` for every position → `[L, H]`.
pub fn embed(seq: &TokenSequence, params: &EncoderParams) -> Result<Tensor> {
    let max_len = params.position_embedding.shape()[0];
    if seq.max_len() > max_len {
        return Err(Error::Dimension(format!(
            "sequence of length {} exceeds position table of {max_len}",
            seq.max_len()
        )));
    }
    let tok = params.token_embedding.gather_rows(&seq.token_ids)?;
    let seg = params.segment_embedding.gather_rows(&seq.segment_ids)?;
    let pos = params.position_embedding.gather_rows(&seq.position_ids)?;
    tok.add(&seg)?.add(&pos)
}

/// Multi-head scaled dot-product self-attention. Returns the projected
/// output `[L, H]` and the per-head attention matrices `[L, L]`.
pub fn self_attention_with_weights(
    x: &Tensor,
    keep: &[bool],
    block: &BlockParams,
    num_heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let hidden = x.shape()[1];
    if keep.len() != x.shape()[0] {
        return Err(Error::Dimension(format!(
            "attention mask of length {} for {} positions",
            keep.len(),
            x.shape()[0]
        )));
    }
    if num_heads == 0 || !hidden.is_multiple_of(num_heads) {
        return Err(Error::Config(format!(
            "{hidden} not divisible into {num_heads} heads"
        )));
    }
    let dh = hidden / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, &block.wq, &block.bq)?;
    let k = linear(x, &block.wk, &block.bk)?;
    let v = linear(x, &block.wv, &block.bv)?;

    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let attn = scores.masked_softmax(keep)?;
        heads.push(attn.matmul(&vh)?);
        weights.push(attn);
    }
    let concat = if heads.len() == 1 {
        heads.pop().expect("one head")
    } else {
        Tensor::concat_cols(&heads)?
    };
    Ok((linear(&concat, &block.wo, &block.bo)?, weights))
}

pub fn self_attention(
    x: &Tensor,
    keep: &[bool],
    block: &BlockParams,
    num_heads: usize,
) -> Result<Tensor> {
    Ok(self_attention_with_weights(x, keep, block, num_heads)?.0)
}

/// Post-layernorm block: `LN(x + Attn(x))`, then `LN(y + FFN(y))` with a
/// GELU feed-forward.
pub fn transformer_block(
    x: &Tensor,
    keep: &[bool],
    block: &BlockParams,
    num_heads: usize,
) -> Result<Tensor> {
    let attn = self_attention(x, keep, block, num_heads)?;
    let y = x
        .add(&attn)?
        .layernorm(&block.ln1_gain, &block.ln1_bias, LN_EPS)?;
    let ff = linear(
        &linear(&y, &block.w1, &block.b1)?.gelu(),
        &block.w2,
        &block.b2,
    )?;
    y.add(&ff)?
        .layernorm(&block.ln2_gain, &block.ln2_bias, LN_EPS)
}

/// Embedding plus every vanilla block, returned in `[H, L]` layout.
pub fn encode_intermediate(
    seq: &TokenSequence,
    params: &EncoderParams,
    num_heads: usize,
) -> Result<Tensor> {
    let keep = seq.keep_mask();
    let mut x = embed(seq, params)?;
    for block in &params.blocks {
        x = transformer_block(&x, &keep, block, num_heads)?;
    }
    x.transpose()
}
