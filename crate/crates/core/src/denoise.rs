//! Denoising block: stacked affine compression of `h_inc` into a low
//! dimensional code, mirrored reconstruction to `h'_rec`, the MSE objective
//! against `h_comp`, and post-reconstruction transformer blocks.
//!
//! All maps act on the hidden axis of a `[d, L]` tensor, identically for
//! every sequence position.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{transformer_block, BlockParams, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{mse_loss, normal, truncated_normal, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// Purely affine, layers compose to a single affine map.
    #[default]
    Identity,
    /// `tanh` between the two layers of each set.
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Weight initialisation for the affine layers; biases start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenoiseInit {
    /// Truncated normal with σ = 0.02, as for the transformer weights.
    #[default]
    Bert,
    /// Normal with σ = 1/√fan_in.
    FanIn,
}

impl fmt::Display for DenoiseInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenoiseInit::Bert => "bert",
            DenoiseInit::FanIn => "fan_in",
        })
    }
}

impl FromStr for DenoiseInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bert" => Ok(DenoiseInit::Bert),
            "fan_in" => Ok(DenoiseInit::FanIn),
            other => Err(Error::Config(format!("unknown denoise init {other:?}"))),
        }
    }
}

/// Set outputs `d0 → d1 → d2 → d3` and the hidden width inside each set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiseDims {
    pub dims: [usize; 4],
    pub hidden: [usize; 3],
}

fn geometric_width(a: usize, b: usize) -> usize {
    ((a * b) as f64).sqrt().ceil() as usize
}

impl DenoiseDims {
    /// Hidden widths default to the rounded-up geometric mean of each set's
    /// input and output sizes.
    pub fn new(dims: [usize; 4]) -> Self {
        let hidden = [
            geometric_width(dims[0], dims[1]),
            geometric_width(dims[1], dims[2]),
            geometric_width(dims[2], dims[3]),
        ];
        Self { dims, hidden }
    }

    /// `(H, H/4, H/8, H/16)`, each at least 1.
    pub fn for_hidden(h: usize) -> Self {
        Self::new([h, (h / 4).max(1), (h / 8).max(1), (h / 16).max(1)])
    }

    /// Shape-consistency only: all widths positive.
    pub fn validate_shapes(&self) -> Result<()> {
        if self.dims.iter().chain(&self.hidden).any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "zero width in denoise dims {self:?}"
            )));
        }
        Ok(())
    }

    /// Full model validation: strict compression `d0 > d1 > d2 > d3 ≥ 1`.
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        let d = self.dims;
        if !(d[0] > d[1] && d[1] > d[2] && d[2] > d[3]) {
            return Err(Error::Config(format!(
                "denoise dims must strictly decrease, got {d:?}"
            )));
        }
        Ok(())
    }
}

/// `W·h + b` applied column-wise; `W:[out, in]`, `b:[out]`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    fn init<R: Rng>(rng: &mut R, input: usize, output: usize, scheme: DenoiseInit) -> Self {
        let n = input * output;
        let values = match scheme {
            DenoiseInit::Bert => truncated_normal(rng, n, INIT_STD),
            DenoiseInit::FanIn => normal(rng, n, 1.0 / (input as f64).sqrt()),
        };
        Self {
            weight: Tensor::param(&[output, input], values).expect("shape"),
            bias: Tensor::param(&[output], vec![0.0; output]).expect("shape"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        self.weight.matmul(h)?.add_column(&self.bias)
    }
}

/// Output of the compression half.
#[derive(Debug, Clone)]
pub struct Latents {
    pub z1: Tensor,
    pub z2: Tensor,
    pub z: Tensor,
}

/// Output of the reconstruction half.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub rec2: Tensor,
    pub rec1: Tensor,
    pub rec: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiseStack {
    pub dims: DenoiseDims,
    pub activation: Activation,
    /// `l1..l6`: pairs (l1,l2), (l3,l4), (l5,l6) produce z1, z2, z.
    pub compress_layers: Vec<Affine>,
    /// `l'1..l'6`: pairs produce h'_rec2, h'_rec1, h'_rec.
    pub reconstruct_layers: Vec<Affine>,
}

impl DenoiseStack {
    pub fn init<R: Rng>(rng: &mut R, dims: DenoiseDims, activation: Activation) -> Result<Self> {
        Self::init_with(rng, dims, activation, DenoiseInit::default())
    }

    pub fn init_with<R: Rng>(
        rng: &mut R,
        dims: DenoiseDims,
        activation: Activation,
        scheme: DenoiseInit,
    ) -> Result<Self> {
        dims.validate_shapes()?;
        let [d0, d1, d2, d3] = dims.dims;
        let [a1, a2, a3] = dims.hidden;
        let compress_layers = [(d0, a1), (a1, d1), (d1, a2), (a2, d2), (d2, a3), (a3, d3)]
            .into_iter()
            .map(|(i, o)| Affine::init(rng, i, o, scheme))
            .collect();
        let reconstruct_layers = [(d3, a3), (a3, d2), (d2, a2), (a2, d1), (d1, a1), (a1, d0)]
            .into_iter()
            .map(|(i, o)| Affine::init(rng, i, o, scheme))
            .collect();
        Ok(Self {
            dims,
            activation,
            compress_layers,
            reconstruct_layers,
        })
    }

    fn set(&self, first: &Affine, second: &Affine, h: &Tensor) -> Result<Tensor> {
        let mid = first.apply(h)?;
        let mid = match self.activation {
            Activation::Identity => mid,
            Activation::Tanh => mid.tanh(),
        };
        second.apply(&mid)
    }

    fn check_rows(&self, h: &Tensor, expected: usize, what: &str) -> Result<()> {
        if h.rank() != 2 || h.shape()[0] != expected {
            return Err(Error::Config(format!(
                "{what}: expected [{expected}, L] input, got {:?}",
                h.shape()
            )));
        }
        Ok(())
    }

    /// `h_inc:[d0, L]` → `z1:[d1, L]`, `z2:[d2, L]`, `z:[d3, L]`.
    pub fn compress(&self, h_inc: &Tensor) -> Result<Latents> {
        self.check_rows(h_inc, self.dims.dims[0], "compress")?;
        let l = &self.compress_layers;
        let z1 = self.set(&l[0], &l[1], h_inc)?;
        let z2 = self.set(&l[2], &l[3], &z1)?;
        let z = self.set(&l[4], &l[5], &z2)?;
        Ok(Latents { z1, z2, z })
    }

    /// `z:[d3, L]` → `h'_rec2:[d2, L]`, `h'_rec1:[d1, L]`, `h'_rec:[d0, L]`.
    pub fn reconstruct(&self, z: &Tensor) -> Result<Reconstruction> {
        self.check_rows(z, self.dims.dims[3], "reconstruct")?;
        let l = &self.reconstruct_layers;
        let rec2 = self.set(&l[0], &l[1], z)?;
        let rec1 = self.set(&l[2], &l[3], &rec2)?;
        let rec = self.set(&l[4], &l[5], &rec1)?;
        Ok(Reconstruction { rec2, rec1, rec })
    }

    /// `reconstruct(compress(h_inc)).rec`
    pub fn forward(&self, h_inc: &Tensor) -> Result<Tensor> {
        Ok(self.reconstruct(&self.compress(h_inc)?.z)?.rec)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [
            ("denoise.l", &self.compress_layers),
            ("denoise.lr", &self.reconstruct_layers),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{prefix}{}.weight", i + 1), layer.weight.clone()));
                out.push((format!("{prefix}{}.bias", i + 1), layer.bias.clone()));
            }
        }
        out
    }
}

/// MSE between the partial reconstruction and the complete-sentence
/// embedding. `h_comp` is always a constant target.
pub fn denoise_loss(rec: &Tensor, h_comp: &Tensor) -> Result<Tensor> {
    mse_loss(rec, &h_comp.detach())
}

/// Post-reconstruction transformers: `[H, L]` → transpose → blocks →
/// transpose back. With no blocks the input is returned unchanged.
pub fn refine(
    rec: &Tensor,
    keep: &[bool],
    blocks: &[BlockParams],
    num_heads: usize,
) -> Result<Tensor> {
    if blocks.is_empty() {
        return Ok(rec.clone());
    }
    let mut x = rec.transpose()?;
    for block in blocks {
        x = transformer_block(&x, keep, block, num_heads)?;
    }
    x.transpose()
}
