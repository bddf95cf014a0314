//! Finite-difference check of every differentiable op and of the full
//! classification loss on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoise::{Activation, DenoiseDims, DenoiseInit, DenoiseStack};
use crate::encoder::{self_attention, transformer_block, BlockParams, EncoderConfig};
use crate::error::Result;
use crate::model::{Mode, ModelConfig, StackedDebert};
use crate::tensor::{check_gradients, cross_entropy, mse_loss, normal, GradReport, Tensor};
use crate::tokenize::{encode, Vocabulary};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub shape: String,
    pub report: GradReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE
    }
}

fn param<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, normal(rng, n, 1.0)).expect("shape")
}

fn constant<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal(rng, n, 1.0)).expect("shape")
}

struct Suite {
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let shape = match inputs.len() {
            1 | 2 => inputs
                .iter()
                .map(|t| format!("{:?}", t.shape()))
                .collect::<Vec<_>>()
                .join(" "),
            n => format!("{:?} +{} tensors", inputs[0].shape(), n - 1),
        };
        let report = check_gradients(&inputs, f, STEP)?;
        self.results.push(CheckResult {
            name: name.to_string(),
            shape,
            report,
        });
        Ok(())
    }

    /// Elementwise or shape op on one `[m, n]` input.
    fn unary<F>(&mut self, name: &str, m: usize, n: usize, op: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        let x = param(&mut self.rng, &[m, n]);
        let out_shape = op(&x)?.shape().to_vec();
        let w = constant(&mut self.rng, &out_shape);
        self.check(name, vec![x], |xs| Ok(op(&xs[0])?.mul(&w)?.sum()))
    }
}

const SHAPES: [(usize, usize, usize); 3] = [(2, 3, 4), (1, 5, 2), (4, 2, 3)];

fn op_checks(s: &mut Suite) -> Result<()> {
    for &(m, k, n) in &SHAPES {
        let a = param(&mut s.rng, &[m, k]);
        let b = param(&mut s.rng, &[k, n]);
        let w = constant(&mut s.rng, &[m, n]);
        s.check("matmul", vec![a, b], |xs| {
            Ok(xs[0].matmul(&xs[1])?.mul(&w)?.sum())
        })?;

        s.unary("transpose", m, k, |x| x.transpose())?;
        s.unary("reshape", m, k, |x| x.reshape(&[k, m]))?;
        s.unary("scale", m, k, |x| Ok(x.scale(-0.7)))?;
        s.unary("gelu", m, k, |x| Ok(x.gelu()))?;
        s.unary("tanh", m, k, |x| Ok(x.tanh()))?;
        s.unary("softmax_axis0", m, k, |x| x.softmax(0))?;
        s.unary("softmax_axis1", m, k, |x| x.softmax(1))?;
        let mut keep = vec![true; k];
        if k > 1 {
            keep[k - 1] = false;
        }
        s.unary("masked_softmax", m, k, move |x| x.masked_softmax(&keep))?;
        s.unary("slice_rows", m + 1, k, move |x| x.slice_rows(1, m + 1))?;
        s.unary("slice_cols", m, k + 1, move |x| x.slice_cols(1, k + 1))?;
        let x = param(&mut s.rng, &[m, k]);
        s.check("sum", vec![x], |xs| Ok(xs[0].sum()))?;
        let x = param(&mut s.rng, &[m, k]);
        s.check("mean", vec![x], |xs| Ok(xs[0].mean()))?;

        for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
            let a = param(&mut s.rng, &[m, k]);
            let b = param(&mut s.rng, &[m, k]);
            let w = constant(&mut s.rng, &[m, k]);
            s.check(name, vec![a, b], |xs| {
                let out = match which {
                    0 => xs[0].add(&xs[1])?,
                    1 => xs[0].sub(&xs[1])?,
                    _ => xs[0].mul(&xs[1])?,
                };
                Ok(out.mul(&w)?.sum())
            })?;
        }

        let x = param(&mut s.rng, &[m, k]);
        let row = param(&mut s.rng, &[k]);
        let w = constant(&mut s.rng, &[m, k]);
        s.check("add_broadcast", vec![x, row], |xs| {
            Ok(xs[0].add_broadcast(&xs[1])?.mul(&w)?.sum())
        })?;

        let x = param(&mut s.rng, &[m, k]);
        let col = param(&mut s.rng, &[m]);
        s.check("add_column", vec![x, col], |xs| {
            Ok(xs[0].add_column(&xs[1])?.mul(&w)?.sum())
        })?;

        let x = param(&mut s.rng, &[m, k + 1]);
        let gain = param(&mut s.rng, &[k + 1]);
        let bias = param(&mut s.rng, &[k + 1]);
        let w = constant(&mut s.rng, &[m, k + 1]);
        s.check("layernorm", vec![x, gain, bias], |xs| {
            Ok(xs[0].layernorm(&xs[1], &xs[2], 1e-12)?.mul(&w)?.sum())
        })?;

        let table = param(&mut s.rng, &[k + 1, n]);
        let ids: Vec<usize> = (0..m + 2).map(|i| (i * 2) % (k + 1)).collect();
        let w = constant(&mut s.rng, &[ids.len(), n]);
        s.check("gather_rows", vec![table], |xs| {
            Ok(xs[0].gather_rows(&ids)?.mul(&w)?.sum())
        })?;

        let a = param(&mut s.rng, &[m, k]);
        let b = param(&mut s.rng, &[m, n]);
        let w = constant(&mut s.rng, &[m, k + n]);
        s.check("concat_cols", vec![a, b], |xs| {
            Ok(Tensor::concat_cols(&[xs[0].clone(), xs[1].clone()])?
                .mul(&w)?
                .sum())
        })?;

        let target = constant(&mut s.rng, &[m, k]);
        let x = param(&mut s.rng, &[m, k]);
        s.check("mse_loss", vec![x], |xs| mse_loss(&xs[0], &target))?;

        let labels: Vec<usize> = (0..m).map(|i| i % k.max(2)).collect();
        let x = param(&mut s.rng, &[m, k.max(2)]);
        s.check("cross_entropy", vec![x], |xs| {
            cross_entropy(&xs[0], &labels)
        })?;
    }
    Ok(())
}

fn block_inputs(block: &BlockParams) -> Vec<Tensor> {
    block
        .named_params("b")
        .into_iter()
        .map(|(_, t)| t)
        .collect()
}

fn block_from(xs: &[Tensor]) -> BlockParams {
    BlockParams {
        wq: xs[0].clone(),
        bq: xs[1].clone(),
        wk: xs[2].clone(),
        bk: xs[3].clone(),
        wv: xs[4].clone(),
        bv: xs[5].clone(),
        wo: xs[6].clone(),
        bo: xs[7].clone(),
        ln1_gain: xs[8].clone(),
        ln1_bias: xs[9].clone(),
        w1: xs[10].clone(),
        b1: xs[11].clone(),
        w2: xs[12].clone(),
        b2: xs[13].clone(),
        ln2_gain: xs[14].clone(),
        ln2_bias: xs[15].clone(),
    }
}

/// Re-draws a freshly initialised block at unit scale so the attention and
/// layernorm paths are far from their near-linear regime.
fn sharpen<R: Rng>(block: &BlockParams, rng: &mut R) {
    for t in block_inputs(block) {
        let n = t.numel();
        t.set_values(&normal(rng, n, 0.5)).expect("same size");
    }
}

fn composite_checks(s: &mut Suite) -> Result<()> {
    for &(len, hidden, heads) in &[(3, 4, 2), (2, 6, 3), (4, 4, 1)] {
        let block = BlockParams::init(&mut s.rng, hidden, hidden + 2);
        sharpen(&block, &mut s.rng);
        let x = param(&mut s.rng, &[len, hidden]);
        let mut keep = vec![true; len];
        keep[len - 1] = len == 2;
        let w = constant(&mut s.rng, &[len, hidden]);
        let mut inputs = vec![x];
        inputs.extend(block_inputs(&block));
        s.check("self_attention", inputs.clone(), |xs| {
            Ok(self_attention(&xs[0], &keep, &block_from(&xs[1..]), heads)?
                .mul(&w)?
                .sum())
        })?;
        s.check("transformer_block", inputs, |xs| {
            Ok(
                transformer_block(&xs[0], &keep, &block_from(&xs[1..]), heads)?
                    .mul(&w)?
                    .sum(),
            )
        })?;
    }

    for (dims, act) in [
        ([6, 4, 3, 2], Activation::Identity),
        ([8, 4, 2, 1], Activation::Tanh),
        ([5, 3, 2, 1], Activation::Tanh),
    ] {
        let stack =
            DenoiseStack::init_with(&mut s.rng, DenoiseDims::new(dims), act, DenoiseInit::FanIn)?;
        let x = param(&mut s.rng, &[dims[0], 3]);
        let out = stack.forward(&x)?;
        let w = constant(&mut s.rng, out.shape());
        let mut inputs = vec![x];
        inputs.extend(stack.named_params().into_iter().map(|(_, t)| t));
        s.check(&format!("denoise_stack_{act}"), inputs, |xs| {
            Ok(stack.forward(&xs[0])?.mul(&w)?.sum())
        })?;
    }
    Ok(())
}

/// Full loss at `H = 8`, `L = 4`, one vanilla and one post block: cross
/// entropy on the classifier plus the reconstruction MSE, differentiated
/// with respect to every parameter.
fn end_to_end_check(s: &mut Suite) -> Result<()> {
    let vocab = Vocabulary::build(&["next bus to olympia", "tram from odeonsplatz"], 1)?;
    let enc = EncoderConfig {
        hidden: 8,
        max_len: 4,
        num_layers: 1,
        num_heads: 2,
        ff_size: 12,
        vocab_size: vocab.len(),
        num_classes: 2,
    };
    let mut config = ModelConfig::new(enc);
    config.denoise = DenoiseDims::new([8, 4, 2, 1]);
    config.activation = Activation::Tanh;
    config.denoise_init = DenoiseInit::FanIn;
    config.post_layers = 1;
    let model = StackedDebert::init(&mut s.rng, config, Mode::Stacked)?;
    for (name, t) in model.named_params() {
        if name.starts_with("encoder") || name.starts_with("post") {
            let n = t.numel();
            t.set_values(&normal(&mut s.rng, n, 0.3))?;
        }
    }
    let noisy = encode("next bus olympia", &vocab, 4)?;
    let clean = encode("next bus to olympia", &vocab, 4)?;
    let h_comp = model.intermediate(&clean)?.detach();
    let inputs: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    s.check("end_to_end", inputs, |_| {
        let out = model.forward(&noisy)?;
        let ce = cross_entropy(&out.logits, &[1])?;
        let rec = mse_loss(out.partial.as_ref().expect("stacked"), &h_comp)?;
        ce.add(&rec)
    })
}

/// Runs every check; the seed fixes all shapes' random values.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };
    op_checks(&mut s)?;
    composite_checks(&mut s)?;
    end_to_end_check(&mut s)?;
    Ok(s.results)
}
