//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//! `magic[8] | version u32 | config block | vocabulary block | training hash block |
//! array count u32 | arrays… | sha256[32]`. A block is `u32 length` followed by
//! UTF-8 bytes. An array is `u32 name length | name | dtype u8 | ndim u32 |
//! dims u64… | f64 payload`. The trailer hashes every preceding byte.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::parse_dims;
use crate::data::{write_atomic, Manifest};
use crate::denoise::DenoiseDims;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, StackedDebert};
use crate::tokenize::Vocabulary;

pub const MAGIC: &[u8; 8] = b"SDEBERT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DIGEST_LEN: usize = 32;

/// A model together with what is needed to run it on raw text.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StackedDebert,
    pub vocab: Vocabulary,
    /// Digest of the training settings and data the model came from.
    pub training_hash: String,
}

fn config_text(cfg: &ModelConfig, mode: Mode) -> String {
    let e = &cfg.encoder;
    let d = cfg.denoise;
    let entries = [
        ("mode", mode.to_string()),
        ("hidden", e.hidden.to_string()),
        ("max_len", e.max_len.to_string()),
        ("num_layers", e.num_layers.to_string()),
        ("num_heads", e.num_heads.to_string()),
        ("ff_size", e.ff_size.to_string()),
        ("vocab_size", e.vocab_size.to_string()),
        ("num_classes", e.num_classes.to_string()),
        ("post_layers", cfg.post_layers.to_string()),
        ("denoise_dims", join(&d.dims)),
        ("denoise_hidden", join(&d.hidden)),
        ("activation", cfg.activation.to_string()),
        ("denoise_init", cfg.denoise_init.to_string()),
    ];
    entries
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_config(text: &str) -> Result<(ModelConfig, Mode)> {
    let m = Manifest::parse(text)?;
    let get = |k: &str| {
        m.get(k)
            .ok_or_else(|| Error::Corruption(format!("checkpoint config lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Corruption(format!("bad checkpoint value for {k}")))
    };
    let encoder = EncoderConfig {
        hidden: num("hidden")?,
        max_len: num("max_len")?,
        num_layers: num("num_layers")?,
        num_heads: num("num_heads")?,
        ff_size: num("ff_size")?,
        vocab_size: num("vocab_size")?,
        num_classes: num("num_classes")?,
    };
    let hidden: Vec<usize> = get("denoise_hidden")?
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()
        .filter(|v: &Vec<usize>| v.len() == 3)
        .ok_or_else(|| Error::Corruption("bad checkpoint denoise_hidden".into()))?;
    let config = ModelConfig {
        encoder,
        denoise: DenoiseDims {
            dims: parse_dims(get("denoise_dims")?)?,
            hidden: [hidden[0], hidden[1], hidden[2]],
        },
        activation: get("activation")?.parse()?,
        denoise_init: get("denoise_init")?.parse()?,
        post_layers: num("post_layers")?,
    };
    Ok((config, get("mode")?.parse()?))
}

fn put_block(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_block(
        &mut buf,
        config_text(&ckpt.model.config, ckpt.model.mode).as_bytes(),
    );
    put_block(&mut buf, ckpt.vocab.to_tsv().as_bytes());
    put_block(&mut buf, ckpt.training_hash.as_bytes());
    let params = ckpt.model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        put_block(&mut buf, name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Corruption("checkpoint text is not UTF-8".into()))
    }
}

/// Decodes a checkpoint. The checksum is verified before anything else, so
/// a damaged file is always a corruption error and never a partial model.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Corruption("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Corruption("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Corruption("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Migration {
            found: version,
            expected: VERSION,
        });
    }
    let (config, mode) = parse_config(r.text()?)?;
    let vocab = Vocabulary::from_tsv(r.text()?)?;
    let training_hash = r.text()?.to_string();
    if vocab.len() != config.encoder.vocab_size {
        return Err(Error::Corruption(format!(
            "vocabulary has {} entries, config says {}",
            vocab.len(),
            config.encoder.vocab_size
        )));
    }

    let model = StackedDebert::init(&mut ChaCha8Rng::seed_from_u64(0), config, mode)?;
    let params = model.named_params();
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Corruption(format!(
            "checkpoint holds {count} arrays, model has {}",
            params.len()
        )));
    }
    for (expected, t) in &params {
        let name = r.text()?;
        if name != expected {
            return Err(Error::Corruption(format!(
                "expected array {expected}, found {name}"
            )));
        }
        if r.take(1)?[0] != DTYPE_F64 {
            return Err(Error::Corruption(format!("unknown dtype for {name}")));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return Err(Error::Corruption(format!(
                "{name} has shape {dims:?}, model expects {:?}",
                t.shape()
            )));
        }
        let raw = r.take(t.numel() * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        t.set_values(&values)?;
    }
    if r.pos != body.len() {
        return Err(Error::Corruption("trailing bytes after arrays".into()));
    }
    Ok(Checkpoint {
        model,
        vocab,
        training_hash,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ckpt))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path).map_err(crate::error::at_path(path))?)
}

/// Hex SHA-256 of arbitrary text, used for the training hash.
pub fn hash_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
