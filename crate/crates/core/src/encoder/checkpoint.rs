//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic            8 bytes  "LASRCKPT"
//! version          u32
//! F H D V L c      u32 × 6  feature, hidden, embed, vocab, classes, context
//! hidden_layers    u32
//! quantizer_dim    u32
//! activation       u32      0 = tanh, 1 = relu, 2 = linear
//! quantizer_seed   u64
//! step             u64
//! block_count      u32
//! blocks           block_count × { name_len u32, name utf-8,
//!                                  rank u32, dims u32 × rank,
//!                                  values f64 × prod(dims) }
//! ```
//!
//! Parameter blocks use the names from [`EncoderParams::blocks`]. Any other
//! block (optimizer moments, for instance) is carried through as an extra.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Dense, EncoderConfig, EncoderError, EncoderParams};
use crate::diffkit::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LASRCKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub step: u64,
    pub extra: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint(msg.into())
}

fn u32_of(v: usize, what: &str) -> Result<u32, EncoderError> {
    u32::try_from(v).map_err(|_| bad(format!("{what} {v} does not fit in u32")))
}

fn write_block<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), EncoderError> {
    w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&u32_of(t.rank(), "rank")?.to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<(), EncoderError> {
    let c = &ckpt.params.config;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        c.feature_dim,
        c.hidden_dim,
        c.embed_dim,
        c.vocab_size,
        c.num_classes,
        c.context,
        c.hidden_layers,
        c.quantizer_dim,
    ] {
        w.write_all(&u32_of(v, "header field")?.to_le_bytes())?;
    }
    w.write_all(&c.activation.code().to_le_bytes())?;
    w.write_all(&ckpt.params.quantizer_seed.to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    let blocks = ckpt.params.blocks();
    w.write_all(&u32_of(blocks.len() + ckpt.extra.len(), "block count")?.to_le_bytes())?;
    for (name, t) in &blocks {
        write_block(w, name, t)?;
    }
    for (name, t) in &ckpt.extra {
        write_block(w, name, t)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, EncoderError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, EncoderError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, EncoderError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut h = [0usize; 8];
    for v in &mut h {
        *v = read_u32(r)? as usize;
    }
    let activation = Activation::from_code(read_u32(r)?).ok_or_else(|| bad("unknown activation"))?;
    let config = EncoderConfig {
        feature_dim: h[0],
        hidden_dim: h[1],
        embed_dim: h[2],
        vocab_size: h[3],
        num_classes: h[4],
        context: h[5],
        hidden_layers: h[6],
        quantizer_dim: h[7],
        activation,
    };
    config
        .validate()
        .map_err(|e| bad(format!("header describes an invalid encoder: {e}")))?;
    let quantizer_seed = read_u64(r)?;
    let step = read_u64(r)?;
    let count = read_u32(r)? as usize;

    let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated block name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("block name is not utf-8"))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|_| bad(format!("block {name}: truncated data")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("block {name}: {e}")))?;
        if blocks.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate block {name}")));
        }
        order.push(name);
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor, EncoderError> {
        let t = blocks
            .remove(name)
            .ok_or_else(|| bad(format!("missing block {name}")))?;
        if t.shape() != shape {
            return Err(bad(format!(
                "block {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let expected = EncoderParams::expected_shapes(&config);
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, shape) in &expected {
        by_name.insert(name.clone(), take(name, shape)?);
    }
    let layers = (0..=config.hidden_layers)
        .map(|i| Dense {
            weight: by_name.remove(&format!("layer{i}.weight")).unwrap(),
            bias: by_name.remove(&format!("layer{i}.bias")).unwrap(),
        })
        .collect();
    let params = EncoderParams {
        config,
        quantizer_seed,
        layers,
        mask_embedding: by_name.remove("mask_embedding").unwrap(),
        mlm_weight: by_name.remove("mlm_head.weight").unwrap(),
        mlm_bias: by_name.remove("mlm_head.bias").unwrap(),
        contrastive_weight: by_name.remove("contrastive_head.weight").unwrap(),
        classifier_weight: by_name.remove("classifier.weight").unwrap(),
        classifier_bias: by_name.remove("classifier.bias").unwrap(),
    };
    let extra = order
        .into_iter()
        .filter_map(|n| blocks.remove(&n).map(|t| (n, t)))
        .collect();
    Ok(Checkpoint {
        params,
        step,
        extra,
    })
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_checkpoint(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        read_checkpoint(&mut r)
    }
}
