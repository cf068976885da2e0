//! Stack configuration, seeded weight initialization, and the WTS1 weight
//! file. Weights are never trained here; a fixed seed gives every test and
//! benchmark the same deterministic network.

use std::fs;
use std::path::Path;

use crate::codec::{CodecConfig, ENCODE_CHANNELS};
use crate::error::{Error, Result};
use crate::numeric::{seeded_normal, Matrix, Rng};
use crate::video::FRAME_CHANNELS;

/// Transformer stack shape. The codec's token dimension doubles as the model
/// dimension, so one width runs through the whole pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub codec: CodecConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            blocks: 4,
            heads: 4,
            dim: 32,
            ffn_dim: 64,
            codec: CodecConfig::default(),
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::config("stack needs at least one block"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim must be nonzero"));
        }
        self.codec.validate()?;
        if self.codec.dim != self.dim {
            return Err(Error::config(format!(
                "codec dim {} != stack dim {}",
                self.codec.dim, self.dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// One transformer block: attention projections, feed-forward, and the two
/// layer-norm affine pairs (pre-norm placement).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub ffn_w1: Matrix,
    pub ffn_w2: Matrix,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

/// Codec projections: encode/decode carry biases, the patch embed and
/// back-projection are bias-free so a zero grid maps to zero tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecWeights {
    pub encode_w: Matrix,
    pub encode_b: Vec<f32>,
    pub embed_w: Matrix,
    pub back_w: Matrix,
    pub decode_w: Matrix,
    pub decode_b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub config: StackConfig,
    pub codec: CodecWeights,
    pub blocks: Vec<BlockWeights>,
}

const INIT_SCALE: f32 = 0.02;

impl WeightSet {
    /// Deterministic initialization: every projection drawn from one seeded
    /// stream at scale 0.02, layer-norm gains at 1, all biases at 0.
    pub fn seeded(config: &StackConfig, seed: u64) -> Result<WeightSet> {
        config.validate()?;
        let d = config.dim;
        let (e, p) = (config.codec.e, config.codec.p);
        let mut rng = Rng::new(seed);
        let codec = CodecWeights {
            encode_w: seeded_normal(&mut rng, e * e * ENCODE_CHANNELS, d, INIT_SCALE)?,
            encode_b: vec![0.0; d],
            embed_w: seeded_normal(&mut rng, p * p * d, d, INIT_SCALE)?,
            back_w: seeded_normal(&mut rng, d, p * p * d, INIT_SCALE)?,
            decode_w: seeded_normal(&mut rng, d, e * e * FRAME_CHANNELS, INIT_SCALE)?,
            decode_b: vec![0.0; e * e * FRAME_CHANNELS],
        };
        let blocks = (0..config.blocks)
            .map(|_| {
                Ok(BlockWeights {
                    wq: seeded_normal(&mut rng, d, d, INIT_SCALE)?,
                    wk: seeded_normal(&mut rng, d, d, INIT_SCALE)?,
                    wv: seeded_normal(&mut rng, d, d, INIT_SCALE)?,
                    wo: seeded_normal(&mut rng, d, d, INIT_SCALE)?,
                    ln1_gain: vec![1.0; d],
                    ln1_bias: vec![0.0; d],
                    ffn_w1: seeded_normal(&mut rng, d, config.ffn_dim, INIT_SCALE)?,
                    ffn_w2: seeded_normal(&mut rng, config.ffn_dim, d, INIT_SCALE)?,
                    ln2_gain: vec![1.0; d],
                    ln2_bias: vec![0.0; d],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightSet {
            config: config.clone(),
            codec,
            blocks,
        })
    }

    pub fn is_finite(&self) -> bool {
        let vecs_ok = |v: &[f32]| v.iter().all(|x| x.is_finite());
        self.codec.encode_w.is_finite()
            && vecs_ok(&self.codec.encode_b)
            && self.codec.embed_w.is_finite()
            && self.codec.back_w.is_finite()
            && self.codec.decode_w.is_finite()
            && vecs_ok(&self.codec.decode_b)
            && self.blocks.iter().all(|b| {
                b.wq.is_finite()
                    && b.wk.is_finite()
                    && b.wv.is_finite()
                    && b.wo.is_finite()
                    && vecs_ok(&b.ln1_gain)
                    && vecs_ok(&b.ln1_bias)
                    && b.ffn_w1.is_finite()
                    && b.ffn_w2.is_finite()
                    && vecs_ok(&b.ln2_gain)
                    && vecs_ok(&b.ln2_bias)
            })
    }
}

const WTS_MAGIC: &[u8; 4] = b"WTS1";

fn push_floats(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct FloatReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> FloatReader<'a> {
    fn take(&mut self, count: usize) -> Result<Vec<f32>> {
        let need = count * 4;
        if self.offset + need > self.bytes.len() {
            return Err(Error::format("weight file truncated"));
        }
        let out = self.bytes[self.offset..self.offset + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.offset += need;
        Ok(out)
    }

    fn take_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.take(rows * cols)?)
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after weights",
                self.bytes.len() - self.offset
            )));
        }
        Ok(())
    }
}

/// Serialize to the WTS1 layout: magic, little-endian u32 header
/// {B, h, D, ffn_dim, e, p, d}, then f32 arrays in fixed order (encode,
/// embed, per-block attention/norm/ffn, back-projection, decode).
pub fn save_wts(weights: &WeightSet, path: &Path) -> Result<()> {
    let cfg = &weights.config;
    let mut out = Vec::new();
    out.extend_from_slice(WTS_MAGIC);
    for field in [
        cfg.blocks,
        cfg.heads,
        cfg.dim,
        cfg.ffn_dim,
        cfg.codec.e,
        cfg.codec.p,
        cfg.codec.d,
    ] {
        let v = u32::try_from(field).map_err(|_| Error::format("header field exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_floats(&mut out, weights.codec.encode_w.data());
    push_floats(&mut out, &weights.codec.encode_b);
    push_floats(&mut out, weights.codec.embed_w.data());
    for b in &weights.blocks {
        push_floats(&mut out, b.wq.data());
        push_floats(&mut out, b.wk.data());
        push_floats(&mut out, b.wv.data());
        push_floats(&mut out, b.wo.data());
        push_floats(&mut out, &b.ln1_gain);
        push_floats(&mut out, &b.ln1_bias);
        push_floats(&mut out, b.ffn_w1.data());
        push_floats(&mut out, b.ffn_w2.data());
        push_floats(&mut out, &b.ln2_gain);
        push_floats(&mut out, &b.ln2_bias);
    }
    push_floats(&mut out, weights.codec.back_w.data());
    push_floats(&mut out, weights.codec.decode_w.data());
    push_floats(&mut out, &weights.codec.decode_b);
    fs::write(path, out)?;
    Ok(())
}

/// Load a WTS1 file. The payload length must match the header-derived
/// shapes exactly, and every value must be finite.
pub fn load_wts(path: &Path) -> Result<WeightSet> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 + 7 * 4 {
        return Err(Error::format("weight file shorter than header"));
    }
    if &bytes[0..4] != WTS_MAGIC {
        return Err(Error::format("bad magic"));
    }
    let field = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let config = StackConfig {
        blocks: field(0),
        heads: field(1),
        dim: field(2),
        ffn_dim: field(3),
        codec: CodecConfig {
            e: field(4),
            p: field(5),
            d: field(6),
            dim: field(2),
            pos_encoding: true,
        },
    };
    config
        .validate()
        .map_err(|e| Error::format(format!("invalid header: {e}")))?;
    let d = config.dim;
    let (e, p) = (config.codec.e, config.codec.p);
    let mut reader = FloatReader {
        bytes: &bytes,
        offset: 4 + 7 * 4,
    };
    let encode_w = reader.take_matrix(e * e * ENCODE_CHANNELS, d)?;
    let encode_b = reader.take(d)?;
    let embed_w = reader.take_matrix(p * p * d, d)?;
    let blocks = (0..config.blocks)
        .map(|_| {
            Ok(BlockWeights {
                wq: reader.take_matrix(d, d)?,
                wk: reader.take_matrix(d, d)?,
                wv: reader.take_matrix(d, d)?,
                wo: reader.take_matrix(d, d)?,
                ln1_gain: reader.take(d)?,
                ln1_bias: reader.take(d)?,
                ffn_w1: reader.take_matrix(d, config.ffn_dim)?,
                ffn_w2: reader.take_matrix(config.ffn_dim, d)?,
                ln2_gain: reader.take(d)?,
                ln2_bias: reader.take(d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let back_w = reader.take_matrix(d, p * p * d)?;
    let decode_w = reader.take_matrix(d, e * e * FRAME_CHANNELS)?;
    let decode_b = reader.take(e * e * FRAME_CHANNELS)?;
    reader.finish()?;
    let weights = WeightSet {
        config,
        codec: CodecWeights {
            encode_w,
            encode_b,
            embed_w,
            back_w,
            decode_w,
            decode_b,
        },
        blocks,
    };
    if !weights.is_finite() {
        return Err(Error::format("weight file contains non-finite values"));
    }
    Ok(weights)
}
