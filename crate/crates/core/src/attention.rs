//! The transformer stack and its two execution paths: full joint attention,
//! where every frame's tokens attend to every frame's tokens, and
//! single-query attention, where only the newest frame forms the queries and
//! keys/values come from cached per-block representations.
//!
//! Both paths funnel into one `block_core`, so a single-query pass over the
//! same token multiset reproduces the joint result exactly, not just
//! approximately. Multiply-accumulate counts for attention scores, value
//! mixing, and the feed-forward are tallied at the call sites; the q/k/v/o
//! projections are deliberately not counted, since the cost the mode
//! comparison cares about is the part that scales with context length.

use std::sync::Arc;

use crate::codec::{decode, encode, soft_composite, soft_split, TokenGrid};
use crate::error::{Error, Result};
use crate::numeric::{layer_norm, matmul, softmax_rows, Matrix, LAYER_NORM_EPS};
use crate::video::{FrameTensor, MaskTensor};
use crate::weights::{BlockWeights, WeightSet};

/// Multiply-accumulate tallies, split by where they happen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub score_macs: u64,
    pub value_macs: u64,
    pub ffn_macs: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        OpCounter::default()
    }

    pub fn total(&self) -> u64 {
        self.score_macs + self.value_macs + self.ffn_macs
    }

    pub fn merge(&mut self, other: &OpCounter) {
        self.score_macs += other.score_macs;
        self.value_macs += other.value_macs;
        self.ffn_macs += other.ffn_macs;
    }
}

/// Read access to cached per-block context representations. The memory store
/// implements this; tests substitute simple maps.
pub trait ContextSource {
    /// Entries for `frames` at `block`, in the given frame order. Every
    /// requested frame must be present; missing keys are a cache-miss error.
    fn context(&self, block: usize, frames: &[u32]) -> Result<Vec<Arc<TokenGrid>>>;
}

fn slice_cols(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        for j in 0..width {
            out.set(i, j, m.get(i, start + j));
        }
    }
    out
}

fn transposed_cols(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(width, m.rows());
    for r in 0..width {
        for c in 0..m.rows() {
            out.set(r, c, m.get(c, start + r));
        }
    }
    out
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// One pre-norm block: queries from `q_in`, keys/values from `kv_in`, then
/// the feed-forward over the query rows. `q_in` must be a row subset of the
/// conceptual token set for the residuals to make sense; both paths below
/// guarantee that.
fn block_core(
    q_in: &Matrix,
    kv_in: &Matrix,
    w: &BlockWeights,
    heads: usize,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    let dim = w.wq.rows();
    if q_in.cols() != dim || kv_in.cols() != dim {
        return Err(Error::shape(format!(
            "token dim {}/{} != weight dim {}",
            q_in.cols(),
            kv_in.cols(),
            dim
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::shape("dim not divisible by heads"));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();

    let qn = layer_norm(q_in, &w.ln1_gain, &w.ln1_bias, LAYER_NORM_EPS)?;
    let kn = layer_norm(kv_in, &w.ln1_gain, &w.ln1_bias, LAYER_NORM_EPS)?;
    let q = matmul(&qn, &w.wq)?;
    let k = matmul(&kn, &w.wk)?;
    let v = matmul(&kn, &w.wv)?;

    let (q_rows, k_rows) = (q.rows() as u64, k.rows() as u64);
    counter.score_macs += q_rows * k_rows * dim as u64;
    counter.value_macs += q_rows * k_rows * dim as u64;

    let mut mixed = Matrix::zeros(q.rows(), dim);
    for h in 0..heads {
        let start = h * head_dim;
        let qh = slice_cols(&q, start, head_dim);
        let kht = transposed_cols(&k, start, head_dim);
        let vh = slice_cols(&v, start, head_dim);
        let attn = softmax_rows(&matmul(&qh, &kht)?.scale(scale));
        let oh = matmul(&attn, &vh)?;
        for i in 0..oh.rows() {
            for j in 0..head_dim {
                mixed.set(i, start + j, oh.get(i, j));
            }
        }
    }
    let x = q_in.add(&matmul(&mixed, &w.wo)?)?;

    let ffn_dim = w.ffn_w1.cols();
    counter.ffn_macs += 2 * q_rows * dim as u64 * ffn_dim as u64;
    let xn = layer_norm(&x, &w.ln2_gain, &w.ln2_bias, LAYER_NORM_EPS)?;
    let hidden = relu(&matmul(&xn, &w.ffn_w1)?);
    x.add(&matmul(&hidden, &w.ffn_w2)?)
}

fn check_uniform_layout(frames: &[&TokenGrid]) -> Result<()> {
    let first = &frames[0].layout;
    if frames.iter().any(|f| f.layout != *first) {
        return Err(Error::shape("token grids have mixed layouts"));
    }
    Ok(())
}

/// Joint attention: the concatenation of all frames' tokens attends to
/// itself, and every frame gets an updated grid back.
pub fn block_full(
    frames: &[TokenGrid],
    w: &BlockWeights,
    heads: usize,
    counter: &mut OpCounter,
) -> Result<Vec<TokenGrid>> {
    if frames.is_empty() {
        return Err(Error::shape("block_full needs at least one frame"));
    }
    let refs: Vec<&TokenGrid> = frames.iter().collect();
    check_uniform_layout(&refs)?;
    let stacked = Matrix::vcat(&refs.iter().map(|f| &f.data).collect::<Vec<_>>())?;
    let out = block_core(&stacked, &stacked, w, heads, counter)?;
    let per_frame = frames[0].tokens();
    (0..frames.len())
        .map(|i| {
            Ok(TokenGrid {
                layout: frames[0].layout,
                data: out.slice_rows(i * per_frame, (i + 1) * per_frame)?,
            })
        })
        .collect()
}

/// Single-query attention: only `query`'s tokens are queries; keys and
/// values are the context grids followed by the query's own tokens. Context
/// is expected in ascending frame order so the key order matches a joint
/// pass over the same frames.
pub fn block_single_query(
    query: &TokenGrid,
    context: &[&TokenGrid],
    w: &BlockWeights,
    heads: usize,
    counter: &mut OpCounter,
) -> Result<TokenGrid> {
    let mut all: Vec<&TokenGrid> = context.to_vec();
    all.push(query);
    check_uniform_layout(&all)?;
    let kv = Matrix::vcat(&all.iter().map(|f| &f.data).collect::<Vec<_>>())?;
    let out = block_core(&query.data, &kv, w, heads, counter)?;
    Ok(TokenGrid {
        layout: query.layout,
        data: out,
    })
}

fn split_and_encode(
    frame: &FrameTensor,
    mask: &MaskTensor,
    weights: &WeightSet,
) -> Result<TokenGrid> {
    let fg = encode(frame, mask, &weights.codec.encode_w, &weights.codec.encode_b)?;
    soft_split(&fg, &weights.config.codec, &weights.codec.embed_w)
}

fn finish_frame(
    tokens: &TokenGrid,
    frame: &FrameTensor,
    mask: &MaskTensor,
    weights: &WeightSet,
) -> Result<FrameTensor> {
    let fg = soft_composite(tokens, &weights.config.codec, &weights.codec.back_w)?;
    let pred = decode(&fg, &weights.codec.decode_w, &weights.codec.decode_b)?;
    crate::codec::composite_output(&pred, frame, mask)
}

fn joint_pass(
    inputs: &[(&FrameTensor, &MaskTensor)],
    weights: &WeightSet,
    counter: &mut OpCounter,
    want_trace: bool,
) -> Result<(Vec<FrameTensor>, Vec<Vec<TokenGrid>>)> {
    if inputs.is_empty() {
        return Err(Error::shape("joint pass needs at least one frame"));
    }
    let mut tokens: Vec<TokenGrid> = inputs
        .iter()
        .map(|(frame, mask)| split_and_encode(frame, mask, weights))
        .collect::<Result<_>>()?;
    let mut trace = Vec::new();
    for block in &weights.blocks {
        if want_trace {
            trace.push(tokens.clone());
        }
        tokens = block_full(&tokens, block, weights.config.heads, counter)?;
    }
    let outputs = tokens
        .iter()
        .zip(inputs)
        .map(|(tg, (frame, mask))| finish_frame(tg, frame, mask, weights))
        .collect::<Result<_>>()?;
    Ok((outputs, trace))
}

/// Run the whole stack jointly over a frame selection and return one
/// prediction per input frame.
pub fn run_stack_joint(
    inputs: &[(&FrameTensor, &MaskTensor)],
    weights: &WeightSet,
    counter: &mut OpCounter,
) -> Result<Vec<FrameTensor>> {
    Ok(joint_pass(inputs, weights, counter, false)?.0)
}

/// Joint run that also returns, for every block, the per-frame token grids
/// the block consumed (`trace[b][i]` is the block-`b` input for input `i`).
/// The refiner stores these as refined memories.
pub fn run_stack_joint_traced(
    inputs: &[(&FrameTensor, &MaskTensor)],
    weights: &WeightSet,
    counter: &mut OpCounter,
) -> Result<(Vec<FrameTensor>, Vec<Vec<TokenGrid>>)> {
    joint_pass(inputs, weights, counter, true)
}

/// Memory-mode inference for one incoming frame: only its tokens are
/// computed; context keys/values are fetched per block from `source`.
/// Returns the inpainted frame and the B per-block input representations
/// that must be stored for later frames (`entries[0]` is the post-split
/// grid).
pub fn run_stack_memory(
    frame: &FrameTensor,
    mask: &MaskTensor,
    context_frames: &[u32],
    source: &impl ContextSource,
    weights: &WeightSet,
    counter: &mut OpCounter,
) -> Result<(FrameTensor, Vec<TokenGrid>)> {
    let mut q = split_and_encode(frame, mask, weights)?;
    let mut entries = Vec::with_capacity(weights.blocks.len());
    for (b, block) in weights.blocks.iter().enumerate() {
        entries.push(q.clone());
        let ctx = source.context(b, context_frames)?;
        let refs: Vec<&TokenGrid> = ctx.iter().map(|a| a.as_ref()).collect();
        q = block_single_query(&q, &refs, block, weights.config.heads, counter)?;
    }
    let output = finish_frame(&q, frame, mask, weights)?;
    Ok((output, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TokenLayout;
    use crate::numeric::{seeded_normal, Rng};
    use crate::video::MaskTensor;
    use crate::weights::StackConfig;
    use std::collections::HashMap;

    fn layout_4x4() -> TokenLayout {
        TokenLayout {
            positions_y: 4,
            positions_x: 4,
            p: 2,
            d: 2,
            gh: 8,
            gw: 8,
        }
    }

    fn random_grid(layout: TokenLayout, dim: usize, seed: u64) -> TokenGrid {
        let mut rng = Rng::new(seed);
        TokenGrid {
            layout,
            data: seeded_normal(&mut rng, layout.token_count(), dim, 1.0).unwrap(),
        }
    }

    fn toy_weights(seed: u64) -> WeightSet {
        WeightSet::seeded(&StackConfig::default(), seed).unwrap()
    }

    struct MapSource {
        entries: HashMap<(usize, u32), Arc<TokenGrid>>,
    }

    impl ContextSource for MapSource {
        fn context(&self, block: usize, frames: &[u32]) -> Result<Vec<Arc<TokenGrid>>> {
            frames
                .iter()
                .map(|f| {
                    self.entries
                        .get(&(block, *f))
                        .cloned()
                        .ok_or_else(|| Error::CacheMiss {
                            keys: vec![(block, *f)],
                        })
                })
                .collect()
        }
    }

    #[test]
    fn single_token_attention_is_its_own_value() {
        let dim = 8;
        let mut rng = Rng::new(3);
        let w = BlockWeights {
            wq: seeded_normal(&mut rng, dim, dim, 0.5).unwrap(),
            wk: seeded_normal(&mut rng, dim, dim, 0.5).unwrap(),
            wv: seeded_normal(&mut rng, dim, dim, 0.5).unwrap(),
            wo: Matrix::identity(dim),
            ln1_gain: vec![1.0; dim],
            ln1_bias: vec![0.0; dim],
            ffn_w1: Matrix::zeros(dim, 4),
            ffn_w2: Matrix::zeros(4, dim),
            ln2_gain: vec![1.0; dim],
            ln2_bias: vec![0.0; dim],
        };
        let layout = TokenLayout {
            positions_y: 1,
            positions_x: 1,
            p: 1,
            d: 1,
            gh: 1,
            gw: 1,
        };
        let tg = random_grid(layout, dim, 5);
        let mut counter = OpCounter::new();
        let out = block_full(std::slice::from_ref(&tg), &w, 2, &mut counter).unwrap();

        let normed = layer_norm(&tg.data, &w.ln1_gain, &w.ln1_bias, LAYER_NORM_EPS).unwrap();
        let value = matmul(&normed, &w.wv).unwrap();
        let expect = tg.data.add(&value).unwrap();
        assert!(out[0].data.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn joint_score_macs_match_closed_form() {
        let layout = layout_4x4();
        let dim = 32;
        let frames: Vec<TokenGrid> = (0..11).map(|i| random_grid(layout, dim, i)).collect();
        let weights = toy_weights(1);
        let mut counter = OpCounter::new();
        block_full(&frames, &weights.blocks[0], 4, &mut counter).unwrap();
        assert_eq!(counter.score_macs, 991_232);
        assert_eq!(counter.value_macs, 991_232);
        let tokens = 11 * 16;
        assert_eq!(counter.ffn_macs, 2 * tokens * 32 * 64);
    }

    #[test]
    fn frame_permutation_permutes_outputs() {
        let layout = layout_4x4();
        let frames: Vec<TokenGrid> = (0..4).map(|i| random_grid(layout, 32, 10 + i)).collect();
        let weights = toy_weights(2);
        let mut c1 = OpCounter::new();
        let out = block_full(&frames, &weights.blocks[0], 4, &mut c1).unwrap();
        let permuted: Vec<TokenGrid> = [2usize, 0, 3, 1]
            .iter()
            .map(|i| frames[*i].clone())
            .collect();
        let mut c2 = OpCounter::new();
        let out_p = block_full(&permuted, &weights.blocks[0], 4, &mut c2).unwrap();
        // Equivariance is exact in math; bit patterns shift because softmax
        // and value sums accumulate keys in the permuted order.
        for (slot, orig) in [2usize, 0, 3, 1].iter().enumerate() {
            assert!(out_p[slot].data.max_abs_diff(&out[*orig].data) < 1e-6);
        }
    }

    #[test]
    fn empty_context_single_query_equals_full_block() {
        let layout = layout_4x4();
        let tg = random_grid(layout, 32, 77);
        let weights = toy_weights(3);
        let mut c1 = OpCounter::new();
        let full = block_full(std::slice::from_ref(&tg), &weights.blocks[0], 4, &mut c1).unwrap();
        let mut c2 = OpCounter::new();
        let single = block_single_query(&tg, &[], &weights.blocks[0], 4, &mut c2).unwrap();
        assert_eq!(single.data.data(), full[0].data.data());
        assert_eq!(c1, c2);
    }

    #[test]
    fn single_query_score_macs_match_closed_form() {
        let layout = layout_4x4();
        let query = random_grid(layout, 32, 0);
        let context: Vec<TokenGrid> = (1..=10).map(|i| random_grid(layout, 32, i)).collect();
        let refs: Vec<&TokenGrid> = context.iter().collect();
        let weights = toy_weights(4);
        let mut counter = OpCounter::new();
        block_single_query(&query, &refs, &weights.blocks[0], 4, &mut counter).unwrap();
        assert_eq!(counter.score_macs, 90_112);
        assert_eq!(counter.value_macs, 90_112);
    }

    #[test]
    fn single_query_matches_extracted_joint_rows() {
        let layout = layout_4x4();
        let weights = toy_weights(5);
        for seed in 0..20 {
            let frames: Vec<TokenGrid> =
                (0..5).map(|i| random_grid(layout, 32, seed * 10 + i)).collect();
            let mut c1 = OpCounter::new();
            let joint = block_full(&frames, &weights.blocks[0], 4, &mut c1).unwrap();
            let refs: Vec<&TokenGrid> = frames[..4].iter().collect();
            let mut c2 = OpCounter::new();
            let single =
                block_single_query(&frames[4], &refs, &weights.blocks[0], 4, &mut c2).unwrap();
            assert!(single.data.max_abs_diff(&joint[4].data) < 1e-6);
        }
    }

    #[test]
    fn joint_stack_keeps_known_pixels_and_is_deterministic() {
        let weights = toy_weights(6);
        let frame = {
            let mut rng = Rng::new(12);
            let data = (0..32 * 32 * 3).map(|_| rng.next_uniform() as f32).collect();
            FrameTensor::new(32, 32, data).unwrap()
        };
        let mut mask = MaskTensor::zeros(32, 32);
        for y in 8..16 {
            for x in 8..16 {
                mask.data[y * 32 + x] = 1;
            }
        }
        let mut c1 = OpCounter::new();
        let out1 = run_stack_joint(&[(&frame, &mask)], &weights, &mut c1).unwrap();
        let mut c2 = OpCounter::new();
        let out2 = run_stack_joint(&[(&frame, &mask)], &weights, &mut c2).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(c1, c2);
        for (i, m) in mask.data.iter().enumerate() {
            if *m == 0 {
                for c in 0..3 {
                    assert_eq!(out1[0].data[i * 3 + c], frame.data[i * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn joint_stack_macs_sum_over_blocks() {
        let weights = toy_weights(7);
        let frames: Vec<FrameTensor> = (0..3)
            .map(|i| {
                let mut rng = Rng::new(100 + i);
                let data = (0..32 * 32 * 3).map(|_| rng.next_uniform() as f32).collect();
                FrameTensor::new(32, 32, data).unwrap()
            })
            .collect();
        let mask = MaskTensor::zeros(32, 32);
        let inputs: Vec<(&FrameTensor, &MaskTensor)> =
            frames.iter().map(|f| (f, &mask)).collect();
        let mut counter = OpCounter::new();
        run_stack_joint(&inputs, &weights, &mut counter).unwrap();
        // 32x32 at e=4 is an 8x8 grid; p=4, d=2 gives 3x3 = 9 tokens/frame.
        let n_tokens = (3 * 9) as u64;
        let b = weights.config.blocks as u64;
        assert_eq!(counter.score_macs, b * n_tokens * n_tokens * 32);
        assert_eq!(counter.value_macs, b * n_tokens * n_tokens * 32);
        assert_eq!(counter.ffn_macs, b * 2 * n_tokens * 32 * 64);
    }

    #[test]
    fn memory_mode_with_empty_context_equals_joint_single_frame() {
        let weights = toy_weights(8);
        let mut rng = Rng::new(55);
        let data = (0..32 * 32 * 3).map(|_| rng.next_uniform() as f32).collect();
        let frame = FrameTensor::new(32, 32, data).unwrap();
        let mut mask = MaskTensor::zeros(32, 32);
        for i in 100..200 {
            mask.data[i] = 1;
        }
        let source = MapSource {
            entries: HashMap::new(),
        };
        let mut c1 = OpCounter::new();
        let (mem_out, entries) =
            run_stack_memory(&frame, &mask, &[], &source, &weights, &mut c1).unwrap();
        let mut c2 = OpCounter::new();
        let joint = run_stack_joint(&[(&frame, &mask)], &weights, &mut c2).unwrap();
        assert_eq!(mem_out, joint[0]);
        assert_eq!(c1, c2);
        assert_eq!(entries.len(), weights.config.blocks);
        assert_eq!(entries[0], split_and_encode(&frame, &mask, &weights).unwrap());
    }

    #[test]
    fn memory_mode_reports_missing_context() {
        let weights = toy_weights(9);
        let frame = FrameTensor::constant(32, 32, 0.5).unwrap();
        let mask = MaskTensor::zeros(32, 32);
        let source = MapSource {
            entries: HashMap::new(),
        };
        let mut counter = OpCounter::new();
        let err = run_stack_memory(&frame, &mask, &[3], &source, &weights, &mut counter);
        assert!(matches!(err, Err(Error::CacheMiss { .. })));
    }

    #[test]
    fn memory_mode_score_macs_linear_in_context() {
        let weights = toy_weights(10);
        let layout = weights_layout(&weights);
        let frame = FrameTensor::constant(32, 32, 0.25).unwrap();
        let mask = MaskTensor::zeros(32, 32);
        let p = layout.token_count() as u64;
        for c in [0u64, 2, 5, 9] {
            let mut entries = HashMap::new();
            for b in 0..weights.config.blocks {
                for f in 0..c {
                    entries.insert(
                        (b, f as u32),
                        Arc::new(random_grid(layout, 32, (b as u64) * 100 + f)),
                    );
                }
            }
            let source = MapSource { entries };
            let frames: Vec<u32> = (0..c as u32).collect();
            let mut counter = OpCounter::new();
            run_stack_memory(&frame, &mask, &frames, &source, &weights, &mut counter).unwrap();
            let b = weights.config.blocks as u64;
            assert_eq!(counter.score_macs, b * p * ((c + 1) * p) * 32);
        }
    }

    fn weights_layout(weights: &WeightSet) -> TokenLayout {
        let cfg = &weights.config.codec;
        let cells = 32 / cfg.e;
        TokenLayout {
            positions_y: cfg.positions(cells),
            positions_x: cfg.positions(cells),
            p: cfg.p,
            d: cfg.d,
            gh: cells,
            gw: cells,
        }
    }
}
