//! Frame/token codec: block-linear encode of frame+mask into a feature
//! grid, overlapping soft split into patch tokens, overlap-add composite
//! back to a grid, and linear decode to pixels.
//!
//! All projections are plain matrix products so the split/composite pair is
//! exactly invertible when the embed and back-project weights are mutual
//! inverses on the patch space, which the tests exploit.

use crate::error::{Error, Result};
use crate::numeric::{matmul, Matrix};
use crate::video::{FrameTensor, MaskTensor, FRAME_CHANNELS};

/// Encoder input channels: RGB premultiplied by (1 - mask), plus the mask.
pub const ENCODE_CHANNELS: usize = FRAME_CHANNELS + 1;

/// Per-cell feature map produced by `encode`, row-major cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub gh: usize,
    pub gw: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(gh: usize, gw: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != gh * gw * dim {
            return Err(Error::shape(format!(
                "feature grid data length {} != {}x{}x{}",
                data.len(),
                gh,
                gw,
                dim
            )));
        }
        Ok(FeatureGrid { gh, gw, dim, data })
    }

    pub fn zeros(gh: usize, gw: usize, dim: usize) -> Self {
        FeatureGrid {
            gh,
            gw,
            dim,
            data: vec![0.0; gh * gw * dim],
        }
    }

    pub fn cell(&self, gy: usize, gx: usize) -> &[f32] {
        let base = (gy * self.gw + gx) * self.dim;
        &self.data[base..base + self.dim]
    }
}

/// How a token grid was cut from its feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub positions_y: usize,
    pub positions_x: usize,
    pub p: usize,
    pub d: usize,
    pub gh: usize,
    pub gw: usize,
}

impl TokenLayout {
    pub fn token_count(&self) -> usize {
        self.positions_y * self.positions_x
    }
}

/// P×D token matrix plus the layout needed to put the tokens back.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub layout: TokenLayout,
    pub data: Matrix,
}

impl TokenGrid {
    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Codec geometry: `e` pixels per grid cell, patches of `p`×`p` cells cut at
/// stride `d`, tokens of width `dim`. `pos_encoding` switches the spatial
/// sinusoidal term added at split time; identity round-trip tests turn it
/// off.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub e: usize,
    pub p: usize,
    pub d: usize,
    pub dim: usize,
    pub pos_encoding: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            e: 4,
            p: 4,
            d: 2,
            dim: 32,
            pos_encoding: true,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > self.p {
            return Err(Error::config(format!(
                "stride {} must satisfy 1 <= d <= p ({})",
                self.d, self.p
            )));
        }
        if self.e == 0 || self.dim == 0 {
            return Err(Error::config("e and dim must be nonzero"));
        }
        Ok(())
    }

    /// Patch positions along one axis of `cells` grid cells, padding right or
    /// bottom with zeros until the last window fits.
    pub fn positions(&self, cells: usize) -> usize {
        let over = cells.saturating_sub(self.p);
        over.div_ceil(self.d) + 1
    }

    /// Cells per axis after zero padding: the last window must end exactly at
    /// the padded edge.
    pub fn padded(&self, cells: usize) -> usize {
        (self.positions(cells) - 1) * self.d + self.p
    }
}

/// Project each e×e pixel block of (frame ⊙ (1−mask), mask) to a feature
/// cell: flattened block of `ENCODE_CHANNELS` values per pixel, times
/// `w` ((e²·4)×dim), plus `b`.
pub fn encode(
    frame: &FrameTensor,
    mask: &MaskTensor,
    w: &Matrix,
    b: &[f32],
) -> Result<FeatureGrid> {
    if frame.height != mask.height || frame.width != mask.width {
        return Err(Error::shape("frame and mask dimensions differ"));
    }
    let e = (w.rows() as f64 / ENCODE_CHANNELS as f64).sqrt() as usize;
    if e * e * ENCODE_CHANNELS != w.rows() {
        return Err(Error::shape("encode weight rows are not e*e*4"));
    }
    if frame.height % e != 0 || frame.width % e != 0 {
        return Err(Error::shape(format!(
            "frame {}x{} not divisible by downsample factor {}",
            frame.height, frame.width, e
        )));
    }
    let dim = w.cols();
    if b.len() != dim {
        return Err(Error::shape("encode bias length != dim"));
    }
    let (gh, gw) = (frame.height / e, frame.width / e);
    let mut blocks = Matrix::zeros(gh * gw, e * e * ENCODE_CHANNELS);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = blocks.row_mut(gy * gw + gx);
            let mut k = 0;
            for dy in 0..e {
                for dx in 0..e {
                    let (y, x) = (gy * e + dy, gx * e + dx);
                    let masked = mask.data[y * frame.width + x] == 1;
                    let rgb = frame.pixel(y, x);
                    for c in 0..FRAME_CHANNELS {
                        row[k] = if masked { 0.0 } else { rgb[c] };
                        k += 1;
                    }
                    row[k] = if masked { 1.0 } else { 0.0 };
                    k += 1;
                }
            }
        }
    }
    let mut projected = matmul(&blocks, w)?;
    for i in 0..projected.rows() {
        let row = projected.row_mut(i);
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    FeatureGrid::new(gh, gw, dim, projected.data().to_vec())
}

/// Spatial sinusoidal encoding for a patch position: the first half of the
/// channels encode the row index, the second half the column index.
pub fn positional_encoding(py: usize, px: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dim];
    let half = dim / 2;
    let fill = |slice: &mut [f32], pos: usize| {
        let n = slice.len();
        for (i, v) in slice.iter_mut().enumerate() {
            let denom = 10000f64.powf((2 * (i / 2)) as f64 / n.max(1) as f64);
            let angle = pos as f64 / denom;
            *v = if i % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            };
        }
    };
    let (ys, xs) = out.split_at_mut(half);
    fill(ys, py);
    fill(xs, px);
    out
}

fn flatten_windows(fg: &FeatureGrid, cfg: &CodecConfig) -> (TokenLayout, Matrix) {
    let (ny, nx) = (cfg.positions(fg.gh), cfg.positions(fg.gw));
    let layout = TokenLayout {
        positions_y: ny,
        positions_x: nx,
        p: cfg.p,
        d: cfg.d,
        gh: fg.gh,
        gw: fg.gw,
    };
    let patch_len = cfg.p * cfg.p * fg.dim;
    let mut windows = Matrix::zeros(ny * nx, patch_len);
    for iy in 0..ny {
        for ix in 0..nx {
            let row = windows.row_mut(iy * nx + ix);
            let mut k = 0;
            for wy in 0..cfg.p {
                for wx in 0..cfg.p {
                    let (gy, gx) = (iy * cfg.d + wy, ix * cfg.d + wx);
                    if gy < fg.gh && gx < fg.gw {
                        row[k..k + fg.dim].copy_from_slice(fg.cell(gy, gx));
                    }
                    k += fg.dim;
                }
            }
        }
    }
    (layout, windows)
}

/// Cut the grid into overlapping p×p windows at stride d (zero-padded right
/// and bottom), flatten each window, project with `embed_w`, and add the
/// spatial positional encoding when the config asks for it.
pub fn soft_split(fg: &FeatureGrid, cfg: &CodecConfig, embed_w: &Matrix) -> Result<TokenGrid> {
    cfg.validate()?;
    if embed_w.rows() != cfg.p * cfg.p * fg.dim {
        return Err(Error::shape(format!(
            "embed weight rows {} != p*p*dim {}",
            embed_w.rows(),
            cfg.p * cfg.p * fg.dim
        )));
    }
    let (layout, windows) = flatten_windows(fg, cfg);
    let mut tokens = matmul(&windows, embed_w)?;
    if cfg.pos_encoding {
        let dim = tokens.cols();
        for iy in 0..layout.positions_y {
            for ix in 0..layout.positions_x {
                let pe = positional_encoding(iy, ix, dim);
                let row = tokens.row_mut(iy * layout.positions_x + ix);
                for (v, add) in row.iter_mut().zip(&pe) {
                    *v += add;
                }
            }
        }
    }
    Ok(TokenGrid {
        layout,
        data: tokens,
    })
}

/// Per-axis window coverage count for each cell of the unpadded grid.
pub fn coverage_counts(layout: &TokenLayout) -> Vec<u32> {
    let mut counts = vec![0u32; layout.gh * layout.gw];
    for iy in 0..layout.positions_y {
        for ix in 0..layout.positions_x {
            for wy in 0..layout.p {
                for wx in 0..layout.p {
                    let (gy, gx) = (iy * layout.d + wy, ix * layout.d + wx);
                    if gy < layout.gh && gx < layout.gw {
                        counts[gy * layout.gw + gx] += 1;
                    }
                }
            }
        }
    }
    counts
}

/// Back-project each token to a p×p patch, overlap-add all patches, divide
/// each cell by its coverage count, and crop the padding.
pub fn soft_composite(tg: &TokenGrid, cfg: &CodecConfig, back_w: &Matrix) -> Result<FeatureGrid> {
    cfg.validate()?;
    let layout = &tg.layout;
    if layout.p != cfg.p
        || layout.d != cfg.d
        || layout.positions_y != cfg.positions(layout.gh)
        || layout.positions_x != cfg.positions(layout.gw)
    {
        return Err(Error::shape("token layout does not match codec config"));
    }
    if back_w.cols() % (cfg.p * cfg.p) != 0 {
        return Err(Error::shape("back-projection cols are not p*p*dim"));
    }
    let dim = back_w.cols() / (cfg.p * cfg.p);
    let patches = matmul(&tg.data, back_w)?;
    let mut acc = vec![0.0f32; layout.gh * layout.gw * dim];
    for iy in 0..layout.positions_y {
        for ix in 0..layout.positions_x {
            let patch = patches.row(iy * layout.positions_x + ix);
            let mut k = 0;
            for wy in 0..cfg.p {
                for wx in 0..cfg.p {
                    let (gy, gx) = (iy * cfg.d + wy, ix * cfg.d + wx);
                    if gy < layout.gh && gx < layout.gw {
                        let base = (gy * layout.gw + gx) * dim;
                        for c in 0..dim {
                            acc[base + c] += patch[k + c];
                        }
                    }
                    k += dim;
                }
            }
        }
    }
    let counts = coverage_counts(layout);
    for (cell, count) in counts.iter().enumerate() {
        let base = cell * dim;
        let inv = 1.0 / *count as f32;
        for c in 0..dim {
            acc[base + c] *= inv;
        }
    }
    FeatureGrid::new(layout.gh, layout.gw, dim, acc)
}

/// Linear up-projection of each cell to e×e×3 pixels, clamped to [0, 1].
pub fn decode(fg: &FeatureGrid, w: &Matrix, b: &[f32]) -> Result<FrameTensor> {
    if w.rows() != fg.dim {
        return Err(Error::shape("decode weight rows != grid dim"));
    }
    let out_len = w.cols();
    if out_len % FRAME_CHANNELS != 0 {
        return Err(Error::shape("decode cols are not e*e*3"));
    }
    let e = ((out_len / FRAME_CHANNELS) as f64).sqrt() as usize;
    if e * e * FRAME_CHANNELS != out_len {
        return Err(Error::shape("decode cols are not a square patch"));
    }
    if b.len() != out_len {
        return Err(Error::shape("decode bias length mismatch"));
    }
    let cells = Matrix::new(fg.gh * fg.gw, fg.dim, fg.data.clone())?;
    let pixels = matmul(&cells, w)?;
    let (height, width) = (fg.gh * e, fg.gw * e);
    let mut frame = FrameTensor {
        height,
        width,
        data: vec![0.0; height * width * FRAME_CHANNELS],
    };
    for gy in 0..fg.gh {
        for gx in 0..fg.gw {
            let row = pixels.row(gy * fg.gw + gx);
            let mut k = 0;
            for dy in 0..e {
                for dx in 0..e {
                    let mut rgb = [0.0f32; 3];
                    for (c, slot) in rgb.iter_mut().enumerate() {
                        *slot = (row[k + c] + b[k + c]).clamp(0.0, 1.0);
                    }
                    k += FRAME_CHANNELS;
                    frame.set_pixel(gy * e + dy, gx * e + dx, rgb);
                }
            }
        }
    }
    Ok(frame)
}

/// Paste the prediction under the mask only: masked pixels come from `pred`,
/// everything else passes through from `input` bitwise.
pub fn composite_output(
    pred: &FrameTensor,
    input: &FrameTensor,
    mask: &MaskTensor,
) -> Result<FrameTensor> {
    if pred.height != input.height
        || pred.width != input.width
        || mask.height != input.height
        || mask.width != input.width
    {
        return Err(Error::shape("composite_output: dimension mismatch"));
    }
    let mut out = input.clone();
    for (i, m) in mask.data.iter().enumerate() {
        if *m == 1 {
            let base = i * FRAME_CHANNELS;
            out.data[base..base + 3].copy_from_slice(&pred.data[base..base + 3]);
        }
    }
    Ok(out)
}
