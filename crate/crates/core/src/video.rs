//! Synthetic clip generation, mask rasterization, corruption, and the raw
//! RVV container the tools exchange clips in.
//!
//! Clips are moving rectangles and disks over a static background, which is
//! enough structure for the inpainting stack to have something to copy from
//! neighboring frames while staying fully deterministic in the seed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Rng;

pub const FRAME_CHANNELS: usize = 3;

/// One RGB frame, row-major, channel-interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * FRAME_CHANNELS {
            return Err(Error::shape(format!(
                "frame data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                FRAME_CHANNELS
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::shape("frame values outside [0, 1]"));
        }
        Ok(FrameTensor {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        FrameTensor::new(height, width, vec![value; height * width * FRAME_CHANNELS])
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let base = (y * self.width + x) * FRAME_CHANNELS;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let base = (y * self.width + x) * FRAME_CHANNELS;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }
}

/// Binary mask paired with a frame; 1 marks a missing pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::shape("mask values must be 0 or 1"));
        }
        Ok(MaskTensor {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskTensor {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones_count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }
}

/// Axis-aligned pixel rectangle; `x + w` and `y + h` must stay in frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// An ordered clip. `masks` is either empty (clean video) or one mask per
/// frame with matching dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<FrameTensor>,
    pub masks: Vec<MaskTensor>,
    pub fps_nominal: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<FrameTensor>, masks: Vec<MaskTensor>, fps_nominal: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::shape("clip has no frames"));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::shape("frames have mixed dimensions"));
        }
        if !masks.is_empty() {
            if masks.len() != frames.len() {
                return Err(Error::shape(format!(
                    "{} masks for {} frames",
                    masks.len(),
                    frames.len()
                )));
            }
            if masks.iter().any(|m| m.height != h || m.width != w) {
                return Err(Error::shape("mask dimensions differ from frames"));
            }
        }
        Ok(VideoClip {
            frames,
            masks,
            fps_nominal,
        })
    }

    pub fn with_masks(mut self, masks: Vec<MaskTensor>) -> Result<Self> {
        self.masks = masks;
        VideoClip::new(self.frames, self.masks, self.fps_nominal)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundKind {
    Gradient,
    Noise,
}

/// Generator parameters. `align` is the downsample factor the dimensions
/// must divide by so the patch codec can tile the frame.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub object_count: usize,
    pub seed: u64,
    pub background: BackgroundKind,
    pub object_speed: f64,
    pub align: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 32,
            height: 32,
            frame_count: 18,
            object_count: 3,
            seed: 7,
            background: BackgroundKind::Gradient,
            object_speed: 1.5,
            align: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::config("frame_count must be at least 1"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("frame dimensions must be nonzero"));
        }
        if self.align == 0 {
            return Err(Error::config("align must be nonzero"));
        }
        if self.width % self.align != 0 || self.height % self.align != 0 {
            return Err(Error::config(format!(
                "dimensions {}x{} not divisible by downsample factor {}",
                self.width, self.height, self.align
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum ObjectShape {
    Rectangle,
    Disk,
}

#[derive(Debug, Clone)]
struct MovingObject {
    shape: ObjectShape,
    center0: (f64, f64),
    velocity: (f64, f64),
    half: f64,
    color: [f32; 3],
}

/// Fold `pos` back into [lo, hi] by reflecting at both ends, so straight-line
/// motion bounces off the frame border instead of leaving it.
pub fn reflect_position(pos: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let period = 2.0 * (hi - lo);
    let m = (pos - lo).rem_euclid(period);
    if m <= hi - lo {
        lo + m
    } else {
        lo + period - m
    }
}

fn background_frame(cfg: &SynthConfig, rng: &mut Rng) -> FrameTensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0.0f32; h * w * FRAME_CHANNELS];
    match cfg.background {
        BackgroundKind::Gradient => {
            for y in 0..h {
                for x in 0..w {
                    let r = if w > 1 { x as f32 / (w - 1) as f32 } else { 0.0 };
                    let g = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
                    let b = 0.5 * (r + g);
                    let base = (y * w + x) * FRAME_CHANNELS;
                    data[base] = r;
                    data[base + 1] = g;
                    data[base + 2] = b;
                }
            }
        }
        BackgroundKind::Noise => {
            for v in data.iter_mut() {
                *v = rng.next_uniform() as f32;
            }
        }
    }
    FrameTensor {
        height: h,
        width: w,
        data,
    }
}

fn spawn_objects(cfg: &SynthConfig, rng: &mut Rng) -> Vec<MovingObject> {
    let min_dim = cfg.width.min(cfg.height) as f64;
    (0..cfg.object_count)
        .map(|_| {
            let shape = if rng.next_u64() & 1 == 0 {
                ObjectShape::Rectangle
            } else {
                ObjectShape::Disk
            };
            let cx = rng.next_range(0.0, (cfg.width - 1) as f64);
            let cy = rng.next_range(0.0, (cfg.height - 1) as f64);
            let half = rng.next_range(min_dim / 10.0, min_dim / 4.0).max(1.0);
            let angle = rng.next_range(0.0, std::f64::consts::TAU);
            let color = [
                rng.next_uniform() as f32,
                rng.next_uniform() as f32,
                rng.next_uniform() as f32,
            ];
            MovingObject {
                shape,
                center0: (cx, cy),
                velocity: (
                    cfg.object_speed * angle.cos(),
                    cfg.object_speed * angle.sin(),
                ),
                half,
                color,
            }
        })
        .collect()
}

fn draw_object(frame: &mut FrameTensor, obj: &MovingObject, t: usize) {
    let (h, w) = (frame.height, frame.width);
    let cx = reflect_position(
        obj.center0.0 + obj.velocity.0 * t as f64,
        0.0,
        (w - 1) as f64,
    );
    let cy = reflect_position(
        obj.center0.1 + obj.velocity.1 * t as f64,
        0.0,
        (h - 1) as f64,
    );
    let y_lo = (cy - obj.half).floor().max(0.0) as usize;
    let y_hi = ((cy + obj.half).ceil() as usize).min(h - 1);
    let x_lo = (cx - obj.half).floor().max(0.0) as usize;
    let x_hi = ((cx + obj.half).ceil() as usize).min(w - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let inside = match obj.shape {
                ObjectShape::Rectangle => true,
                ObjectShape::Disk => {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    dx * dx + dy * dy <= obj.half * obj.half
                }
            };
            if inside {
                frame.set_pixel(y, x, obj.color);
            }
        }
    }
}

/// Render a deterministic clip: a static background with `object_count`
/// shapes moving at constant speed and reflecting off the borders.
pub fn synth_video(cfg: &SynthConfig) -> Result<VideoClip> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let background = background_frame(cfg, &mut rng);
    let objects = spawn_objects(cfg, &mut rng);
    let frames = (0..cfg.frame_count)
        .map(|t| {
            let mut frame = background.clone();
            for obj in &objects {
                draw_object(&mut frame, obj, t);
            }
            frame
        })
        .collect();
    VideoClip::new(frames, Vec::new(), 20.0)
}

fn check_rect(cfg: &SynthConfig, rect: Rect) -> Result<()> {
    if rect.x + rect.w > cfg.width || rect.y + rect.h > cfg.height {
        return Err(Error::config(format!(
            "rect {}+{}x{}+{} exceeds frame {}x{}",
            rect.x, rect.w, rect.y, rect.h, cfg.width, cfg.height
        )));
    }
    Ok(())
}

fn rasterize(cfg: &SynthConfig, rect: Rect) -> MaskTensor {
    let mut mask = MaskTensor::zeros(cfg.height, cfg.width);
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            mask.data[y * cfg.width + x] = 1;
        }
    }
    mask
}

/// The same rectangle on every frame, the setup used for reconstruction
/// quality measurements.
pub fn stationary_mask(cfg: &SynthConfig, rect: Rect) -> Result<Vec<MaskTensor>> {
    cfg.validate()?;
    check_rect(cfg, rect)?;
    let mask = rasterize(cfg, rect);
    Ok(vec![mask; cfg.frame_count])
}

/// One rectangle per frame, the object-removal setup.
pub fn moving_mask(cfg: &SynthConfig, track: &[Rect]) -> Result<Vec<MaskTensor>> {
    cfg.validate()?;
    if track.len() != cfg.frame_count {
        return Err(Error::config(format!(
            "track length {} != frame_count {}",
            track.len(),
            cfg.frame_count
        )));
    }
    track
        .iter()
        .map(|rect| {
            check_rect(cfg, *rect)?;
            Ok(rasterize(cfg, *rect))
        })
        .collect()
}

/// Zero out masked pixels: each frame becomes `frame ⊙ (1 − mask)` with the
/// mask broadcast over channels. Unmasked pixels pass through untouched.
pub fn corrupt(clip: &VideoClip) -> Result<VideoClip> {
    if clip.masks.is_empty() {
        return Err(Error::config("corrupt: clip has no masks"));
    }
    let frames = clip
        .frames
        .iter()
        .zip(&clip.masks)
        .map(|(frame, mask)| {
            let mut out = frame.clone();
            for (i, m) in mask.data.iter().enumerate() {
                if *m == 1 {
                    let base = i * FRAME_CHANNELS;
                    out.data[base..base + 3].fill(0.0);
                }
            }
            out
        })
        .collect();
    Ok(VideoClip {
        frames,
        masks: clip.masks.clone(),
        fps_nominal: clip.fps_nominal,
    })
}

const RVV_MAGIC: &[u8; 4] = b"RVV1";
const RVV_HEADER_LEN: usize = 4 + 4 * 4;

fn quantize_byte(v: f32) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

fn header_bytes(width: u32, height: u32, channels: u32, frame_count: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(RVV_HEADER_LEN);
    out.extend_from_slice(RVV_MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&frame_count.to_le_bytes());
    out
}

fn parse_header(bytes: &[u8]) -> Result<(u32, u32, u32, u32)> {
    if bytes.len() < RVV_HEADER_LEN {
        return Err(Error::format("file shorter than header"));
    }
    if &bytes[0..4] != RVV_MAGIC {
        return Err(Error::format("bad magic"));
    }
    let field = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
    };
    Ok((field(0), field(1), field(2), field(3)))
}

fn payload_len(width: u32, height: u32, channels: u32, frame_count: u32) -> Result<usize> {
    (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels as usize))
        .and_then(|n| n.checked_mul(frame_count as usize))
        .ok_or_else(|| Error::format("dimensions overflow"))
}

fn dim_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::format(format!("{what} exceeds u32")))
}

/// Write a clip's frames (not its masks) as an RVV file: magic, little-endian
/// u32 dimensions, then one byte per sample, `round(255·v)`.
pub fn write_rvv(clip: &VideoClip, path: &Path) -> Result<()> {
    let width = dim_u32(clip.width(), "width")?;
    let height = dim_u32(clip.height(), "height")?;
    let frames = dim_u32(clip.len(), "frame_count")?;
    let mut bytes = header_bytes(width, height, FRAME_CHANNELS as u32, frames);
    for frame in &clip.frames {
        bytes.extend(frame.data.iter().map(|v| quantize_byte(*v)));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a 3-channel RVV file back into a clip (no masks attached).
pub fn read_rvv(path: &Path) -> Result<VideoClip> {
    let bytes = fs::read(path)?;
    let (width, height, channels, frame_count) = parse_header(&bytes)?;
    if channels != FRAME_CHANNELS as u32 {
        return Err(Error::format(format!(
            "expected {} channels, file has {}",
            FRAME_CHANNELS, channels
        )));
    }
    if frame_count == 0 || width == 0 || height == 0 {
        return Err(Error::format("empty dimensions"));
    }
    let expected = payload_len(width, height, channels, frame_count)?;
    let payload = &bytes[RVV_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload length {} != expected {}",
            payload.len(),
            expected
        )));
    }
    let per_frame = (width * height * channels) as usize;
    let frames = payload
        .chunks_exact(per_frame)
        .map(|chunk| {
            FrameTensor::new(
                height as usize,
                width as usize,
                chunk.iter().map(|b| *b as f32 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, Vec::new(), 20.0)
}

/// Write masks as a single-channel RVV file with values 0 or 255.
pub fn write_rvv_masks(masks: &[MaskTensor], path: &Path) -> Result<()> {
    let first = masks
        .first()
        .ok_or_else(|| Error::format("no masks to write"))?;
    let width = dim_u32(first.width, "width")?;
    let height = dim_u32(first.height, "height")?;
    let frames = dim_u32(masks.len(), "frame_count")?;
    let mut bytes = header_bytes(width, height, 1, frames);
    for mask in masks {
        if mask.width != first.width || mask.height != first.height {
            return Err(Error::shape("mask dimensions differ"));
        }
        bytes.extend(mask.data.iter().map(|v| v * 255));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a single-channel RVV mask file. Any sample that is not exactly 0 or
/// 255 is a format error.
pub fn read_rvv_masks(path: &Path) -> Result<Vec<MaskTensor>> {
    let bytes = fs::read(path)?;
    let (width, height, channels, frame_count) = parse_header(&bytes)?;
    if channels != 1 {
        return Err(Error::format(format!(
            "expected 1 channel for masks, file has {}",
            channels
        )));
    }
    if frame_count == 0 || width == 0 || height == 0 {
        return Err(Error::format("empty dimensions"));
    }
    let expected = payload_len(width, height, channels, frame_count)?;
    let payload = &bytes[RVV_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload length {} != expected {}",
            payload.len(),
            expected
        )));
    }
    let per_frame = (width * height) as usize;
    payload
        .chunks_exact(per_frame)
        .map(|chunk| {
            let data = chunk
                .iter()
                .map(|b| match b {
                    0 => Ok(0u8),
                    255 => Ok(1u8),
                    other => Err(Error::format(format!("mask byte {other} is not 0 or 255"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            MaskTensor::new(height as usize, width as usize, data)
        })
        .collect()
}

/// Snap every sample to the nearest byte level, i.e. the value it would have
/// after an RVV round trip.
pub fn quantize_clip(clip: &VideoClip) -> VideoClip {
    let frames = clip
        .frames
        .iter()
        .map(|f| FrameTensor {
            height: f.height,
            width: f.width,
            data: f
                .data
                .iter()
                .map(|v| quantize_byte(*v) as f32 / 255.0)
                .collect(),
        })
        .collect();
    VideoClip {
        frames,
        masks: Vec::new(),
        fps_nominal: clip.fps_nominal,
    }
}
