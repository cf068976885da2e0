//! Quality metrics and the measurement harness.
//!
//! PSNR and SSIM are computed in double precision so they can double as
//! oracles for each other's tests. On top of them sit per-frame temporal
//! curves with a trailing moving average, a throughput/latency report that
//! embeds the attention operation counters and store accounting, a
//! context-size sweep that exposes how per-frame cost scales with the
//! number of attended frames, and the input-component study for the
//! refined mode.
//!
//! Reports render as line-delimited `key<TAB>value` text for single runs
//! and as tab-separated tables for anything with rows; plotting is left to
//! external tooling.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pipeline::{run_refined_clip_toggled, RefinerConfig};
use crate::scheduler::{
    run_clip, select_refined, ContextToggles, Mode, RunOutcome, SchedulerConfig,
};
use crate::video::{FrameTensor, VideoClip, FRAME_CHANNELS};
use crate::weights::WeightSet;

/// Upper bound reported for vanishing reconstruction error, in decibels.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Length of the trailing moving average applied to temporal curves.
pub const SMOOTHING_WINDOW: usize = 10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &FrameTensor, b: &FrameTensor) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(format!(
            "metric inputs differ in shape: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio between two frames on the [0, 1] value
/// scale, in decibels. Identical frames, and any pair whose error is small
/// enough to exceed the cap, report [`PSNR_CAP_DB`].
pub fn psnr(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut sum = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = *x as f64 - *y as f64;
        sum += d * d;
    }
    let mse = sum / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn channel_plane(frame: &FrameTensor, c: usize) -> Plane {
    let data = frame
        .data
        .chunks_exact(FRAME_CHANNELS)
        .map(|px| px[c] as f64)
        .collect();
    Plane {
        height: frame.height,
        width: frame.width,
        data,
    }
}

fn product_plane(a: &Plane, b: &Plane) -> Plane {
    Plane {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

/// Gaussian filtering restricted to fully covered positions, as two 1-D
/// passes (the kernel is separable).
fn filter_valid(p: &Plane, taps: &[f64; SSIM_WINDOW]) -> Plane {
    let out_w = p.width - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; p.height * out_w];
    for y in 0..p.height {
        let row = &p.data[y * p.width..(y + 1) * p.width];
        for x in 0..out_w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * row[x + i];
            }
            horiz[y * out_w + x] = acc;
        }
    }
    let out_h = p.height - SSIM_WINDOW + 1;
    let mut data = vec![0.0f64; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + i) * out_w + x];
            }
            data[y * out_w + x] = acc;
        }
    }
    Plane {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Structural similarity between two frames, averaged over channels and
/// over every fully covered 11x11 Gaussian window. Scores lie in [-1, 1]
/// and the function is symmetric in its arguments.
pub fn ssim(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} frames, got {}x{}",
            a.height, a.width
        )));
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut score = 0.0;
    for c in 0..FRAME_CHANNELS {
        let pa = channel_plane(a, c);
        let pb = channel_plane(b, c);
        let mu_a = filter_valid(&pa, &taps);
        let mu_b = filter_valid(&pb, &taps);
        let e_aa = filter_valid(&product_plane(&pa, &pa), &taps);
        let e_bb = filter_valid(&product_plane(&pb, &pb), &taps);
        let e_ab = filter_valid(&product_plane(&pa, &pb), &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.data.len() {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let va = e_aa.data[i] - ma * ma;
            let vb = e_bb.data[i] - mb * mb;
            let cov = e_ab.data[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        score += sum / mu_a.data.len() as f64;
    }
    Ok(score / FRAME_CHANNELS as f64)
}

/// Trailing moving average: element `i` averages the last `window` values
/// up to and including `i`, with however many values exist near the start.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let lo = (i + 1).saturating_sub(w);
        let slice = &series[lo..=i];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

/// Element-wise `a - b`; the per-frame gap between one mode's quality
/// curve and a reference curve.
pub fn series_difference(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Per-frame quality series for one run against ground truth, raw and
/// smoothed with the trailing [`SMOOTHING_WINDOW`]-frame average.
#[derive(Debug, Clone)]
pub struct TemporalCurves {
    pub psnr_raw: Vec<f64>,
    pub psnr_smooth: Vec<f64>,
    pub ssim_raw: Vec<f64>,
    pub ssim_smooth: Vec<f64>,
}

pub fn temporal_curves(outputs: &[FrameTensor], truth: &[FrameTensor]) -> Result<TemporalCurves> {
    if outputs.len() != truth.len() {
        return Err(Error::shape(format!(
            "curve inputs differ in length: {} vs {}",
            outputs.len(),
            truth.len()
        )));
    }
    let psnr_raw: Vec<f64> = outputs
        .iter()
        .zip(truth)
        .map(|(o, t)| psnr(o, t))
        .collect::<Result<_>>()?;
    let ssim_raw: Vec<f64> = outputs
        .iter()
        .zip(truth)
        .map(|(o, t)| ssim(o, t))
        .collect::<Result<_>>()?;
    Ok(TemporalCurves {
        psnr_smooth: moving_average(&psnr_raw, SMOOTHING_WINDOW),
        ssim_smooth: moving_average(&ssim_raw, SMOOTHING_WINDOW),
        psnr_raw,
        ssim_raw,
    })
}

fn mean(series: &[f64]) -> f64 {
    if series.is_empty() {
        0.0
    } else {
        series.iter().sum::<f64>() / series.len() as f64
    }
}

/// Nearest-rank percentile of an unsorted sample.
fn percentile(sample: &[f64], p: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// One mode's measurement summary: throughput, per-frame latency,
/// operation counters, store accounting, and per-frame quality against
/// ground truth.
///
/// `fps` divides emitted frames by the wall time of the inference loop.
/// For the per-frame modes the first frame is treated as warm-up and its
/// latency is excluded from both sides of the division; the windowed
/// reference mode emits whole windows at once, so nothing is excluded
/// there. In the refined mode the counters and latencies cover the
/// streaming worker (the refiner's own counters are reported by the
/// pipeline), but `fps` under synchronous pacing still pays for refiner
/// work because the loop interleaves it.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub mode: Mode,
    pub config: String,
    pub frames: usize,
    pub fps: f64,
    pub latency_ms: Vec<f64>,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub score_macs: u64,
    pub value_macs: u64,
    pub ffn_macs: u64,
    pub store_bytes_peak: u64,
    pub eviction_count: u64,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl BenchReport {
    /// Summarize a finished run. Without ground truth the quality series
    /// stay empty and only timing, counters, and store accounting are
    /// reported.
    pub fn from_run(
        run: &RunOutcome,
        truth: Option<&[FrameTensor]>,
        config: String,
    ) -> Result<BenchReport> {
        if let Some(truth) = truth {
            if truth.len() != run.outputs.len() {
                return Err(Error::shape(format!(
                    "ground truth has {} frames, run produced {}",
                    truth.len(),
                    run.outputs.len()
                )));
            }
        }
        let psnr_series: Vec<f64> = match truth {
            Some(truth) => run
                .outputs
                .iter()
                .zip(truth)
                .map(|(o, t)| psnr(o, t))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let ssim_series: Vec<f64> = match truth {
            Some(truth) => run
                .outputs
                .iter()
                .zip(truth)
                .map(|(o, t)| ssim(o, t))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let latency_ms: Vec<f64> = run.frame_nanos.iter().map(|n| *n as f64 / 1e6).collect();
        let warm_frames = if run.mode != Mode::Offline && run.frame_nanos.len() > 1 {
            1
        } else {
            0
        };
        let warm_nanos: u64 = run.frame_nanos.iter().take(warm_frames).sum();
        let timed_frames = run.outputs.len() - warm_frames;
        let timed_nanos = run.elapsed_nanos.saturating_sub(warm_nanos).max(1);
        let fps = timed_frames as f64 * 1e9 / timed_nanos as f64;
        let steady = &latency_ms[warm_frames..];
        let (bytes_peak, evictions) = match &run.store {
            Some(stats) => (stats.bytes_peak, stats.evictions),
            None => (0, 0),
        };
        Ok(BenchReport {
            mode: run.mode,
            config,
            frames: run.outputs.len(),
            fps,
            latency_p50_ms: percentile(steady, 50.0),
            latency_p95_ms: percentile(steady, 95.0),
            latency_ms,
            score_macs: run.total.score_macs,
            value_macs: run.total.value_macs,
            ffn_macs: run.total.ffn_macs,
            store_bytes_peak: bytes_peak,
            eviction_count: evictions,
            psnr: psnr_series,
            ssim: ssim_series,
        })
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    /// Line-delimited `key<TAB>value` summary.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode\t{}", self.mode.as_str());
        let _ = writeln!(s, "config\t{}", self.config);
        let _ = writeln!(s, "frames\t{}", self.frames);
        let _ = writeln!(s, "fps\t{:.3}", self.fps);
        let _ = writeln!(s, "latency_p50_ms\t{:.3}", self.latency_p50_ms);
        let _ = writeln!(s, "latency_p95_ms\t{:.3}", self.latency_p95_ms);
        let _ = writeln!(s, "score_macs\t{}", self.score_macs);
        let _ = writeln!(s, "value_macs\t{}", self.value_macs);
        let _ = writeln!(s, "ffn_macs\t{}", self.ffn_macs);
        let _ = writeln!(s, "store_bytes_peak\t{}", self.store_bytes_peak);
        let _ = writeln!(s, "eviction_count\t{}", self.eviction_count);
        if !self.psnr.is_empty() {
            let _ = writeln!(s, "mean_psnr\t{:.4}", self.mean_psnr());
            let _ = writeln!(s, "mean_ssim\t{:.6}", self.mean_ssim());
        }
        s
    }

    /// Per-frame table: frame index, latency, and (when ground truth was
    /// available) PSNR and SSIM.
    pub fn render_frame_table(&self) -> String {
        let scored = !self.psnr.is_empty();
        let mut s = if scored {
            String::from("frame\tlatency_ms\tpsnr\tssim\n")
        } else {
            String::from("frame\tlatency_ms\n")
        };
        for f in 0..self.frames {
            if scored {
                let _ = writeln!(
                    s,
                    "{f}\t{:.3}\t{:.4}\t{:.6}",
                    self.latency_ms[f], self.psnr[f], self.ssim[f]
                );
            } else {
                let _ = writeln!(s, "{f}\t{:.3}", self.latency_ms[f]);
            }
        }
        s
    }
}

/// One-line rendering of the settings a run was measured under.
pub fn echo_config(mode: Mode, sched: &SchedulerConfig, refiner: &RefinerConfig) -> String {
    let mut s = format!(
        "mode={} k={} s={} sp={} r={} rp={}",
        mode.as_str(),
        sched.k,
        sched.s,
        sched.s_refined,
        sched.r,
        sched.r_refined
    );
    if mode == Mode::Refined {
        let _ = write!(
            s,
            " kr={} lag={} stride={} pacing={} refiner={}",
            refiner.k_r,
            refiner.lag,
            refiner.stride(),
            refiner.pacing.as_str(),
            if refiner.enabled { "on" } else { "off" }
        );
    }
    s
}

/// Run one mode over an in-memory clip and measure it against ground
/// truth. Timing covers inference only; callers do file I/O before and
/// after.
pub fn run_bench(
    clip: &VideoClip,
    truth: &[FrameTensor],
    mode: Mode,
    sched: &SchedulerConfig,
    refiner: &RefinerConfig,
    weights: &WeightSet,
) -> Result<BenchReport> {
    if truth.len() != clip.len() {
        return Err(Error::shape(format!(
            "ground truth has {} frames, clip has {}",
            truth.len(),
            clip.len()
        )));
    }
    let run = match mode {
        Mode::Refined => {
            run_refined_clip_toggled(clip, sched, refiner, ContextToggles::default(), weights)?.run
        }
        other => run_clip(clip, other, sched, weights)?,
    };
    BenchReport::from_run(&run, Some(truth), echo_config(mode, sched, refiner))
}

/// One operating point of the context-size sweep. `frame_score_macs` is
/// the attention-score cost of the final frame, where the context has
/// reached its full steady-state size.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub mode: Mode,
    pub context: u32,
    pub mean_psnr: f64,
    pub fps: f64,
    pub frame_score_macs: u64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Least-squares slope of `ln(frame_score_macs)` against `ln(context)`
    /// for one mode; `None` with fewer than two points.
    pub fn cost_exponent(&self, mode: Mode) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.mode == mode)
            .map(|p| ((p.context as f64).ln(), (p.frame_score_macs as f64).ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
        let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        Some(num / den)
    }

    pub fn render_tsv(&self) -> String {
        let mut s = String::from("mode\tcontext\tmean_psnr\tfps\tframe_score_macs\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.3}\t{}",
                p.mode.as_str(),
                p.context,
                p.mean_psnr,
                p.fps,
                p.frame_score_macs
            );
        }
        s
    }
}

/// Measure the streaming modes at several context sizes. `context` counts
/// every frame one steady-state step attends to, the new frame included;
/// the sweep derives the span (memory mode) or window radius (online mode)
/// from it and pins the reference rate so frame 0 is the only sampled
/// reference. Only the two single-stream modes map onto a single context
/// size, so only they are accepted.
pub fn sweep(
    clip: &VideoClip,
    truth: &[FrameTensor],
    modes: &[Mode],
    contexts: &[u32],
    weights: &WeightSet,
) -> Result<SweepResult> {
    if contexts.is_empty() {
        return Err(Error::config("sweep needs at least one context size"));
    }
    if !contexts.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::config("context sizes must be strictly increasing"));
    }
    if contexts[0] < 2 {
        return Err(Error::config(
            "context sizes count the new frame plus at least one past frame",
        ));
    }
    let max = *contexts.last().unwrap();
    if (clip.len() as u32) < max {
        return Err(Error::config(format!(
            "clip of {} frames never reaches a context of {max}",
            clip.len()
        )));
    }
    let mut points = Vec::new();
    for mode in modes {
        match mode {
            Mode::Online | Mode::Memory => {}
            other => {
                return Err(Error::config(format!(
                    "sweep covers the single-stream modes, not {}",
                    other.as_str()
                )));
            }
        }
        for &context in contexts {
            let sched = SchedulerConfig {
                k: context - 2,
                s: context - 2,
                r: clip.len() as u32,
                r_refined: clip.len() as u32,
                ..SchedulerConfig::default()
            };
            let run = run_clip(clip, *mode, &sched, weights)?;
            let frame_score_macs = run.frame_counters.last().unwrap().score_macs;
            let report = BenchReport::from_run(&run, Some(truth), String::new())?;
            points.push(SweepPoint {
                mode: *mode,
                context,
                mean_psnr: report.mean_psnr(),
                fps: report.fps,
                frame_score_macs,
            });
        }
    }
    Ok(SweepResult { points })
}

/// One row of the input-component study for the refined mode: which
/// optional context components were enabled, the quality and throughput
/// they achieved, and how many frames were left with no context at all
/// (those fall back to attention within the new frame only).
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub online_neighbors: bool,
    pub reference_frames: bool,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub fps: f64,
    pub self_only_frames: usize,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render_tsv(&self) -> String {
        let mut s = String::from(
            "refined_neighbors\tonline_neighbors\treference_frames\tmean_psnr\tmean_ssim\tfps\tself_only_frames\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "yes\t{}\t{}\t{:.4}\t{:.6}\t{:.3}\t{}",
                if r.online_neighbors { "yes" } else { "no" },
                if r.reference_frames { "yes" } else { "no" },
                r.mean_psnr,
                r.mean_ssim,
                r.fps,
                r.self_only_frames
            );
        }
        s
    }
}

/// Run the refined mode four times, disabling the optional context
/// components one combination at a time (refined neighbors always stay
/// on), and report quality and throughput for each row. The final row has
/// everything enabled and matches a plain refined run.
pub fn ablate(
    clip: &VideoClip,
    truth: &[FrameTensor],
    sched: &SchedulerConfig,
    refiner: &RefinerConfig,
    weights: &WeightSet,
) -> Result<AblationTable> {
    if truth.len() != clip.len() {
        return Err(Error::shape(format!(
            "ground truth has {} frames, clip has {}",
            truth.len(),
            clip.len()
        )));
    }
    let combos = [(false, false), (true, false), (false, true), (true, true)];
    let mut rows = Vec::with_capacity(combos.len());
    for (online_neighbors, reference_frames) in combos {
        let toggles = ContextToggles {
            online_neighbors,
            reference_frames,
        };
        let outcome = run_refined_clip_toggled(clip, sched, refiner, toggles, weights)?;
        let mut self_only = 0usize;
        for (f, t) in outcome.watermark_trace.iter().enumerate().skip(1) {
            let mut plan = select_refined(f as u32, *t, sched.s, sched.s_refined, sched.r_refined)?;
            plan.retain_components(toggles);
            if plan.context_frames().is_empty() {
                self_only += 1;
            }
        }
        let report = BenchReport::from_run(&outcome.run, Some(truth), String::new())?;
        rows.push(AblationRow {
            online_neighbors,
            reference_frames,
            mean_psnr: report.mean_psnr(),
            mean_ssim: report.mean_ssim(),
            fps: report.fps,
            self_only_frames: self_only,
        });
    }
    Ok(AblationTable { rows })
}
