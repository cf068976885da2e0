//! The dual pipeline: a streaming worker inpaints frames with single-query
//! attention while a refiner re-inpaints past windows jointly and publishes
//! the results back into the shared store.
//!
//! Pacing comes in two forms. Synchronous pacing interleaves the two
//! workers deterministically (the refiner is driven as far as the lag
//! allows before every streamed frame), which makes whole-clip output a
//! pure function of its inputs and is what the equivalence tests use.
//! Free-running pacing puts the refiner on its own thread; the streaming
//! worker never waits for it, so the watermark it observes depends on
//! timing, but never violates the lag bound and never regresses.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use crate::attention::{run_stack_joint_traced, run_stack_memory, OpCounter};
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::scheduler::{
    range_inclusive, sampled_refs, select_refined, ContextToggles, Mode, RunOutcome, SchedulerConfig,
};
use crate::store::{EvictionPolicy, MemoryStore};
use crate::video::VideoClip;
use crate::weights::WeightSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    Synchronous,
    FreeRunning,
}

impl Pacing {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pacing::Synchronous => "synchronous",
            Pacing::FreeRunning => "free-running",
        }
    }
}

impl std::str::FromStr for Pacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Pacing> {
        match s {
            "synchronous" => Ok(Pacing::Synchronous),
            "free-running" => Ok(Pacing::FreeRunning),
            other => Err(Error::config(format!(
                "unknown pacing '{other}' (synchronous, free-running)"
            ))),
        }
    }
}

/// Refiner parameters: joint windows of radius `k_r` (so `k_r + 1` frames),
/// a minimum lag `lag` between the stream head and the watermark, and the
/// pacing mode. `stride` defaults to the window size (non-overlapping
/// refinement); smaller values overlap windows. `throttle` injects an
/// artificial delay before each refiner window, used by tests to prove the
/// streaming worker does not depend on refiner speed. `enabled: false`
/// turns the refiner off entirely, degrading the pipeline to memory mode.
#[derive(Debug, Clone, Copy)]
pub struct RefinerConfig {
    pub k_r: u32,
    pub lag: u32,
    pub pacing: Pacing,
    pub stride: Option<u32>,
    pub throttle: Option<Duration>,
    pub enabled: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            k_r: 3,
            lag: 4,
            pacing: Pacing::Synchronous,
            stride: None,
            throttle: None,
            enabled: true,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lag == 0 {
            return Err(Error::config("refiner lag must be at least 1"));
        }
        let stride = self.stride();
        if stride == 0 || stride > self.k_r + 1 {
            return Err(Error::config(format!(
                "stride {} must be in [1, window size {}] or refined coverage gets holes",
                stride,
                self.k_r + 1
            )));
        }
        Ok(())
    }

    /// Frames the watermark advances per refined window.
    pub fn stride(&self) -> u32 {
        self.stride.unwrap_or(self.k_r + 1)
    }
}

/// Everything a refined-mode run produces: the streaming worker's outcome
/// plus refiner-side accounting and the watermark each streamed frame saw.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub run: RunOutcome,
    pub refiner_total: OpCounter,
    pub refiner_windows: u32,
    pub watermark_trace: Vec<Option<u32>>,
}

/// Re-inpaint the window ending at `w` jointly from the raw input frames
/// and publish each window frame's per-block representations.
fn refine_window(
    clip: &VideoClip,
    w: u32,
    cfg: &RefinerConfig,
    r_refined: u32,
    store: &MemoryStore,
    weights: &WeightSet,
    counter: &mut OpCounter,
) -> Result<()> {
    let lo = w.saturating_sub(cfg.k_r);
    let window = range_inclusive(lo, w);
    let claimed: BTreeSet<u32> = window.iter().copied().collect();
    let refs = sampled_refs(r_refined, Some(w), &claimed);
    let mut frames: Vec<u32> = refs;
    frames.extend(&window);
    frames.sort_unstable();
    let inputs: Vec<_> = frames
        .iter()
        .map(|f| (&clip.frames[*f as usize], &clip.masks[*f as usize]))
        .collect();
    let (_, trace) = run_stack_joint_traced(&inputs, weights, counter)?;
    store.open_refined_window(w)?;
    for (pos, f) in frames.iter().enumerate() {
        if *f >= lo {
            let entries: Vec<TokenGrid> = trace.iter().map(|per_block| per_block[pos].clone()).collect();
            store.put_refined(*f, entries)?;
        }
    }
    store.publish_watermark(w)?;
    Ok(())
}

/// End of the next refiner window given the current watermark.
fn next_window_end(watermark: Option<u32>, cfg: &RefinerConfig) -> u32 {
    match watermark {
        None => cfg.k_r,
        Some(t) => t + cfg.stride(),
    }
}

/// Whether a window ending at `w` may be refined once `emitted` frames
/// (indices 0..emitted) have been streamed.
fn window_eligible(w: u32, emitted: u64, lag: u32) -> bool {
    w as u64 + lag as u64 <= emitted
}

struct OnlineStep {
    output: crate::video::FrameTensor,
    counter: OpCounter,
    nanos: u64,
    watermark: Option<u32>,
}

fn online_step(
    clip: &VideoClip,
    f: u32,
    sched: &SchedulerConfig,
    toggles: ContextToggles,
    store: &MemoryStore,
    weights: &WeightSet,
) -> Result<OnlineStep> {
    let snapshot = store.snapshot();
    let watermark = snapshot.watermark();
    let mut plan = select_refined(f, watermark, sched.s, sched.s_refined, sched.r_refined)?;
    plan.retain_components(toggles);
    let context = plan.context_frames();
    let mut counter = OpCounter::new();
    let begin = Instant::now();
    let (output, entries) = run_stack_memory(
        &clip.frames[f as usize],
        &clip.masks[f as usize],
        &context,
        &snapshot,
        weights,
        &mut counter,
    )?;
    let nanos = begin.elapsed().as_nanos() as u64;
    store.put_online(f, entries)?;
    Ok(OnlineStep {
        output,
        counter,
        nanos,
        watermark,
    })
}

fn run_synchronous(
    clip: &VideoClip,
    sched: &SchedulerConfig,
    refiner: &RefinerConfig,
    toggles: ContextToggles,
    store: &MemoryStore,
    weights: &WeightSet,
) -> Result<PipelineOutcome> {
    let mut outputs = Vec::with_capacity(clip.len());
    let mut frame_counters = Vec::with_capacity(clip.len());
    let mut frame_nanos = Vec::with_capacity(clip.len());
    let mut watermark_trace = Vec::with_capacity(clip.len());
    let mut total = OpCounter::new();
    let mut refiner_total = OpCounter::new();
    let mut refiner_windows = 0u32;
    let run_begin = Instant::now();
    for f in 0..clip.len() as u32 {
        if refiner.enabled {
            loop {
                let w = next_window_end(store.watermark(), refiner);
                if !window_eligible(w, f as u64, refiner.lag) {
                    break;
                }
                if let Some(delay) = refiner.throttle {
                    std::thread::sleep(delay);
                }
                refine_window(clip, w, refiner, sched.r_refined, store, weights, &mut refiner_total)?;
                refiner_windows += 1;
            }
        }
        let step = online_step(clip, f, sched, toggles, store, weights)?;
        outputs.push(step.output);
        total.merge(&step.counter);
        frame_counters.push(step.counter);
        frame_nanos.push(step.nanos);
        watermark_trace.push(step.watermark);
    }
    Ok(PipelineOutcome {
        run: RunOutcome {
            mode: Mode::Refined,
            outputs,
            total,
            frame_counters,
            frame_nanos,
            elapsed_nanos: run_begin.elapsed().as_nanos() as u64,
            store: Some(store.stats()),
        },
        refiner_total,
        refiner_windows,
        watermark_trace,
    })
}

fn run_free_running(
    clip: &VideoClip,
    sched: &SchedulerConfig,
    refiner: &RefinerConfig,
    toggles: ContextToggles,
    store: &MemoryStore,
    weights: &WeightSet,
) -> Result<PipelineOutcome> {
    let emitted = AtomicU64::new(0);
    let done = AtomicBool::new(false);
    let refiner_result: std::sync::Mutex<(OpCounter, u32)> =
        std::sync::Mutex::new((OpCounter::new(), 0));

    let online = std::thread::scope(|scope| -> Result<_> {
        if refiner.enabled {
            scope.spawn(|| {
                let mut counter = OpCounter::new();
                let mut windows = 0u32;
                loop {
                    if done.load(Ordering::Acquire) {
                        break;
                    }
                    let w = next_window_end(store.watermark(), refiner);
                    if window_eligible(w, emitted.load(Ordering::Acquire), refiner.lag) {
                        if let Some(delay) = refiner.throttle {
                            std::thread::sleep(delay);
                        }
                        if refine_window(clip, w, refiner, sched.r_refined, store, weights, &mut counter)
                            .is_err()
                        {
                            break;
                        }
                        windows += 1;
                    } else {
                        std::thread::yield_now();
                    }
                }
                *refiner_result.lock().unwrap() = (counter, windows);
            });
        }

        let mut outputs = Vec::with_capacity(clip.len());
        let mut frame_counters = Vec::with_capacity(clip.len());
        let mut frame_nanos = Vec::with_capacity(clip.len());
        let mut watermark_trace = Vec::with_capacity(clip.len());
        let mut total = OpCounter::new();
        let run_begin = Instant::now();
        let result = (|| -> Result<()> {
            for f in 0..clip.len() as u32 {
                let step = online_step(clip, f, sched, toggles, store, weights)?;
                outputs.push(step.output);
                total.merge(&step.counter);
                frame_counters.push(step.counter);
                frame_nanos.push(step.nanos);
                watermark_trace.push(step.watermark);
                emitted.store(f as u64 + 1, Ordering::Release);
            }
            Ok(())
        })();
        let elapsed_nanos = run_begin.elapsed().as_nanos() as u64;
        done.store(true, Ordering::Release);
        result?;
        Ok((outputs, total, frame_counters, frame_nanos, watermark_trace, elapsed_nanos))
    })?;

    let (outputs, total, frame_counters, frame_nanos, watermark_trace, elapsed_nanos) = online;
    let (refiner_total, refiner_windows) = *refiner_result.lock().unwrap();
    Ok(PipelineOutcome {
        run: RunOutcome {
            mode: Mode::Refined,
            outputs,
            total,
            frame_counters,
            frame_nanos,
            elapsed_nanos,
            store: Some(store.stats()),
        },
        refiner_total,
        refiner_windows,
        watermark_trace,
    })
}

/// Run the refined mode over a clip under the configured pacing.
pub fn run_refined_clip(
    clip: &VideoClip,
    sched: &SchedulerConfig,
    refiner: &RefinerConfig,
    weights: &WeightSet,
) -> Result<PipelineOutcome> {
    run_refined_clip_toggled(clip, sched, refiner, ContextToggles::default(), weights)
}

/// Refined mode with some context components switched off. This is the
/// entry point the ablation harness uses; `run_refined_clip` is the same
/// run with everything enabled.
pub fn run_refined_clip_toggled(
    clip: &VideoClip,
    sched: &SchedulerConfig,
    refiner: &RefinerConfig,
    toggles: ContextToggles,
    weights: &WeightSet,
) -> Result<PipelineOutcome> {
    sched.validate()?;
    refiner.validate()?;
    if clip.masks.is_empty() {
        return Err(Error::config("inpainting needs masks attached to the clip"));
    }
    let store = MemoryStore::new(
        weights.config.blocks,
        EvictionPolicy {
            span: sched.s,
            rate: sched.r,
            budget_bytes: u64::MAX,
        },
    )?;
    match refiner.pacing {
        Pacing::Synchronous => run_synchronous(clip, sched, refiner, toggles, &store, weights),
        Pacing::FreeRunning => run_free_running(clip, sched, refiner, toggles, &store, weights),
    }
}
