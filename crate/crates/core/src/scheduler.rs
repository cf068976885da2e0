//! Frame selection and top-level mode orchestration.
//!
//! The four modes differ only in which frames participate in attention:
//! offline uses a symmetric window plus sampled references, online a causal
//! window, memory a span of cached neighbors plus sampled references, and
//! refined overlays a second set of neighbors/references taken from the
//! refiner's output up to its watermark. Selection is pure index
//! arithmetic; `run_clip` drives the offline/online/memory modes over a
//! clip (the refined mode runs through the dual pipeline).

use std::collections::BTreeSet;
use std::time::Instant;

use crate::attention::{run_stack_joint, run_stack_memory, OpCounter};
use crate::error::{Error, Result};
use crate::store::{EvictionPolicy, MemoryStore, StoreStats};
use crate::video::{FrameTensor, VideoClip};
use crate::weights::WeightSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Offline,
    Online,
    Memory,
    Refined,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
            Mode::Memory => "memory",
            Mode::Refined => "refined",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            "memory" => Ok(Mode::Memory),
            "refined" => Ok(Mode::Refined),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (offline, online, memory, refined)"
            ))),
        }
    }
}

/// Window radius `k`, online memory span `s`, refined neighbor span
/// `s_refined`, and the two sampling rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub k: u32,
    pub s: u32,
    pub s_refined: u32,
    pub r: u32,
    pub r_refined: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            k: 5,
            s: 5,
            s_refined: 3,
            r: 10,
            r_refined: 10,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r_refined == 0 {
            return Err(Error::config("sampling rates must be at least 1"));
        }
        Ok(())
    }
}

/// The frames one inference step attends to, split by provenance. All lists
/// are sorted ascending and pairwise disjoint; dedup keeps a frame in the
/// highest-priority list it appears in (refined neighbors, then online
/// neighbors, then refined references, then online references).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPlan {
    pub mode: Mode,
    pub focus: u32,
    pub window: Vec<u32>,
    pub online_neighbors: Vec<u32>,
    pub online_refs: Vec<u32>,
    pub refined_neighbors: Vec<u32>,
    pub refined_refs: Vec<u32>,
}

impl SelectionPlan {
    fn empty(mode: Mode, focus: u32) -> Self {
        SelectionPlan {
            mode,
            focus,
            window: Vec::new(),
            online_neighbors: Vec::new(),
            online_refs: Vec::new(),
            refined_neighbors: Vec::new(),
            refined_refs: Vec::new(),
        }
    }

    /// Sorted union of the context lists (everything but the window).
    pub fn context_frames(&self) -> Vec<u32> {
        let mut set = BTreeSet::new();
        set.extend(&self.online_neighbors);
        set.extend(&self.online_refs);
        set.extend(&self.refined_neighbors);
        set.extend(&self.refined_refs);
        set.into_iter().collect()
    }

    /// Sorted union of window and references, the frame list a joint pass
    /// runs over.
    pub fn joint_frames(&self) -> Vec<u32> {
        let mut set = BTreeSet::new();
        set.extend(&self.window);
        set.extend(&self.online_refs);
        set.into_iter().collect()
    }

    /// Which frames the plan wants from the refined store side.
    pub fn refined_frames(&self) -> Vec<u32> {
        let mut set = BTreeSet::new();
        set.extend(&self.refined_neighbors);
        set.extend(&self.refined_refs);
        set.into_iter().collect()
    }
}

/// Which optional context components stay in a refined-mode plan. The
/// refined neighbors are always kept; the ablation harness switches the
/// other two off one at a time to measure what each contributes. Turning
/// references off removes sampled reference frames from both store sides,
/// including the online-side references used before the first watermark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextToggles {
    pub online_neighbors: bool,
    pub reference_frames: bool,
}

impl Default for ContextToggles {
    fn default() -> Self {
        ContextToggles {
            online_neighbors: true,
            reference_frames: true,
        }
    }
}

impl SelectionPlan {
    /// Drop the context components the toggles disable. A frame that was
    /// deduplicated into a dropped list does not reappear elsewhere; the
    /// plan simply shrinks, and a plan left with no context at all makes
    /// the inference step fall back to self-attention over the new frame.
    pub fn retain_components(&mut self, toggles: ContextToggles) {
        if !toggles.online_neighbors {
            self.online_neighbors.clear();
        }
        if !toggles.reference_frames {
            self.refined_refs.clear();
            self.online_refs.clear();
        }
    }
}

pub(crate) fn range_inclusive(lo: u32, hi: u32) -> Vec<u32> {
    (lo..=hi).collect()
}

/// Multiples of `rate` in [0, hi], excluding anything already claimed.
pub(crate) fn sampled_refs(rate: u32, hi_inclusive: Option<u32>, claimed: &BTreeSet<u32>) -> Vec<u32> {
    let Some(hi) = hi_inclusive else {
        return Vec::new();
    };
    (0..=hi)
        .step_by(rate as usize)
        .filter(|f| !claimed.contains(f))
        .collect()
}

/// Symmetric window of radius `k` around `f` plus sampled references from
/// the whole clip.
pub fn select_offline(f: u32, k: u32, r: u32, n_frames: u32) -> Result<SelectionPlan> {
    if f >= n_frames {
        return Err(Error::config(format!(
            "frame {f} outside clip of {n_frames} frames"
        )));
    }
    let window = range_inclusive(f.saturating_sub(k), (f + k).min(n_frames - 1));
    let claimed: BTreeSet<u32> = window.iter().copied().collect();
    let online_refs = sampled_refs(r, Some(n_frames - 1), &claimed);
    Ok(SelectionPlan {
        window,
        online_refs,
        ..SelectionPlan::empty(Mode::Offline, f)
    })
}

/// Causal window ending at `f` plus sampled references from the past.
pub fn select_online(f: u32, k: u32, r: u32) -> SelectionPlan {
    let window = range_inclusive(f.saturating_sub(k), f);
    let claimed: BTreeSet<u32> = window.iter().copied().collect();
    let online_refs = sampled_refs(r, Some(f), &claimed);
    SelectionPlan {
        window,
        online_refs,
        ..SelectionPlan::empty(Mode::Online, f)
    }
}

/// Cached span [f−s, f−1] plus sampled references strictly before `f`.
pub fn select_memory(f: u32, s: u32, r: u32) -> SelectionPlan {
    if f == 0 {
        return SelectionPlan::empty(Mode::Memory, 0);
    }
    let online_neighbors = range_inclusive(f.saturating_sub(s), f - 1);
    let claimed: BTreeSet<u32> = online_neighbors.iter().copied().collect();
    let online_refs = sampled_refs(r, Some(f - 1), &claimed);
    SelectionPlan {
        online_neighbors,
        online_refs,
        ..SelectionPlan::empty(Mode::Memory, f)
    }
}

/// Memory selection overlaid with the refiner's output: neighbors around the
/// watermark `t` and sampled references up to it. Without a watermark this
/// degrades to plain memory selection at the refined sampling rate.
pub fn select_refined(
    f: u32,
    t: Option<u32>,
    s: u32,
    s_refined: u32,
    r_refined: u32,
) -> Result<SelectionPlan> {
    let Some(t) = t else {
        let mut plan = select_memory(f, s, r_refined);
        plan.mode = Mode::Refined;
        return Ok(plan);
    };
    if t >= f {
        return Err(Error::protocol(format!(
            "watermark {t} must stay behind frame {f}"
        )));
    }
    let refined_neighbors = range_inclusive(t.saturating_sub(s_refined), t);
    let mut claimed: BTreeSet<u32> = refined_neighbors.iter().copied().collect();
    let online_neighbors: Vec<u32> = if f == 0 {
        Vec::new()
    } else {
        range_inclusive(f.saturating_sub(s), f - 1)
            .into_iter()
            .filter(|fr| !claimed.contains(fr))
            .collect()
    };
    claimed.extend(&online_neighbors);
    let refined_refs = sampled_refs(r_refined, Some(t), &claimed);
    Ok(SelectionPlan {
        online_neighbors,
        refined_neighbors,
        refined_refs,
        ..SelectionPlan::empty(Mode::Refined, f)
    })
}

/// What one mode run produced. `frame_counters` and `frame_nanos` line up
/// with `outputs`; in offline mode a whole window's cost is attributed to
/// the first frame of that window (so the counters still sum to `total`)
/// while every frame in the window shares the window's wall time.
/// `elapsed_nanos` is the wall time of the whole inference loop, including
/// any refiner work interleaved with it, and excludes file I/O by
/// construction (runs operate on in-memory clips).
#[derive(Debug)]
pub struct RunOutcome {
    pub mode: Mode,
    pub outputs: Vec<FrameTensor>,
    pub total: OpCounter,
    pub frame_counters: Vec<OpCounter>,
    pub frame_nanos: Vec<u64>,
    pub elapsed_nanos: u64,
    pub store: Option<StoreStats>,
}

fn clip_inputs(clip: &VideoClip) -> Result<()> {
    if clip.masks.is_empty() {
        return Err(Error::config("inpainting needs masks attached to the clip"));
    }
    Ok(())
}

fn run_offline(clip: &VideoClip, cfg: &SchedulerConfig, weights: &WeightSet) -> Result<RunOutcome> {
    let n = clip.len() as u32;
    let width = 2 * cfg.k + 1;
    let mut outputs: Vec<Option<FrameTensor>> = vec![None; clip.len()];
    let mut frame_counters = vec![OpCounter::new(); clip.len()];
    let mut frame_nanos = vec![0u64; clip.len()];
    let mut total = OpCounter::new();
    let run_begin = Instant::now();
    let mut start = 0u32;
    while start < n {
        let end = (start + width - 1).min(n - 1);
        let window = range_inclusive(start, end);
        let claimed: BTreeSet<u32> = window.iter().copied().collect();
        let online_refs = sampled_refs(cfg.r, Some(n - 1), &claimed);
        let plan = SelectionPlan {
            window,
            online_refs,
            ..SelectionPlan::empty(Mode::Offline, start)
        };
        let frames = plan.joint_frames();
        let inputs: Vec<_> = frames
            .iter()
            .map(|f| (&clip.frames[*f as usize], &clip.masks[*f as usize]))
            .collect();
        let mut counter = OpCounter::new();
        let begin = Instant::now();
        let preds = run_stack_joint(&inputs, weights, &mut counter)?;
        let nanos = begin.elapsed().as_nanos() as u64;
        for (pos, f) in frames.iter().enumerate() {
            if *f >= start && *f <= end {
                outputs[*f as usize] = Some(preds[pos].clone());
                frame_nanos[*f as usize] = nanos;
            }
        }
        frame_counters[start as usize] = counter;
        total.merge(&counter);
        start = end + 1;
    }
    Ok(RunOutcome {
        mode: Mode::Offline,
        outputs: outputs.into_iter().map(|o| o.unwrap()).collect(),
        total,
        frame_counters,
        frame_nanos,
        elapsed_nanos: run_begin.elapsed().as_nanos() as u64,
        store: None,
    })
}

fn run_online(clip: &VideoClip, cfg: &SchedulerConfig, weights: &WeightSet) -> Result<RunOutcome> {
    let mut outputs = Vec::with_capacity(clip.len());
    let mut frame_counters = Vec::with_capacity(clip.len());
    let mut frame_nanos = Vec::with_capacity(clip.len());
    let mut total = OpCounter::new();
    let run_begin = Instant::now();
    for f in 0..clip.len() as u32 {
        let plan = select_online(f, cfg.k, cfg.r);
        let frames = plan.joint_frames();
        let inputs: Vec<_> = frames
            .iter()
            .map(|i| (&clip.frames[*i as usize], &clip.masks[*i as usize]))
            .collect();
        let mut counter = OpCounter::new();
        let begin = Instant::now();
        let preds = run_stack_joint(&inputs, weights, &mut counter)?;
        frame_nanos.push(begin.elapsed().as_nanos() as u64);
        let pos = frames.iter().position(|i| *i == f).unwrap();
        outputs.push(preds[pos].clone());
        total.merge(&counter);
        frame_counters.push(counter);
    }
    Ok(RunOutcome {
        mode: Mode::Online,
        outputs,
        total,
        frame_counters,
        frame_nanos,
        elapsed_nanos: run_begin.elapsed().as_nanos() as u64,
        store: None,
    })
}

fn run_memory(clip: &VideoClip, cfg: &SchedulerConfig, weights: &WeightSet) -> Result<RunOutcome> {
    let store = MemoryStore::new(
        weights.config.blocks,
        EvictionPolicy {
            span: cfg.s,
            rate: cfg.r,
            budget_bytes: u64::MAX,
        },
    )?;
    let mut outputs = Vec::with_capacity(clip.len());
    let mut frame_counters = Vec::with_capacity(clip.len());
    let mut frame_nanos = Vec::with_capacity(clip.len());
    let mut total = OpCounter::new();
    let run_begin = Instant::now();
    for f in 0..clip.len() as u32 {
        let plan = select_memory(f, cfg.s, cfg.r);
        let context = plan.context_frames();
        let snapshot = store.snapshot();
        let mut counter = OpCounter::new();
        let begin = Instant::now();
        let (out, entries) = run_stack_memory(
            &clip.frames[f as usize],
            &clip.masks[f as usize],
            &context,
            &snapshot,
            weights,
            &mut counter,
        )?;
        frame_nanos.push(begin.elapsed().as_nanos() as u64);
        store.put_online(f, entries)?;
        outputs.push(out);
        total.merge(&counter);
        frame_counters.push(counter);
    }
    Ok(RunOutcome {
        mode: Mode::Memory,
        outputs,
        total,
        frame_counters,
        frame_nanos,
        elapsed_nanos: run_begin.elapsed().as_nanos() as u64,
        store: Some(store.stats()),
    })
}

/// Run one mode over a whole clip. The refined mode is owned by the dual
/// pipeline module and rejected here.
pub fn run_clip(
    clip: &VideoClip,
    mode: Mode,
    cfg: &SchedulerConfig,
    weights: &WeightSet,
) -> Result<RunOutcome> {
    cfg.validate()?;
    clip_inputs(clip)?;
    match mode {
        Mode::Offline => run_offline(clip, cfg, weights),
        Mode::Online => run_online(clip, cfg, weights),
        Mode::Memory => run_memory(clip, cfg, weights),
        Mode::Refined => Err(Error::config(
            "refined mode runs through the dual pipeline",
        )),
    }
}
