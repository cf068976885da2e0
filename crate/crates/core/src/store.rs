//! The per-(block, frame) token memory behind the streaming modes.
//!
//! Two sides share one store. The online side is written by the streaming
//! worker, one frame at a time, and is subject to the byte budget and
//! eviction. The refined side is written by the refiner: entries are staged
//! while a window is in flight and only become visible to readers when the
//! watermark is published, so a snapshot can never observe a refined frame
//! beyond the watermark it read. Frames are stored atomically: all B block
//! entries or none.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::attention::ContextSource;
use crate::codec::TokenGrid;
use crate::error::{Error, Result};

/// All B per-block entries for one frame.
#[derive(Debug)]
pub struct FrameMemory {
    entries: Vec<Arc<TokenGrid>>,
    bytes: u64,
}

impl FrameMemory {
    fn new(entries: Vec<TokenGrid>) -> Self {
        let bytes = entries
            .iter()
            .map(|g| (g.data.rows() * g.data.cols() * 4) as u64)
            .sum();
        FrameMemory {
            entries: entries.into_iter().map(Arc::new).collect(),
            bytes,
        }
    }
}

/// Eviction parameters: keep the last `span` frames untouchable, prefer to
/// keep sampled frames (indices ≡ 0 mod `rate`), stay under `budget_bytes`.
#[derive(Debug, Clone, Copy)]
pub struct EvictionPolicy {
    pub span: u32,
    pub rate: u32,
    pub budget_bytes: u64,
}

impl EvictionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 {
            return Err(Error::config("sampling rate must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct StoreInner {
    online: BTreeMap<u32, Arc<FrameMemory>>,
    refined: BTreeMap<u32, Arc<FrameMemory>>,
    staged: BTreeMap<u32, Arc<FrameMemory>>,
    watermark: Option<u32>,
    refined_bound: Option<u32>,
    bytes: u64,
    bytes_peak: u64,
    evictions: u64,
}

impl StoreInner {
    fn add_bytes(&mut self, delta: u64) {
        self.bytes += delta;
        self.bytes_peak = self.bytes_peak.max(self.bytes);
    }
}

/// Counters exported to benchmark reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreStats {
    pub online_frames: usize,
    pub refined_frames: usize,
    pub staged_frames: usize,
    pub bytes: u64,
    pub bytes_peak: u64,
    pub watermark: Option<u32>,
    pub evictions: u64,
}

pub struct MemoryStore {
    blocks: usize,
    policy: EvictionPolicy,
    inner: Mutex<StoreInner>,
}

impl MemoryStore {
    pub fn new(blocks: usize, policy: EvictionPolicy) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::config("store needs at least one block"));
        }
        policy.validate()?;
        Ok(MemoryStore {
            blocks,
            policy,
            inner: Mutex::new(StoreInner::default()),
        })
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    /// Run-start check: the budget must at least cover the frames eviction
    /// is forbidden to touch (the protected span plus the newest frame).
    pub fn validate_budget(&self, bytes_per_frame: u64) -> Result<()> {
        let need = (self.policy.span as u64 + 1) * bytes_per_frame;
        if self.policy.budget_bytes < need {
            return Err(Error::config(format!(
                "budget {} bytes cannot hold the {}-frame protected span ({} bytes)",
                self.policy.budget_bytes,
                self.policy.span + 1,
                need
            )));
        }
        Ok(())
    }

    fn check_entries(&self, entries: &[TokenGrid]) -> Result<()> {
        if entries.len() != self.blocks {
            return Err(Error::shape(format!(
                "{} entries for a {}-block store",
                entries.len(),
                self.blocks
            )));
        }
        Ok(())
    }

    /// Store the online-side entries for `frame` (all blocks at once), then
    /// evict under the store's policy with `frame` as the current frame.
    /// Returns any evicted frame indices.
    pub fn put_online(&self, frame: u32, entries: Vec<TokenGrid>) -> Result<Vec<u32>> {
        self.check_entries(&entries)?;
        let memory = Arc::new(FrameMemory::new(entries));
        let mut inner = self.inner.lock().unwrap();
        let added = memory.bytes;
        if let Some(old) = inner.online.insert(frame, memory) {
            inner.bytes -= old.bytes;
        }
        inner.add_bytes(added);
        Ok(Self::evict_locked(&mut inner, &self.policy, frame))
    }

    /// Declare that the refiner is working on frames up to and including
    /// `bound`; refined puts beyond it are rejected.
    pub fn open_refined_window(&self, bound: u32) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(t) = inner.watermark {
            if bound < t {
                return Err(Error::protocol(format!(
                    "refined window bound {bound} behind watermark {t}"
                )));
            }
        }
        inner.refined_bound = Some(bound);
        Ok(())
    }

    /// Stage refined entries for `frame`. They stay invisible to snapshots
    /// until the watermark is published past them.
    pub fn put_refined(&self, frame: u32, entries: Vec<TokenGrid>) -> Result<()> {
        self.check_entries(&entries)?;
        let mut inner = self.inner.lock().unwrap();
        match inner.refined_bound {
            Some(bound) if frame <= bound => {}
            Some(bound) => {
                return Err(Error::protocol(format!(
                    "refined frame {frame} beyond declared window {bound}"
                )));
            }
            None => {
                return Err(Error::protocol(
                    "refined put without an open refiner window",
                ));
            }
        }
        let memory = Arc::new(FrameMemory::new(entries));
        let added = memory.bytes;
        if let Some(old) = inner.staged.insert(frame, memory) {
            inner.bytes -= old.bytes;
        }
        inner.add_bytes(added);
        Ok(())
    }

    /// Move staged refined frames up to `t` into the visible refined side
    /// and advance the watermark. Monotone: `t` may never regress.
    pub fn publish_watermark(&self, t: u32) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(current) = inner.watermark {
            if t < current {
                return Err(Error::protocol(format!(
                    "watermark {t} would regress from {current}"
                )));
            }
        }
        match inner.refined_bound {
            Some(bound) if t <= bound => {}
            _ => {
                return Err(Error::protocol(format!(
                    "watermark {t} beyond the declared refiner window"
                )));
            }
        }
        let ready: Vec<u32> = inner.staged.range(..=t).map(|(f, _)| *f).collect();
        for f in ready {
            let memory = inner.staged.remove(&f).unwrap();
            if let Some(old) = inner.refined.insert(f, memory) {
                inner.bytes -= old.bytes;
            }
        }
        inner.watermark = Some(t);
        Ok(())
    }

    pub fn watermark(&self) -> Option<u32> {
        self.inner.lock().unwrap().watermark
    }

    /// Consistent read view: shares the stored grids, unaffected by writes
    /// that happen after it is taken.
    pub fn snapshot(&self) -> StoreSnapshot {
        let inner = self.inner.lock().unwrap();
        StoreSnapshot {
            online: inner.online.clone(),
            refined: inner.refined.clone(),
            watermark: inner.watermark,
        }
    }

    /// Evict under an explicit policy with `current` as the newest frame.
    /// Candidates come from the online side only, oldest first, preferring
    /// non-sampled frames; the protected span [current−s, current] is never
    /// touched. Returns the evicted frame indices.
    pub fn evict_with(&self, policy: &EvictionPolicy, current: u32) -> Vec<u32> {
        let mut inner = self.inner.lock().unwrap();
        Self::evict_locked(&mut inner, policy, current)
    }

    fn evict_locked(inner: &mut StoreInner, policy: &EvictionPolicy, current: u32) -> Vec<u32> {
        let span_lo = current.saturating_sub(policy.span);
        let mut evicted = Vec::new();
        while inner.bytes > policy.budget_bytes {
            let unprotected = |f: &u32| *f < span_lo || *f > current;
            let pick = inner
                .online
                .keys()
                .find(|f| unprotected(f) && **f % policy.rate != 0)
                .or_else(|| inner.online.keys().find(|f| unprotected(f)))
                .copied();
            match pick {
                Some(f) => {
                    let memory = inner.online.remove(&f).unwrap();
                    inner.bytes -= memory.bytes;
                    inner.evictions += 1;
                    evicted.push(f);
                }
                None => break,
            }
        }
        evicted
    }

    pub fn stats(&self) -> StoreStats {
        let inner = self.inner.lock().unwrap();
        StoreStats {
            online_frames: inner.online.len(),
            refined_frames: inner.refined.len(),
            staged_frames: inner.staged.len(),
            bytes: inner.bytes,
            bytes_peak: inner.bytes_peak,
            watermark: inner.watermark,
            evictions: inner.evictions,
        }
    }
}

/// Frozen view of the store; refined entries win over online ones for the
/// same frame.
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    online: BTreeMap<u32, Arc<FrameMemory>>,
    refined: BTreeMap<u32, Arc<FrameMemory>>,
    watermark: Option<u32>,
}

impl StoreSnapshot {
    pub fn watermark(&self) -> Option<u32> {
        self.watermark
    }

    pub fn online_frames(&self) -> Vec<u32> {
        self.online.keys().copied().collect()
    }

    pub fn refined_frames(&self) -> Vec<u32> {
        self.refined.keys().copied().collect()
    }

    pub fn has_frame(&self, frame: u32) -> bool {
        self.refined.contains_key(&frame) || self.online.contains_key(&frame)
    }

    /// True when the entry that `context` would return for `frame` comes
    /// from the refined side.
    pub fn is_refined(&self, frame: u32) -> bool {
        self.refined.contains_key(&frame)
    }

    /// The online-side entry regardless of precedence, for comparisons.
    pub fn online_entry(&self, frame: u32, block: usize) -> Option<Arc<TokenGrid>> {
        self.online
            .get(&frame)
            .and_then(|m| m.entries.get(block).cloned())
    }

    /// The refined-side entry regardless of precedence, for comparisons.
    pub fn refined_entry(&self, frame: u32, block: usize) -> Option<Arc<TokenGrid>> {
        self.refined
            .get(&frame)
            .and_then(|m| m.entries.get(block).cloned())
    }
}

impl ContextSource for StoreSnapshot {
    fn context(&self, block: usize, frames: &[u32]) -> Result<Vec<Arc<TokenGrid>>> {
        let mut out = Vec::with_capacity(frames.len());
        let mut missing = Vec::new();
        for f in frames {
            let memory = self.refined.get(f).or_else(|| self.online.get(f));
            match memory {
                Some(m) if block < m.entries.len() => out.push(m.entries[block].clone()),
                _ => missing.push((block, *f)),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::CacheMiss { keys: missing })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TokenLayout;
    use crate::numeric::Matrix;
    use proptest::{prop_assert_eq, proptest};

    const P: usize = 16;
    const D: usize = 32;
    const B: usize = 4;

    fn layout() -> TokenLayout {
        TokenLayout {
            positions_y: 4,
            positions_x: 4,
            p: 2,
            d: 2,
            gh: 8,
            gw: 8,
        }
    }

    fn grid(tag: f32) -> TokenGrid {
        TokenGrid {
            layout: layout(),
            data: Matrix::new(P, D, vec![tag; P * D]).unwrap(),
        }
    }

    fn entries(tag: f32) -> Vec<TokenGrid> {
        vec![grid(tag); B]
    }

    fn frame_bytes() -> u64 {
        (B * P * D * 4) as u64
    }

    fn store_with_budget(frames: u64) -> MemoryStore {
        MemoryStore::new(
            B,
            EvictionPolicy {
                span: 3,
                rate: 10,
                budget_bytes: frames * frame_bytes(),
            },
        )
        .unwrap()
    }

    #[test]
    fn put_then_get_round_trips() {
        let store = store_with_budget(100);
        store.put_online(5, entries(0.5)).unwrap();
        let snap = store.snapshot();
        let got = snap.context(2, &[5]).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].data.data(), grid(0.5).data.data());
    }

    #[test]
    fn byte_accounting_formula() {
        let store = store_with_budget(100);
        store.put_online(0, entries(1.0)).unwrap();
        assert_eq!(store.stats().bytes, 8_192);
        assert_eq!(frame_bytes(), 8_192);
    }

    #[test]
    fn wrong_entry_count_rejected() {
        let store = store_with_budget(100);
        let err = store.put_online(0, vec![grid(1.0); B - 1]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn refined_put_needs_open_window_and_bound() {
        let store = store_with_budget(100);
        assert!(matches!(
            store.put_refined(2, entries(1.0)),
            Err(Error::Protocol(_))
        ));
        store.open_refined_window(4).unwrap();
        store.put_refined(2, entries(1.0)).unwrap();
        assert!(matches!(
            store.put_refined(5, entries(1.0)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn staged_entries_invisible_until_watermark() {
        let store = store_with_budget(100);
        store.open_refined_window(2).unwrap();
        store.put_refined(1, entries(1.0)).unwrap();
        let before = store.snapshot();
        assert!(!before.has_frame(1));
        assert_eq!(before.watermark(), None);
        store.publish_watermark(2).unwrap();
        let after = store.snapshot();
        assert!(after.is_refined(1));
        assert_eq!(after.watermark(), Some(2));
        assert!(!before.has_frame(1), "older snapshot stays frozen");
    }

    #[test]
    fn watermark_never_regresses() {
        let store = store_with_budget(100);
        store.open_refined_window(8).unwrap();
        store.publish_watermark(5).unwrap();
        assert!(matches!(
            store.publish_watermark(3),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            store.open_refined_window(4),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn select_returns_plan_order_and_refined_wins() {
        let store = store_with_budget(100);
        for f in 0..=17 {
            store.put_online(f, entries(f as f32)).unwrap();
        }
        let plan = [0u32, 10, 13, 14, 15, 16, 17];
        let snap = store.snapshot();
        let got = snap.context(1, &plan).unwrap();
        assert_eq!(got.len(), 7);
        for (want, grid) in plan.iter().zip(&got) {
            assert_eq!(grid.data.get(0, 0), *want as f32);
        }

        store.open_refined_window(14).unwrap();
        store.put_refined(14, entries(1000.0)).unwrap();
        store.publish_watermark(14).unwrap();
        let snap = store.snapshot();
        let got = snap.context(1, &plan).unwrap();
        assert_eq!(got[3].data.get(0, 0), 1000.0, "refined entry wins");
        assert!(snap.is_refined(14));
    }

    #[test]
    fn empty_plan_is_empty() {
        let store = store_with_budget(100);
        let snap = store.snapshot();
        assert!(snap.context(0, &[]).unwrap().is_empty());
    }

    #[test]
    fn cache_miss_lists_every_missing_key() {
        let store = store_with_budget(100);
        store.put_online(1, entries(1.0)).unwrap();
        let snap = store.snapshot();
        match snap.context(2, &[0, 1, 7]) {
            Err(Error::CacheMiss { keys }) => {
                assert_eq!(keys, vec![(2, 0), (2, 7)]);
            }
            other => panic!("expected cache miss, got {other:?}"),
        }
    }

    #[test]
    fn explicit_eviction_matches_hand_simulation() {
        let store = store_with_budget(100);
        for f in 0..10 {
            store.put_online(f, entries(f as f32)).unwrap();
        }
        let tight = EvictionPolicy {
            span: 3,
            rate: 10,
            budget_bytes: 6 * frame_bytes(),
        };
        let evicted = store.evict_with(&tight, 10);
        assert_eq!(evicted, vec![1, 2, 3, 4]);
        let snap = store.snapshot();
        assert_eq!(snap.online_frames(), vec![0, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn auto_eviction_during_puts_reaches_same_state() {
        let store = store_with_budget(6);
        let mut all_evicted = Vec::new();
        for f in 0..10 {
            all_evicted.extend(store.put_online(f, entries(f as f32)).unwrap());
        }
        assert_eq!(all_evicted, vec![1, 2, 3, 4]);
        assert_eq!(store.snapshot().online_frames(), vec![0, 5, 6, 7, 8, 9]);
        assert_eq!(store.stats().evictions, 4);
    }

    #[test]
    fn sampled_frames_evicted_ascending_when_nothing_else_left() {
        let store = store_with_budget(100);
        for f in 0..10 {
            store.put_online(f, entries(f as f32)).unwrap();
        }
        let every_frame_sampled = EvictionPolicy {
            span: 2,
            rate: 1,
            budget_bytes: 5 * frame_bytes(),
        };
        let evicted = store.evict_with(&every_frame_sampled, 10);
        assert_eq!(evicted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn protected_span_never_evicted_even_under_zero_budget() {
        let store = store_with_budget(100);
        for f in 0..10 {
            store.put_online(f, entries(f as f32)).unwrap();
        }
        let impossible = EvictionPolicy {
            span: 3,
            rate: 10,
            budget_bytes: 0,
        };
        store.evict_with(&impossible, 9);
        let left = store.snapshot().online_frames();
        assert_eq!(left, vec![6, 7, 8, 9], "span [9-3, 9] survives");
    }

    #[test]
    fn budget_validation_requires_span_capacity() {
        let store = store_with_budget(3);
        assert!(store.validate_budget(frame_bytes()).is_err());
        let store = store_with_budget(4);
        assert!(store.validate_budget(frame_bytes()).is_ok());
    }

    #[test]
    fn snapshots_differ_by_exactly_one_frame_around_a_write() {
        let store = store_with_budget(100);
        store.put_online(0, entries(0.0)).unwrap();
        let before = store.snapshot();
        store.put_online(1, entries(1.0)).unwrap();
        let after = store.snapshot();
        assert_eq!(before.online_frames(), vec![0]);
        assert_eq!(after.online_frames(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn byte_accounting_matches_recount_after_any_sequence(
            ops in proptest::collection::vec((0u32..40, 0u8..3), 1..60)
        ) {
            let store = store_with_budget(8);
            let mut next_bound = 0u32;
            for (frame, kind) in ops {
                match kind {
                    0 => {
                        store.put_online(frame, entries(frame as f32)).unwrap();
                    }
                    1 => {
                        next_bound = next_bound.max(frame);
                        store.open_refined_window(next_bound).unwrap();
                        if frame <= next_bound {
                            store.put_refined(frame, entries(frame as f32)).unwrap();
                        }
                    }
                    _ => {
                        let t = store.watermark().unwrap_or(0).max(next_bound.min(frame));
                        if store.watermark().map_or(true, |w| t >= w) && t <= next_bound {
                            let _ = store.publish_watermark(t);
                        }
                    }
                }
                let stats = store.stats();
                let snap = store.snapshot();
                let visible = snap.online_frames().len() + snap.refined_frames().len();
                let expected_visible = (visible as u64) * frame_bytes();
                let staged = (stats.staged_frames as u64) * frame_bytes();
                prop_assert_eq!(stats.bytes, expected_visible + staged);
            }
        }
    }
}
