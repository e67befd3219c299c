//! Per-head KV cache state machines and frame-slot accounting.
//!
//! Cached keys carry spatial rotary phases only; the temporal phase is
//! applied to a transient copy at assembly time. The current block is never
//! held here during its own generation: it is appended at assembly and
//! written in by [`HeadCache::roll_after_block`] afterwards.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::{HeadRole, HeadRoleMap};
use crate::tensor::TokenMatrix;

/// Where a cached token originally came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TokenSource {
    pub frame: usize,
    pub token: usize,
}

/// One frame's worth of cached keys and values for a single head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameKV {
    pub keys: TokenMatrix,
    pub values: TokenMatrix,
    pub spatial_positions: Vec<(usize, usize)>,
    pub global_frame_index: usize,
    pub is_summary: bool,
    pub provenance: Vec<TokenSource>,
}

impl FrameKV {
    pub fn new(
        keys: TokenMatrix,
        values: TokenMatrix,
        spatial_positions: Vec<(usize, usize)>,
        global_frame_index: usize,
    ) -> Result<Self> {
        if keys.rows() != values.rows() || keys.rows() != spatial_positions.len() {
            return Err(Error::Shape(format!(
                "frame with {} keys, {} values, {} positions",
                keys.rows(),
                values.rows(),
                spatial_positions.len()
            )));
        }
        let provenance = (0..keys.rows())
            .map(|token| TokenSource {
                frame: global_frame_index,
                token,
            })
            .collect();
        Ok(Self {
            keys,
            values,
            spatial_positions,
            global_frame_index,
            is_summary: false,
            provenance,
        })
    }

    pub fn tokens(&self) -> usize {
        self.keys.rows()
    }

    /// Key plus value scalars held by this frame.
    pub fn scalar_count(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// Sorted distinct source frames.
    pub fn source_frames(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.provenance.iter().map(|p| p.frame).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Cache behaviour for one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CachePolicy {
    Local,
    Anchor,
    Memory { fast_frames: usize },
    /// `window` frames attended including the current block (`None` keeps
    /// everything), plus the first `n_sink` frames on top.
    Window { window: Option<usize>, n_sink: usize },
}

impl CachePolicy {
    pub fn for_role(role: HeadRole, fast_frames: usize) -> Self {
        match role {
            HeadRole::Local => CachePolicy::Local,
            HeadRole::Anchor => CachePolicy::Anchor,
            HeadRole::Memory => CachePolicy::Memory { fast_frames },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LocalCache {
    pub prev_frame: Option<FrameKV>,
}

#[derive(Debug, Clone, Default)]
pub struct AnchorCache {
    pub anchor_frames: Vec<FrameKV>,
    pub prev_frame: Option<FrameKV>,
}

#[derive(Debug, Clone)]
pub struct MemoryCache {
    pub fast: VecDeque<FrameKV>,
    pub capacity: usize,
}

#[derive(Debug, Clone)]
pub struct WindowCache {
    pub sinks: Vec<FrameKV>,
    pub recent: VecDeque<FrameKV>,
    pub n_sink: usize,
    /// History frames kept; `None` keeps all.
    pub capacity: Option<usize>,
}

#[derive(Debug, Clone)]
enum State {
    Local(LocalCache),
    Anchor(AnchorCache),
    Memory(MemoryCache),
    Window(WindowCache),
}

/// Rolling cache of one `(layer, head)` slot.
#[derive(Debug, Clone)]
pub struct HeadCache {
    policy: CachePolicy,
    frames_per_block: usize,
    last_block: usize,
    state: State,
}

impl HeadCache {
    pub fn new(policy: CachePolicy, frames_per_block: usize) -> Self {
        let state = match policy {
            CachePolicy::Local => State::Local(LocalCache::default()),
            CachePolicy::Anchor => State::Anchor(AnchorCache::default()),
            CachePolicy::Memory { fast_frames } => State::Memory(MemoryCache {
                fast: VecDeque::new(),
                capacity: fast_frames,
            }),
            CachePolicy::Window { window, n_sink } => State::Window(WindowCache {
                sinks: Vec::new(),
                recent: VecDeque::new(),
                n_sink,
                capacity: window.map(|w| w.saturating_sub(frames_per_block)),
            }),
        };
        Self {
            policy,
            frames_per_block,
            last_block: 0,
            state,
        }
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    /// Last block written into this cache (0 before the first roll).
    pub fn last_block(&self) -> usize {
        self.last_block
    }

    /// Writes a finished block in and applies the policy's eviction. Returns
    /// episodic candidates: for each block whose first frame just left fast
    /// memory, that first frame.
    pub fn roll_after_block(&mut self, block: usize, frames: Vec<FrameKV>) -> Result<Vec<FrameKV>> {
        if block != self.last_block + 1 {
            return Err(Error::Sequencing {
                expected: self.last_block + 1,
                got: block,
            });
        }
        let f = self.frames_per_block;
        let mut candidates = Vec::new();
        match &mut self.state {
            State::Local(c) => {
                c.prev_frame = frames.into_iter().last();
            }
            State::Anchor(c) => {
                for fr in &frames {
                    let idx = fr.global_frame_index;
                    if idx < f && !c.anchor_frames.iter().any(|a| a.global_frame_index == idx) {
                        c.anchor_frames.push(fr.clone());
                    }
                }
                c.prev_frame = frames.into_iter().last();
            }
            State::Memory(c) => {
                c.fast.extend(frames);
                while c.fast.len() > c.capacity {
                    let old = c.fast.pop_front().expect("non-empty");
                    if old.global_frame_index % f == 0 {
                        candidates.push(old);
                    }
                }
            }
            State::Window(c) => {
                for fr in &frames {
                    if fr.global_frame_index < c.n_sink && c.sinks.len() < c.n_sink {
                        c.sinks.push(fr.clone());
                    }
                }
                c.recent.extend(frames);
                if let Some(cap) = c.capacity {
                    while c.recent.len() > cap {
                        c.recent.pop_front();
                    }
                }
            }
        }
        self.last_block = block;
        Ok(candidates)
    }

    /// History frames in assembly order (the current block excluded).
    /// `episodic` is prepended for memory heads and ignored otherwise.
    pub fn history<'a>(&'a self, episodic: &'a [FrameKV]) -> Vec<&'a FrameKV> {
        let mut out: Vec<&FrameKV> = Vec::new();
        let push_dedup = |out: &mut Vec<&'a FrameKV>, fr: &'a FrameKV| {
            if fr.is_summary
                || !out
                    .iter()
                    .any(|o| !o.is_summary && o.global_frame_index == fr.global_frame_index)
            {
                out.push(fr);
            }
        };
        match &self.state {
            State::Local(c) => out.extend(c.prev_frame.as_ref()),
            State::Anchor(c) => {
                for a in &c.anchor_frames {
                    push_dedup(&mut out, a);
                }
                if let Some(p) = &c.prev_frame {
                    push_dedup(&mut out, p);
                }
            }
            State::Memory(c) => {
                out.extend(episodic.iter());
                out.extend(c.fast.iter());
            }
            State::Window(c) => {
                for s in &c.sinks {
                    push_dedup(&mut out, s);
                }
                for r in &c.recent {
                    push_dedup(&mut out, r);
                }
            }
        }
        out
    }

    /// Frames in the fast FIFO (memory heads only).
    pub fn fast_frames(&self) -> Vec<usize> {
        match &self.state {
            State::Memory(c) => c.fast.iter().map(|f| f.global_frame_index).collect(),
            _ => Vec::new(),
        }
    }

    /// Key plus value scalars currently held (episodic tier excluded).
    pub fn stored_scalars(&self) -> usize {
        self.history(&[]).iter().map(|f| f.scalar_count()).sum()
    }
}

/// Full attended frame list for the current block: history then `current`.
pub fn retained_frames<'a>(
    cache: &'a HeadCache,
    episodic: &'a [FrameKV],
    current: &'a [FrameKV],
) -> Vec<&'a FrameKV> {
    let mut v = cache.history(episodic);
    v.extend(current.iter());
    v
}

/// Per-role frames attended per step, including the current block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoleCapacity {
    pub local: usize,
    pub anchor: usize,
    pub memory: usize,
}

impl RoleCapacity {
    pub fn new(b_epi: usize, b_fast: usize, f: usize) -> Self {
        Self {
            local: f + 1,
            anchor: 2 * f + 1,
            memory: b_epi + b_fast + f,
        }
    }

    pub fn of(&self, role: HeadRole) -> usize {
        match role {
            HeadRole::Local => self.local,
            HeadRole::Anchor => self.anchor,
            HeadRole::Memory => self.memory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub local: usize,
    pub anchor: usize,
    pub memory: usize,
}

impl RoleCounts {
    pub fn from_map(map: &HeadRoleMap) -> Self {
        Self {
            local: map.count(HeadRole::Local),
            anchor: map.count(HeadRole::Anchor),
            memory: map.count(HeadRole::Memory),
        }
    }

    pub fn total(&self) -> usize {
        self.local + self.anchor + self.memory
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheBudget {
    pub capacity: RoleCapacity,
    pub counts: RoleCounts,
    pub total: usize,
}

/// Total frame-slots `Σ_h C_h` for a head-wise allocation.
pub fn frame_slots(counts: RoleCounts, b_epi: usize, b_fast: usize, f: usize) -> CacheBudget {
    let capacity = RoleCapacity::new(b_epi, b_fast, f);
    let total = counts.local * capacity.local + counts.anchor * capacity.anchor + counts.memory * capacity.memory;
    CacheBudget {
        capacity,
        counts,
        total,
    }
}

pub fn frame_slots_for_map(map: &HeadRoleMap, b_epi: usize, b_fast: usize, f: usize) -> CacheBudget {
    frame_slots(RoleCounts::from_map(map), b_epi, b_fast, f)
}

/// One row of the budget comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub method: String,
    pub cache_per_head: String,
    pub frame_slots: usize,
    /// Percent of the head-wise total.
    pub relative_budget: f64,
}

/// Head-wise budget followed by one row per uniform baseline window.
pub fn budget_table(counts: RoleCounts, b_epi: usize, b_fast: usize, f: usize, baselines: &[usize]) -> Vec<BudgetRow> {
    let hw = frame_slots(counts, b_epi, b_fast, f);
    let rel = |slots: usize| 100.0 * slots as f64 / hw.total as f64;
    let mut rows = vec![BudgetRow {
        method: "head_wise".into(),
        cache_per_head: format!("{}/{}/{}", hw.capacity.local, hw.capacity.anchor, hw.capacity.memory),
        frame_slots: hw.total,
        relative_budget: rel(hw.total),
    }];
    for &w in baselines {
        let slots = counts.total() * w;
        rows.push(BudgetRow {
            method: format!("uniform_{w}"),
            cache_per_head: w.to_string(),
            frame_slots: slots,
            relative_budget: rel(slots),
        });
    }
    rows
}
