//! Episodic tier of the memory-head cache.
//!
//! Admission is global: one decision per candidate applies to every
//! `(layer, memory head)` slot, so all slots always hold the same logical
//! entry list. When an admission overflows the budget, entries are folded
//! into a single prompt-guided summary frame kept at index 0.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headcache::FrameKV;
use crate::par::{self, Parallelism};
use crate::profiler::HeadId;
use crate::tensor::{cosine, TokenMatrix};

/// Similarity used to score scene novelty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyMetric {
    /// Cosine of mean-pooled keys averaged over layers and memory heads.
    #[default]
    KeyCosine,
    /// Cosine of mean-pooled raw frame latents (ablation only).
    LatentCosine,
}

/// A frame offered for admission: one `FrameKV` per memory slot.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub block_index: usize,
    pub frame_index: usize,
    pub per_slot: Vec<FrameKV>,
    /// Mean-pooled raw latent of the frame, for the latent metric.
    pub latent: Option<Vec<f64>>,
}

/// Current textual key per memory slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptKeys {
    pub per_slot: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryMeta {
    pub source_frames: Vec<usize>,
    pub is_summary: bool,
    pub admitted_at: usize,
    #[serde(skip)]
    pub latent: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissionRecord {
    pub block_index: usize,
    pub delta: f64,
    pub admitted: bool,
    pub compressed: bool,
}

/// Which entries a compression folds into the summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOperands {
    /// Initial overflow: two non-summary entries `(i, j)`, `i < j`.
    Pair(usize, usize),
    /// Later overflows: the summary at index 0 and entry `j`.
    IntoSummary(usize),
}

#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    capacity: usize,
    tokens_per_frame: usize,
    slots: Vec<HeadId>,
    metric: NoveltyMetric,
    entries: Vec<EntryMeta>,
    per_slot: Vec<Vec<FrameKV>>,
    log: Vec<AdmissionRecord>,
    mode: Parallelism,
}

impl EpisodicMemory {
    /// `slots` are the memory heads, sorted by `(layer, head)`.
    pub fn new(capacity: usize, tokens_per_frame: usize, mut slots: Vec<HeadId>) -> Self {
        slots.sort();
        let n = slots.len();
        Self {
            capacity,
            tokens_per_frame,
            slots,
            metric: NoveltyMetric::KeyCosine,
            entries: Vec::new(),
            per_slot: vec![Vec::new(); n],
            log: Vec::new(),
            mode: Parallelism::default(),
        }
    }

    pub fn with_metric(mut self, metric: NoveltyMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_parallelism(mut self, mode: Parallelism) -> Self {
        self.mode = mode;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slots(&self) -> &[HeadId] {
        &self.slots
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.entries
    }

    pub fn has_summary(&self) -> bool {
        self.entries.first().is_some_and(|e| e.is_summary)
    }

    pub fn log(&self) -> &[AdmissionRecord] {
        &self.log
    }

    pub fn slot_index(&self, head: HeadId) -> Option<usize> {
        self.slots.binary_search(&head).ok()
    }

    /// Entry frames of one slot, in memory order.
    pub fn slot_frames(&self, slot: usize) -> &[FrameKV] {
        &self.per_slot[slot]
    }

    pub fn frames_for(&self, head: HeadId) -> &[FrameKV] {
        match self.slot_index(head) {
            Some(i) => &self.per_slot[i],
            None => &[],
        }
    }

    pub fn stored_scalars(&self) -> usize {
        self.per_slot.iter().flatten().map(FrameKV::scalar_count).sum()
    }

    /// Hash of each slot's logical entry list; equal across slots when the
    /// global-consistency invariant holds.
    pub fn slot_hashes(&self) -> Vec<u64> {
        self.per_slot
            .iter()
            .map(|frames| {
                let mut h = DefaultHasher::new();
                frames.len().hash(&mut h);
                for f in frames {
                    f.is_summary.hash(&mut h);
                    f.global_frame_index.hash(&mut h);
                }
                h.finish()
            })
            .collect()
    }

    fn check_candidate(&self, cand: &Candidate) -> Result<()> {
        if cand.per_slot.len() != self.slots.len() {
            return Err(Error::Config(format!(
                "candidate covers {} slots, memory has {}",
                cand.per_slot.len(),
                self.slots.len()
            )));
        }
        Ok(())
    }

    fn pooled(frames: &[FrameKV]) -> Vec<Vec<f64>> {
        frames.iter().map(|f| f.keys.mean_rows()).collect()
    }

    /// Slot-averaged pooled-key cosine between entries `a` and `b`.
    pub fn pair_similarity(&self, a: usize, b: usize) -> f64 {
        let sims = par::map_range(self.mode, self.slots.len(), |s| {
            let fs = &self.per_slot[s];
            cosine(&fs[a].keys.mean_rows(), &fs[b].keys.mean_rows())
        });
        sims.iter().sum::<f64>() / self.slots.len() as f64
    }
}

/// Max over entries of the slot-averaged pooled-key cosine; `-1` when the
/// memory is empty.
pub fn novelty_score(cand: &Candidate, mem: &EpisodicMemory) -> Result<f64> {
    mem.check_candidate(cand)?;
    if mem.entries.is_empty() {
        return Ok(-1.0);
    }
    let n_slots = mem.slots.len();
    // per slot: cosine against every entry
    let per_slot: Vec<Vec<f64>> = par::map_range(mem.mode, n_slots, |s| {
        let c = cand.per_slot[s].keys.mean_rows();
        EpisodicMemory::pooled(&mem.per_slot[s])
            .iter()
            .map(|e| cosine(&c, e))
            .collect()
    });
    let best = (0..mem.entries.len())
        .map(|j| per_slot.iter().map(|v| v[j]).sum::<f64>() / n_slots as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best)
}

/// Latent-space alternative to [`novelty_score`].
pub fn latent_novelty_score(cand: &Candidate, mem: &EpisodicMemory) -> Result<f64> {
    let c = cand
        .latent
        .as_ref()
        .ok_or_else(|| Error::Precondition("candidate carries no latent".into()))?;
    let mut best = -1.0f64;
    for e in &mem.entries {
        let l = e
            .latent
            .as_ref()
            .ok_or_else(|| Error::Precondition("entry carries no latent".into()))?;
        best = best.max(cosine(c, l));
    }
    Ok(best)
}

/// Unordered pair with the highest slot-averaged pooled-key cosine; ties go
/// to the lexicographically smallest `(i, j)`.
pub fn find_redundant_pair(mem: &EpisodicMemory) -> Result<(usize, usize)> {
    if mem.has_summary() {
        return Err(Error::Precondition("a summary already exists".into()));
    }
    let n = mem.entries.len();
    if n < 2 {
        return Err(Error::Precondition(format!("{n} entries, need at least 2")));
    }
    let sims = similarity_matrix(mem);
    let mut best = (0, 1);
    for i in 0..n {
        for j in i + 1..n {
            if sims[i][j] > sims[best.0][best.1] {
                best = (i, j);
            }
        }
    }
    Ok(best)
}

/// Non-summary entry with the highest mean similarity to its adjacent
/// non-summary neighbours; ties go to the smaller index.
pub fn select_merge_victim(mem: &EpisodicMemory) -> Result<usize> {
    if !mem.has_summary() {
        return Err(Error::Precondition("no summary at index 0".into()));
    }
    let n = mem.entries.len();
    if n < 3 {
        return Err(Error::Precondition(format!(
            "{} non-summary entries, need at least 2",
            n.saturating_sub(1)
        )));
    }
    let sims = similarity_matrix(mem);
    let mut best = (1, f64::NEG_INFINITY);
    for j in 1..n {
        let mut neigh = Vec::with_capacity(2);
        if j > 1 {
            neigh.push(sims[j][j - 1]);
        }
        if j + 1 < n {
            neigh.push(sims[j][j + 1]);
        }
        let score = neigh.iter().sum::<f64>() / neigh.len() as f64;
        if score > best.1 {
            best = (j, score);
        }
    }
    Ok(best.0)
}

fn similarity_matrix(mem: &EpisodicMemory) -> Vec<Vec<f64>> {
    let n = mem.entries.len();
    let pooled: Vec<Vec<Vec<f64>>> = par::map(mem.mode, &mem.per_slot, |fs| EpisodicMemory::pooled(fs));
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = pooled.iter().map(|p| cosine(&p[i], &p[j])).sum::<f64>() / pooled.len() as f64;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

/// Indices of the top-`k` scores, descending, ties by position ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-layer prompt alignment of the `2s` concatenated candidate tokens:
/// mean over the layer's memory slots of each key token's cosine to that
/// slot's prompt key.
pub fn prompt_alignment(cat_keys: &[&TokenMatrix], prompt: &[&[f64]]) -> Vec<f64> {
    let rows = cat_keys[0].rows();
    let mut r = vec![0.0; rows];
    for (k, p) in cat_keys.iter().zip(prompt) {
        for (t, acc) in r.iter_mut().enumerate() {
            *acc += cosine(k.row(t), p);
        }
    }
    r.iter_mut().for_each(|v| *v /= cat_keys.len() as f64);
    r
}

/// Folds the operands into a fresh summary of exactly `s` tokens per slot,
/// stored at index 0. Keys and values are gathered at the same token indices.
pub fn compress_into_summary(mem: &mut EpisodicMemory, ops: MergeOperands, prompt: &PromptKeys) -> Result<()> {
    let (a, b) = match ops {
        MergeOperands::Pair(i, j) if i < j && j < mem.entries.len() => (i, j),
        MergeOperands::IntoSummary(j) if mem.has_summary() && j >= 1 && j < mem.entries.len() => (0, j),
        _ => return Err(Error::Precondition(format!("invalid merge operands {ops:?}"))),
    };
    if prompt.per_slot.len() != mem.slots.len() {
        return Err(Error::Config("prompt keys do not cover the memory slots".into()));
    }
    let s = mem.tokens_per_frame;
    for fs in &mem.per_slot {
        if fs[a].tokens() != s || fs[b].tokens() != s {
            return Err(Error::Shape(format!(
                "merge operands hold {} and {} tokens, expected {s}",
                fs[a].tokens(),
                fs[b].tokens()
            )));
        }
    }

    // group slots by layer; each layer picks one token set for all its heads
    let mut layers: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, id) in mem.slots.iter().enumerate() {
        match layers.last_mut() {
            Some((l, v)) if *l == id.layer => v.push(i),
            _ => layers.push((id.layer, vec![i])),
        }
    }
    let per_slot = &mem.per_slot;
    let selections: Vec<Vec<usize>> = par::map(mem.mode, &layers, |(_, slots)| {
        let cats: Vec<TokenMatrix> = slots
            .iter()
            .map(|&i| TokenMatrix::vstack([&per_slot[i][a].keys, &per_slot[i][b].keys]).expect("equal widths"))
            .collect();
        let cat_refs: Vec<&TokenMatrix> = cats.iter().collect();
        let prompt_refs: Vec<&[f64]> = slots.iter().map(|&i| prompt.per_slot[i].as_slice()).collect();
        top_k_indices(&prompt_alignment(&cat_refs, &prompt_refs), s)
    });

    let mut sources: Vec<usize> = mem.entries[a]
        .source_frames
        .iter()
        .chain(&mem.entries[b].source_frames)
        .copied()
        .collect();
    sources.sort_unstable();
    sources.dedup();
    let mut summaries = vec![None; mem.slots.len()];
    for ((_, slots), pick) in layers.iter().zip(&selections) {
        for &i in slots {
            let (fa, fb) = (&mem.per_slot[i][a], &mem.per_slot[i][b]);
            let keys = TokenMatrix::vstack([&fa.keys, &fb.keys])?.gather_rows(pick);
            let values = TokenMatrix::vstack([&fa.values, &fb.values])?.gather_rows(pick);
            let cat_pos: Vec<_> = fa.spatial_positions.iter().chain(&fb.spatial_positions).copied().collect();
            let cat_src: Vec<_> = fa.provenance.iter().chain(&fb.provenance).copied().collect();
            let provenance: Vec<_> = pick.iter().map(|&t| cat_src[t]).collect();
            summaries[i] = Some(FrameKV {
                keys,
                values,
                spatial_positions: pick.iter().map(|&t| cat_pos[t]).collect(),
                global_frame_index: sources[0],
                is_summary: true,
                provenance,
            });
        }
    }

    let meta = EntryMeta {
        source_frames: sources,
        is_summary: true,
        admitted_at: mem.entries[b].admitted_at,
        latent: None,
    };
    // remove b first (b > a), then a
    mem.entries.remove(b);
    mem.entries.remove(a);
    mem.entries.insert(0, meta);
    for (fs, summary) in mem.per_slot.iter_mut().zip(summaries) {
        fs.remove(b);
        fs.remove(a);
        fs.insert(0, summary.expect("every slot belongs to a layer"));
    }
    Ok(())
}

/// Admits the candidate iff its novelty is below `tau_novel`; compresses in
/// the same transaction when the append overflows the budget.
pub fn try_admit(
    mem: &mut EpisodicMemory,
    cand: Candidate,
    tau_novel: f64,
    prompt: &PromptKeys,
) -> Result<AdmissionRecord> {
    mem.check_candidate(&cand)?;
    let delta = match mem.metric {
        NoveltyMetric::KeyCosine => novelty_score(&cand, mem)?,
        NoveltyMetric::LatentCosine if mem.is_empty() => -1.0,
        NoveltyMetric::LatentCosine => latent_novelty_score(&cand, mem)?,
    };
    let mut record = AdmissionRecord {
        block_index: cand.block_index,
        delta,
        admitted: false,
        compressed: false,
    };
    if delta >= tau_novel {
        mem.log.push(record);
        return Ok(record);
    }
    record.admitted = true;
    mem.entries.push(EntryMeta {
        source_frames: vec![cand.frame_index],
        is_summary: false,
        admitted_at: cand.block_index,
        latent: cand.latent,
    });
    for (fs, f) in mem.per_slot.iter_mut().zip(cand.per_slot) {
        fs.push(f);
    }
    if mem.entries.len() > mem.capacity {
        let ops = if mem.has_summary() {
            MergeOperands::IntoSummary(select_merge_victim(mem)?)
        } else {
            let (i, j) = find_redundant_pair(mem)?;
            MergeOperands::Pair(i, j)
        };
        compress_into_summary(mem, ops, prompt)?;
        record.compressed = true;
    }
    if mem.entries.len() > mem.capacity {
        return Err(Error::Invariant(format!(
            "episodic memory holds {} entries after admission, budget {}",
            mem.entries.len(),
            mem.capacity
        )));
    }
    mem.log.push(record);
    Ok(record)
}
