//! Streaming generation: per-head caches, episodic admission and the block
//! loop that ties them to the model.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::episodic::{try_admit, AdmissionRecord, Candidate, EntryMeta, EpisodicMemory, NoveltyMetric, PromptKeys};
use crate::error::{Error, Result};
use crate::headcache::{CachePolicy, HeadCache};
use crate::model::{BlockInput, HistoryProvider, InputSchedule, LatentBlock, ModelWeights, Probe};
use crate::par::Parallelism;
use crate::profiler::{HeadId, HeadRole, HeadRoleMap};
use crate::headcache::FrameKV;
use crate::tensor::TokenMatrix;

/// Cache layout applied to every head.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Every past frame is kept.
    Unbounded,
    /// `window` frames including the current block.
    UniformWindow { window: usize },
    /// As `UniformWindow` plus the first `n_sink` frames kept for good.
    SinkWindow { window: usize, n_sink: usize },
    /// Role-dependent caches from a head-role map.
    HeadWise(HeadRoleMap),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Unbounded => "unbounded".into(),
            Strategy::UniformWindow { window } => format!("uniform_window_{window}"),
            Strategy::SinkWindow { window, n_sink } => format!("sink_window_{window}_{n_sink}"),
            Strategy::HeadWise(_) => "head_wise".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryParams {
    #[serde(rename = "B_epi")]
    pub b_epi: usize,
    #[serde(rename = "B_fast")]
    pub b_fast: usize,
    pub tau_novel: f64,
    /// Novelty is evaluated on blocks divisible by this.
    pub update_interval: usize,
    /// Evaluate every candidate that left fast memory since the last
    /// update instead of only the most recent one.
    pub evaluate_all_exited: bool,
    pub metric: NoveltyMetric,
}

impl Default for MemoryParams {
    fn default() -> Self {
        Self {
            b_epi: 5,
            b_fast: 3,
            tau_novel: 0.95,
            update_interval: 3,
            evaluate_all_exited: false,
            metric: NoveltyMetric::KeyCosine,
        }
    }
}

impl MemoryParams {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 {
            return Err(Error::Config("update_interval must be at least 1".into()));
        }
        if self.b_epi < 2 {
            return Err(Error::Config("B_epi must be at least 2".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau_novel) {
            return Err(Error::Config("tau_novel must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Per-block bookkeeping produced by [`Rollout::commit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub block_index: usize,
    pub admissions: Vec<AdmissionRecord>,
    /// Frames attended by all heads for this block.
    pub frame_slots_live: usize,
    /// Key and value scalars attended by all heads for this block.
    pub stored_scalar_count: usize,
    pub episodic_len: usize,
    pub slot_hashes_consistent: bool,
}

pub struct Rollout<'w> {
    weights: &'w ModelWeights,
    strategy: Strategy,
    params: MemoryParams,
    caches: Vec<HeadCache>,
    episodic: Option<EpisodicMemory>,
    pending: Vec<Candidate>,
    frame_latents: BTreeMap<usize, Vec<f64>>,
    prompt: Option<String>,
    prompt_keys: Option<PromptKeys>,
    next_block: usize,
    mode: Parallelism,
}

impl HistoryProvider for Rollout<'_> {
    fn history(&self, head: HeadId) -> Vec<&FrameKV> {
        let idx = self.weights.config().head_index(head);
        let epi = self.episodic.as_ref().map(|e| e.frames_for(head)).unwrap_or(&[]);
        self.caches[idx].history(epi)
    }
}

impl<'w> Rollout<'w> {
    pub fn new(weights: &'w ModelWeights, strategy: Strategy, params: MemoryParams, mode: Parallelism) -> Result<Self> {
        let cfg = *weights.config();
        let f = cfg.frames_per_block;
        let mut memory_heads = Vec::new();
        let policies: Vec<CachePolicy> = match &strategy {
            Strategy::Unbounded => vec![CachePolicy::Window { window: None, n_sink: 0 }; cfg.head_count()],
            Strategy::UniformWindow { window } | Strategy::SinkWindow { window, .. } if *window < f => {
                return Err(Error::Config(format!("window {window} is smaller than a block of {f} frames")));
            }
            Strategy::UniformWindow { window } => vec![
                CachePolicy::Window {
                    window: Some(*window),
                    n_sink: 0
                };
                cfg.head_count()
            ],
            Strategy::SinkWindow { window, n_sink } => vec![
                CachePolicy::Window {
                    window: Some(*window),
                    n_sink: *n_sink
                };
                cfg.head_count()
            ],
            Strategy::HeadWise(map) => {
                if map.layers != cfg.layers || map.heads != cfg.heads {
                    return Err(Error::Config(format!(
                        "role map covers {}x{} heads, model has {}x{}",
                        map.layers, map.heads, cfg.layers, cfg.heads
                    )));
                }
                params.validate()?;
                cfg.head_ids()
                    .map(|id| {
                        let role = map.role(id);
                        if role == HeadRole::Memory {
                            memory_heads.push(id);
                        }
                        CachePolicy::for_role(role, params.b_fast)
                    })
                    .collect()
            }
        };
        let episodic = (!memory_heads.is_empty()).then(|| {
            EpisodicMemory::new(params.b_epi, cfg.tokens_per_frame, memory_heads)
                .with_metric(params.metric)
                .with_parallelism(mode)
        });
        Ok(Self {
            weights,
            strategy,
            params,
            caches: policies.into_iter().map(|p| HeadCache::new(p, f)).collect(),
            episodic,
            pending: Vec::new(),
            frame_latents: BTreeMap::new(),
            prompt: None,
            prompt_keys: None,
            next_block: 1,
            mode,
        })
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn params(&self) -> &MemoryParams {
        &self.params
    }

    pub fn next_block(&self) -> usize {
        self.next_block
    }

    pub fn cache(&self, head: HeadId) -> &HeadCache {
        &self.caches[self.weights.config().head_index(head)]
    }

    pub fn episodic(&self) -> Option<&EpisodicMemory> {
        self.episodic.as_ref()
    }

    /// Generates the next block without touching any cache, so it can be
    /// repeated (e.g. for several denoising passes) before committing.
    pub fn forward(&self, input: &BlockInput, probe: Option<Probe<'_>>) -> Result<LatentBlock> {
        if input.block_index != self.next_block {
            return Err(Error::Sequencing {
                expected: self.next_block,
                got: input.block_index,
            });
        }
        self.weights.generate_block(self, input, self.mode, probe)
    }

    fn refresh_prompt(&mut self, prompt: &str) {
        if self.prompt.as_deref() == Some(prompt) {
            return;
        }
        self.prompt = Some(prompt.to_string());
        if let Some(epi) = &self.episodic {
            let emb = self.weights.prompt_embedding(prompt);
            self.prompt_keys = Some(PromptKeys {
                per_slot: epi.slots().iter().map(|&h| self.weights.prompt_key(&emb, h)).collect(),
            });
        }
    }

    /// Writes a generated block into the caches and runs episodic admission
    /// when the update interval comes round.
    pub fn commit(&mut self, block: &LatentBlock, prompt: &str) -> Result<StepReport> {
        if block.block_index != self.next_block {
            return Err(Error::Sequencing {
                expected: self.next_block,
                got: block.block_index,
            });
        }
        self.refresh_prompt(prompt);
        let cfg = *self.weights.config();
        let i = block.block_index;

        if self.episodic.is_some() {
            let first = cfg.frame_index(i, 0);
            self.frame_latents.insert(first, block.frames[0].mean_rows());
        }
        let mut exited: BTreeMap<usize, Vec<(HeadId, FrameKV)>> = BTreeMap::new();
        for (cache, rec) in self.caches.iter_mut().zip(&block.heads) {
            for fr in cache.roll_after_block(i, rec.current.clone())? {
                exited.entry(fr.global_frame_index).or_default().push((rec.head, fr));
            }
        }
        if let Some(epi) = &self.episodic {
            for (frame, mut per_head) in exited {
                per_head.sort_by_key(|(h, _)| *h);
                if per_head.len() != epi.slots().len() {
                    return Err(Error::Invariant(format!(
                        "frame {frame} left {} of {} memory heads",
                        per_head.len(),
                        epi.slots().len()
                    )));
                }
                let cand = Candidate {
                    block_index: i,
                    frame_index: frame,
                    per_slot: per_head.into_iter().map(|(_, f)| f).collect(),
                    latent: self.frame_latents.remove(&frame),
                };
                if !self.params.evaluate_all_exited {
                    self.pending.clear();
                }
                self.pending.push(cand);
            }
        }

        let mut admissions = Vec::new();
        if let Some(epi) = self.episodic.as_mut() {
            if i.is_multiple_of(self.params.update_interval) {
                let keys = self.prompt_keys.as_ref().expect("set by refresh_prompt");
                for mut cand in self.pending.drain(..) {
                    cand.block_index = i;
                    admissions.push(try_admit(epi, cand, self.params.tau_novel, keys)?);
                }
            }
        }

        let hashes_ok = self.episodic.as_ref().is_none_or(|e| {
            let h = e.slot_hashes();
            h.windows(2).all(|w| w[0] == w[1])
        });
        self.next_block += 1;
        Ok(StepReport {
            block_index: i,
            admissions,
            frame_slots_live: block.heads.iter().map(|h| h.frame_count()).sum(),
            stored_scalar_count: block.heads.iter().map(|h| h.attended_scalars).sum(),
            episodic_len: self.episodic.as_ref().map_or(0, |e| e.len()),
            slot_hashes_consistent: hashes_ok,
        })
    }

    /// `forward` then `commit`.
    pub fn step(&mut self, input: &BlockInput, prompt: &str) -> Result<(LatentBlock, StepReport)> {
        let block = self.forward(input, None)?;
        let report = self.commit(&block, prompt)?;
        Ok((block, report))
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        let cfg = self.weights.config();
        let heads = cfg
            .head_ids()
            .map(|id| {
                let hist = self.history(id);
                HeadSnapshot {
                    layer: id.layer,
                    head: id.head,
                    frames: hist.iter().map(|f| f.global_frame_index).collect(),
                    summary: hist.iter().map(|f| f.is_summary).collect(),
                    fast_frames: self.cache(id).fast_frames(),
                }
            })
            .collect();
        CacheSnapshot {
            next_block: self.next_block,
            heads,
            episodic: self.episodic.as_ref().map(|e| e.entries().to_vec()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadSnapshot {
    pub layer: usize,
    pub head: usize,
    /// Global frame index of each history frame in assembly order.
    pub frames: Vec<usize>,
    pub summary: Vec<bool>,
    pub fast_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheSnapshot {
    pub next_block: usize,
    pub heads: Vec<HeadSnapshot>,
    pub episodic: Vec<EntryMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub start_block: usize,
    pub prompt: String,
}

/// Piecewise-constant prompt over blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptSchedule {
    pub segments: Vec<PromptSegment>,
}

impl PromptSchedule {
    pub fn constant(prompt: &str) -> Self {
        Self {
            segments: vec![PromptSegment {
                start_block: 1,
                prompt: prompt.into(),
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.segments.first() {
            Some(s) if s.start_block == 1 => {}
            _ => return Err(Error::Config("prompt schedule must start at block 1".into())),
        }
        if self.segments.windows(2).any(|w| w[0].start_block >= w[1].start_block) {
            return Err(Error::Config("prompt segments must have increasing start blocks".into()));
        }
        Ok(())
    }

    pub fn active(&self, block: usize) -> &str {
        self.segments
            .iter()
            .rev()
            .find(|s| s.start_block <= block)
            .map(|s| s.prompt.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub block_index: usize,
    pub prompt: String,
    pub report: StepReport,
    pub wall_time_ms: f64,
    /// Final hidden state per frame.
    pub frames: Vec<TokenMatrix>,
    /// Full per-head record, kept when requested.
    pub latent: Option<LatentBlock>,
}

#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub strategy: String,
    pub steps: Vec<StepRecord>,
    pub final_state: CacheSnapshot,
}

impl RolloutRecord {
    pub fn admissions(&self) -> impl Iterator<Item = &AdmissionRecord> {
        self.steps.iter().flat_map(|s| s.report.admissions.iter())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutOptions {
    pub keep_latents: bool,
    pub mode: Parallelism,
}

pub fn generate_rollout(
    weights: &ModelWeights,
    strategy: Strategy,
    params: MemoryParams,
    prompts: &PromptSchedule,
    inputs: &InputSchedule,
    n_blocks: usize,
    opts: RolloutOptions,
) -> Result<RolloutRecord> {
    prompts.validate()?;
    let name = strategy.name();
    let mut rollout = Rollout::new(weights, strategy, params, opts.mode)?;
    let mut steps = Vec::with_capacity(n_blocks);
    for block in 1..=n_blocks {
        let prompt = prompts.active(block).to_string();
        let input = weights.block_input(&prompt, block, 0, inputs);
        let start = Instant::now();
        let (latent, report) = rollout.step(&input, &prompt)?;
        let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        steps.push(StepRecord {
            block_index: block,
            prompt,
            report,
            wall_time_ms,
            frames: latent.frames.clone(),
            latent: opts.keep_latents.then_some(latent),
        });
    }
    Ok(RolloutRecord {
        strategy: name,
        steps,
        final_state: rollout.snapshot(),
    })
}
