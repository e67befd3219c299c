//! Attention-head profiling: bucket proportions, role classification and
//! cross-run stability of the resulting partition.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputSchedule, ModelWeights};
use crate::par::{self, Parallelism};
use crate::rollout::{MemoryParams, Rollout, Strategy};
use crate::tensor::TokenMatrix;

/// `(layer, head)` coordinate; orders layer-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadRole {
    Local,
    Anchor,
    Memory,
}

impl HeadRole {
    pub const ALL: [HeadRole; 3] = [HeadRole::Anchor, HeadRole::Local, HeadRole::Memory];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadRole::Local => "local",
            HeadRole::Anchor => "anchor",
            HeadRole::Memory => "memory",
        }
    }
}

/// Attention mass split over the sink, middle and current buckets.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketProportions {
    pub p_sink: f64,
    pub p_middle: f64,
    pub p_current: f64,
}

impl BucketProportions {
    pub fn total(&self) -> f64 {
        self.p_sink + self.p_middle + self.p_current
    }
}

/// Bucket proportions of a full-history attention map `A ∈ R^{3s × 3is}`.
pub fn bucket_proportions(a: &TokenMatrix, s: usize, block: usize) -> Result<BucketProportions> {
    if block < 2 {
        return Err(Error::Precondition(format!(
            "block {block} has no middle bucket; profiling needs block >= 2"
        )));
    }
    bucket_proportions_framed(a, s, 3, 3 * block)
}

/// Bucket proportions over an attention context of `context_frames` frames
/// whose last `f` frames are the current block: sink is frame 0, middle is
/// everything between.
pub fn bucket_proportions_framed(
    a: &TokenMatrix,
    s: usize,
    f: usize,
    context_frames: usize,
) -> Result<BucketProportions> {
    if context_frames < f + 2 {
        return Err(Error::Precondition(format!(
            "{context_frames} context frames leave no middle bucket"
        )));
    }
    if a.cols() != context_frames * s || a.rows() == 0 {
        return Err(Error::Shape(format!(
            "attention map {}x{} for {context_frames} frames of {s} tokens",
            a.rows(),
            a.cols()
        )));
    }
    let current_start = (context_frames - f) * s;
    let (mut sink, mut middle, mut current) = (0.0, 0.0, 0.0);
    for r in 0..a.rows() {
        let row = a.row(r);
        sink += row[..s].iter().sum::<f64>();
        middle += row[s..current_start].iter().sum::<f64>();
        current += row[current_start..].iter().sum::<f64>();
    }
    let n = a.rows() as f64;
    Ok(BucketProportions {
        p_sink: sink / n,
        p_middle: middle / n,
        p_current: current / n,
    })
}

/// One profiling observation: every head's proportions at one
/// (prompt, block, repeat) coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub prompt: usize,
    pub block: usize,
    pub repeat: usize,
    pub heads: Vec<BucketProportions>,
}

/// Sample counts along each aggregation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub blocks: usize,
    pub repeats: usize,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub layers: usize,
    pub heads: usize,
    pub mean: Vec<BucketProportions>,
    pub samples: SampleCounts,
}

impl ProfileReport {
    /// Arithmetic mean over the given measurements.
    pub fn aggregate(layers: usize, heads: usize, ms: &[&Measurement]) -> Result<Self> {
        if ms.is_empty() {
            return Err(Error::Precondition("no measurements to aggregate".into()));
        }
        let n_heads = layers * heads;
        let mut mean = vec![BucketProportions::default(); n_heads];
        for m in ms {
            if m.heads.len() != n_heads {
                return Err(Error::Config("measurement head grid mismatch".into()));
            }
            for (acc, p) in mean.iter_mut().zip(&m.heads) {
                acc.p_sink += p.p_sink;
                acc.p_middle += p.p_middle;
                acc.p_current += p.p_current;
            }
        }
        let k = ms.len() as f64;
        for acc in &mut mean {
            acc.p_sink /= k;
            acc.p_middle /= k;
            acc.p_current /= k;
        }
        let distinct = |f: fn(&Measurement) -> usize| ms.iter().map(|m| f(m)).collect::<BTreeSet<_>>().len();
        Ok(Self {
            layers,
            heads,
            mean,
            samples: SampleCounts {
                blocks: distinct(|m| m.block),
                repeats: distinct(|m| m.repeat),
                prompts: distinct(|m| m.prompt),
            },
        })
    }

    pub fn get(&self, id: HeadId) -> BucketProportions {
        self.mean[id.layer * self.heads + id.head]
    }
}

/// Serializable head partition.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRoleMap {
    pub layers: usize,
    pub heads: usize,
    pub alpha_anchor: f64,
    pub tau_local: f64,
    roles: Vec<HeadRole>,
    pub provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RoleEntry {
    layer: usize,
    head: usize,
    role: HeadRole,
}

#[derive(Serialize, Deserialize)]
struct RoleMapFile {
    alpha_anchor: f64,
    tau_local: f64,
    roles: Vec<RoleEntry>,
}

impl HeadRoleMap {
    pub fn from_roles(
        layers: usize,
        heads: usize,
        alpha_anchor: f64,
        tau_local: f64,
        roles: Vec<HeadRole>,
    ) -> Result<Self> {
        if roles.len() != layers * heads {
            return Err(Error::Config(format!(
                "{} roles for a {layers}x{heads} grid",
                roles.len()
            )));
        }
        Ok(Self {
            layers,
            heads,
            alpha_anchor,
            tau_local,
            roles,
            provenance: None,
        })
    }

    pub fn role(&self, id: HeadId) -> HeadRole {
        self.roles[id.layer * self.heads + id.head]
    }

    pub fn roles(&self) -> &[HeadRole] {
        &self.roles
    }

    pub fn head_ids(&self) -> impl Iterator<Item = HeadId> + '_ {
        let h = self.heads;
        (0..self.roles.len()).map(move |i| HeadId::new(i / h, i % h))
    }

    pub fn heads_with(&self, role: HeadRole) -> BTreeSet<HeadId> {
        self.head_ids().filter(|&id| self.role(id) == role).collect()
    }

    pub fn count(&self, role: HeadRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn to_json(&self) -> String {
        let file = RoleMapFile {
            alpha_anchor: self.alpha_anchor,
            tau_local: self.tau_local,
            roles: self
                .head_ids()
                .map(|id| RoleEntry {
                    layer: id.layer,
                    head: id.head,
                    role: self.role(id),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("role map serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RoleMapFile = serde_json::from_str(text)?;
        let layers = file.roles.iter().map(|e| e.layer + 1).max().unwrap_or(0);
        let heads = file.roles.iter().map(|e| e.head + 1).max().unwrap_or(0);
        if layers == 0 || file.roles.len() != layers * heads {
            return Err(Error::Config("role map does not cover a full grid".into()));
        }
        let mut roles = vec![None; layers * heads];
        for e in &file.roles {
            let slot = &mut roles[e.layer * heads + e.head];
            if slot.is_some() {
                return Err(Error::Config(format!("duplicate role for L{}H{}", e.layer, e.head)));
            }
            *slot = Some(e.role);
        }
        let roles = roles.into_iter().map(|r| r.expect("grid fully covered")).collect();
        Self::from_roles(layers, heads, file.alpha_anchor, file.tau_local, roles)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read role map {}: {e}", path.display())))?;
        let mut map = Self::from_json(&text)?;
        map.provenance = Some(path.display().to_string());
        Ok(map)
    }
}

/// `round(fraction · total)` with halves rounded up.
pub fn round_half_up(fraction: f64, total: usize) -> usize {
    // 1e-9 guards products like 0.2 · 360 that land a hair below the integer
    (fraction * total as f64 + 0.5 + 1e-9).floor() as usize
}

/// Role counts `(anchor, local, memory)` implied by the thresholds.
pub fn role_counts(total: usize, alpha_anchor: f64, tau_local: f64) -> Result<(usize, usize, usize)> {
    check_thresholds(alpha_anchor, tau_local)?;
    let anchor = round_half_up(alpha_anchor, total);
    let local = round_half_up(tau_local, total);
    if anchor + local > total {
        return Err(Error::Config("thresholds exceed the head count".into()));
    }
    Ok((anchor, local, total - anchor - local))
}

fn check_thresholds(alpha_anchor: f64, tau_local: f64) -> Result<()> {
    if !(alpha_anchor > 0.0 && tau_local > 0.0) {
        return Err(Error::Config("alpha_anchor and tau_local must be positive".into()));
    }
    if alpha_anchor + tau_local >= 1.0 {
        return Err(Error::Config(format!(
            "alpha_anchor + tau_local = {} must stay below 1",
            alpha_anchor + tau_local
        )));
    }
    Ok(())
}

/// Anchors are the top heads by `p_sink`; local heads the top heads by
/// `p_current` among the rest; the remainder are memory heads. Ties go to
/// the smaller `(layer, head)`.
pub fn classify_heads(report: &ProfileReport, alpha_anchor: f64, tau_local: f64) -> Result<HeadRoleMap> {
    let total = report.layers * report.heads;
    let (n_anchor, n_local, _) = role_counts(total, alpha_anchor, tau_local)?;

    let mut by_sink: Vec<usize> = (0..total).collect();
    by_sink.sort_by(|&a, &b| report.mean[b].p_sink.total_cmp(&report.mean[a].p_sink).then(a.cmp(&b)));
    let mut roles = vec![HeadRole::Memory; total];
    for &i in &by_sink[..n_anchor] {
        roles[i] = HeadRole::Anchor;
    }

    let mut by_current: Vec<usize> = (0..total).filter(|&i| roles[i] != HeadRole::Anchor).collect();
    by_current.sort_by(|&a, &b| {
        report.mean[b]
            .p_current
            .total_cmp(&report.mean[a].p_current)
            .then(a.cmp(&b))
    });
    for &i in &by_current[..n_local] {
        roles[i] = HeadRole::Local;
    }
    HeadRoleMap::from_roles(report.layers, report.heads, alpha_anchor, tau_local, roles)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub s_anchor: f64,
    pub s_local: f64,
    pub s_memory: f64,
    pub s_avg: f64,
    pub runs: usize,
}

impl StabilityReport {
    pub fn get(&self, role: HeadRole) -> f64 {
        match role {
            HeadRole::Anchor => self.s_anchor,
            HeadRole::Local => self.s_local,
            HeadRole::Memory => self.s_memory,
        }
    }
}

/// Core stability ratio: per role, the size of the intersection across runs
/// over the mean set size.
pub fn core_stability_ratio(runs: &[HeadRoleMap]) -> Result<StabilityReport> {
    if runs.len() < 2 {
        return Err(Error::Precondition("stability needs at least two runs".into()));
    }
    let (l, h) = (runs[0].layers, runs[0].heads);
    if runs.iter().any(|r| r.layers != l || r.heads != h) {
        return Err(Error::Config("role maps cover different head grids".into()));
    }
    let m = runs.len() as f64;
    let ratio = |role: HeadRole| {
        let total: usize = runs.iter().map(|r| r.count(role)).sum();
        if total == 0 {
            return 1.0;
        }
        let core = (0..l * h)
            .filter(|&i| runs.iter().all(|r| r.roles[i] == role))
            .count();
        core as f64 / (total as f64 / m)
    };
    let (s_anchor, s_local, s_memory) = (ratio(HeadRole::Anchor), ratio(HeadRole::Local), ratio(HeadRole::Memory));
    Ok(StabilityReport {
        s_anchor,
        s_local,
        s_memory,
        s_avg: (s_anchor + s_local + s_memory) / 3.0,
        runs: runs.len(),
    })
}

/// What a profiling pass observes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePlan {
    pub prompts: Vec<String>,
    pub sampled_blocks: Vec<usize>,
    pub repeats: usize,
    /// Sliding window in frames (current block included); one sink frame is
    /// kept on top of it.
    pub window: usize,
    pub inputs: InputSchedule,
}

/// Runs one sink-plus-window rollout per prompt and records every head's
/// bucket proportions at each sampled block and repeat. Repeat 0 is the
/// committed pass; later repeats use perturbed inputs and are discarded.
pub fn profile_measurements(
    weights: &ModelWeights,
    plan: &ProfilePlan,
    mode: Parallelism,
) -> Result<Vec<Measurement>> {
    if plan.sampled_blocks.iter().any(|&b| b < 3) {
        return Err(Error::Precondition("sampled blocks must be >= 3".into()));
    }
    if plan.prompts.is_empty() || plan.sampled_blocks.is_empty() || plan.repeats == 0 {
        return Err(Error::Precondition("profiling plan is empty".into()));
    }
    let last = *plan.sampled_blocks.iter().max().expect("non-empty");
    let cfg = weights.config();
    let per_prompt = par::map_range(mode, plan.prompts.len(), |p| -> Result<Vec<Measurement>> {
        let prompt = &plan.prompts[p];
        let strategy = Strategy::SinkWindow {
            window: plan.window,
            n_sink: 1,
        };
        let mut rollout = Rollout::new(weights, strategy, MemoryParams::default(), Parallelism::Sequential)?;
        let mut out = Vec::new();
        for block in 1..=last {
            let sampled = plan.sampled_blocks.contains(&block);
            let repeats = if sampled { plan.repeats } else { 1 };
            for repeat in (0..repeats).rev() {
                let input = weights.block_input(prompt, block, repeat, &plan.inputs);
                let mut heads = vec![BucketProportions::default(); cfg.layers * cfg.heads];
                let mut err = None;
                let mut probe = |id: HeadId, w: &TokenMatrix, frames: usize| {
                    match bucket_proportions_framed(w, cfg.tokens_per_frame, cfg.frames_per_block, frames) {
                        Ok(p) => heads[id.layer * cfg.heads + id.head] = p,
                        Err(e) => err = Some(e),
                    }
                };
                let probe_ref: Option<&mut dyn FnMut(HeadId, &TokenMatrix, usize)> =
                    if sampled { Some(&mut probe) } else { None };
                let latent = rollout.forward(&input, probe_ref)?;
                if let Some(e) = err {
                    return Err(e);
                }
                if sampled {
                    out.push(Measurement {
                        prompt: p,
                        block,
                        repeat,
                        heads,
                    });
                }
                if repeat == 0 {
                    rollout.commit(&latent, prompt)?;
                }
            }
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for r in per_prompt {
        all.extend(r?);
    }
    all.sort_by_key(|m| (m.prompt, m.block, m.repeat));
    Ok(all)
}

/// Mean bucket proportions over blocks × repeats × prompts.
pub fn profile_rollout(weights: &ModelWeights, plan: &ProfilePlan, mode: Parallelism) -> Result<ProfileReport> {
    let ms = profile_measurements(weights, plan, mode)?;
    let cfg = weights.config();
    ProfileReport::aggregate(cfg.layers, cfg.heads, &ms.iter().collect::<Vec<_>>())
}

/// Which profiling coordinate varies between stability runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityAxis {
    Prompts,
    Blocks,
    Repeats,
}

/// Splits measurements into `m` conditions along `axis`: condition `k` keeps
/// only the `k`-th distinct value of that coordinate and pools over the
/// other two.
pub fn stability_conditions(
    ms: &[Measurement],
    axis: StabilityAxis,
    m: usize,
) -> Result<Vec<Vec<&Measurement>>> {
    let key = |x: &Measurement| match axis {
        StabilityAxis::Prompts => x.prompt,
        StabilityAxis::Blocks => x.block,
        StabilityAxis::Repeats => x.repeat,
    };
    let axis_values: Vec<usize> = ms.iter().map(key).collect::<BTreeSet<_>>().into_iter().collect();
    if axis_values.len() < m {
        return Err(Error::Config(format!(
            "stability along {axis:?} needs {m} distinct values, profiling produced {}",
            axis_values.len()
        )));
    }
    Ok(axis_values[..m]
        .iter()
        .map(|&v| ms.iter().filter(|x| key(x) == v).collect())
        .collect())
}

/// Synthetic reports whose anchor sets are pairwise disjoint across runs.
pub fn disjoint_anchor_reports(layers: usize, heads: usize, runs: usize, alpha_anchor: f64) -> Vec<ProfileReport> {
    let total = layers * heads;
    let n_anchor = round_half_up(alpha_anchor, total);
    (0..runs)
        .map(|r| {
            let start = (r * n_anchor) % total;
            let mean = (0..total)
                .map(|i| {
                    let rel = (i + total - start) % total;
                    let p_sink = if rel < n_anchor { 0.5 } else { 0.05 };
                    let p_current = 0.2 + 0.5 * (i as f64 / total as f64);
                    BucketProportions {
                        p_sink,
                        p_current,
                        p_middle: 1.0 - p_sink - p_current,
                    }
                })
                .collect();
            ProfileReport {
                layers,
                heads,
                mean,
                samples: SampleCounts {
                    blocks: 1,
                    repeats: 1,
                    prompts: 1,
                },
            }
        })
        .collect()
}
