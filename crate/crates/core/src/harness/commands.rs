//! The four experiment commands, as in-memory runs plus file writers.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::Serialize;

use crate::episodic::AdmissionRecord;
use crate::error::{Error, Result};
use crate::headcache::{budget_table, BudgetRow, RoleCounts};
use crate::model::{init_model, sub_rng, ModelWeights};
use crate::oracle::fidelity;
use crate::par::Parallelism;
use crate::profiler::{
    classify_heads, core_stability_ratio, disjoint_anchor_reports, profile_measurements, role_counts, HeadRole,
    HeadRoleMap, Measurement, ProfilePlan, ProfileReport, StabilityReport,
};
use crate::rollout::{generate_rollout, CacheSnapshot, RolloutOptions, RolloutRecord, Strategy};

use super::config::{ExperimentConfig, StabilityMode, StrategyConfig};

pub const BUCKET_HEADER: &[&str] = &["layer", "head", "p_sink", "p_middle", "p_current", "role"];
pub const METRICS_HEADER: &[&str] = &[
    "block_index",
    "fidelity",
    "stored_scalar_count",
    "frame_slots_live",
    "wall_time_ms",
    "active_prompt",
];
pub const ADMISSION_HEADER: &[&str] = &["block_index", "delta", "admitted", "compressed"];
pub const BUDGET_HEADER: &[&str] = &["method", "cache_per_head", "frame_slots", "relative_budget"];
pub const STABILITY_HEADER: &[&str] = &["role", "s_c"];

/// Blocks past which the fidelity reference is only run on request.
pub const ORACLE_DEFAULT_LIMIT: usize = 64;

pub fn build_weights(cfg: &ExperimentConfig) -> Result<ModelWeights> {
    init_model(cfg.model)?.with_rope(cfg.rope())
}

pub fn profile_plan(cfg: &ExperimentConfig) -> Result<ProfilePlan> {
    let p = &cfg.profile;
    let prompts = if p.prompts.is_empty() {
        cfg.prompt_schedule.segments.iter().map(|s| s.prompt.clone()).collect()
    } else {
        p.prompts.clone()
    };
    let sampled_blocks = match &p.sampled_blocks {
        Some(b) => b.clone(),
        None => {
            if p.blocks < 3 || p.samples == 0 || p.samples > p.blocks - 2 {
                return Err(Error::Config(format!(
                    "cannot sample {} blocks from 3..={}",
                    p.samples, p.blocks
                )));
            }
            let mut rng = sub_rng(cfg.model.seed, "profile-blocks", &[]);
            let mut b: Vec<usize> = sample(&mut rng, p.blocks - 2, p.samples).into_iter().map(|i| i + 3).collect();
            b.sort_unstable();
            b
        }
    };
    if sampled_blocks.iter().any(|&b| b < 3) {
        return Err(Error::Config("sampled blocks must be >= 3".into()));
    }
    if p.window < cfg.model.frames_per_block {
        return Err(Error::Config("profiling window is smaller than a block".into()));
    }
    Ok(ProfilePlan {
        prompts,
        sampled_blocks,
        repeats: p.repeats,
        window: p.window,
        inputs: cfg.inputs,
    })
}

pub struct ProfileOutcome {
    pub report: ProfileReport,
    pub role_map: HeadRoleMap,
}

pub fn run_profile(cfg: &ExperimentConfig, mode: Parallelism) -> Result<ProfileOutcome> {
    let weights = build_weights(cfg)?;
    let plan = profile_plan(cfg)?;
    let ms = profile_measurements(&weights, &plan, mode)?;
    let report = ProfileReport::aggregate(cfg.model.layers, cfg.model.heads, &ms.iter().collect::<Vec<_>>())?;
    let h = &cfg.hyperparameters;
    let role_map = classify_heads(&report, h.alpha_anchor, h.tau_local)?;
    Ok(ProfileOutcome { report, role_map })
}

#[derive(Debug, Serialize)]
struct BucketRow {
    layer: usize,
    head: usize,
    p_sink: f64,
    p_middle: f64,
    p_current: f64,
    role: HeadRole,
}

pub fn cmd_profile(cfg: &ExperimentConfig, out: &Path, mode: Parallelism) -> Result<ProfileOutcome> {
    let outcome = run_profile(cfg, mode)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("role_map.json"), outcome.role_map.to_json())?;
    let rows = outcome.role_map.head_ids().map(|id| {
        let p = outcome.report.get(id);
        BucketRow {
            layer: id.layer,
            head: id.head,
            p_sink: p.p_sink,
            p_middle: p.p_middle,
            p_current: p.p_current,
            role: outcome.role_map.role(id),
        }
    });
    write_csv(&out.join("bucket_proportions.csv"), BUCKET_HEADER, rows)?;
    Ok(outcome)
}

pub fn strategy_for(cfg: &ExperimentConfig) -> Result<Strategy> {
    Ok(match cfg.strategy {
        StrategyConfig::Unbounded => Strategy::Unbounded,
        StrategyConfig::UniformWindow { window } => Strategy::UniformWindow { window },
        StrategyConfig::SinkWindow { window, n_sink } => Strategy::SinkWindow { window, n_sink },
        StrategyConfig::HeadWise => {
            let path = cfg
                .head_role_map
                .as_ref()
                .ok_or_else(|| Error::Config("head_wise strategy needs head_role_map".into()))?;
            let map = HeadRoleMap::load(path)
                .map_err(|e| Error::Config(format!("cannot load role map {}: {e}", path.display())))?;
            Strategy::HeadWise(map)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub block_index: usize,
    /// Empty when the reference was not run.
    pub fidelity: Option<f64>,
    pub stored_scalar_count: usize,
    pub frame_slots_live: usize,
    pub wall_time_ms: f64,
    pub active_prompt: String,
}

#[derive(Debug, Serialize)]
pub struct FinalState<'a> {
    pub strategy: &'a str,
    pub n_blocks: usize,
    pub admissions: usize,
    pub state: &'a CacheSnapshot,
}

pub struct GenerateOutcome {
    pub record: RolloutRecord,
    pub metrics: Vec<MetricsRow>,
}

impl GenerateOutcome {
    pub fn admissions(&self) -> Vec<AdmissionRecord> {
        self.record.admissions().copied().collect()
    }
}

/// Runs the configured strategy. Fidelity is measured against an unbounded
/// rollout on the same inputs when `with_oracle` is set or the run is short.
pub fn run_generate(cfg: &ExperimentConfig, with_oracle: bool, opts: RolloutOptions) -> Result<GenerateOutcome> {
    let weights = build_weights(cfg)?;
    let strategy = strategy_for(cfg)?;
    let params = cfg.hyperparameters.memory;
    let record = generate_rollout(&weights, strategy, params, &cfg.prompt_schedule, &cfg.inputs, cfg.n_blocks, opts)?;
    let reference = if with_oracle || cfg.n_blocks <= ORACLE_DEFAULT_LIMIT {
        let unbounded = generate_rollout(
            &weights,
            Strategy::Unbounded,
            params,
            &cfg.prompt_schedule,
            &cfg.inputs,
            cfg.n_blocks,
            RolloutOptions {
                keep_latents: false,
                mode: opts.mode,
            },
        )?;
        Some(unbounded)
    } else {
        None
    };
    let metrics = record
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let fid = match &reference {
                Some(r) => Some(fidelity(&s.frames, &r.steps[i].frames)?),
                None => None,
            };
            Ok(MetricsRow {
                block_index: s.block_index,
                fidelity: fid,
                stored_scalar_count: s.report.stored_scalar_count,
                frame_slots_live: s.report.frame_slots_live,
                wall_time_ms: s.wall_time_ms,
                active_prompt: s.prompt.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GenerateOutcome { record, metrics })
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, with_oracle: bool, mode: Parallelism) -> Result<GenerateOutcome> {
    let outcome = run_generate(
        cfg,
        with_oracle,
        RolloutOptions {
            keep_latents: false,
            mode,
        },
    )?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("metrics.csv"), METRICS_HEADER, outcome.metrics.iter())?;
    write_csv(&out.join("admission_log.csv"), ADMISSION_HEADER, outcome.record.admissions())?;
    let state = FinalState {
        strategy: &outcome.record.strategy,
        n_blocks: cfg.n_blocks,
        admissions: outcome.record.admissions().filter(|a| a.admitted).count(),
        state: &outcome.record.final_state,
    };
    fs::write(out.join("final_state.json"), serde_json::to_string_pretty(&state)? + "\n")?;
    Ok(outcome)
}

/// Role counts from, in order: explicit counts, the role map, thresholds.
pub fn budget_counts(cfg: &ExperimentConfig) -> Result<RoleCounts> {
    if let Some(c) = cfg.budget.counts {
        return Ok(c);
    }
    if let Some(path) = &cfg.head_role_map {
        if path.exists() {
            return Ok(RoleCounts::from_map(&HeadRoleMap::load(path)?));
        }
    }
    let h = &cfg.hyperparameters;
    let (anchor, local, memory) = role_counts(cfg.model.head_count(), h.alpha_anchor, h.tau_local)?;
    Ok(RoleCounts { local, anchor, memory })
}

pub fn run_budget(cfg: &ExperimentConfig) -> Result<Vec<BudgetRow>> {
    let counts = budget_counts(cfg)?;
    let m = &cfg.hyperparameters.memory;
    Ok(budget_table(counts, m.b_epi, m.b_fast, cfg.model.frames_per_block, &cfg.budget.baselines))
}

pub fn cmd_budget(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<BudgetRow>> {
    let rows = run_budget(cfg)?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("budget.csv"), BUDGET_HEADER, rows.iter())?;
    Ok(rows)
}

pub struct StabilityOutcome {
    pub maps: Vec<HeadRoleMap>,
    pub report: StabilityReport,
}

pub fn run_stability(cfg: &ExperimentConfig, mode: Parallelism) -> Result<StabilityOutcome> {
    let st = &cfg.stability;
    if st.runs < 2 {
        return Err(Error::Config("stability needs at least 2 runs".into()));
    }
    let h = &cfg.hyperparameters;
    let (layers, heads) = (cfg.model.layers, cfg.model.heads);
    let reports: Vec<ProfileReport> = match st.mode {
        StabilityMode::DisjointAnchors => disjoint_anchor_reports(layers, heads, st.runs, h.alpha_anchor),
        StabilityMode::Identical | StabilityMode::Varied => {
            let weights = build_weights(cfg)?;
            let plan = profile_plan(cfg)?;
            let ms = profile_measurements(&weights, &plan, mode)?;
            let conditions: Vec<Vec<&Measurement>> = if st.mode == StabilityMode::Identical {
                vec![ms.iter().collect(); st.runs]
            } else {
                crate::profiler::stability_conditions(&ms, st.axis, st.runs)?
            };
            conditions
                .iter()
                .map(|c| ProfileReport::aggregate(layers, heads, c))
                .collect::<Result<_>>()?
        }
    };
    let maps = reports
        .iter()
        .map(|r| classify_heads(r, h.alpha_anchor, h.tau_local))
        .collect::<Result<Vec<_>>>()?;
    let report = core_stability_ratio(&maps)?;
    Ok(StabilityOutcome { maps, report })
}

#[derive(Debug, Serialize)]
struct StabilityRow {
    role: &'static str,
    s_c: f64,
}

pub fn cmd_stability(cfg: &ExperimentConfig, out: &Path, mode: Parallelism) -> Result<StabilityOutcome> {
    let outcome = run_stability(cfg, mode)?;
    fs::create_dir_all(out)?;
    for (k, m) in outcome.maps.iter().enumerate() {
        fs::write(out.join(format!("run_{k}_role_map.json")), m.to_json())?;
    }
    let r = &outcome.report;
    let rows = [
        StabilityRow {
            role: "anchor",
            s_c: r.s_anchor,
        },
        StabilityRow {
            role: "local",
            s_c: r.s_local,
        },
        StabilityRow {
            role: "memory",
            s_c: r.s_memory,
        },
        StabilityRow {
            role: "average",
            s_c: r.s_avg,
        },
    ];
    write_csv(&out.join("stability.csv"), STABILITY_HEADER, rows.iter())?;
    Ok(outcome)
}

/// Writes `header` then one record per row, so empty tables keep a header.
fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(header).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
