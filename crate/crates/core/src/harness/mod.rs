//! Experiment layer behind the `headwise` CLI.
//!
//! Output files, all written under the chosen output directory:
//!
//! | command   | files |
//! |-----------|-------|
//! | profile   | `role_map.json`, `bucket_proportions.csv` (layer, head, p_sink, p_middle, p_current, role) |
//! | generate  | `metrics.csv` (block_index, fidelity, stored_scalar_count, frame_slots_live, wall_time_ms, active_prompt), `admission_log.csv` (block_index, delta, admitted, compressed), `final_state.json` |
//! | budget    | `budget.csv` (method, cache_per_head, frame_slots, relative_budget) |
//! | stability | `stability.csv` (role, s_c), `run_<k>_role_map.json` per run |

pub mod commands;
pub mod config;

pub use commands::{cmd_budget, cmd_generate, cmd_profile, cmd_stability};
pub use config::ExperimentConfig;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io(_) => EXIT_CONFIG,
        _ => EXIT_INVARIANT,
    }
}
