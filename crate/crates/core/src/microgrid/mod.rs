mod config;
mod mpc;
mod profiles;
pub mod report;

pub use config::MicrogridConfig;
pub use mpc::{
    audit_closed_loop, build_mpc_step, compute_kpis, first_move, run_closed_loop, solve_mpc_step,
    stage_costs, step_plant, ClosedLoopResult, FirstMove, Kpis, MpcLayout, MpcOptions, MpcProgram,
    PlantState, StageCosts, StepRecord, AUDIT_TOL,
};
pub use profiles::{generate_profiles, ProfileShape, Profiles};
