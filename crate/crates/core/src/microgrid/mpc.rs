use std::time::Instant;

use crate::error::{MicrogridError, OpfError};
use crate::grid::Grid;
use crate::opf::{
    add_flow_block, flows_for_phi, project_onto_circle, thetas, FlowVars, OpfVariant, VariantTag,
    PROJECTION_TOL,
};
use crate::opt::{
    solve_mixed_binary, ConicProgram, MixedBinaryOptions, MixedBinaryProgram, SolveStatus, Strategy,
};

use super::{MicrogridConfig, Profiles};

/// Slack on hard bounds when replaying recorded steps.
pub const AUDIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: Vec<f64>,
    pub delta_prev: Vec<bool>,
    pub k: usize,
}

impl PlantState {
    pub fn initial(cfg: &MicrogridConfig) -> Self {
        Self {
            x: cfg.x0.clone(),
            delta_prev: cfg.delta_init.clone(),
            k: 0,
        }
    }
}

/// Variable indices of one MPC program, `[h][unit]`.
#[derive(Debug, Clone)]
pub struct MpcLayout {
    pub delta: Vec<Vec<usize>>,
    pub sigma: Vec<Vec<usize>>,
    pub p_t: Vec<Vec<usize>>,
    pub p_plus: Vec<Vec<usize>>,
    pub p_minus: Vec<Vec<usize>>,
    pub p_r: Vec<Vec<usize>>,
    /// Stored energy after step `h`, i.e. `x(k+h+1|k)`.
    pub x_next: Vec<Vec<usize>>,
    pub flows: Vec<FlowVars>,
}

#[derive(Debug, Clone)]
pub struct MpcProgram {
    pub program: MixedBinaryProgram,
    pub layout: MpcLayout,
}

fn soft_excess(cfg: &MicrogridConfig, x: &[f64]) -> f64 {
    (0..x.len())
        .map(|j| {
            cfg.c5[j] * ((cfg.x_soft_min[j] - x[j]).max(0.0) + (x[j] - cfg.x_soft_max[j]).max(0.0))
        })
        .sum()
}

/// Receding-horizon program for the state at step `k` and a forecast window
/// of at least `horizon` rows.
pub fn build_mpc_step(
    cfg: &MicrogridConfig,
    grid: &Grid,
    variant: &OpfVariant,
    state: &PlantState,
    window: &Profiles,
) -> Result<MpcProgram, MicrogridError> {
    let hz = cfg.horizon;
    if window.len() < hz {
        return Err(MicrogridError::ForecastTooShort {
            needed: hz,
            got: window.len(),
        });
    }
    let (nt, ns, nr, nd) = (
        cfg.generators(),
        cfg.storages(),
        cfg.renewables(),
        cfg.loads(),
    );
    for (what, expected, got) in [
        ("renewable forecast", nr, window.renewables()),
        ("demand forecast", nd, window.loads()),
        ("stored energy", ns, state.x.len()),
        ("previous commitment", nt, state.delta_prev.len()),
        ("line limits", 2 * grid.edge_count(), cfg.p_e_min.len()),
    ] {
        if expected != got {
            return Err(OpfError::DimensionMismatch {
                what,
                expected,
                got,
            }
            .into());
        }
    }
    let unit_nodes = cfg.unit_nodes(grid)?;

    let mut prog = ConicProgram::new();
    let mut lay = MpcLayout {
        delta: Vec::with_capacity(hz),
        sigma: Vec::with_capacity(hz),
        p_t: Vec::with_capacity(hz),
        p_plus: Vec::with_capacity(hz),
        p_minus: Vec::with_capacity(hz),
        p_r: Vec::with_capacity(hz),
        x_next: Vec::with_capacity(hz),
        flows: Vec::with_capacity(hz),
    };
    prog.add_constant(soft_excess(cfg, &state.x));

    for h in 0..hz {
        let w = cfg.gamma.powi(h as i32);

        let delta: Vec<usize> = (0..nt)
            .map(|i| prog.add_var(0.0, 1.0, w * cfg.c1[i]))
            .collect();
        let sigma: Vec<usize> = (0..nt)
            .map(|i| prog.add_var(0.0, f64::INFINITY, w * cfg.c0[i]))
            .collect();
        for i in 0..nt {
            if h == 0 {
                let prev = f64::from(u8::from(state.delta_prev[i]));
                prog.add_ge(&[(sigma[i], 1.0), (delta[i], -1.0)], -prev);
                prog.add_ge(&[(sigma[i], 1.0), (delta[i], 1.0)], prev);
            } else {
                let prev = lay.delta[h - 1][i];
                prog.add_ge(&[(sigma[i], 1.0), (delta[i], -1.0), (prev, 1.0)], 0.0);
                prog.add_ge(&[(sigma[i], 1.0), (delta[i], 1.0), (prev, -1.0)], 0.0);
            }
        }

        let p_t: Vec<usize> = (0..nt)
            .map(|i| prog.add_var(0.0, cfg.p_t_max[i], w * cfg.c2[i]))
            .collect();
        for i in 0..nt {
            prog.add_ge(&[(p_t[i], 1.0), (delta[i], -cfg.p_t_min[i])], 0.0);
            prog.add_le(&[(p_t[i], 1.0), (delta[i], -cfg.p_t_max[i])], 0.0);
        }

        let p_plus: Vec<usize> = (0..ns)
            .map(|j| prog.add_var(0.0, cfg.p_s_max[j], w * cfg.c4[j]))
            .collect();
        let p_minus: Vec<usize> = (0..ns)
            .map(|j| prog.add_var(0.0, -cfg.p_s_min[j], w * cfg.c4[j]))
            .collect();
        let p_r: Vec<usize> = (0..nr)
            .map(|j| prog.add_var(0.0, window.res[h][j], w * cfg.c3[j]))
            .collect();

        let x_next: Vec<usize> = (0..ns)
            .map(|j| prog.add_var(cfg.x_min[j], cfg.x_max[j], 0.0))
            .collect();
        for j in 0..ns {
            let terms = [
                (x_next[j], 1.0),
                (p_plus[j], -cfg.b_s[j]),
                (p_minus[j], cfg.b_s[j]),
            ];
            if h == 0 {
                prog.add_eq(&terms, cfg.a_s[j] * state.x[j]);
            } else {
                let mut t = terms.to_vec();
                t.push((lay.x_next[h - 1][j], -cfg.a_s[j]));
                prog.add_eq(&t, 0.0);
            }
        }
        // Soft band on x(k+h|k) for h ≥ 1; h = 0 is the constant above.
        if h >= 1 {
            for j in 0..ns {
                let x = lay.x_next[h - 1][j];
                let lo = prog.add_var(0.0, f64::INFINITY, w * cfg.c5[j]);
                let hi = prog.add_var(0.0, f64::INFINITY, w * cfg.c5[j]);
                prog.add_ge(&[(lo, 1.0), (x, 1.0)], cfg.x_soft_min[j]);
                prog.add_ge(&[(hi, 1.0), (x, -1.0)], -cfg.x_soft_max[j]);
            }
        }

        let flow = add_flow_block(&mut prog, grid, variant)?;
        for (k, idx) in flow.p_e.clone().enumerate() {
            prog.set_bounds(idx, cfg.p_e_min[k], cfg.p_e_max[k]);
        }
        for idx in flow.p_g.clone() {
            prog.add_cost(idx, w * cfg.c6);
        }
        let mut rows: Vec<Vec<(usize, f64)>> = (0..grid.node_count())
            .map(|n| vec![(flow.pg(n), 1.0)])
            .collect();
        let mut rhs = vec![0.0; grid.node_count()];
        let mut col = 0;
        for &v in &p_t {
            rows[unit_nodes[col]].push((v, -1.0));
            col += 1;
        }
        for j in 0..ns {
            rows[unit_nodes[col]].push((p_plus[j], -1.0));
            rows[unit_nodes[col]].push((p_minus[j], 1.0));
            col += 1;
        }
        for &v in &p_r {
            rows[unit_nodes[col]].push((v, -1.0));
            col += 1;
        }
        for d in 0..nd {
            rhs[unit_nodes[col]] -= window.demand[h][d];
            col += 1;
        }
        for (r, b) in rows.iter().zip(rhs) {
            prog.add_eq(r, b);
        }

        lay.delta.push(delta);
        lay.sigma.push(sigma);
        lay.p_t.push(p_t);
        lay.p_plus.push(p_plus);
        lay.p_minus.push(p_minus);
        lay.p_r.push(p_r);
        lay.x_next.push(x_next);
        lay.flows.push(flow);
    }

    let binaries = lay.delta.iter().flatten().copied().collect();
    Ok(MpcProgram {
        program: MixedBinaryProgram::new(prog, binaries)?,
        layout: lay,
    })
}

/// The `h = 0` slice of an MPC solution, applied to the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstMove {
    pub delta: Vec<bool>,
    pub p_t: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_r: Vec<f64>,
    pub p_d: Vec<f64>,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_e: Vec<f64>,
    pub p_g: Vec<f64>,
    /// Largest circle residual over the whole horizon before any projection.
    pub tightness: f64,
}

/// Reads the first move out of a solved program. The non-convex variant is
/// projected onto the circle and its flows re-derived from the model.
pub fn first_move(
    cfg: &MicrogridConfig,
    grid: &Grid,
    variant: &OpfVariant,
    mpc: &MpcProgram,
    x: &[f64],
    window: &Profiles,
) -> Result<FirstMove, MicrogridError> {
    let lay = &mpc.layout;
    let flow = &lay.flows[0];
    let get = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| x[i]).collect() };
    let tightness = lay
        .flows
        .iter()
        .flat_map(|f| {
            f.phi
                .clone()
                .skip(1)
                .step_by(2)
                .map(|c| 1.0 - (x[c] * x[c] + x[c + 1] * x[c + 1]))
        })
        .fold(0.0, f64::max);
    let mut mv = FirstMove {
        delta: lay.delta[0].iter().map(|&i| x[i] > 0.5).collect(),
        p_t: get(&lay.p_t[0]),
        p_s: lay.p_plus[0]
            .iter()
            .zip(&lay.p_minus[0])
            .map(|(&a, &b)| x[a] - x[b])
            .collect(),
        p_r: get(&lay.p_r[0]),
        p_d: window.demand[0].iter().map(|d| -d).collect(),
        phi: x[flow.phi.clone()].to_vec(),
        theta: Vec::new(),
        p_e: x[flow.p_e.clone()].to_vec(),
        p_g: x[flow.p_g.clone()].to_vec(),
        tightness,
    };
    if variant.tag == VariantTag::NonconvexDd && project_onto_circle(&mut mv.phi) {
        let (_, p_e, p_g) = flows_for_phi(grid, variant, &mv.phi)?;
        mv.p_e = p_e;
        mv.p_g = p_g;
        let violation = coupling_violation(cfg, grid, &mv)?.max(line_violation(cfg, &mv.p_e));
        if violation > PROJECTION_TOL {
            return Err(OpfError::ProjectionInfeasible { violation }.into());
        }
    }
    mv.theta = thetas(&mv.phi);
    Ok(mv)
}

fn unit_vector(mv: &FirstMove) -> Vec<f64> {
    mv.p_t
        .iter()
        .chain(&mv.p_s)
        .chain(&mv.p_r)
        .chain(&mv.p_d)
        .copied()
        .collect()
}

fn coupling_violation(
    cfg: &MicrogridConfig,
    grid: &Grid,
    mv: &FirstMove,
) -> Result<f64, MicrogridError> {
    let nodes = cfg.unit_nodes(grid)?;
    let mut expect = vec![0.0; grid.node_count()];
    for (n, v) in nodes.iter().zip(unit_vector(mv)) {
        expect[*n] += v;
    }
    Ok(expect
        .iter()
        .zip(&mv.p_g)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn line_violation(cfg: &MicrogridConfig, p_e: &[f64]) -> f64 {
    p_e.iter()
        .enumerate()
        .map(|(k, v)| (cfg.p_e_min[k] - v).max(v - cfg.p_e_max[k]))
        .fold(0.0, f64::max)
}

/// Applies storage power to the energy state and advances the commitment.
pub fn step_plant(
    cfg: &MicrogridConfig,
    state: &PlantState,
    mv: &FirstMove,
) -> Result<PlantState, MicrogridError> {
    if mv.p_s.len() != state.x.len() || mv.delta.len() != state.delta_prev.len() {
        return Err(OpfError::DimensionMismatch {
            what: "first move",
            expected: state.x.len(),
            got: mv.p_s.len(),
        }
        .into());
    }
    let x: Vec<f64> = (0..state.x.len())
        .map(|j| cfg.a_s[j] * state.x[j] + cfg.b_s[j] * mv.p_s[j])
        .collect();
    for (j, &v) in x.iter().enumerate() {
        if v < cfg.x_min[j] - AUDIT_TOL || v > cfg.x_max[j] + AUDIT_TOL {
            return Err(MicrogridError::StateBoundViolation {
                unit: j,
                value: v,
                min: cfg.x_min[j],
                max: cfg.x_max[j],
            });
        }
    }
    Ok(PlantState {
        x,
        delta_prev: mv.delta.clone(),
        k: state.k + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageCosts {
    pub sw: f64,
    pub p: f64,
    pub x: f64,
    pub loss: f64,
}

impl StageCosts {
    pub fn total(&self) -> f64 {
        self.sw + self.p + self.x + self.loss
    }
}

/// Realized stage cost of applying `mv` in state `(x, δ_prev)`.
pub fn stage_costs(
    cfg: &MicrogridConfig,
    x: &[f64],
    delta_prev: &[bool],
    mv: &FirstMove,
) -> StageCosts {
    let b = |v: bool| f64::from(u8::from(v));
    let sw = (0..mv.delta.len())
        .map(|i| cfg.c0[i] * (b(mv.delta[i]) - b(delta_prev[i])).abs() + cfg.c1[i] * b(mv.delta[i]))
        .sum();
    let dot = |c: &[f64], v: &[f64]| c.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let abs_ps: Vec<f64> = mv.p_s.iter().map(|v| v.abs()).collect();
    StageCosts {
        sw,
        p: dot(&cfg.c2, &mv.p_t) + dot(&cfg.c3, &mv.p_r) + dot(&cfg.c4, &abs_ps),
        x: soft_excess(cfg, x),
        loss: cfg.c6 * mv.p_g.iter().sum::<f64>(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub time_h: f64,
    pub delta: Vec<bool>,
    pub p_t: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_r: Vec<f64>,
    pub p_d: Vec<f64>,
    pub p_g: Vec<f64>,
    pub p_e: Vec<f64>,
    pub theta: Vec<f64>,
    /// Stored energy at the start of the step.
    pub x: Vec<f64>,
    pub x_next: Vec<f64>,
    pub costs: StageCosts,
    pub tightness: f64,
    pub subproblems: usize,
    pub solve_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Kpis {
    /// Mean of switching plus power cost.
    pub mean_operating_cost: f64,
    pub mean_loss_cost: f64,
}

/// Means over the records; zero for an empty run.
pub fn compute_kpis(records: &[StepRecord]) -> Kpis {
    if records.is_empty() {
        return Kpis::default();
    }
    let k = records.len() as f64;
    Kpis {
        mean_operating_cost: records.iter().map(|r| r.costs.sw + r.costs.p).sum::<f64>() / k,
        mean_loss_cost: records.iter().map(|r| r.costs.loss).sum::<f64>() / k,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopResult {
    pub variant: VariantTag,
    pub records: Vec<StepRecord>,
    pub final_state: PlantState,
    pub kpis: Kpis,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcOptions {
    pub strategy: Strategy,
    pub solver: MixedBinaryOptions,
}

impl Default for MpcOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::BranchAndBound,
            solver: MixedBinaryOptions::default(),
        }
    }
}

/// Solves one MPC step and returns the move to apply.
pub fn solve_mpc_step(
    cfg: &MicrogridConfig,
    grid: &Grid,
    variant: &OpfVariant,
    state: &PlantState,
    window: &Profiles,
    opts: &MpcOptions,
) -> Result<(FirstMove, usize), MicrogridError> {
    let mpc = build_mpc_step(cfg, grid, variant, state, window)?;
    let sol = solve_mixed_binary(&mpc.program, opts.strategy, &opts.solver)?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(OpfError::Infeasible.into()),
        SolveStatus::Unbounded => return Err(OpfError::Unbounded.into()),
        SolveStatus::ToleranceNotMet => return Err(OpfError::ToleranceNotMet.into()),
    }
    let mv = first_move(cfg, grid, variant, &mpc, &sol.x, window)?;
    Ok((mv, sol.subproblems))
}

/// Receding-horizon simulation over `steps` steps.
pub fn run_closed_loop(
    cfg: &MicrogridConfig,
    grid: &Grid,
    profiles: &Profiles,
    variant: &OpfVariant,
    steps: usize,
    opts: &MpcOptions,
) -> Result<ClosedLoopResult, MicrogridError> {
    cfg.validate_for(grid)?;
    if profiles.len() < steps {
        return Err(MicrogridError::ForecastTooShort {
            needed: steps,
            got: profiles.len(),
        });
    }
    let mut state = PlantState::initial(cfg);
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let at = |e: MicrogridError| MicrogridError::Step {
            step: k,
            source: Box::new(e),
        };
        let window = profiles.window(k, cfg.horizon);
        let start = Instant::now();
        let (mv, subproblems) =
            solve_mpc_step(cfg, grid, variant, &state, &window, opts).map_err(at)?;
        let solve_time_s = start.elapsed().as_secs_f64();
        let costs = stage_costs(cfg, &state.x, &state.delta_prev, &mv);
        let next = step_plant(cfg, &state, &mv).map_err(at)?;
        log::debug!(
            "{} step {k}: cost {:.6} nodes {subproblems} {:.3}s",
            variant.tag.as_str(),
            costs.total(),
            solve_time_s
        );
        records.push(StepRecord {
            k,
            time_h: k as f64 * cfg.sampling_time_h,
            delta: mv.delta,
            p_t: mv.p_t,
            p_s: mv.p_s,
            p_r: mv.p_r,
            p_d: mv.p_d,
            p_g: mv.p_g,
            p_e: mv.p_e,
            theta: mv.theta,
            x: state.x.clone(),
            x_next: next.x.clone(),
            costs,
            tightness: mv.tightness,
            subproblems,
            solve_time_s,
        });
        state = next;
    }
    Ok(ClosedLoopResult {
        variant: variant.tag,
        kpis: compute_kpis(&records),
        records,
        final_state: state,
    })
}

/// Largest violation of the unit, storage, line and coupling constraints
/// over all records, replayed from the recorded values alone.
pub fn audit_closed_loop(
    cfg: &MicrogridConfig,
    grid: &Grid,
    profiles: &Profiles,
    result: &ClosedLoopResult,
) -> Result<f64, MicrogridError> {
    let mut worst = 0.0f64;
    let mut x = cfg.x0.clone();
    for r in &result.records {
        let mut v = 0.0f64;
        for i in 0..cfg.generators() {
            let d = f64::from(u8::from(r.delta[i]));
            v = v
                .max(cfg.p_t_min[i] * d - r.p_t[i])
                .max(r.p_t[i] - cfg.p_t_max[i] * d);
        }
        for j in 0..cfg.storages() {
            v = v
                .max(cfg.p_s_min[j] - r.p_s[j])
                .max(r.p_s[j] - cfg.p_s_max[j]);
            let next = cfg.a_s[j] * x[j] + cfg.b_s[j] * r.p_s[j];
            v = v
                .max((next - r.x_next[j]).abs())
                .max((x[j] - r.x[j]).abs())
                .max(cfg.x_min[j] - next)
                .max(next - cfg.x_max[j]);
            x[j] = next;
        }
        for j in 0..cfg.renewables() {
            v = v.max(-r.p_r[j]).max(r.p_r[j] - profiles.res[r.k][j]);
        }
        v = v.max(line_violation(cfg, &r.p_e));
        let mv = FirstMove {
            delta: r.delta.clone(),
            p_t: r.p_t.clone(),
            p_s: r.p_s.clone(),
            p_r: r.p_r.clone(),
            p_d: r.p_d.clone(),
            phi: Vec::new(),
            theta: Vec::new(),
            p_e: r.p_e.clone(),
            p_g: r.p_g.clone(),
            tightness: 0.0,
        };
        v = v.max(coupling_violation(cfg, grid, &mv)?);
        for (d, w) in r.p_d.iter().zip(&profiles.demand[r.k]) {
            v = v.max((d + w).abs());
        }
        worst = worst.max(v);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::opt::{solve_convex, SolverOptions};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn setup() -> (MicrogridConfig, Grid, OpfVariant) {
        let cfg = MicrogridConfig::table1();
        let grid = Grid::case_study();
        let variant = OpfVariant::reference(&grid, cfg.beta);
        (cfg, grid, variant)
    }

    fn flat(h: usize, res: [f64; 2], demand: f64) -> Profiles {
        Profiles::new(vec![res.to_vec(); h], vec![vec![demand]; h]).unwrap()
    }

    fn mv(p_s: Vec<f64>) -> FirstMove {
        FirstMove {
            delta: vec![false, false],
            p_t: vec![0.0; 2],
            p_s,
            p_r: vec![0.0; 2],
            p_d: vec![0.0],
            phi: Vec::new(),
            theta: Vec::new(),
            p_e: vec![0.0; 8],
            p_g: vec![0.0; 5],
            tightness: 0.0,
        }
    }

    #[test]
    fn horizon_six_has_twelve_commitments() {
        let (cfg, grid, variant) = setup();
        let m = build_mpc_step(
            &cfg,
            &grid,
            &variant,
            &PlantState::initial(&cfg),
            &flat(6, [0.2, 0.1], 0.8),
        )
        .unwrap();
        assert_eq!(m.program.binaries().len(), 12);
        assert_eq!(m.layout.sigma.iter().flatten().count(), 12);
        assert_eq!(m.layout.flows.len(), 6);
    }

    #[test]
    fn short_window_rejected() {
        let (cfg, grid, variant) = setup();
        let err = build_mpc_step(
            &cfg,
            &grid,
            &variant,
            &PlantState::initial(&cfg),
            &flat(5, [0.0; 2], 0.0),
        )
        .unwrap_err();
        assert_eq!(err, MicrogridError::ForecastTooShort { needed: 6, got: 5 });
    }

    #[test]
    fn zero_demand_turns_everything_off() {
        let (cfg, grid, variant) = setup();
        let state = PlantState::initial(&cfg);
        let window = flat(6, [0.0; 2], 0.0);
        let (m, _) = solve_mpc_step(
            &cfg,
            &grid,
            &variant,
            &state,
            &window,
            &MpcOptions::default(),
        )
        .unwrap();
        assert_eq!(m.delta, vec![false, false]);
        for v in m
            .p_t
            .iter()
            .chain(&m.p_s)
            .chain(&m.p_r)
            .chain(&m.p_e)
            .chain(&m.p_g)
        {
            assert!(v.abs() < 1e-7, "{v}");
        }
        let c = stage_costs(&cfg, &state.x, &[false, false], &m);
        assert!(c.total().abs() < 1e-7);
    }

    #[test]
    fn renewables_dispatched_before_generators() {
        let (mut cfg, grid, variant) = setup();
        cfg.horizon = 1;
        let state = PlantState::initial(&cfg);
        let window = flat(1, [0.6, 0.6], 0.5);
        let mpc = build_mpc_step(&cfg, &grid, &variant, &state, &window).unwrap();
        let sol = solve_mixed_binary(
            &mpc.program,
            Strategy::Enumerate,
            &MixedBinaryOptions::default(),
        )
        .unwrap();
        // Every commitment pattern by hand.
        let mut best = (f64::INFINITY, [0u8; 2]);
        for pattern in [[0u8, 0], [0, 1], [1, 0], [1, 1]] {
            let mut p = mpc.program.base().clone();
            for (i, &idx) in mpc.layout.delta[0].iter().enumerate() {
                p.set_bounds(idx, f64::from(pattern[i]), f64::from(pattern[i]));
            }
            let s = solve_convex(&p, &SolverOptions::default()).unwrap();
            if s.status == SolveStatus::Optimal && s.objective < best.0 {
                best = (s.objective, pattern);
            }
        }
        assert_eq!(best.1, [0, 0]);
        assert_relative_eq!(sol.objective, best.0, epsilon = 1e-7);
        let m = first_move(&cfg, &grid, &variant, &mpc, &sol.x, &window).unwrap();
        assert!(m.p_t.iter().all(|v| v.abs() < 1e-7));
        assert!(m.p_r.iter().sum::<f64>() > 0.5);
    }

    #[test]
    fn plant_update() {
        let (cfg, _, _) = setup();
        let s = PlantState::initial(&cfg);
        assert_eq!(
            step_plant(&cfg, &s, &mv(vec![0.0, 0.0])).unwrap().x,
            vec![0.5, 0.5]
        );
        let next = step_plant(&cfg, &s, &mv(vec![1.0, 0.0])).unwrap();
        assert_eq!(next.x, vec![1.0, 0.5]);
        assert_eq!(next.k, 1);
        assert_eq!(next.delta_prev, vec![false, false]);
        assert_eq!(
            step_plant(&cfg, &s, &mv(vec![-1.0, -1.0])).unwrap().x,
            vec![0.0, 0.0]
        );
        assert!(matches!(
            step_plant(&cfg, &s, &mv(vec![-1.1, 0.0])),
            Err(MicrogridError::StateBoundViolation { unit: 0, .. })
        ));
    }

    fn record(sw: f64, p: f64, loss: f64) -> StepRecord {
        StepRecord {
            k: 0,
            time_h: 0.0,
            delta: vec![],
            p_t: vec![],
            p_s: vec![],
            p_r: vec![],
            p_d: vec![],
            p_g: vec![],
            p_e: vec![],
            theta: vec![],
            x: vec![],
            x_next: vec![],
            costs: StageCosts {
                sw,
                p,
                x: 0.0,
                loss,
            },
            tightness: 0.0,
            subproblems: 1,
            solve_time_s: 0.0,
        }
    }

    #[test]
    fn kpi_examples() {
        assert_eq!(compute_kpis(&[]), Kpis::default());
        assert_eq!(
            compute_kpis(&vec![record(0.0, 0.0, 0.0); 3]),
            Kpis::default()
        );
        let k = compute_kpis(&[record(0.2, 1.0, 0.01)]);
        assert_relative_eq!(k.mean_operating_cost, 1.2, epsilon = 1e-15);
        assert_relative_eq!(k.mean_loss_cost, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn trivial_single_step_loop() {
        let (cfg, grid, variant) = setup();
        let r = run_closed_loop(
            &cfg,
            &grid,
            &Profiles::zeros(1, 2, 1),
            &variant,
            1,
            &MpcOptions::default(),
        )
        .unwrap();
        assert_eq!(r.records.len(), 1);
        let c = r.records[0].costs;
        assert_eq!(r.kpis.mean_operating_cost, c.sw + c.p);
        assert_eq!(r.kpis.mean_loss_cost, c.loss);
        // Switching generator 1 off costs c0.
        assert_relative_eq!(c.sw, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn short_loop_accounting() {
        let (cfg, grid, variant) = setup();
        let profiles = super::super::generate_profiles(
            3,
            12,
            &super::super::ProfileShape::for_config(&cfg),
            &cfg,
        )
        .unwrap();
        let r =
            run_closed_loop(&cfg, &grid, &profiles, &variant, 12, &MpcOptions::default()).unwrap();
        assert!(audit_closed_loop(&cfg, &grid, &profiles, &r).unwrap() <= AUDIT_TOL);
        for j in 0..2 {
            let sum: f64 = r.records.iter().map(|s| s.p_s[j]).sum();
            assert_relative_eq!(
                r.final_state.x[j] - cfg.x0[j],
                cfg.b_s[j] * sum,
                epsilon = 1e-12
            );
        }
        // Switching cost replayed from the commitment sequence alone.
        let mut prev = cfg.delta_init.clone();
        for s in &r.records {
            let sw: f64 = (0..2)
                .map(|i| {
                    let (a, b) = (
                        f64::from(u8::from(s.delta[i])),
                        f64::from(u8::from(prev[i])),
                    );
                    cfg.c0[i] * (a - b).abs() + cfg.c1[i] * a
                })
                .sum();
            assert!((sw - s.costs.sw).abs() <= 1e-9);
            let floor: f64 = cfg
                .c3
                .iter()
                .zip(&profiles.res[s.k])
                .map(|(c, w)| c * w)
                .sum();
            assert!(s.costs.p >= floor - 1e-9);
            prev = s.delta.clone();
        }
        assert!(r.records.iter().all(|s| s.tightness <= 1e-6));
    }

    #[test]
    fn too_few_profile_rows() {
        let (cfg, grid, variant) = setup();
        let err = run_closed_loop(
            &cfg,
            &grid,
            &Profiles::zeros(2, 2, 1),
            &variant,
            3,
            &MpcOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            MicrogridError::ForecastTooShort { needed: 3, got: 2 }
        ));
    }

    proptest! {
        #[test]
        fn energy_telescopes(p_s in prop::collection::vec(-1.0f64..1.0, 1..40)) {
            let mut cfg = MicrogridConfig::table1();
            cfg.x_min = vec![-100.0; 2];
            cfg.x_soft_min = vec![-100.0; 2];
            cfg.x_max = vec![100.0; 2];
            cfg.x_soft_max = vec![100.0; 2];
            let mut s = PlantState::initial(&cfg);
            for v in &p_s {
                s = step_plant(&cfg, &s, &mv(vec![*v, -*v])).unwrap();
            }
            let sum: f64 = p_s.iter().sum();
            prop_assert!((s.x[0] - 0.5 - 0.5 * sum).abs() < 1e-12);
            prop_assert!((s.x[1] - 0.5 + 0.5 * sum).abs() < 1e-12);
            prop_assert_eq!(s.k, p_s.len());
        }

        #[test]
        fn kpis_are_means(costs in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.0f64..0.1), 1..30)) {
            let recs: Vec<StepRecord> = costs.iter().map(|&(a, b, c)| record(a, b, c)).collect();
            let k = compute_kpis(&recs);
            let n = costs.len() as f64;
            let o: f64 = costs.iter().map(|c| c.0 + c.1).sum::<f64>() / n;
            let l: f64 = costs.iter().map(|c| c.2).sum::<f64>() / n;
            prop_assert!((k.mean_operating_cost - o).abs() < 1e-12);
            prop_assert!((k.mean_loss_cost - l).abs() < 1e-12);
        }
    }
}
