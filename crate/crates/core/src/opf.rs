//! Single-step optimal power flow in the lifted `φ = [1, cos θ, sin θ, …]`
//! space, with known line coefficients or with a Hankel line model.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::behavior::{DataDrivenModel, LiftMode, ModelOutputs, Trajectory, DEFAULT_RANK_TOL};
use crate::error::{BehaviorError, OpfError};
use crate::grid::Grid;
use crate::opt::{
    solve_mixed_binary, ConicProgram, MixedBinaryOptions, MixedBinaryProgram, SolveStatus, Strategy,
};
use crate::physics::{grid_coeffs, EffectiveLineCoeffs};

/// Feasibility slack allowed on application constraints after projection.
pub const PROJECTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantTag {
    Reference,
    NonconvexDd,
    ConvexDd,
    GeneralizedDd,
}

impl VariantTag {
    pub const ALL: [VariantTag; 4] = [
        VariantTag::Reference,
        VariantTag::NonconvexDd,
        VariantTag::ConvexDd,
        VariantTag::GeneralizedDd,
    ];

    /// CLI spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::Reference => "reference",
            VariantTag::NonconvexDd => "dd",
            VariantTag::ConvexDd => "dd-convex",
            VariantTag::GeneralizedDd => "dd-generalized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn lift_mode(self) -> LiftMode {
        match self {
            VariantTag::GeneralizedDd => LiftMode::AllPairs,
            _ => LiftMode::PerEdge,
        }
    }
}

/// How line powers are tied to the lifted angles.
#[derive(Debug, Clone)]
pub struct OpfVariant {
    pub tag: VariantTag,
    pub beta: f64,
    coeffs: Vec<EffectiveLineCoeffs>,
    model: Option<Arc<DataDrivenModel>>,
    basis: Option<Arc<HankelBasis>>,
}

/// Hankel block in SVD coordinates of the input Hankel matrix.
///
/// With `H_u = U Σ Vᵀ`, the program carries `α' = T α` for the invertible
/// `T⁻¹ = V diag(1/σ)`, so its rows are `H_u T⁻¹ = [U 0]` and `H_y T⁻¹`
/// instead of the ill-conditioned raw columns. The feasible set in `(φ, p)`
/// is unchanged.
#[derive(Debug, Clone)]
struct HankelBasis {
    inv_t: DMatrix<f64>,
    input: DMatrix<f64>,
    output: DMatrix<f64>,
}

impl HankelBasis {
    fn new(model: &DataDrivenModel) -> Self {
        let h_u = model.input_hankel().data();
        let n = h_u.ncols();
        // Padding to square makes the thin SVD return a full `V`.
        let mut square = DMatrix::zeros(n.max(h_u.nrows()), n);
        square.rows_mut(0, h_u.nrows()).copy_from(h_u);
        let svd = square.svd(false, true);
        let v = svd.v_t.expect("requested V").transpose();
        let cut = svd.singular_values.max() * DEFAULT_RANK_TOL;
        let mut inv_t = v;
        for (j, &sv) in svd.singular_values.iter().enumerate() {
            if sv > cut {
                inv_t.column_mut(j).scale_mut(1.0 / sv);
            }
        }
        Self {
            input: h_u * &inv_t,
            output: model.output_hankel().data() * &inv_t,
            inv_t,
        }
    }
}

fn not_pe(e: BehaviorError) -> OpfError {
    match e {
        BehaviorError::NotPersistentlyExciting { .. } => OpfError::ModelNotPE,
        other => OpfError::Behavior(other),
    }
}

impl OpfVariant {
    pub fn reference(grid: &Grid, beta: f64) -> Self {
        Self {
            tag: VariantTag::Reference,
            beta,
            coeffs: grid_coeffs(grid),
            model: None,
            basis: None,
        }
    }

    /// Wraps a fitted model; the tag decides which output block is expected.
    pub fn data_driven(
        tag: VariantTag,
        model: Arc<DataDrivenModel>,
        beta: f64,
    ) -> Result<Self, OpfError> {
        if tag == VariantTag::Reference {
            return Err(OpfError::DimensionMismatch {
                what: "reference variant takes no data model",
                expected: 0,
                got: model.columns(),
            });
        }
        if !model.certificate().pe {
            return Err(OpfError::ModelNotPE);
        }
        Ok(Self {
            tag,
            beta,
            coeffs: Vec::new(),
            basis: Some(Arc::new(HankelBasis::new(&model))),
            model: Some(model),
        })
    }

    /// Fits the model the tag needs from measured data.
    pub fn from_trajectory(
        tag: VariantTag,
        traj: &Trajectory,
        beta: f64,
        rank_tol: f64,
    ) -> Result<Self, OpfError> {
        let model = match tag {
            VariantTag::Reference => {
                return Err(OpfError::DimensionMismatch {
                    what: "reference variant takes no data model",
                    expected: 0,
                    got: traj.len(),
                })
            }
            VariantTag::GeneralizedDd => DataDrivenModel::flows_and_injections(traj, rank_tol),
            _ => DataDrivenModel::line_flows(traj, rank_tol),
        }
        .map_err(not_pe)?;
        Self::data_driven(tag, Arc::new(model), beta)
    }

    pub fn model(&self) -> Option<&DataDrivenModel> {
        self.model.as_deref()
    }

    /// Maps the program's `α'` block back to Hankel weights `α`.
    pub fn alpha_from_block(&self, block: &[f64]) -> Vec<f64> {
        match &self.basis {
            Some(b) => (&b.inv_t * DVector::from_column_slice(block))
                .iter()
                .copied()
                .collect(),
            None => block.to_vec(),
        }
    }

    pub fn coeffs(&self) -> &[EffectiveLineCoeffs] {
        &self.coeffs
    }

    /// Number of angle pairs in the lifted vector.
    pub fn pair_count(&self, grid: &Grid) -> usize {
        match self.tag {
            VariantTag::GeneralizedDd => grid.node_count() * (grid.node_count() - 1) / 2,
            _ => grid.edge_count(),
        }
    }

    fn check(&self, grid: &Grid) -> Result<(), OpfError> {
        let ne = grid.edge_count();
        let nb = grid.node_count();
        let dim = 2 * self.pair_count(grid) + 1;
        match (self.tag, self.model()) {
            (VariantTag::Reference, _) => {
                if self.coeffs.len() != ne {
                    return Err(OpfError::DimensionMismatch {
                        what: "line coefficients",
                        expected: ne,
                        got: self.coeffs.len(),
                    });
                }
            }
            (_, None) => return Err(OpfError::ModelNotPE),
            (tag, Some(m)) => {
                if m.input_dim() != dim {
                    return Err(OpfError::DimensionMismatch {
                        what: "lifted input rows",
                        expected: dim,
                        got: m.input_dim(),
                    });
                }
                if m.line_rows() != 2 * ne {
                    return Err(OpfError::DimensionMismatch {
                        what: "line power rows",
                        expected: 2 * ne,
                        got: m.line_rows(),
                    });
                }
                let want = if tag == VariantTag::GeneralizedDd {
                    2 * ne + nb
                } else {
                    2 * ne
                };
                let got = match (tag, m.kind()) {
                    (VariantTag::GeneralizedDd, ModelOutputs::FlowsAndInjections) => m.output_dim(),
                    (VariantTag::GeneralizedDd, _) => m.line_rows(),
                    _ => m.line_rows(),
                };
                if got != want {
                    return Err(OpfError::DimensionMismatch {
                        what: "output rows",
                        expected: want,
                        got,
                    });
                }
                if tag == VariantTag::GeneralizedDd
                    && !m.pairs().is_empty()
                    && m.pairs() != grid.all_node_pairs().as_slice()
                {
                    return Err(OpfError::DimensionMismatch {
                        what: "node pairs",
                        expected: grid.all_node_pairs().len(),
                        got: m.pairs().len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Variable ranges of one flow block inside a larger program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowVars {
    pub phi: Range<usize>,
    /// Hankel weights in the basis coordinates; see [`OpfVariant::alpha_from_block`].
    pub alpha: Option<Range<usize>>,
    pub p_e: Range<usize>,
    pub p_g: Range<usize>,
}

impl FlowVars {
    pub fn pairs(&self) -> usize {
        (self.phi.len() - 1) / 2
    }
    pub fn cos(&self, k: usize) -> usize {
        self.phi.start + 1 + 2 * k
    }
    pub fn sin(&self, k: usize) -> usize {
        self.phi.start + 2 + 2 * k
    }
    pub fn pe(&self, k: usize) -> usize {
        self.p_e.start + k
    }
    pub fn pg(&self, k: usize) -> usize {
        self.p_g.start + k
    }
}

fn hankel_rows(
    prog: &mut ConicProgram,
    data: &DMatrix<f64>,
    rows: Range<usize>,
    alpha: &Range<usize>,
    target: Range<usize>,
) {
    for (r, t) in rows.zip(target) {
        let mut terms: Vec<(usize, f64)> = alpha
            .clone()
            .enumerate()
            .map(|(c, a)| (a, data[(r, c)]))
            .collect();
        terms.push((t, -1.0));
        prog.add_eq(&terms, 0.0);
    }
}

/// Adds `φ`, line powers, injections (and `α` for data-driven variants) with
/// their linking equalities, the unit-disk constraints and the `−β Σ cos`
/// cost term.
pub fn add_flow_block(
    prog: &mut ConicProgram,
    grid: &Grid,
    variant: &OpfVariant,
) -> Result<FlowVars, OpfError> {
    variant.check(grid)?;
    let ne = grid.edge_count();
    let nb = grid.node_count();
    let npairs = variant.pair_count(grid);

    let phi0 = prog.add_var(1.0, 1.0, 0.0);
    for _ in 0..npairs {
        let c = prog.add_free(-variant.beta);
        prog.add_free(0.0);
        prog.add_ball(c);
    }
    let phi = phi0..phi0 + 2 * npairs + 1;
    let pe0 = prog.add_vars(2 * ne, f64::NEG_INFINITY, f64::INFINITY, 0.0);
    let p_e = pe0..pe0 + 2 * ne;
    let pg0 = prog.add_vars(nb, f64::NEG_INFINITY, f64::INFINITY, 0.0);
    let p_g = pg0..pg0 + nb;

    let mut alpha = None;
    match variant.model() {
        None => {
            for (l, c) in variant.coeffs.iter().enumerate() {
                let (cs, sn) = (phi0 + 1 + 2 * l, phi0 + 2 + 2 * l);
                prog.add_eq(
                    &[
                        (pe0 + 2 * l, 1.0),
                        (phi0, -c.self_from),
                        (cs, c.transfer_g),
                        (sn, c.transfer_b),
                    ],
                    0.0,
                );
                prog.add_eq(
                    &[
                        (pe0 + 2 * l + 1, 1.0),
                        (phi0, -c.self_to),
                        (cs, c.transfer_g),
                        (sn, -c.transfer_b),
                    ],
                    0.0,
                );
            }
        }
        Some(m) => {
            let basis = variant.basis.as_ref().ok_or(OpfError::ModelNotPE)?;
            let a0 = prog.add_vars(m.columns(), f64::NEG_INFINITY, f64::INFINITY, 0.0);
            let a = a0..a0 + m.columns();
            hankel_rows(prog, &basis.input, 0..phi.len(), &a, phi.clone());
            hankel_rows(prog, &basis.output, 0..2 * ne, &a, p_e.clone());
            if variant.tag == VariantTag::GeneralizedDd {
                hankel_rows(prog, &basis.output, 2 * ne..2 * ne + nb, &a, p_g.clone());
            }
            alpha = Some(a);
        }
    }

    if variant.tag != VariantTag::GeneralizedDd {
        let mut rows: Vec<Vec<(usize, f64)>> = (0..nb).map(|n| vec![(pg0 + n, 1.0)]).collect();
        for (n, col) in grid.injection_incidence() {
            rows[n].push((pe0 + col, -1.0));
        }
        for r in rows {
            prog.add_eq(&r, 0.0);
        }
    }

    Ok(FlowVars {
        phi,
        alpha,
        p_e,
        p_g,
    })
}

/// Reference to a flow variable independent of where the block sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpfVar {
    Phi(usize),
    Pe(usize),
    Pg(usize),
}

impl OpfVar {
    fn index(self, v: &FlowVars) -> usize {
        match self {
            OpfVar::Phi(i) => v.phi.start + i,
            OpfVar::Pe(i) => v.pe(i),
            OpfVar::Pg(i) => v.pg(i),
        }
    }

    fn value(self, sol: &OpfSolution) -> f64 {
        match self {
            OpfVar::Phi(i) => sol.phi[i],
            OpfVar::Pe(i) => sol.p_e[i],
            OpfVar::Pg(i) => sol.p_g[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppRow {
    pub terms: Vec<(OpfVar, f64)>,
    pub rhs: f64,
}

/// Linear rows `Σ a·v ≤ b` and `Σ a·v = b` over `(φ, p_e, p_g)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApplicationConstraints {
    pub inequalities: Vec<AppRow>,
    pub equalities: Vec<AppRow>,
}

impl ApplicationConstraints {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn le(mut self, terms: Vec<(OpfVar, f64)>, rhs: f64) -> Self {
        self.inequalities.push(AppRow { terms, rhs });
        self
    }

    pub fn eq(mut self, terms: Vec<(OpfVar, f64)>, rhs: f64) -> Self {
        self.equalities.push(AppRow { terms, rhs });
        self
    }

    pub fn bounds(self, v: OpfVar, lo: f64, hi: f64) -> Self {
        let mut s = self;
        if hi.is_finite() {
            s = s.le(vec![(v, 1.0)], hi);
        }
        if lo.is_finite() {
            s = s.le(vec![(v, -1.0)], -lo);
        }
        s
    }

    pub fn fix(self, v: OpfVar, value: f64) -> Self {
        self.eq(vec![(v, 1.0)], value)
    }

    /// Pins injections at node positions `k` to `values[k]` where given.
    pub fn fixed_injections(values: &[Option<f64>]) -> Self {
        values
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .fold(Self::new(), |s, (k, v)| s.fix(OpfVar::Pg(k), v))
    }

    pub fn line_limits(self, lo: f64, hi: f64, lines: usize) -> Self {
        (0..2 * lines).fold(self, |s, k| s.bounds(OpfVar::Pe(k), lo, hi))
    }

    fn apply(&self, prog: &mut ConicProgram, vars: &FlowVars) -> Result<(), OpfError> {
        let map = |row: &AppRow| -> Result<Vec<(usize, f64)>, OpfError> {
            row.terms
                .iter()
                .map(|&(v, a)| {
                    let (len, i) = match v {
                        OpfVar::Phi(i) => (vars.phi.len(), i),
                        OpfVar::Pe(i) => (vars.p_e.len(), i),
                        OpfVar::Pg(i) => (vars.p_g.len(), i),
                    };
                    if i >= len {
                        return Err(OpfError::DimensionMismatch {
                            what: "application constraint index",
                            expected: len,
                            got: i,
                        });
                    }
                    Ok((v.index(vars), a))
                })
                .collect()
        };
        for r in &self.inequalities {
            prog.add_le(&map(r)?, r.rhs);
        }
        for r in &self.equalities {
            prog.add_eq(&map(r)?, r.rhs);
        }
        Ok(())
    }

    /// Largest violation at a solution point.
    pub fn violation(&self, sol: &OpfSolution) -> f64 {
        let eval = |r: &AppRow| r.terms.iter().map(|&(v, a)| a * v.value(sol)).sum::<f64>();
        let le = self
            .inequalities
            .iter()
            .map(|r| eval(r) - r.rhs)
            .fold(0.0, f64::max);
        let eq = self
            .equalities
            .iter()
            .map(|r| (eval(r) - r.rhs).abs())
            .fold(0.0, f64::max);
        le.max(eq)
    }
}

/// Linear cost over `(φ, p_e, p_g)`; empty vectors mean zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpfObjective {
    pub phi: Vec<f64>,
    pub p_e: Vec<f64>,
    pub p_g: Vec<f64>,
}

impl OpfObjective {
    /// Total active losses `Σ p_g`.
    pub fn losses(grid: &Grid) -> Self {
        Self {
            p_g: vec![1.0; grid.node_count()],
            ..Self::default()
        }
    }

    pub fn injections(costs: Vec<f64>) -> Self {
        Self {
            p_g: costs,
            ..Self::default()
        }
    }

    fn apply(&self, prog: &mut ConicProgram, vars: &FlowVars) -> Result<(), OpfError> {
        for (what, costs, range) in [
            ("phi cost", &self.phi, &vars.phi),
            ("line power cost", &self.p_e, &vars.p_e),
            ("injection cost", &self.p_g, &vars.p_g),
        ] {
            if !costs.is_empty() && costs.len() != range.len() {
                return Err(OpfError::DimensionMismatch {
                    what,
                    expected: range.len(),
                    got: costs.len(),
                });
            }
            for (c, i) in costs.iter().zip(range.clone()) {
                prog.add_cost(i, *c);
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, phi: &[f64], p_e: &[f64], p_g: &[f64]) -> f64 {
        let dot = |c: &[f64], x: &[f64]| c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        dot(&self.phi, phi) + dot(&self.p_e, p_e) + dot(&self.p_g, p_g)
    }
}

/// Everything needed to build and solve one single-step problem.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    pub grid: Grid,
    pub variant: OpfVariant,
    pub constraints: ApplicationConstraints,
    pub objective: OpfObjective,
}

/// A built program and where its flow block lives.
#[derive(Debug, Clone)]
pub struct BuiltOpf {
    pub program: MixedBinaryProgram,
    pub vars: FlowVars,
}

fn build(
    grid: &Grid,
    variant: &OpfVariant,
    app: &ApplicationConstraints,
    objective: &OpfObjective,
) -> Result<BuiltOpf, OpfError> {
    grid.validate_radial()
        .map_err(|e| OpfError::Physics(e.into()))?;
    let mut prog = ConicProgram::new();
    let vars = add_flow_block(&mut prog, grid, variant)?;
    app.apply(&mut prog, &vars)?;
    objective.apply(&mut prog, &vars)?;
    Ok(BuiltOpf {
        program: MixedBinaryProgram::continuous(prog),
        vars,
    })
}

/// Known-coefficient problem in `φ` space with the `β`-augmented disk
/// relaxation.
pub fn build_reference_opf(
    grid: &Grid,
    coeffs: &[EffectiveLineCoeffs],
    app: &ApplicationConstraints,
    objective: &OpfObjective,
    beta: f64,
) -> Result<BuiltOpf, OpfError> {
    let variant = OpfVariant {
        tag: VariantTag::Reference,
        beta,
        coeffs: coeffs.to_vec(),
        model: None,
        basis: None,
    };
    build(grid, &variant, app, objective)
}

/// Per-line Hankel model with explicit nodal coupling. `relaxed = false`
/// tags the result for post-solve projection onto the unit circle.
pub fn build_dd_opf(
    grid: &Grid,
    model: Arc<DataDrivenModel>,
    app: &ApplicationConstraints,
    objective: &OpfObjective,
    relaxed: bool,
    beta: f64,
) -> Result<(OpfVariant, BuiltOpf), OpfError> {
    let tag = if relaxed {
        VariantTag::ConvexDd
    } else {
        VariantTag::NonconvexDd
    };
    let variant = OpfVariant::data_driven(tag, model, beta)?;
    let built = build(grid, &variant, app, objective)?;
    Ok((variant, built))
}

/// All-pairs Hankel model whose output block also carries the injections,
/// so no grid topology enters the program.
pub fn build_generalized_dd_opf(
    grid: &Grid,
    model: Arc<DataDrivenModel>,
    app: &ApplicationConstraints,
    objective: &OpfObjective,
    beta: f64,
) -> Result<(OpfVariant, BuiltOpf), OpfError> {
    let variant = OpfVariant::data_driven(VariantTag::GeneralizedDd, model, beta)?;
    let built = build(grid, &variant, app, objective)?;
    Ok((variant, built))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightnessReport {
    /// `1 − (cos² + sin²)` per pair.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpfSolution {
    pub tag: VariantTag,
    pub phi: Vec<f64>,
    /// `atan2(sin, cos)` per pair.
    pub theta: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub p_e: Vec<f64>,
    pub p_g: Vec<f64>,
    /// Application objective, without the `β` term.
    pub objective: f64,
    /// Objective the solver minimized, including `−β Σ cos`.
    pub augmented_objective: f64,
    pub tightness: TightnessReport,
    /// Whether the circle projection ran and moved the point.
    pub projected: bool,
    pub solve_time: f64,
}

impl OpfSolution {
    pub fn from_program(
        tag: VariantTag,
        vars: &FlowVars,
        x: &[f64],
        beta: f64,
        objective: f64,
    ) -> Self {
        let phi = x[vars.phi.clone()].to_vec();
        let cos_sum: f64 = (0..vars.pairs()).map(|k| x[vars.cos(k)]).sum();
        let mut s = Self {
            tag,
            theta: thetas(&phi),
            alpha: vars.alpha.clone().map(|a| x[a].to_vec()),
            p_e: x[vars.p_e.clone()].to_vec(),
            p_g: x[vars.p_g.clone()].to_vec(),
            objective,
            augmented_objective: objective - beta * cos_sum,
            tightness: TightnessReport {
                residuals: Vec::new(),
                max_residual: 0.0,
                tol: 0.0,
                pass: true,
            },
            phi,
            projected: false,
            solve_time: 0.0,
        };
        s.tightness = check_tightness(&s, 1e-6);
        s
    }
}

/// `atan2(sin, cos)` per pair of a lifted vector.
pub fn thetas(phi: &[f64]) -> Vec<f64> {
    phi[1..].chunks(2).map(|p| p[1].atan2(p[0])).collect()
}

pub fn check_tightness(sol: &OpfSolution, tol: f64) -> TightnessReport {
    let residuals: Vec<f64> = sol.phi[1..]
        .chunks(2)
        .map(|p| 1.0 - (p[0] * p[0] + p[1] * p[1]))
        .collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    TightnessReport {
        pass: max_residual <= tol,
        residuals,
        max_residual,
        tol,
    }
}

/// Scales every `(cos, sin)` pair onto the unit circle; pairs at the origin
/// become `(1, 0)`. Returns whether anything moved.
pub fn project_onto_circle(phi: &mut [f64]) -> bool {
    let mut moved = false;
    for (k, p) in phi[1..].chunks_mut(2).enumerate() {
        let r = p[0].hypot(p[1]);
        if r == 0.0 {
            log::warn!("pair {k} at the origin, projected to (1, 0)");
            p[0] = 1.0;
            p[1] = 0.0;
            moved = true;
        } else if r != 1.0 {
            moved |= (r - 1.0).abs() > f64::EPSILON;
            p[0] /= r;
            p[1] /= r;
        }
    }
    moved
}

/// `α` (data-driven variants), line powers and injections implied by `φ`.
#[allow(clippy::type_complexity)]
pub fn flows_for_phi(
    grid: &Grid,
    variant: &OpfVariant,
    phi: &[f64],
) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>), OpfError> {
    let ne = grid.edge_count();
    match variant.model() {
        None => {
            let p_e = crate::physics::flows_from_angles(grid, &variant.coeffs, &thetas(phi))?;
            let p_g = crate::physics::injections_from_flows(grid, &p_e)?;
            Ok((None, p_e, p_g))
        }
        Some(m) => {
            let a = m.alpha(phi)?;
            let out = m.outputs_for(&a);
            let p_e = out[..2 * ne].to_vec();
            let p_g = if variant.tag == VariantTag::GeneralizedDd {
                out[2 * ne..].to_vec()
            } else {
                crate::physics::injections_from_flows(grid, &p_e)?
            };
            Ok((Some(a.iter().copied().collect()), p_e, p_g))
        }
    }
}

/// Projects every pair onto the circle and re-derives line powers and
/// injections from the variant's map.
pub fn restore_tightness(sol: &OpfSolution, problem: &OpfProblem) -> Result<OpfSolution, OpfError> {
    let mut phi = sol.phi.clone();
    let moved = project_onto_circle(&mut phi);
    let variant = &problem.variant;
    let (alpha, p_e, p_g) = flows_for_phi(&problem.grid, variant, &phi)?;
    let objective = problem.objective.evaluate(&phi, &p_e, &p_g);
    let cos_sum: f64 = phi[1..].chunks(2).map(|p| p[0]).sum();
    let mut out = OpfSolution {
        tag: sol.tag,
        theta: thetas(&phi),
        alpha,
        p_e,
        p_g,
        objective,
        augmented_objective: objective - variant.beta * cos_sum,
        tightness: sol.tightness.clone(),
        projected: moved,
        solve_time: sol.solve_time,
        phi,
    };
    out.tightness = check_tightness(&out, sol.tightness.tol);
    let violation = problem.constraints.violation(&out);
    if violation > PROJECTION_TOL {
        return Err(OpfError::ProjectionInfeasible { violation });
    }
    Ok(out)
}

impl OpfProblem {
    pub fn new(
        grid: Grid,
        variant: OpfVariant,
        constraints: ApplicationConstraints,
        objective: OpfObjective,
    ) -> Self {
        Self {
            grid,
            variant,
            constraints,
            objective,
        }
    }

    pub fn build(&self) -> Result<BuiltOpf, OpfError> {
        build(
            &self.grid,
            &self.variant,
            &self.constraints,
            &self.objective,
        )
    }

    /// Relaxed solve; the non-convex variant is then projected onto the circle.
    pub fn solve(&self, opts: &MixedBinaryOptions) -> Result<OpfSolution, OpfError> {
        let built = self.build()?;
        let s = solve_mixed_binary(&built.program, Strategy::Auto, opts)?;
        match s.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => return Err(OpfError::Infeasible),
            SolveStatus::Unbounded => return Err(OpfError::Unbounded),
            SolveStatus::ToleranceNotMet => return Err(OpfError::ToleranceNotMet),
        }
        let phi = &s.x[built.vars.phi.clone()];
        let p_e = &s.x[built.vars.p_e.clone()];
        let p_g = &s.x[built.vars.p_g.clone()];
        let objective = self.objective.evaluate(phi, p_e, p_g);
        let mut sol = OpfSolution::from_program(
            self.variant.tag,
            &built.vars,
            &s.x,
            self.variant.beta,
            objective,
        );
        sol.solve_time = s.solve_time;
        sol.alpha = sol.alpha.map(|a| self.variant.alpha_from_block(&a));
        if self.variant.tag == VariantTag::NonconvexDd {
            sol = restore_tightness(&sol, self)?;
        }
        Ok(sol)
    }
}
