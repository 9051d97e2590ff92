//! Conic programs with unit-disk constraints, a Clarabel-backed interior-point
//! solve, and a mixed-binary layer on top.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use rayon::prelude::*;

use crate::error::OptError;

/// Sparse row `Σ coef·x[idx] (= | ≤) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    fn normalized(terms: &[(usize, f64)], rhs: f64) -> Self {
        let mut terms = terms.to_vec();
        terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (i, v) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        Self { terms: merged, rhs }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, v)| v * x[i]).sum()
    }
}

/// Linear objective over box bounds, linear rows and disjoint unit disks on
/// consecutive variable pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    cost: Vec<f64>,
    constant: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    eq: Vec<LinearRow>,
    le: Vec<LinearRow>,
    balls: Vec<usize>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, lb: f64, ub: f64, cost: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lb);
        self.upper.push(ub);
        self.cost.len() - 1
    }

    pub fn add_free(&mut self, cost: f64) -> usize {
        self.add_var(f64::NEG_INFINITY, f64::INFINITY, cost)
    }

    /// Adds `count` variables sharing bounds and cost; returns the first index.
    pub fn add_vars(&mut self, count: usize, lb: f64, ub: f64, cost: f64) -> usize {
        let first = self.cost.len();
        for _ in 0..count {
            self.add_var(lb, ub, cost);
        }
        first
    }

    pub fn add_eq(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.eq.push(LinearRow::normalized(terms, rhs));
    }

    pub fn add_le(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.le.push(LinearRow::normalized(terms, rhs));
    }

    pub fn add_ge(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let neg: Vec<_> = terms.iter().map(|&(i, v)| (i, -v)).collect();
        self.add_le(&neg, -rhs);
    }

    /// `x[l]² + x[l+1]² ≤ 1`.
    pub fn add_ball(&mut self, l: usize) {
        self.balls.push(l);
    }

    pub fn set_bounds(&mut self, i: usize, lb: f64, ub: f64) {
        self.lower[i] = lb;
        self.upper[i] = ub;
    }

    pub fn set_cost(&mut self, i: usize, c: f64) {
        self.cost[i] = c;
    }

    pub fn add_cost(&mut self, i: usize, c: f64) {
        self.cost[i] += c;
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }
    pub fn cost(&self) -> &[f64] {
        &self.cost
    }
    pub fn constant(&self) -> f64 {
        self.constant
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
    pub fn equalities(&self) -> &[LinearRow] {
        &self.eq
    }
    pub fn inequalities(&self) -> &[LinearRow] {
        &self.le
    }
    pub fn balls(&self) -> &[usize] {
        &self.balls
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.constant + self.cost.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn validate(&self) -> Result<(), OptError> {
        let n = self.num_vars();
        for (i, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(OptError::InvalidProgram(format!(
                    "variable {i} has bounds [{l}, {u}]"
                )));
            }
        }
        for (kind, rows) in [("equality", &self.eq), ("inequality", &self.le)] {
            for (r, row) in rows.iter().enumerate() {
                if let Some(&(i, _)) = row.terms.iter().find(|t| t.0 >= n) {
                    return Err(OptError::InvalidProgram(format!(
                        "{kind} row {r} references variable {i} of {n}"
                    )));
                }
                if !row.rhs.is_finite() || row.terms.iter().any(|t| !t.1.is_finite()) {
                    return Err(OptError::InvalidProgram(format!(
                        "{kind} row {r} has non-finite data"
                    )));
                }
            }
        }
        let mut used = vec![false; n];
        for &l in &self.balls {
            if l + 1 >= n {
                return Err(OptError::InvalidProgram(format!(
                    "ball on ({l}, {}) exceeds {n} variables",
                    l + 1
                )));
            }
            if used[l] || used[l + 1] {
                return Err(OptError::InvalidProgram(format!(
                    "ball on ({l}, {}) overlaps another ball",
                    l + 1
                )));
            }
            used[l] = true;
            used[l + 1] = true;
        }
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(OptError::InvalidProgram("non-finite cost".into()));
        }
        Ok(())
    }

    /// Largest violation of any bound, row or disk at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.num_vars() {
            worst = worst.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        for row in &self.eq {
            worst = worst.max((row.eval(x) - row.rhs).abs());
        }
        for row in &self.le {
            worst = worst.max(row.eval(x) - row.rhs);
        }
        for &l in &self.balls {
            worst = worst.max(x[l].hypot(x[l + 1]) - 1.0);
        }
        worst
    }

    /// Plain-text dump: one line per variable, row and disk.
    ///
    /// ```text
    /// program vars=<n> eq=<m_eq> le=<m_le> balls=<k> constant=<c>
    /// var <i> lb=<l> ub=<u> cost=<c>
    /// eq <i>:<coef> ... = <rhs>
    /// le <i>:<coef> ... <= <rhs>
    /// ball <l> <l+1>
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "program vars={} eq={} le={} balls={} constant={}",
            self.num_vars(),
            self.eq.len(),
            self.le.len(),
            self.balls.len(),
            self.constant
        );
        for i in 0..self.num_vars() {
            let _ = writeln!(
                s,
                "var {i} lb={} ub={} cost={}",
                self.lower[i], self.upper[i], self.cost[i]
            );
        }
        let row = |s: &mut String, tag: &str, r: &LinearRow, op: &str| {
            let _ = write!(s, "{tag}");
            for (i, v) in &r.terms {
                let _ = write!(s, " {i}:{v}");
            }
            let _ = writeln!(s, " {op} {}", r.rhs);
        };
        for r in &self.eq {
            row(&mut s, "eq", r, "=");
        }
        for r in &self.le {
            row(&mut s, "le", r, "<=");
        }
        for &l in &self.balls {
            let _ = writeln!(s, "ball {l} {}", l + 1);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBinaryProgram {
    base: ConicProgram,
    binaries: Vec<usize>,
}

impl MixedBinaryProgram {
    /// Clamps the bounds of every binary index into `[0, 1]`.
    pub fn new(mut base: ConicProgram, binaries: Vec<usize>) -> Result<Self, OptError> {
        let n = base.num_vars();
        let mut seen = vec![false; n];
        for &i in &binaries {
            if i >= n {
                return Err(OptError::InvalidProgram(format!(
                    "binary index {i} of {n} variables"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(OptError::InvalidProgram(format!("binary {i} listed twice")));
            }
            base.lower[i] = base.lower[i].max(0.0);
            base.upper[i] = base.upper[i].min(1.0);
        }
        Ok(Self { base, binaries })
    }

    pub fn continuous(base: ConicProgram) -> Self {
        Self {
            base,
            binaries: Vec::new(),
        }
    }

    pub fn base(&self) -> &ConicProgram {
        &self.base
    }
    pub fn binaries(&self) -> &[usize] {
        &self.binaries
    }

    pub fn to_text(&self) -> String {
        let mut s = self.base.to_text();
        if !self.binaries.is_empty() {
            let list: Vec<String> = self.binaries.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "binary {}", list.join(" "));
        }
        s
    }

    fn fixed(&self, assignment: &[Option<u8>]) -> ConicProgram {
        let mut p = self.base.clone();
        for (&i, a) in self.binaries.iter().zip(assignment) {
            if let Some(v) = a {
                let v = f64::from(*v);
                p.lower[i] = v;
                p.upper[i] = v;
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    ToleranceNotMet,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::ToleranceNotMet => "tolerance_not_met",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residuals: KktResiduals,
    pub solve_time: f64,
    pub iterations: u32,
    /// Convex subproblems solved to produce this result.
    pub subproblems: usize,
}

impl Solution {
    fn failed(status: SolveStatus, n: usize, solve_time: f64, subproblems: usize) -> Self {
        Self {
            x: vec![f64::NAN; n],
            objective: match status {
                SolveStatus::Unbounded => f64::NEG_INFINITY,
                _ => f64::INFINITY,
            },
            status,
            kkt_residuals: KktResiduals::default(),
            solve_time,
            iterations: 0,
            subproblems,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Primal and dual feasibility tolerance.
    pub tol: f64,
    /// Absolute and relative duality-gap tolerance.
    pub gap_tol: f64,
    pub max_iter: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            gap_tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Fixed variables substituted out, singleton rows folded into bounds and
/// disks with a fixed coordinate turned into bounds on the other.
struct Presolved {
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Reduced index of each surviving variable.
    map: Vec<Option<usize>>,
    free: Vec<usize>,
}

fn is_fixed(lower: &[f64], upper: &[f64], i: usize) -> bool {
    lower[i] == upper[i]
}

fn presolve(prog: &ConicProgram, tol: f64) -> Option<Presolved> {
    let mut lower = prog.lower.clone();
    let mut upper = prog.upper.clone();
    let split = |row: &LinearRow, lower: &[f64], upper: &[f64]| {
        let mut constant = 0.0;
        let mut free = Vec::new();
        for &(i, a) in &row.terms {
            if is_fixed(lower, upper, i) {
                constant += a * lower[i];
            } else {
                free.push((i, a));
            }
        }
        (constant, free)
    };
    let slack = |v: f64| tol * (1.0 + v.abs());
    let mut changed = true;
    while changed {
        changed = false;
        for row in &prog.eq {
            let (c, free) = split(row, &lower, &upper);
            match free.as_slice() {
                [] if (c - row.rhs).abs() > slack(row.rhs) => return None,
                &[(i, a)] => {
                    let v = (row.rhs - c) / a;
                    if v < lower[i] - slack(v) || v > upper[i] + slack(v) {
                        return None;
                    }
                    lower[i] = v;
                    upper[i] = v;
                    changed = true;
                }
                _ => {}
            }
        }
        for row in &prog.le {
            let (c, free) = split(row, &lower, &upper);
            match free.as_slice() {
                [] if c - row.rhs > slack(row.rhs) => return None,
                &[(i, a)] => {
                    let bound = (row.rhs - c) / a;
                    if a > 0.0 && bound < upper[i] {
                        upper[i] = bound;
                        changed = true;
                    } else if a < 0.0 && bound > lower[i] {
                        lower[i] = bound;
                        changed = true;
                    }
                    if lower[i] > upper[i] {
                        if lower[i] - upper[i] > slack(bound) {
                            return None;
                        }
                        upper[i] = lower[i];
                    }
                }
                _ => {}
            }
        }
        for &l in &prog.balls {
            let (fl, fr) = (is_fixed(&lower, &upper, l), is_fixed(&lower, &upper, l + 1));
            let (fixed, other) = match (fl, fr) {
                (true, true) => {
                    if lower[l].hypot(lower[l + 1]) > 1.0 + tol {
                        return None;
                    }
                    continue;
                }
                (true, false) => (l, l + 1),
                (false, true) => (l + 1, l),
                (false, false) => continue,
            };
            let v = lower[fixed];
            if v.abs() > 1.0 + tol {
                return None;
            }
            let r = (1.0 - v * v).max(0.0).sqrt();
            if upper[other] > r {
                upper[other] = r;
                changed = true;
            }
            if lower[other] < -r {
                lower[other] = -r;
                changed = true;
            }
            if lower[other] > upper[other] {
                if lower[other] - upper[other] > tol {
                    return None;
                }
                upper[other] = lower[other];
            }
        }
    }
    let mut map = vec![None; prog.num_vars()];
    let mut free = Vec::new();
    for i in 0..prog.num_vars() {
        if !is_fixed(&lower, &upper, i) {
            map[i] = Some(free.len());
            free.push(i);
        }
    }
    Some(Presolved {
        lower,
        upper,
        map,
        free,
    })
}

pub fn solve_convex(prog: &ConicProgram, opts: &SolverOptions) -> Result<Solution, OptError> {
    prog.validate()?;
    let start = Instant::now();
    let n_full = prog.num_vars();
    let Some(pre) = presolve(prog, opts.tol.max(1e-9)) else {
        return Ok(Solution::failed(
            SolveStatus::Infeasible,
            n_full,
            start.elapsed().as_secs_f64(),
            1,
        ));
    };
    let n = pre.free.len();
    let expand = |xr: &[f64]| -> Vec<f64> {
        (0..n_full)
            .map(|i| match pre.map[i] {
                Some(k) => xr[k],
                None => pre.lower[i],
            })
            .collect()
    };
    let exact = |x: Vec<f64>, iterations: u32| Solution {
        objective: prog.objective_value(&x),
        x,
        status: SolveStatus::Optimal,
        kkt_residuals: KktResiduals::default(),
        solve_time: start.elapsed().as_secs_f64(),
        iterations,
        subproblems: 1,
    };

    let (mut ri, mut ci, mut vals, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut push_row = |terms: &[(usize, f64)], rhs: f64, b: &mut Vec<f64>| {
        let r = b.len();
        for &(i, v) in terms {
            ri.push(r);
            ci.push(i);
            vals.push(v);
        }
        b.push(rhs);
    };
    // Rows with at least two surviving variables, in reduced indices.
    let reduce = |row: &LinearRow| -> Option<(Vec<(usize, f64)>, f64)> {
        let mut rhs = row.rhs;
        let mut terms = Vec::new();
        for &(i, a) in &row.terms {
            match pre.map[i] {
                Some(k) => terms.push((k, a)),
                None => rhs -= a * pre.lower[i],
            }
        }
        (terms.len() >= 2).then_some((terms, rhs))
    };

    for (terms, rhs) in prog.eq.iter().filter_map(reduce) {
        push_row(&terms, rhs, &mut b);
    }
    let n_zero = b.len();
    for (terms, rhs) in prog.le.iter().filter_map(reduce) {
        push_row(&terms, rhs, &mut b);
    }
    for (k, &i) in pre.free.iter().enumerate() {
        if pre.upper[i].is_finite() {
            push_row(&[(k, 1.0)], pre.upper[i], &mut b);
        }
        if pre.lower[i].is_finite() {
            push_row(&[(k, -1.0)], -pre.lower[i], &mut b);
        }
    }
    let n_nonneg = b.len() - n_zero;
    let balls: Vec<(usize, usize)> = prog
        .balls
        .iter()
        .filter_map(|&l| Some((pre.map[l]?, pre.map[l + 1]?)))
        .collect();
    for &(u, v) in &balls {
        push_row(&[], 1.0, &mut b);
        push_row(&[(u, -1.0)], 0.0, &mut b);
        push_row(&[(v, -1.0)], 0.0, &mut b);
    }
    let cost: Vec<f64> = pre.free.iter().map(|&i| prog.cost[i]).collect();

    if n == 0 {
        return Ok(exact(expand(&[]), 0));
    }
    if b.is_empty() {
        if cost.iter().any(|&c| c != 0.0) {
            let mut out = Solution::failed(SolveStatus::Unbounded, n_full, 0.0, 1);
            out.solve_time = start.elapsed().as_secs_f64();
            return Ok(out);
        }
        return Ok(exact(expand(&vec![0.0; n]), 0));
    }

    let mut cones = Vec::new();
    if n_zero > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_zero));
    }
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }
    cones.extend(balls.iter().map(|_| SupportedConeT::SecondOrderConeT(3)));

    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, ri, ci, vals);
    let p = CscMatrix::zeros((n, n));
    let attempt = |regularization: f64| -> Result<DefaultSolver<f64>, OptError> {
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(opts.tol)
            .tol_gap_abs(opts.gap_tol)
            .tol_gap_rel(opts.gap_tol)
            .max_iter(opts.max_iter)
            .static_regularization_constant(regularization)
            .build()
            .map_err(|e| OptError::InvalidProgram(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &cost, &a, &b, &cones, settings)
            .map_err(|e| OptError::InvalidProgram(e.to_string()))?;
        solver.solve();
        Ok(solver)
    };
    let clean = |s: SolverStatus| {
        matches!(
            s,
            SolverStatus::Solved | SolverStatus::PrimalInfeasible | SolverStatus::DualInfeasible
        )
    };
    let mut solver = attempt(REGULARIZATION[0])?;
    for &reg in &REGULARIZATION[1..] {
        if clean(solver.solution.status) {
            break;
        }
        log::debug!(
            "retrying with regularization {reg:e} after {:?}",
            solver.solution.status
        );
        solver = attempt(reg)?;
    }

    let sol = &solver.solution;
    let info = &solver.info;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved | SolverStatus::MaxIterations | SolverStatus::MaxTime => {
            SolveStatus::ToleranceNotMet
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => {
            return Err(OptError::NumericalBreakdown {
                iteration: sol.iterations,
            })
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    if matches!(status, SolveStatus::Infeasible | SolveStatus::Unbounded) {
        let mut out = Solution::failed(status, n_full, elapsed, 1);
        out.iterations = sol.iterations;
        return Ok(out);
    }
    let x = expand(&sol.x);
    Ok(Solution {
        objective: prog.objective_value(&x),
        x,
        status,
        kkt_residuals: KktResiduals {
            primal: info.res_primal,
            dual: info.res_dual,
            gap: info.gap_abs.min(info.gap_rel),
        },
        solve_time: elapsed,
        iterations: sol.iterations,
        subproblems: 1,
    })
}

/// Static KKT regularization per attempt: the solver default, then a
/// stronger value for nearly infeasible subproblems whose certificate the
/// first attempt cannot close.
const REGULARIZATION: [f64; 2] = [1e-8, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Auto,
    Enumerate,
    BranchAndBound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedBinaryOptions {
    pub solver: SolverOptions,
    /// Largest number of assignments `Enumerate` will visit; `Auto` enumerates
    /// up to this count.
    pub enumerate_cap: usize,
    pub integrality_tol: f64,
    /// Relative objective window treated as a tie.
    pub tie_tol: f64,
    pub parallel: bool,
}

impl Default for MixedBinaryOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            enumerate_cap: 4096,
            integrality_tol: 1e-6,
            tie_tol: 1e-7,
            parallel: true,
        }
    }
}

struct Incumbent {
    objective: f64,
    assignment: Vec<u8>,
    solution: Solution,
}

impl Incumbent {
    fn tie(&self, tol: f64) -> f64 {
        tol * (1.0 + self.objective.abs())
    }
}

fn improves(best: &Option<Incumbent>, obj: f64, assignment: &[u8], tol: f64) -> bool {
    match best {
        None => true,
        Some(b) => {
            let t = b.tie(tol);
            obj < b.objective - t || (obj <= b.objective + t && assignment < &b.assignment[..])
        }
    }
}

pub fn solve_mixed_binary(
    prog: &MixedBinaryProgram,
    strategy: Strategy,
    opts: &MixedBinaryOptions,
) -> Result<Solution, OptError> {
    prog.base.validate()?;
    let nb = prog.binaries.len();
    let combos = 1usize
        .checked_shl(nb as u32)
        .filter(|_| nb < usize::BITS as usize);
    let fits = combos.is_some_and(|c| c <= opts.enumerate_cap);
    match strategy {
        Strategy::Enumerate if !fits => Err(OptError::TooManyBinaries {
            count: nb,
            cap: opts.enumerate_cap,
        }),
        Strategy::Enumerate => enumerate(prog, opts),
        Strategy::Auto if fits => enumerate(prog, opts),
        _ => branch_and_bound(prog, opts),
    }
}

fn assignment_of(bits: usize, nb: usize) -> Vec<u8> {
    (0..nb)
        .map(|j| ((bits >> (nb - 1 - j)) & 1) as u8)
        .collect()
}

fn enumerate(prog: &MixedBinaryProgram, opts: &MixedBinaryOptions) -> Result<Solution, OptError> {
    let start = Instant::now();
    let nb = prog.binaries.len();
    let total = 1usize << nb;
    let solve_one = |bits: usize| -> Result<(Vec<u8>, Solution), OptError> {
        let a = assignment_of(bits, nb);
        let fixed: Vec<Option<u8>> = a.iter().map(|&v| Some(v)).collect();
        let s = solve_convex(&prog.fixed(&fixed), &opts.solver)?;
        Ok((a, s))
    };
    let results: Vec<Result<(Vec<u8>, Solution), OptError>> = if opts.parallel {
        (0..total).into_par_iter().map(solve_one).collect()
    } else {
        (0..total).map(solve_one).collect()
    };

    let mut best: Option<Incumbent> = None;
    let mut saw_unbounded = false;
    let mut saw_inexact = false;
    for r in results {
        let (a, s) = r?;
        match s.status {
            SolveStatus::Infeasible => continue,
            SolveStatus::Unbounded => {
                saw_unbounded = true;
                continue;
            }
            SolveStatus::ToleranceNotMet => saw_inexact = true,
            SolveStatus::Optimal => {}
        }
        if improves(&best, s.objective, &a, opts.tie_tol) {
            best = Some(Incumbent {
                objective: s.objective,
                assignment: a,
                solution: s,
            });
        }
    }
    finish(prog, best, saw_unbounded, saw_inexact, start, total)
}

fn finish(
    prog: &MixedBinaryProgram,
    best: Option<Incumbent>,
    unbounded: bool,
    inexact: bool,
    start: Instant,
    subproblems: usize,
) -> Result<Solution, OptError> {
    let elapsed = start.elapsed().as_secs_f64();
    let n = prog.base.num_vars();
    if unbounded {
        return Ok(Solution::failed(
            SolveStatus::Unbounded,
            n,
            elapsed,
            subproblems,
        ));
    }
    match best {
        None => Ok(Solution::failed(
            SolveStatus::Infeasible,
            n,
            elapsed,
            subproblems,
        )),
        Some(inc) => {
            let mut s = inc.solution;
            for (&i, &v) in prog.binaries.iter().zip(&inc.assignment) {
                s.x[i] = f64::from(v);
            }
            if inexact && s.status == SolveStatus::Optimal {
                log::debug!("some subproblems stopped short of tolerance");
            }
            s.solve_time = elapsed;
            s.subproblems = subproblems;
            Ok(s)
        }
    }
}

struct Node {
    bound: f64,
    seq: usize,
    fixed: Vec<Option<u8>>,
    x: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap: smallest bound first, then oldest node.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn branch_and_bound(
    prog: &MixedBinaryProgram,
    opts: &MixedBinaryOptions,
) -> Result<Solution, OptError> {
    let start = Instant::now();
    let nb = prog.binaries.len();
    let mut solves = 0usize;
    let mut best: Option<Incumbent> = None;
    let mut inexact = false;
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;

    let root_fixed = vec![None; nb];
    let root = solve_convex(&prog.fixed(&root_fixed), &opts.solver)?;
    solves += 1;
    match root.status {
        SolveStatus::Infeasible => {
            return finish(prog, None, false, false, start, solves);
        }
        SolveStatus::Unbounded => return finish(prog, None, true, false, start, solves),
        SolveStatus::ToleranceNotMet => inexact = true,
        SolveStatus::Optimal => {}
    }
    heap.push(Node {
        bound: root.objective,
        seq,
        fixed: root_fixed,
        x: root.x,
    });

    while let Some(node) = heap.pop() {
        if let Some(inc) = &best {
            let t = inc.tie(opts.tie_tol);
            if node.bound > inc.objective + t {
                break;
            }
            // Within the tie window only a lexicographically smaller
            // assignment can still replace the incumbent.
            let smallest: Vec<u8> = node.fixed.iter().map(|f| f.unwrap_or(0)).collect();
            if node.bound >= inc.objective - t && smallest >= inc.assignment {
                continue;
            }
        }

        let mut branch: Option<(usize, f64)> = None;
        for (j, f) in node.fixed.iter().enumerate() {
            if f.is_some() {
                continue;
            }
            let v = node.x[prog.binaries[j]];
            let frac = v.min(1.0 - v).max(0.0);
            if frac > opts.integrality_tol && branch.is_none_or(|(_, bf)| frac > bf) {
                branch = Some((j, frac));
            }
        }

        let Some((j, _)) = branch else {
            let assignment: Vec<u8> = node
                .fixed
                .iter()
                .zip(&prog.binaries)
                .map(|(f, &i)| f.unwrap_or(if node.x[i] >= 0.5 { 1 } else { 0 }))
                .collect();
            let full: Vec<Option<u8>> = assignment.iter().map(|&v| Some(v)).collect();
            let s = solve_convex(&prog.fixed(&full), &opts.solver)?;
            solves += 1;
            match s.status {
                SolveStatus::Optimal | SolveStatus::ToleranceNotMet => {
                    inexact |= s.status == SolveStatus::ToleranceNotMet;
                    if improves(&best, s.objective, &assignment, opts.tie_tol) {
                        best = Some(Incumbent {
                            objective: s.objective,
                            assignment,
                            solution: s,
                        });
                    }
                }
                _ => {}
            }
            // A lexicographically smaller tie may still hide below this node
            // when rounding picked ones.
            if node.fixed.iter().any(|f| f.is_none()) {
                let free: Vec<usize> = (0..nb).filter(|&k| node.fixed[k].is_none()).collect();
                if let Some(&k) = free.iter().find(|&&k| node.x[prog.binaries[k]] >= 0.5) {
                    push_children(
                        prog,
                        opts,
                        &node,
                        k,
                        &mut heap,
                        &mut seq,
                        &mut solves,
                        &mut inexact,
                    )?;
                }
            }
            continue;
        };
        push_children(
            prog,
            opts,
            &node,
            j,
            &mut heap,
            &mut seq,
            &mut solves,
            &mut inexact,
        )?;
    }
    finish(prog, best, false, inexact, start, solves)
}

#[allow(clippy::too_many_arguments)]
fn push_children(
    prog: &MixedBinaryProgram,
    opts: &MixedBinaryOptions,
    node: &Node,
    j: usize,
    heap: &mut BinaryHeap<Node>,
    seq: &mut usize,
    solves: &mut usize,
    inexact: &mut bool,
) -> Result<(), OptError> {
    for v in [0u8, 1] {
        let mut fixed = node.fixed.clone();
        fixed[j] = Some(v);
        let s = solve_convex(&prog.fixed(&fixed), &opts.solver)?;
        *solves += 1;
        match s.status {
            SolveStatus::Optimal | SolveStatus::ToleranceNotMet => {
                *inexact |= s.status == SolveStatus::ToleranceNotMet;
                *seq += 1;
                heap.push(Node {
                    bound: s.objective.max(node.bound),
                    seq: *seq,
                    fixed,
                    x: s.x,
                });
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn disk(cost: [f64; 2]) -> ConicProgram {
        let mut p = ConicProgram::new();
        let x0 = p.add_free(cost[0]);
        p.add_free(cost[1]);
        p.add_ball(x0);
        p
    }

    #[test]
    fn ball_extreme_point() {
        let s = solve_convex(&disk([1.0, 0.0]), &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_relative_eq!(s.x[0], -1.0, epsilon = 1e-7);
        assert_relative_eq!(s.objective, -1.0, epsilon = 1e-7);
    }

    #[test]
    fn linear_cost_over_disk() {
        let s = solve_convex(&disk([-1.0, -1.0]), &SolverOptions::default()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(s.x[0], h, epsilon = 1e-7);
        assert_relative_eq!(s.x[1], h, epsilon = 1e-7);
        assert_relative_eq!(s.objective, -std::f64::consts::SQRT_2, epsilon = 1e-7);
        assert!(s.kkt_residuals.primal <= 1e-8);
        assert!(s.kkt_residuals.dual <= 1e-8);
        assert!(s.kkt_residuals.gap <= 1e-8);
    }

    #[test]
    fn contradictory_equalities_are_infeasible() {
        let mut p = ConicProgram::new();
        let x = p.add_free(0.0);
        p.add_eq(&[(x, 1.0)], 1.0);
        p.add_eq(&[(x, 1.0)], 2.0);
        let s = solve_convex(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        let mut p = ConicProgram::new();
        p.add_var(0.0, f64::INFINITY, -1.0);
        let s = solve_convex(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Unbounded);
    }

    #[test]
    fn malformed_programs_rejected() {
        let mut p = disk([0.0, 0.0]);
        p.add_ball(1);
        assert!(matches!(
            solve_convex(&p, &SolverOptions::default()),
            Err(OptError::InvalidProgram(_))
        ));
        let mut q = ConicProgram::new();
        q.add_var(0.0, 1.0, 0.0);
        q.add_le(&[(3, 1.0)], 0.0);
        assert!(q.validate().is_err());
    }

    #[test]
    fn single_binary() {
        let mut p = ConicProgram::new();
        let x = p.add_var(0.0, 1.0, 1.0);
        let mb = MixedBinaryProgram::new(p, vec![x]).unwrap();
        for st in [
            Strategy::Enumerate,
            Strategy::BranchAndBound,
            Strategy::Auto,
        ] {
            let s = solve_mixed_binary(&mb, st, &MixedBinaryOptions::default()).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            assert_eq!(s.x[x], 0.0);
        }
    }

    fn disk_with_switch() -> MixedBinaryProgram {
        let mut p = ConicProgram::new();
        let x0 = p.add_free(-1.0);
        p.add_free(0.0);
        let d = p.add_var(0.0, 1.0, -2.0);
        p.add_le(&[(x0, 1.0), (d, -1.0)], 0.0);
        p.add_ball(x0);
        MixedBinaryProgram::new(p, vec![d]).unwrap()
    }

    #[test]
    fn switched_disk() {
        let mb = disk_with_switch();
        for st in [Strategy::Enumerate, Strategy::BranchAndBound] {
            let s = solve_mixed_binary(&mb, st, &MixedBinaryOptions::default()).unwrap();
            assert_eq!(s.x[2], 1.0);
            assert_relative_eq!(s.x[0], 1.0, epsilon = 1e-6);
            assert_relative_eq!(s.objective, -3.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn enumerate_cap_enforced() {
        let mut p = ConicProgram::new();
        let first = p.add_vars(13, 0.0, 1.0, 1.0);
        let mb = MixedBinaryProgram::new(p, (first..first + 13).collect()).unwrap();
        let err = solve_mixed_binary(&mb, Strategy::Enumerate, &MixedBinaryOptions::default());
        assert_eq!(
            err,
            Err(OptError::TooManyBinaries {
                count: 13,
                cap: 4096
            })
        );
        let s = solve_mixed_binary(&mb, Strategy::Auto, &MixedBinaryOptions::default()).unwrap();
        assert_relative_eq!(s.objective, 0.0, epsilon = 1e-7);
    }

    #[test]
    fn all_assignments_infeasible() {
        let mut p = ConicProgram::new();
        let d = p.add_var(0.0, 1.0, 0.0);
        let x = p.add_var(0.0, 1.0, 0.0);
        p.add_eq(&[(d, 1.0), (x, 1.0)], 3.0);
        let mb = MixedBinaryProgram::new(p, vec![d]).unwrap();
        for st in [Strategy::Enumerate, Strategy::BranchAndBound] {
            let s = solve_mixed_binary(&mb, st, &MixedBinaryOptions::default()).unwrap();
            assert_eq!(s.status, SolveStatus::Infeasible);
        }
    }

    #[test]
    fn ties_resolve_to_smallest_assignment() {
        // Two interchangeable switches, exactly one required.
        let mut p = ConicProgram::new();
        let a = p.add_var(0.0, 1.0, 1.0);
        let b = p.add_var(0.0, 1.0, 1.0);
        p.add_eq(&[(a, 1.0), (b, 1.0)], 1.0);
        let mb = MixedBinaryProgram::new(p, vec![a, b]).unwrap();
        for st in [Strategy::Enumerate, Strategy::BranchAndBound] {
            let s = solve_mixed_binary(&mb, st, &MixedBinaryOptions::default()).unwrap();
            assert_eq!((s.x[a], s.x[b]), (0.0, 1.0));
        }
    }

    #[test]
    fn text_dump_lists_everything() {
        let mb = disk_with_switch();
        let t = mb.to_text();
        assert!(t.starts_with("program vars=3 eq=0 le=1 balls=1"));
        assert!(t.contains("le 0:1 2:-1 <= 0"));
        assert!(t.contains("ball 0 1"));
        assert!(t.contains("binary 2"));
    }

    // Random knapsack-flavoured programs with disks and up to 6 switches.
    fn random_program(costs: Vec<(f64, f64, f64)>, budget: f64) -> MixedBinaryProgram {
        let mut p = ConicProgram::new();
        let mut bins = Vec::new();
        let mut budget_row = Vec::new();
        for &(c0, c1, cd) in &costs {
            let x = p.add_free(c0);
            p.add_free(c1);
            p.add_ball(x);
            let d = p.add_var(0.0, 1.0, cd);
            p.add_le(&[(x, 1.0), (d, -1.0)], 0.0);
            p.add_le(&[(x, -1.0), (d, -1.0)], 0.0);
            budget_row.push((d, 1.0));
            bins.push(d);
        }
        p.add_le(&budget_row, budget);
        MixedBinaryProgram::new(p, bins).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn strategies_agree_and_relaxation_bounds(
            costs in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0), 1..6),
            budget in 0.5f64..4.0,
        ) {
            let mb = random_program(costs, budget);
            let opts = MixedBinaryOptions::default();
            let e = solve_mixed_binary(&mb, Strategy::Enumerate, &opts).unwrap();
            let b = solve_mixed_binary(&mb, Strategy::BranchAndBound, &opts).unwrap();
            prop_assert_eq!(e.status, SolveStatus::Optimal);
            prop_assert!((e.objective - b.objective).abs() <= 1e-7 * (1.0 + e.objective.abs()));
            let relaxed = solve_convex(mb.base(), &opts.solver).unwrap();
            prop_assert!(relaxed.objective <= e.objective + 1e-7);
            prop_assert!(mb.base().max_violation(&e.x) <= 1e-7);
            prop_assert!(mb.base().max_violation(&b.x) <= 1e-7);
        }

        #[test]
        fn disk_optimum_matches_closed_form(angle in 0.0f64..std::f64::consts::TAU, r in 0.1f64..10.0) {
            let c = [r * angle.cos(), r * angle.sin()];
            let s = solve_convex(&disk(c), &SolverOptions::default()).unwrap();
            prop_assert_eq!(s.status, SolveStatus::Optimal);
            prop_assert!((s.objective + r).abs() <= 1e-7 * (1.0 + r));
            prop_assert!(disk(c).max_violation(&s.x) <= 1e-8);
        }
    }
}
