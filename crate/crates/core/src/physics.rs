//! Constant-voltage active power flow on π-equivalent lines.
//!
//! For a line `{i, j}` with angle difference `θ_ij = θ_i − θ_j`:
//!
//! ```text
//! p_ij = ğ_ij − (g̃ cos θ_ij + b̃ sin θ_ij)
//! p_ji = ğ_ji − (g̃ cos θ_ij − b̃ sin θ_ij)
//! ```
//!
//! and each node injects `p_g,i = Σ_j p_ij` into its lines.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::PhysicsError;
use crate::grid::{Grid, LineParams, NodeId};

/// Voltage-weighted line coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveLineCoeffs {
    /// ğ_ij = (ḡ_ij + g_ij) v̂_i²
    pub self_from: f64,
    /// ğ_ji = (ḡ_ji + g_ij) v̂_j²
    pub self_to: f64,
    /// g̃_ij = g_ij v̂_i v̂_j
    pub transfer_g: f64,
    /// b̃_ij = b_ij v̂_i v̂_j
    pub transfer_b: f64,
}

/// Which end of a line the power is measured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Power leaving the lower-id node `i` into the line.
    From,
    /// Power leaving the higher-id node `j` into the line.
    To,
}

pub fn effective_coeffs(
    line: &LineParams,
    v_from: f64,
    v_to: f64,
) -> Result<EffectiveLineCoeffs, PhysicsError> {
    if !(v_from > 0.0) || !(v_to > 0.0) {
        return Err(PhysicsError::NonpositiveVoltage);
    }
    let g = line.series_conductance;
    let b = line.series_susceptance;
    Ok(EffectiveLineCoeffs {
        self_from: (line.shunt_conductance_from + g) * v_from * v_from,
        self_to: (line.shunt_conductance_to + g) * v_to * v_to,
        transfer_g: g * v_from * v_to,
        transfer_b: b * v_from * v_to,
    })
}

/// Coefficients for every line of the grid, in edge order.
pub fn grid_coeffs(grid: &Grid) -> Vec<EffectiveLineCoeffs> {
    grid.edges()
        .iter()
        .zip(grid.lines())
        .map(|(&(a, b), line)| {
            // voltages are validated positive at grid construction
            effective_coeffs(line, grid.voltage(a).unwrap(), grid.voltage(b).unwrap()).unwrap()
        })
        .collect()
}

pub fn line_power(c: &EffectiveLineCoeffs, theta: f64, direction: Direction) -> f64 {
    match direction {
        Direction::From => c.self_from - (c.transfer_g * theta.cos() + c.transfer_b * theta.sin()),
        Direction::To => {
            c.self_to - (c.transfer_g * (-theta).cos() + c.transfer_b * (-theta).sin())
        }
    }
}

/// Directional line powers `[p_ij, p_ji]` per edge for the given angle differences.
pub fn flows_from_angles(
    grid: &Grid,
    coeffs: &[EffectiveLineCoeffs],
    theta: &[f64],
) -> Result<Vec<f64>, PhysicsError> {
    if theta.len() != grid.edge_count() || coeffs.len() != grid.edge_count() {
        return Err(PhysicsError::DimensionMismatch {
            expected: grid.edge_count(),
            got: theta.len(),
        });
    }
    Ok(coeffs
        .iter()
        .zip(theta)
        .flat_map(|(c, &t)| {
            [
                line_power(c, t, Direction::From),
                line_power(c, t, Direction::To),
            ]
        })
        .collect())
}

/// Nodal injections `p_g,i = Σ_{j∈V_i} p_ij` from directional line powers.
pub fn injections_from_flows(grid: &Grid, p_e: &[f64]) -> Result<Vec<f64>, PhysicsError> {
    if p_e.len() != 2 * grid.edge_count() {
        return Err(PhysicsError::DimensionMismatch {
            expected: 2 * grid.edge_count(),
            got: p_e.len(),
        });
    }
    let mut p_g = vec![0.0; grid.node_count()];
    for (node, col) in grid.injection_incidence() {
        p_g[node] += p_e[col];
    }
    Ok(p_g)
}

/// Transmission losses: the sum of all nodal injections.
pub fn total_losses(p_g: &[f64]) -> f64 {
    p_g.iter().sum()
}

#[derive(Debug, Clone, Copy)]
pub struct RadialPfOptions {
    pub tol: f64,
    /// Largest admissible |θ_ij| in radians.
    pub angle_bound: f64,
    /// Iteration cap for each scalar line equation.
    pub max_iterations: usize,
}

impl Default for RadialPfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            angle_bound: FRAC_PI_2,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialPfSolution {
    /// Angle differences in edge order.
    pub theta: Vec<f64>,
    /// Injection at the slack node that balances the losses.
    pub slack_injection: f64,
    /// Largest nodal mismatch over non-slack nodes.
    pub residual: f64,
}

/// Solves for edge angle differences given injections at every non-slack node.
///
/// `injections` has one entry per node in dense order; the slack entry is ignored.
/// Works leaf to root: each node's outflow toward its parent is its injection minus
/// what it sends to its children, and one scalar equation per edge fixes the angle.
/// On a tree one sweep is exact, so the residual check only guards the scalar solves.
pub fn solve_radial_pf(
    grid: &Grid,
    injections: &[f64],
    slack: NodeId,
    opts: &RadialPfOptions,
) -> Result<RadialPfSolution, PhysicsError> {
    if injections.len() != grid.node_count() {
        return Err(PhysicsError::DimensionMismatch {
            expected: grid.node_count(),
            got: injections.len(),
        });
    }
    grid.validate_radial()?;
    let root = grid.node_index(slack)?;
    let coeffs = grid_coeffs(grid);
    let adj = grid.adjacency();
    let n = grid.node_count();

    // BFS order from the slack; parents[k] = (parent index, edge position)
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    seen[root] = true;
    order.push(root);
    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        for &(v, l) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                parent[v] = Some((u, l));
                order.push(v);
            }
        }
    }

    let mut theta = vec![0.0; grid.edge_count()];
    let mut flow = vec![0.0; 2 * grid.edge_count()];
    let node_ids = grid.nodes();
    let edges = grid.edges();

    // outflow[k]: power node k pushes into its child lines
    let mut child_out = vec![0.0; n];
    for &u in order.iter().rev() {
        let Some((p, l)) = parent[u] else { continue };
        let target = injections[u] - child_out[u];
        let c = &coeffs[l];
        let u_is_from = edges[l].0 == node_ids[u];
        let own = if u_is_from { c.self_from } else { c.self_to };
        let local = solve_scalar(own, c.transfer_g, c.transfer_b, target, opts, l)?;
        theta[l] = if u_is_from { local } else { -local };
        flow[2 * l] = line_power(c, theta[l], Direction::From);
        flow[2 * l + 1] = line_power(c, theta[l], Direction::To);
        child_out[p] += if u_is_from {
            flow[2 * l + 1]
        } else {
            flow[2 * l]
        };
    }

    let p_g = injections_from_flows(grid, &flow)?;
    let residual = (0..n)
        .filter(|&k| k != root)
        .map(|k| (p_g[k] - injections[k]).abs())
        .fold(0.0, f64::max);
    if residual > opts.tol {
        return Err(PhysicsError::NoConvergence {
            iterations: 1,
            residual,
        });
    }
    Ok(RadialPfSolution {
        theta,
        slack_injection: p_g[root],
        residual,
    })
}

/// Solves `own − (g cos t + b sin t) = target` on the monotone branch through t = 0,
/// restricted to |t| ≤ angle_bound. Safeguarded Newton with bisection fallback.
fn solve_scalar(
    own: f64,
    g: f64,
    b: f64,
    target: f64,
    opts: &RadialPfOptions,
    edge: usize,
) -> Result<f64, PhysicsError> {
    let f = |t: f64| own - (g * t.cos() + b * t.sin()) - target;
    let df = |t: f64| g * t.sin() - b * t.cos();

    // f(t) = own − r cos(t − ψ) − target. Increasing on (ψ, ψ + π), decreasing on (ψ − π, ψ).
    let r = g.hypot(b);
    let psi = b.atan2(g);
    let (mut lo, mut hi) = if psi <= 0.0 {
        (psi, psi + PI)
    } else {
        (psi - PI, psi)
    };
    lo = lo.max(-opts.angle_bound);
    hi = hi.min(opts.angle_bound);
    if lo > hi || r == 0.0 {
        return Err(PhysicsError::AngleOutOfTrustRegion { edge });
    }
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() && flo != 0.0 && fhi != 0.0 {
        return Err(PhysicsError::AngleOutOfTrustRegion { edge });
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }

    let tol = (opts.tol * 1e-2).max(f64::EPSILON * (1.0 + own.abs() + r));
    let mut t = 0.0f64.clamp(lo, hi);
    for _ in 0..opts.max_iterations {
        let ft = f(t);
        if ft.abs() <= tol {
            return Ok(t);
        }
        if ft.signum() == flo.signum() {
            lo = t;
            flo = ft;
        } else {
            hi = t;
        }
        let d = df(t);
        let newton = t - ft / d;
        t = if d != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-16 {
            return Ok(t);
        }
    }
    Err(PhysicsError::NoConvergence {
        iterations: opts.max_iterations,
        residual: f(t).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table_line() -> EffectiveLineCoeffs {
        effective_coeffs(&LineParams::case_study(), 1.0, 1.0).unwrap()
    }

    #[test]
    fn coefficient_definitions() {
        let c = table_line();
        assert_eq!(
            (c.self_from, c.self_to, c.transfer_g, c.transfer_b),
            (2.0, 2.0, 2.0, -20.0)
        );

        let c = effective_coeffs(&LineParams::series(1.0, 0.0), 2.0, 3.0).unwrap();
        assert_eq!((c.transfer_g, c.self_from, c.self_to), (6.0, 4.0, 9.0));

        let mut p = LineParams::case_study();
        p.shunt_conductance_from = 0.1;
        assert_abs_diff_eq!(
            effective_coeffs(&p, 1.0, 1.0).unwrap().self_from,
            2.1,
            epsilon = 1e-15
        );

        assert_eq!(
            effective_coeffs(&p, 0.0, 1.0),
            Err(PhysicsError::NonpositiveVoltage)
        );
    }

    #[test]
    fn line_power_values() {
        let c = table_line();
        assert_eq!(line_power(&c, 0.0, Direction::From), 0.0);
        // 2 − 2cos(0.1) + 20 sin(0.1)
        assert_abs_diff_eq!(
            line_power(&c, 0.1, Direction::From),
            2.0066600023805115,
            epsilon = 1e-12
        );
        let loss = line_power(&c, 0.1, Direction::From) + line_power(&c, 0.1, Direction::To);
        assert_abs_diff_eq!(loss, 0.019983338887896936, epsilon = 1e-12);
    }

    #[test]
    fn injections_and_losses() {
        let g = Grid::case_study();
        assert_eq!(injections_from_flows(&g, &[0.0; 8]).unwrap(), vec![0.0; 5]);
        let mut pe = [0.0; 8];
        pe[0] = 0.5;
        assert_eq!(
            injections_from_flows(&g, &pe).unwrap(),
            vec![0.5, 0.0, 0.0, 0.0, 0.0]
        );
        assert!(injections_from_flows(&g, &[0.0; 7]).is_err());
        assert_eq!(total_losses(&[0.0; 3]), 0.0);
        assert_abs_diff_eq!(total_losses(&[0.5, -0.48]), 0.02, epsilon = 1e-15);
    }

    #[test]
    fn two_bus_power_flow() {
        let g = Grid::new(&[1, 2], &[((1, 2), LineParams::case_study())], None).unwrap();
        let s = solve_radial_pf(&g, &[0.0, 0.0], 2, &RadialPfOptions::default()).unwrap();
        assert_abs_diff_eq!(s.theta[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.slack_injection, 0.0, epsilon = 1e-12);

        let s = solve_radial_pf(&g, &[0.5, 0.0], 2, &RadialPfOptions::default()).unwrap();
        // independent bisection on 2 − 2cos θ + 20 sin θ = 0.5
        let (mut lo, mut hi) = (0.0f64, 0.1f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 2.0 - 2.0 * mid.cos() + 20.0 * mid.sin() < 0.5 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert_abs_diff_eq!(s.theta[0], lo, epsilon = 1e-12);
        assert_abs_diff_eq!(s.theta[0], 0.024971418197945488, epsilon = 1e-12);
        assert!(s.slack_injection < -0.49);
    }

    #[test]
    fn slack_at_low_id_flips_orientation() {
        let g = Grid::new(&[1, 2], &[((1, 2), LineParams::case_study())], None).unwrap();
        let s = solve_radial_pf(&g, &[0.0, 0.5], 1, &RadialPfOptions::default()).unwrap();
        assert!(s.theta[0] < 0.0);
        assert_abs_diff_eq!(
            line_power(&table_line(), s.theta[0], Direction::To),
            0.5,
            epsilon = 1e-10
        );
    }

    #[test]
    fn infeasible_injection_is_out_of_trust_region() {
        let g = Grid::new(&[1, 2], &[((1, 2), LineParams::case_study())], None).unwrap();
        let r = solve_radial_pf(&g, &[40.0, 0.0], 2, &RadialPfOptions::default());
        assert!(matches!(r, Err(PhysicsError::AngleOutOfTrustRegion { .. })));
        let tight = RadialPfOptions {
            angle_bound: 0.01,
            ..Default::default()
        };
        let r = solve_radial_pf(&g, &[0.5, 0.0], 2, &tight);
        assert!(matches!(r, Err(PhysicsError::AngleOutOfTrustRegion { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn per_line_loss_is_nonnegative(
                theta in -FRAC_PI_2..FRAC_PI_2,
                g in 0.0f64..5.0, b in -40.0f64..40.0,
                sf in 0.0f64..0.5, st in 0.0f64..0.5,
                vi in 0.8f64..1.2, vj in 0.8f64..1.2,
            ) {
                let mut p = LineParams::series(g.max(1e-3), b);
                p.shunt_conductance_from = sf;
                p.shunt_conductance_to = st;
                let c = effective_coeffs(&p, vi, vj).unwrap();
                let loss = line_power(&c, theta, Direction::From) + line_power(&c, theta, Direction::To);
                let formula = c.self_from + c.self_to - 2.0 * c.transfer_g * theta.cos();
                prop_assert!((loss - formula).abs() < 1e-12);
                prop_assert!(loss >= -1e-12);
            }

            #[test]
            fn periodicity_and_direction_symmetry(theta in -10.0f64..10.0, sf in 0.0f64..0.3) {
                let mut p = LineParams::case_study();
                p.shunt_conductance_from = sf;
                let c = effective_coeffs(&p, 1.0, 1.05).unwrap();
                let a = line_power(&c, theta, Direction::From);
                prop_assert!((a - line_power(&c, theta + 2.0 * PI, Direction::From)).abs() < 1e-11);
                let swapped = EffectiveLineCoeffs { self_from: c.self_to, self_to: c.self_from, ..c };
                prop_assert!((line_power(&c, theta, Direction::To) - line_power(&swapped, -theta, Direction::From)).abs() < 1e-12);
            }

            #[test]
            fn losses_equal_sum_of_line_losses(theta in proptest::collection::vec(-0.5f64..0.5, 4)) {
                let g = Grid::case_study();
                let pe = flows_from_angles(&g, &grid_coeffs(&g), &theta).unwrap();
                let pg = injections_from_flows(&g, &pe).unwrap();
                let line_sum: f64 = pe.chunks(2).map(|c| c[0] + c[1]).sum();
                prop_assert!((total_losses(&pg) - line_sum).abs() < 1e-12);
            }

            #[test]
            fn radial_pf_round_trip(theta in proptest::collection::vec(-0.3f64..0.3, 4)) {
                let g = Grid::case_study();
                let pe = flows_from_angles(&g, &grid_coeffs(&g), &theta).unwrap();
                let pg = injections_from_flows(&g, &pe).unwrap();
                let s = solve_radial_pf(&g, &pg, 5, &RadialPfOptions::default()).unwrap();
                for (a, b) in s.theta.iter().zip(&theta) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                prop_assert!((s.slack_injection - pg[4]).abs() < 1e-9);
            }
        }
    }
}
