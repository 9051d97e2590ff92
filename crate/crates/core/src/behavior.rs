//! Hankel matrices, persistency of excitation and the data-driven line model.
//!
//! Sequences are stored column-wise: a sequence of `N` samples with `w`
//! channels is a `w × N` matrix. The lifted input is
//! `φ = [1, cos θ_1, sin θ_1, …, cos θ_P, sin θ_P]` over `P` node pairs,
//! and power flow is algebraic in `φ`, so order-1 Hankel matrices suffice.

use nalgebra::{DMatrix, DVector};

use crate::error::BehaviorError;
use crate::grid::{Grid, NodeId};

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Block-Hankel matrix of order `L` built from a `width`-channel sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    order: usize,
    width: usize,
    data: DMatrix<f64>,
}

impl HankelMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// Row block `r`, column `c`: the sample `w(r + c)`.
    pub fn block(&self, r: usize, c: usize) -> Vec<f64> {
        (0..self.width)
            .map(|ch| self.data[(r * self.width + ch, c)])
            .collect()
    }
}

/// Builds `H_L(w)` with shape `(width·L) × (N − L + 1)`.
pub fn hankel(seq: &DMatrix<f64>, order: usize) -> Result<HankelMatrix, BehaviorError> {
    let (width, n) = seq.shape();
    if order == 0 || order > n {
        return Err(BehaviorError::OrderTooLarge { order, samples: n });
    }
    let cols = n - order + 1;
    let data = DMatrix::from_fn(width * order, cols, |row, c| {
        let (r, ch) = (row / width, row % width);
        seq[(ch, r + c)]
    });
    Ok(HankelMatrix { order, width, data })
}

/// Outcome of a persistency-of-excitation test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeCertificate {
    pub pe: bool,
    pub rank: usize,
    /// Full row rank `width · L`.
    pub required: usize,
    pub largest_singular_value: f64,
    pub smallest_kept_singular_value: f64,
    pub threshold: f64,
}

/// Numerical rank of a matrix by relative singular-value thresholding.
pub fn numerical_rank(m: &DMatrix<f64>, rank_tol: f64) -> (usize, f64, f64, f64) {
    if m.is_empty() {
        return (0, 0.0, 0.0, 0.0);
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let threshold = rank_tol * smax;
    let kept: Vec<f64> = sv
        .iter()
        .copied()
        .filter(|&s| s > threshold && s > 0.0)
        .collect();
    let smallest = kept.iter().copied().fold(f64::INFINITY, f64::min);
    let smallest = if kept.is_empty() { 0.0 } else { smallest };
    (kept.len(), smax, smallest, threshold)
}

/// A sequence is persistently exciting of order `L` when `H_L` has full row rank.
pub fn is_persistently_exciting(
    seq: &DMatrix<f64>,
    order: usize,
    rank_tol: f64,
) -> Result<PeCertificate, BehaviorError> {
    let h = hankel(seq, order)?;
    let (rank, smax, smallest, threshold) = numerical_rank(&h.data, rank_tol);
    let required = h.rows();
    Ok(PeCertificate {
        pe: rank == required,
        rank,
        required,
        largest_singular_value: smax,
        smallest_kept_singular_value: smallest,
        threshold,
    })
}

/// `[1, cos θ, sin θ]`
pub fn lift_line(theta: f64) -> [f64; 3] {
    [1.0, theta.cos(), theta.sin()]
}

/// `[1, cos θ_1, sin θ_1, …]` for a list of angle differences.
pub fn lift_angles(theta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * theta.len() + 1);
    out.push(1.0);
    for &t in theta {
        out.push(t.cos());
        out.push(t.sin());
    }
    out
}

/// Lift of the edge angle differences, length `2N_e + 1`.
pub fn lift_grid(grid: &Grid, theta: &[f64]) -> Result<Vec<f64>, BehaviorError> {
    if theta.len() != grid.edge_count() {
        return Err(BehaviorError::DimensionMismatch {
            what: "edge angles",
            expected: grid.edge_count(),
            got: theta.len(),
        });
    }
    Ok(lift_angles(theta))
}

/// Angle differences `θ_i − θ_j` for every node pair in canonical order.
pub fn pair_angles(grid: &Grid, node_angles: &[f64]) -> Result<Vec<f64>, BehaviorError> {
    if node_angles.len() != grid.node_count() {
        return Err(BehaviorError::DimensionMismatch {
            what: "node angles",
            expected: grid.node_count(),
            got: node_angles.len(),
        });
    }
    let n = grid.node_count();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(node_angles[i] - node_angles[j]);
        }
    }
    Ok(out)
}

/// Lift over all node pairs, length `2Ñ_e + 1` with `Ñ_e = N_b(N_b−1)/2`.
pub fn lift_all_pairs(grid: &Grid, node_angles: &[f64]) -> Result<Vec<f64>, BehaviorError> {
    Ok(lift_angles(&pair_angles(grid, node_angles)?))
}

/// Which pairs the lifted input covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LiftMode {
    /// Only the grid lines.
    PerEdge,
    /// Every node pair, no topology needed.
    AllPairs,
}

impl LiftMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LiftMode::PerEdge => "per-edge",
            LiftMode::AllPairs => "all-pairs",
        }
    }
}

/// Measured samples: angle differences, lifted inputs, line powers and injections.
///
/// Each block is `width × N`; column `k` is sample `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mode: LiftMode,
    /// Labels of the angle channels (and of the lifted pairs).
    pub pairs: Vec<(NodeId, NodeId)>,
    /// Lines whose `[p_ij, p_ji]` are measured.
    pub edges: Vec<(NodeId, NodeId)>,
    pub nodes: Vec<NodeId>,
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub p_e: DMatrix<f64>,
    pub p_g: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(
        mode: LiftMode,
        pairs: Vec<(NodeId, NodeId)>,
        edges: Vec<(NodeId, NodeId)>,
        nodes: Vec<NodeId>,
        theta: DMatrix<f64>,
        phi: DMatrix<f64>,
        p_e: DMatrix<f64>,
        p_g: DMatrix<f64>,
    ) -> Result<Self, BehaviorError> {
        let n = theta.ncols();
        let checks = [
            ("theta rows", pairs.len(), theta.nrows()),
            ("phi rows", 2 * pairs.len() + 1, phi.nrows()),
            ("line power rows", 2 * edges.len(), p_e.nrows()),
            ("injection rows", nodes.len(), p_g.nrows()),
            ("phi samples", n, phi.ncols()),
            ("line power samples", n, p_e.ncols()),
            ("injection samples", n, p_g.ncols()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(BehaviorError::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(Self {
            mode,
            pairs,
            edges,
            nodes,
            theta,
            phi,
            p_e,
            p_g,
        })
    }

    pub fn len(&self) -> usize {
        self.theta.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lifted_dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Largest deviation between the stored lift and the lift of the stored angles.
    pub fn lift_consistency_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.len() {
            let theta: Vec<f64> = self.theta.column(k).iter().copied().collect();
            let lifted = lift_angles(&theta);
            for (a, b) in lifted.iter().zip(self.phi.column(k).iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Keeps only the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            theta: self.theta.columns(0, n).into_owned(),
            phi: self.phi.columns(0, n).into_owned(),
            p_e: self.p_e.columns(0, n).into_owned(),
            p_g: self.p_g.columns(0, n).into_owned(),
            ..self.clone()
        }
    }
}

/// Which measured outputs a model maps the lifted input to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelOutputs {
    /// Directional line powers.
    LineFlows,
    /// Line powers stacked over nodal injections.
    FlowsAndInjections,
    /// Any user-supplied output block.
    Custom,
}

/// Order-1 behavioral representation `[H(φ); H(y)] α = [φ; y]`.
#[derive(Debug, Clone)]
pub struct DataDrivenModel {
    inputs: HankelMatrix,
    outputs: HankelMatrix,
    pinv: DMatrix<f64>,
    certificate: PeCertificate,
    kind: ModelOutputs,
    mode: Option<LiftMode>,
    pairs: Vec<(NodeId, NodeId)>,
    line_rows: usize,
    query_tol: f64,
}

impl DataDrivenModel {
    /// Certifies the input block and caches its pseudoinverse.
    pub fn new(
        inputs: &DMatrix<f64>,
        outputs: &DMatrix<f64>,
        rank_tol: f64,
    ) -> Result<Self, BehaviorError> {
        if inputs.ncols() != outputs.ncols() {
            return Err(BehaviorError::DimensionMismatch {
                what: "sample count",
                expected: inputs.ncols(),
                got: outputs.ncols(),
            });
        }
        let certificate = is_persistently_exciting(inputs, 1, rank_tol)?;
        if !certificate.pe {
            return Err(BehaviorError::NotPersistentlyExciting {
                rank: certificate.rank,
                required: certificate.required,
            });
        }
        let h_in = hankel(inputs, 1)?;
        let h_out = hankel(outputs, 1)?;
        let pinv = h_in
            .data
            .clone()
            .pseudo_inverse(certificate.threshold.max(f64::MIN_POSITIVE))
            .expect("non-negative pseudo-inverse threshold");
        Ok(Self {
            line_rows: outputs.nrows(),
            inputs: h_in,
            outputs: h_out,
            pinv,
            certificate,
            kind: ModelOutputs::Custom,
            mode: None,
            pairs: Vec::new(),
            query_tol: 1e-8,
        })
    }

    /// Lifted input to directional line powers.
    pub fn line_flows(traj: &Trajectory, rank_tol: f64) -> Result<Self, BehaviorError> {
        let mut m = Self::new(&traj.phi, &traj.p_e, rank_tol)?;
        m.kind = ModelOutputs::LineFlows;
        m.mode = Some(traj.mode);
        m.pairs = traj.pairs.clone();
        m.line_rows = traj.p_e.nrows();
        Ok(m)
    }

    /// Lifted input to line powers and nodal injections.
    pub fn flows_and_injections(traj: &Trajectory, rank_tol: f64) -> Result<Self, BehaviorError> {
        let mut stacked = DMatrix::zeros(traj.p_e.nrows() + traj.p_g.nrows(), traj.len());
        stacked.rows_mut(0, traj.p_e.nrows()).copy_from(&traj.p_e);
        stacked
            .rows_mut(traj.p_e.nrows(), traj.p_g.nrows())
            .copy_from(&traj.p_g);
        let mut m = Self::new(&traj.phi, &stacked, rank_tol)?;
        m.kind = ModelOutputs::FlowsAndInjections;
        m.mode = Some(traj.mode);
        m.pairs = traj.pairs.clone();
        m.line_rows = traj.p_e.nrows();
        Ok(m)
    }

    pub fn with_query_tol(mut self, tol: f64) -> Self {
        self.query_tol = tol;
        self
    }

    pub fn input_hankel(&self) -> &HankelMatrix {
        &self.inputs
    }

    pub fn output_hankel(&self) -> &HankelMatrix {
        &self.outputs
    }

    pub fn certificate(&self) -> &PeCertificate {
        &self.certificate
    }

    pub fn kind(&self) -> ModelOutputs {
        self.kind
    }

    pub fn mode(&self) -> Option<LiftMode> {
        self.mode
    }

    pub fn pairs(&self) -> &[(NodeId, NodeId)] {
        &self.pairs
    }

    /// Number of Hankel columns, i.e. the dimension of α.
    pub fn columns(&self) -> usize {
        self.inputs.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.rows()
    }

    /// Rows of the output block holding line powers (the rest are injections).
    pub fn line_rows(&self) -> usize {
        self.line_rows
    }

    /// Minimum-norm α with `H(φ) α = φ_query`.
    pub fn alpha(&self, phi: &[f64]) -> Result<DVector<f64>, BehaviorError> {
        if phi.len() != self.input_dim() {
            return Err(BehaviorError::DimensionMismatch {
                what: "lifted query",
                expected: self.input_dim(),
                got: phi.len(),
            });
        }
        let q = DVector::from_column_slice(phi);
        let alpha = &self.pinv * &q;
        let residual = (self.inputs.data() * &alpha - &q).amax();
        if residual > self.query_tol * (1.0 + q.amax()) {
            return Err(BehaviorError::InconsistentQuery { residual });
        }
        Ok(alpha)
    }

    /// Outputs `H(y) α` for a given α.
    pub fn outputs_for(&self, alpha: &DVector<f64>) -> Vec<f64> {
        (self.outputs.data() * alpha).iter().copied().collect()
    }
}

/// Predicted outputs for a lifted input, via the minimum-norm α.
pub fn dd_predict(model: &DataDrivenModel, phi: &[f64]) -> Result<Vec<f64>, BehaviorError> {
    let alpha = model.alpha(phi)?;
    Ok(model.outputs_for(&alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LineParams;
    use crate::physics::{effective_coeffs, line_power, Direction};
    use approx::assert_abs_diff_eq;

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn hankel_examples() {
        let h = hankel(&row(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(
            h.data(),
            &DMatrix::from_row_slice(2, 3, &[1., 2., 3., 2., 3., 4.])
        );
        let h = hankel(&row(&[5.0]), 1).unwrap();
        assert_eq!(h.data(), &DMatrix::from_element(1, 1, 5.0));
        let seq = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 10., 20., 30.]);
        assert_eq!(hankel(&seq, 1).unwrap().data(), &seq);
        assert_eq!(
            hankel(&row(&[1.0, 2.0]), 3),
            Err(BehaviorError::OrderTooLarge {
                order: 3,
                samples: 2
            })
        );
    }

    #[test]
    fn pe_examples() {
        let constant = DMatrix::from_element(2, 5, 1.0);
        let c = is_persistently_exciting(&constant, 1, DEFAULT_RANK_TOL).unwrap();
        assert!(!c.pe);
        assert_eq!(c.rank, 1);
        let scalar = DMatrix::from_element(1, 4, 3.0);
        assert!(
            is_persistently_exciting(&scalar, 1, DEFAULT_RANK_TOL)
                .unwrap()
                .pe
        );
    }

    #[test]
    fn lift_examples() {
        assert_eq!(lift_line(0.0), [1.0, 1.0, 0.0]);
        let q = lift_line(std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(q[1], 0.0, epsilon = 1e-16);
        assert_eq!(q[2], 1.0);
        let l = lift_line(0.1);
        assert_abs_diff_eq!(l[1], 0.9950041652780258, epsilon = 1e-15);
        assert_abs_diff_eq!(l[2], 0.09983341664682815, epsilon = 1e-15);

        let g = Grid::case_study();
        assert_eq!(
            lift_grid(&g, &[0.0; 4]).unwrap(),
            vec![1., 1., 0., 1., 0., 1., 0., 1., 0.]
        );
        let v = lift_grid(&g, &[0.1, 0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v[1], 0.9950041652780258, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 0.09983341664682815, epsilon = 1e-15);
        assert!(lift_grid(&g, &[0.0; 3]).is_err());

        let all = lift_all_pairs(&g, &[0.0; 5]).unwrap();
        assert_eq!(all.len(), 21);
        assert_eq!(&all[1..3], &[1.0, 0.0]);
        let all = lift_all_pairs(&g, &[0.0, 0.1, 0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(all[1], (-0.1f64).cos(), epsilon = 1e-16);
        assert_abs_diff_eq!(all[2], -0.09983341664682815, epsilon = 1e-15);
        assert!(lift_all_pairs(&g, &[0.0; 4]).is_err());
    }

    fn single_line_model(thetas: &[f64]) -> DataDrivenModel {
        let c = effective_coeffs(&LineParams::case_study(), 1.0, 1.0).unwrap();
        let n = thetas.len();
        let phi = DMatrix::from_fn(3, n, |r, k| lift_line(thetas[k])[r]);
        let pe = DMatrix::from_fn(2, n, |r, k| {
            let d = if r == 0 {
                Direction::From
            } else {
                Direction::To
            };
            line_power(&c, thetas[k], d)
        });
        DataDrivenModel::new(&phi, &pe, DEFAULT_RANK_TOL).unwrap()
    }

    #[test]
    fn predicts_single_line_flows() {
        let thetas = [-0.25, -0.1, 0.05, 0.2, 0.3, -0.05, 0.12, -0.2, 0.27];
        let m = single_line_model(&thetas);
        assert_eq!(m.columns(), 9);
        let p0 = dd_predict(&m, &lift_line(0.0)).unwrap();
        assert_abs_diff_eq!(p0[0], 0.0, epsilon = 1e-8);
        let p = dd_predict(&m, &lift_line(0.1)).unwrap();
        assert_abs_diff_eq!(p[0], 2.0066600023805115, epsilon = 1e-8);

        let col0: Vec<f64> = m.input_hankel().data().column(0).iter().copied().collect();
        let out = dd_predict(&m, &col0).unwrap();
        assert_abs_diff_eq!(out[0], m.output_hankel().data()[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_model_rejected_and_bad_queries_flagged() {
        let phi = DMatrix::from_fn(3, 4, |r, _| [1.0, 1.0, 0.0][r]);
        let pe = DMatrix::zeros(1, 4);
        assert!(matches!(
            DataDrivenModel::new(&phi, &pe, DEFAULT_RANK_TOL),
            Err(BehaviorError::NotPersistentlyExciting {
                rank: 1,
                required: 3
            })
        ));
        let m = single_line_model(&[0.1, 0.2, 0.3]);
        assert!(m.alpha(&[1.0, 0.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lift_is_on_the_circle(theta in proptest::collection::vec(-7.0f64..7.0, 0..12)) {
                let v = lift_angles(&theta);
                prop_assert_eq!(v[0], 1.0);
                for pair in v[1..].chunks(2) {
                    prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-14);
                }
            }

            #[test]
            fn pe_is_monotone_in_extension(
                base in proptest::collection::vec(-1.0f64..1.0, 6..12),
                extra in proptest::collection::vec(-1.0f64..1.0, 0..6),
                before in 0usize..3,
            ) {
                let seq = row(&base);
                let cert = is_persistently_exciting(&seq, 2, DEFAULT_RANK_TOL).unwrap();
                prop_assume!(cert.pe);
                let mut longer: Vec<f64> = extra[..before.min(extra.len())].to_vec();
                longer.extend_from_slice(&base);
                longer.extend_from_slice(&extra[before.min(extra.len())..]);
                let cert2 = is_persistently_exciting(&row(&longer), 2, DEFAULT_RANK_TOL).unwrap();
                prop_assert!(cert2.pe);
            }
        }
    }
}
