//! Synthetic measurement trajectories and their CSV format.
//!
//! CSV layout, one sample per row:
//!
//! ```text
//! k,theta_<i>_<j>...,phi_0...,pe_<i>_<j>,pe_<j>_<i>...,pg_<i>...
//! ```
//!
//! Values are written with 17 significant digits so doubles round-trip exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::behavior::{
    is_persistently_exciting, lift_angles, pair_angles, LiftMode, Trajectory, DEFAULT_RANK_TOL,
};
use crate::error::ExcitationError;
use crate::grid::{Grid, NodeId};
use crate::physics::{flows_from_angles, grid_coeffs, injections_from_flows};

pub const MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitationOptions {
    pub samples: usize,
    /// Angles are drawn uniformly from `[-angle_range, angle_range]`.
    pub angle_range: f64,
    pub seed: u64,
    pub mode: LiftMode,
    pub rank_tol: f64,
}

impl ExcitationOptions {
    pub fn new(samples: usize, mode: LiftMode, seed: u64) -> Self {
        Self {
            samples,
            angle_range: 0.3,
            seed,
            mode,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    /// Smallest sample count that can be persistently exciting for `mode`.
    pub fn minimal_samples(grid: &Grid, mode: LiftMode) -> usize {
        match mode {
            LiftMode::PerEdge => 2 * grid.edge_count() + 1,
            LiftMode::AllPairs => grid.node_count() * (grid.node_count() - 1) + 1,
        }
    }
}

/// Draws random operating points, evaluates the physics and keeps the first
/// draw whose lifted block is persistently exciting of order 1.
pub fn generate_excitation(
    grid: &Grid,
    opts: &ExcitationOptions,
) -> Result<Trajectory, ExcitationError> {
    if !(opts.angle_range > 0.0 && opts.angle_range <= std::f64::consts::FRAC_PI_2) {
        return Err(ExcitationError::InvalidOptions(format!(
            "angle range {} outside (0, pi/2]",
            opts.angle_range
        )));
    }
    if opts.samples == 0 {
        return Err(ExcitationError::InvalidOptions("zero samples".into()));
    }
    grid.validate_radial()
        .map_err(crate::error::PhysicsError::from)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut last = (0, 0);
    for _ in 0..MAX_ATTEMPTS {
        let traj = draw(grid, opts, &mut rng)?;
        let cert = is_persistently_exciting(&traj.phi, 1, opts.rank_tol)?;
        if cert.pe {
            return Ok(traj);
        }
        last = (cert.rank, cert.required);
    }
    Err(ExcitationError::ExcitationFailed {
        attempts: MAX_ATTEMPTS,
        rank: last.0,
        required: last.1,
    })
}

fn draw(
    grid: &Grid,
    opts: &ExcitationOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, ExcitationError> {
    let n = opts.samples;
    let r = opts.angle_range;
    let coeffs = grid_coeffs(grid);
    let pairs = match opts.mode {
        LiftMode::PerEdge => grid.edges().to_vec(),
        LiftMode::AllPairs => grid.all_node_pairs(),
    };
    let mut theta = DMatrix::zeros(pairs.len(), n);
    let mut phi = DMatrix::zeros(2 * pairs.len() + 1, n);
    let mut p_e = DMatrix::zeros(2 * grid.edge_count(), n);
    let mut p_g = DMatrix::zeros(grid.node_count(), n);

    for k in 0..n {
        let (edge_theta, channel_theta) = match opts.mode {
            LiftMode::PerEdge => {
                let t: Vec<f64> = (0..grid.edge_count())
                    .map(|_| rng.random_range(-r..=r))
                    .collect();
                (t.clone(), t)
            }
            LiftMode::AllPairs => {
                // reference node (lowest id) stays at zero
                let mut angles = vec![0.0; grid.node_count()];
                for a in angles.iter_mut().skip(1) {
                    *a = rng.random_range(-r..=r);
                }
                let all = pair_angles(grid, &angles)?;
                let edge_t: Vec<f64> = grid
                    .edges()
                    .iter()
                    .map(|&(a, b)| {
                        let (ia, ib) = (grid.node_index(a).unwrap(), grid.node_index(b).unwrap());
                        angles[ia] - angles[ib]
                    })
                    .collect();
                (edge_t, all)
            }
        };
        let flows = flows_from_angles(grid, &coeffs, &edge_theta)?;
        let inj = injections_from_flows(grid, &flows)?;
        theta.set_column(k, &nalgebra::DVector::from_vec(channel_theta.clone()));
        phi.set_column(k, &nalgebra::DVector::from_vec(lift_angles(&channel_theta)));
        p_e.set_column(k, &nalgebra::DVector::from_vec(flows));
        p_g.set_column(k, &nalgebra::DVector::from_vec(inj));
    }

    Ok(Trajectory::new(
        opts.mode,
        pairs,
        grid.edges().to_vec(),
        grid.nodes().to_vec(),
        theta,
        phi,
        p_e,
        p_g,
    )?)
}

fn header(traj: &Trajectory) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    h.extend(traj.pairs.iter().map(|(i, j)| format!("theta_{i}_{j}")));
    h.extend((0..traj.phi.nrows()).map(|r| format!("phi_{r}")));
    for (i, j) in &traj.edges {
        h.push(format!("pe_{i}_{j}"));
        h.push(format!("pe_{j}_{i}"));
    }
    h.extend(traj.nodes.iter().map(|i| format!("pg_{i}")));
    h
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, out: W) -> Result<(), ExcitationError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(traj)).map_err(csv_io)?;
    for k in 0..traj.len() {
        let mut row = vec![k.to_string()];
        for block in [&traj.theta, &traj.phi, &traj.p_e, &traj.p_g] {
            row.extend(block.column(k).iter().map(|v| format!("{v:.16e}")));
        }
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_trajectory(traj: &Trajectory, path: &Path) -> Result<(), ExcitationError> {
    write_trajectory(traj, BufWriter::new(File::create(path)?))
}

pub fn import_trajectory(path: &Path) -> Result<Trajectory, ExcitationError> {
    read_trajectory(File::open(path)?)
}

fn csv_io(e: csv::Error) -> ExcitationError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ExcitationError::Io(io),
        other => ExcitationError::Schema(format!("{other:?}")),
    }
}

fn parse_pair(name: &str, prefix: &str) -> Option<(NodeId, NodeId)> {
    let rest = name.strip_prefix(prefix)?;
    let (a, b) = rest.split_once('_')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Trajectory, ExcitationError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let headers = rdr.headers().map_err(csv_io)?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(ExcitationError::Schema("k".into()));
    }
    let cols: Vec<&str> = headers.iter().collect();
    if cols[0] != "k" {
        return Err(ExcitationError::Schema("k".into()));
    }

    let mut pairs = Vec::new();
    let mut phi_count = 0;
    let mut pe_cols = Vec::new();
    let mut nodes = Vec::new();
    for &c in &cols[1..] {
        if let Some(p) = parse_pair(c, "theta_") {
            pairs.push(p);
        } else if let Some(r) = c.strip_prefix("phi_") {
            if r.parse::<usize>().ok() != Some(phi_count) {
                return Err(ExcitationError::Schema(c.into()));
            }
            phi_count += 1;
        } else if let Some(p) = parse_pair(c, "pe_") {
            pe_cols.push(p);
        } else if let Some(id) = c.strip_prefix("pg_").and_then(|s| s.parse::<NodeId>().ok()) {
            nodes.push(id);
        } else {
            return Err(ExcitationError::Schema(c.into()));
        }
    }
    // column groups must appear in the documented order
    let expected: Vec<String> = {
        let mut h = vec!["k".to_string()];
        h.extend(pairs.iter().map(|(i, j)| format!("theta_{i}_{j}")));
        h.extend((0..phi_count).map(|r| format!("phi_{r}")));
        h.extend(pe_cols.iter().map(|(i, j)| format!("pe_{i}_{j}")));
        h.extend(nodes.iter().map(|i| format!("pg_{i}")));
        h
    };
    if let Some(pos) = expected.iter().zip(&cols).position(|(a, b)| a != b) {
        return Err(ExcitationError::Schema(cols[pos].into()));
    }
    if pairs.is_empty() {
        return Err(ExcitationError::Schema("theta".into()));
    }
    if phi_count != 2 * pairs.len() + 1 {
        return Err(ExcitationError::Schema(format!("phi_{}", phi_count)));
    }
    if pe_cols.len() % 2 != 0 {
        return Err(ExcitationError::Schema("pe".into()));
    }
    let mut edges = Vec::new();
    for ch in pe_cols.chunks(2) {
        let ((a, b), (c, d)) = (ch[0], ch[1]);
        if !(a < b && c == b && d == a) {
            return Err(ExcitationError::Schema(format!("pe_{c}_{d}")));
        }
        edges.push((a, b));
    }
    for &(a, b) in &edges {
        for n in [a, b] {
            if !nodes.contains(&n) {
                return Err(ExcitationError::Schema(format!("pg_{n}")));
            }
        }
    }
    let mode = if pairs == edges {
        LiftMode::PerEdge
    } else {
        LiftMode::AllPairs
    };

    let width = cols.len() - 1;
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_io)?;
        if rec.len() != cols.len() {
            return Err(ExcitationError::Schema(format!("row {k}")));
        }
        let mut row = Vec::with_capacity(width);
        for (c, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| ExcitationError::Schema(cols[c].to_string()))?;
            row.push(v);
        }
        samples.push(row);
    }
    if samples.is_empty() {
        return Err(ExcitationError::Schema("no samples".into()));
    }

    let n = samples.len();
    let block = |start: usize, rows: usize| DMatrix::from_fn(rows, n, |r, k| samples[k][start + r]);
    let np = pairs.len();
    let theta = block(0, np);
    let phi = block(np, phi_count);
    let p_e = block(np + phi_count, pe_cols.len());
    let p_g = block(np + phi_count + pe_cols.len(), nodes.len());
    Ok(Trajectory::new(
        mode, pairs, edges, nodes, theta, phi, p_e, p_g,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{line_power, Direction};

    #[test]
    fn per_edge_minimal_trajectory_is_pe() {
        let g = Grid::case_study();
        let t = generate_excitation(&g, &ExcitationOptions::new(9, LiftMode::PerEdge, 1)).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t.lifted_dim(), 9);
        assert!(
            is_persistently_exciting(&t.phi, 1, DEFAULT_RANK_TOL)
                .unwrap()
                .pe
        );
        assert!(t.lift_consistency_error() < 1e-15);
    }

    #[test]
    fn all_pairs_minimal_trajectory_is_pe() {
        let g = Grid::case_study();
        let t =
            generate_excitation(&g, &ExcitationOptions::new(21, LiftMode::AllPairs, 2)).unwrap();
        let c = is_persistently_exciting(&t.phi, 1, DEFAULT_RANK_TOL).unwrap();
        assert_eq!((c.rank, c.required), (21, 21));
        assert_eq!(t.p_e.nrows(), 8);
        assert_eq!(t.p_g.nrows(), 5);
    }

    #[test]
    fn too_few_samples_fail() {
        let g = Grid::case_study();
        let r = generate_excitation(&g, &ExcitationOptions::new(8, LiftMode::PerEdge, 1));
        assert!(matches!(
            r,
            Err(ExcitationError::ExcitationFailed {
                rank: 8,
                required: 9,
                ..
            })
        ));
    }

    #[test]
    fn physics_consistency_and_determinism() {
        let g = Grid::case_study();
        let opts = ExcitationOptions::new(15, LiftMode::PerEdge, 7);
        let t = generate_excitation(&g, &opts).unwrap();
        assert_eq!(t, generate_excitation(&g, &opts).unwrap());
        let coeffs = grid_coeffs(&g);
        for k in 0..t.len() {
            for l in 0..4 {
                let th = t.theta[(l, k)];
                assert!(
                    (line_power(&coeffs[l], th, Direction::From) - t.p_e[(2 * l, k)]).abs() < 1e-12
                );
                assert!(
                    (line_power(&coeffs[l], th, Direction::To) - t.p_e[(2 * l + 1, k)]).abs()
                        < 1e-12
                );
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = Grid::case_study();
        for mode in [LiftMode::PerEdge, LiftMode::AllPairs] {
            let t = generate_excitation(&g, &ExcitationOptions::new(25, mode, 3)).unwrap();
            let mut buf = Vec::new();
            write_trajectory(&t, &mut buf).unwrap();
            let back = read_trajectory(buf.as_slice()).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn schema_errors() {
        let g = Grid::case_study();
        let t = generate_excitation(&g, &ExcitationOptions::new(9, LiftMode::PerEdge, 1)).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        // drop the pg_5 column
        let cut: String = text
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.pop();
                f.join(",") + "\n"
            })
            .collect();
        match read_trajectory(cut.as_bytes()) {
            Err(ExcitationError::Schema(c)) => assert_eq!(c, "pg_5"),
            other => panic!("{other:?}"),
        }

        assert!(matches!(
            read_trajectory(&b""[..]),
            Err(ExcitationError::Schema(_))
        ));
        let header_only = text.lines().next().unwrap().to_string();
        assert!(matches!(
            read_trajectory(header_only.as_bytes()),
            Err(ExcitationError::Schema(_))
        ));
        let bad = text.replacen("phi_3", "phi_x", 1);
        assert!(matches!(
            read_trajectory(bad.as_bytes()),
            Err(ExcitationError::Schema(_))
        ));
    }

    #[test]
    fn invalid_range_rejected() {
        let g = Grid::case_study();
        let mut o = ExcitationOptions::new(9, LiftMode::PerEdge, 1);
        o.angle_range = 2.0;
        assert!(matches!(
            generate_excitation(&g, &o),
            Err(ExcitationError::InvalidOptions(_))
        ));
    }
}
