//! CSV exports of closed-loop runs and their comparison.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written file parses back to the identical values.

use std::io::{Read, Write};

use crate::error::ReportError;
use crate::grid::Grid;

use super::{ClosedLoopResult, MicrogridConfig};

/// Column excluded from run comparisons (hardware dependent).
pub const SOLVE_TIME_COLUMN: &str = "solve_time_s";

/// Header and numeric rows of a results-style CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, ReportError> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ReportError::Schema(format!("row {k}: {e}")))?;
            if row.len() != header.len() {
                return Err(ReportError::Schema(format!(
                    "row {k} has {} fields",
                    row.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

/// Column names of the results CSV for a given fleet and grid.
pub fn results_header(cfg: &MicrogridConfig, grid: &Grid) -> Vec<String> {
    let mut h = vec!["k".to_string(), "time_h".to_string()];
    h.extend((1..=cfg.generators()).map(|i| format!("conv{i}_power")));
    h.extend((1..=cfg.storages()).map(|i| format!("bess{i}_power")));
    h.extend((1..=cfg.renewables()).map(|i| format!("res{i}_power")));
    if cfg.loads() == 1 {
        h.push("load".into());
    } else {
        h.extend((1..=cfg.loads()).map(|i| format!("load{i}")));
    }
    h.extend((1..=cfg.storages()).map(|i| format!("stored_energy_{i}")));
    for &(a, b) in grid.edges() {
        h.push(format!("pe_{a}{b}"));
        h.push(format!("pe_{b}{a}"));
    }
    h.extend(
        [
            "cost_sw",
            "cost_p",
            "cost_x",
            "cost_loss",
            SOLVE_TIME_COLUMN,
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

/// One row per step. `load` is the served demand and `stored_energy_*` the
/// energy at the start of the step.
pub fn results_table(cfg: &MicrogridConfig, grid: &Grid, result: &ClosedLoopResult) -> Table {
    let rows = result
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.k as f64, r.time_h];
            row.extend(&r.p_t);
            row.extend(&r.p_s);
            row.extend(&r.p_r);
            row.extend(r.p_d.iter().map(|d| -d));
            row.extend(&r.x);
            row.extend(&r.p_e);
            row.extend([
                r.costs.sw,
                r.costs.p,
                r.costs.x,
                r.costs.loss,
                r.solve_time_s,
            ]);
            row
        })
        .collect();
    Table {
        header: results_header(cfg, grid),
        rows,
    }
}

pub fn solve_time_table(result: &ClosedLoopResult) -> Table {
    Table {
        header: vec![SOLVE_TIME_COLUMN.into()],
        rows: result
            .records
            .iter()
            .map(|r| vec![r.solve_time_s])
            .collect(),
    }
}

pub fn kpi_table(result: &ClosedLoopResult) -> Table {
    Table {
        header: vec![
            "steps".into(),
            "mean_operating_cost".into(),
            "mean_loss_cost".into(),
        ],
        rows: vec![vec![
            result.records.len() as f64,
            result.kpis.mean_operating_cost,
            result.kpis.mean_loss_cost,
        ]],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDeviation {
    pub column: String,
    pub max_abs: f64,
    pub pass: bool,
}

/// Largest absolute deviation per column of `others` against `base`. The
/// solve-time column is skipped.
pub fn compare_tables(
    base: &Table,
    others: &[Table],
    tol: f64,
) -> Result<Vec<ColumnDeviation>, ReportError> {
    for t in others {
        if t.header != base.header {
            return Err(ReportError::Schema("runs have different columns".into()));
        }
        if t.rows.len() != base.rows.len() {
            return Err(ReportError::LengthMismatch {
                expected: base.rows.len(),
                got: t.rows.len(),
            });
        }
    }
    Ok(base
        .header
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != SOLVE_TIME_COLUMN)
        .map(|(c, h)| {
            let max_abs = others
                .iter()
                .flat_map(|t| {
                    t.rows
                        .iter()
                        .zip(&base.rows)
                        .map(move |(a, b)| (a[c] - b[c]).abs())
                })
                .fold(0.0, f64::max);
            ColumnDeviation {
                column: h.clone(),
                max_abs,
                pass: max_abs <= tol,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgrid::{run_closed_loop, MpcOptions, Profiles};
    use crate::opf::OpfVariant;

    const HEADER: &str = "k,time_h,conv1_power,conv2_power,bess1_power,bess2_power,res1_power,\
res2_power,load,stored_energy_1,stored_energy_2,pe_12,pe_21,pe_24,pe_42,pe_25,pe_52,pe_35,\
pe_53,cost_sw,cost_p,cost_x,cost_loss,solve_time_s";

    fn run() -> (MicrogridConfig, Grid, ClosedLoopResult) {
        let cfg = MicrogridConfig::table1();
        let grid = Grid::case_study();
        let profiles = Profiles::new(
            vec![vec![0.3, 0.1], vec![0.2, 0.4], vec![0.0, 0.0]],
            vec![vec![0.7], vec![0.9], vec![0.6]],
        )
        .unwrap();
        let v = OpfVariant::reference(&grid, cfg.beta);
        let r = run_closed_loop(&cfg, &grid, &profiles, &v, 3, &MpcOptions::default()).unwrap();
        (cfg, grid, r)
    }

    #[test]
    fn results_round_trip_with_documented_header() {
        let (cfg, grid, r) = run();
        let t = results_table(&cfg, &grid, &r);
        assert_eq!(t.header.join(","), HEADER);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with(HEADER));
        let back = Table::read(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("load").unwrap(), vec![0.7, 0.9, 0.6]);
    }

    #[test]
    fn compare_self_and_mismatch() {
        let (cfg, grid, r) = run();
        let t = results_table(&cfg, &grid, &r);
        let mut other = t.clone();
        let c = other
            .header
            .iter()
            .position(|h| h == "solve_time_s")
            .unwrap();
        other.rows[1][c] += 3.0;
        let dev = compare_tables(&t, &[other.clone()], 1e-4).unwrap();
        assert!(dev.iter().all(|d| d.pass && d.max_abs == 0.0));
        assert!(dev.iter().all(|d| d.column != "solve_time_s"));
        other.rows[2][2] += 1e-3;
        let dev = compare_tables(&t, &[other.clone()], 1e-4).unwrap();
        assert!(!dev.iter().find(|d| d.column == "conv1_power").unwrap().pass);
        other.rows.pop();
        assert!(matches!(
            compare_tables(&t, &[other], 1e-4),
            Err(ReportError::LengthMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn kpi_and_solve_time_files() {
        let (_, _, r) = run();
        let k = kpi_table(&r);
        assert_eq!(k.rows[0][1], r.kpis.mean_operating_cost);
        let s = solve_time_table(&r);
        assert_eq!(s.header, vec!["solve_time_s"]);
        assert_eq!(s.rows.len(), 3);
        assert!(Table::read("a,b\n1,x\n".as_bytes()).is_err());
    }
}
