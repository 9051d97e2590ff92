use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::MicrogridError;
use crate::grid::{Grid, NodeId};

/// Unit models, costs and MPC settings.
///
/// Vectors are per unit in the order given by the `*_nodes` lists. The
/// storage matrices are diagonal and stored as their diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridConfig {
    /// Switching cost per generator.
    pub c0: Vec<f64>,
    /// Running cost per committed generator.
    pub c1: Vec<f64>,
    /// Fuel cost per pu of generator output.
    pub c2: Vec<f64>,
    /// Cost per pu of renewable output (negative rewards use).
    pub c3: Vec<f64>,
    /// Conversion cost per pu of storage power magnitude.
    pub c4: Vec<f64>,
    /// Penalty per pu·h outside the soft energy band.
    pub c5: Vec<f64>,
    /// Cost per pu of transmission losses.
    pub c6: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub sampling_time_h: f64,
    pub beta: f64,
    pub p_t_min: Vec<f64>,
    pub p_t_max: Vec<f64>,
    pub p_s_min: Vec<f64>,
    pub p_s_max: Vec<f64>,
    pub a_s: Vec<f64>,
    pub b_s: Vec<f64>,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_soft_min: Vec<f64>,
    pub x_soft_max: Vec<f64>,
    pub x0: Vec<f64>,
    /// Directional line power limits, `[p_ij, p_ji]` per line.
    pub p_e_min: Vec<f64>,
    pub p_e_max: Vec<f64>,
    pub delta_init: Vec<bool>,
    pub generator_nodes: Vec<NodeId>,
    pub storage_nodes: Vec<NodeId>,
    pub res_nodes: Vec<NodeId>,
    pub load_nodes: Vec<NodeId>,
}

impl MicrogridConfig {
    /// Case-study parameters for the five-bus grid.
    pub fn table1() -> Self {
        Self {
            c0: vec![0.2, 0.1],
            c1: vec![0.13, 0.07],
            c2: vec![1.56, 1.43],
            c3: vec![-0.8, -1.0],
            c4: vec![0.1, 0.05],
            c5: vec![1e3, 1e3],
            c6: 1.0,
            gamma: 0.9,
            horizon: 6,
            sampling_time_h: 0.5,
            beta: 1.0,
            p_t_min: vec![0.3, 0.1],
            p_t_max: vec![0.9, 0.6],
            p_s_min: vec![-1.0, -1.0],
            p_s_max: vec![1.0, 1.0],
            a_s: vec![1.0, 1.0],
            b_s: vec![0.5, 0.5],
            x_min: vec![0.0, 0.0],
            x_max: vec![7.0, 4.0],
            x_soft_min: vec![0.5, 0.5],
            x_soft_max: vec![6.5, 3.5],
            x0: vec![0.5, 0.5],
            p_e_min: vec![-1.0; 8],
            p_e_max: vec![1.0; 8],
            delta_init: vec![true, false],
            generator_nodes: vec![1, 3],
            storage_nodes: vec![2, 4],
            res_nodes: vec![2, 4],
            load_nodes: vec![5],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, MicrogridError> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| MicrogridError::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generators(&self) -> usize {
        self.generator_nodes.len()
    }
    pub fn storages(&self) -> usize {
        self.storage_nodes.len()
    }
    pub fn renewables(&self) -> usize {
        self.res_nodes.len()
    }
    pub fn loads(&self) -> usize {
        self.load_nodes.len()
    }
    pub fn units(&self) -> usize {
        self.generators() + self.storages() + self.renewables() + self.loads()
    }

    /// Largest demand the fleet can cover: all generators and storage at full output.
    pub fn capacity(&self) -> f64 {
        self.p_t_max.iter().sum::<f64>() + self.p_s_max.iter().sum::<f64>()
    }

    pub fn validate(&self) -> Result<(), MicrogridError> {
        let bad = |msg: String| Err(MicrogridError::InvalidConfig(msg));
        let nt = self.generators();
        let ns = self.storages();
        let nr = self.renewables();
        let sized: [(&str, usize, usize); 19] = [
            ("c0", self.c0.len(), nt),
            ("c1", self.c1.len(), nt),
            ("c2", self.c2.len(), nt),
            ("p_t_min", self.p_t_min.len(), nt),
            ("p_t_max", self.p_t_max.len(), nt),
            ("delta_init", self.delta_init.len(), nt),
            ("c3", self.c3.len(), nr),
            ("c4", self.c4.len(), ns),
            ("c5", self.c5.len(), ns),
            ("p_s_min", self.p_s_min.len(), ns),
            ("p_s_max", self.p_s_max.len(), ns),
            ("a_s", self.a_s.len(), ns),
            ("b_s", self.b_s.len(), ns),
            ("x_min", self.x_min.len(), ns),
            ("x_max", self.x_max.len(), ns),
            ("x_soft_min", self.x_soft_min.len(), ns),
            ("x_soft_max", self.x_soft_max.len(), ns),
            ("x0", self.x0.len(), ns),
            ("p_e_max", self.p_e_max.len(), self.p_e_min.len()),
        ];
        for (name, got, want) in sized {
            if got != want {
                return bad(format!("`{name}` has {got} entries, expected {want}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("`gamma` = {} outside (0, 1)", self.gamma));
        }
        if self.horizon == 0 {
            return bad("`horizon` must be at least 1".into());
        }
        if !(self.sampling_time_h > 0.0) {
            return bad("`sampling_time_h` must be positive".into());
        }
        if !(self.beta >= 0.0) {
            return bad("`beta` must be nonnegative".into());
        }
        if !(self.c6 >= 0.0) {
            return bad("`c6` must be nonnegative".into());
        }
        // The epigraph forms for |·| and max(0,·) are exact only for
        // nonnegative weights.
        for (name, v) in [("c0", &self.c0), ("c4", &self.c4), ("c5", &self.c5)] {
            if v.iter().any(|c| !(*c >= 0.0)) {
                return bad(format!("`{name}` must be nonnegative"));
            }
        }
        let ordered = |lo: &[f64], hi: &[f64], what: &str| -> Result<(), MicrogridError> {
            if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                return Err(MicrogridError::InvalidConfig(format!(
                    "{what} bounds out of order"
                )));
            }
            Ok(())
        };
        ordered(&self.p_t_min, &self.p_t_max, "generator power")?;
        ordered(&self.p_s_min, &self.p_s_max, "storage power")?;
        ordered(&self.p_e_min, &self.p_e_max, "line power")?;
        ordered(&self.x_min, &self.x_soft_min, "energy")?;
        ordered(&self.x_soft_min, &self.x_soft_max, "soft energy")?;
        ordered(&self.x_soft_max, &self.x_max, "energy")?;
        ordered(&self.x_min, &self.x0, "initial energy")?;
        ordered(&self.x0, &self.x_max, "initial energy")?;
        if self.p_t_min.iter().any(|v| *v < 0.0) {
            return bad("`p_t_min` must be nonnegative".into());
        }
        if self.p_s_min.iter().any(|v| *v > 0.0) || self.p_s_max.iter().any(|v| *v < 0.0) {
            return bad("storage power range must contain zero".into());
        }
        Ok(())
    }

    /// Checks the node lists and line limits against a grid.
    pub fn validate_for(&self, grid: &Grid) -> Result<(), MicrogridError> {
        self.validate()?;
        if self.p_e_min.len() != 2 * grid.edge_count() {
            return Err(MicrogridError::InvalidConfig(format!(
                "`p_e_min` has {} entries, grid has {} directional line powers",
                self.p_e_min.len(),
                2 * grid.edge_count()
            )));
        }
        self.unit_nodes(grid).map(|_| ())
    }

    /// Node position of every unit column, ordered generators, storage,
    /// renewables, loads.
    pub fn unit_nodes(&self, grid: &Grid) -> Result<Vec<usize>, MicrogridError> {
        self.generator_nodes
            .iter()
            .chain(&self.storage_nodes)
            .chain(&self.res_nodes)
            .chain(&self.load_nodes)
            .map(|&id| {
                grid.node_index(id).map_err(|_| {
                    MicrogridError::InvalidConfig(format!("unit at unknown node {id}"))
                })
            })
            .collect()
    }

    /// Unit-to-node incidence `U`, one nonzero per column.
    pub fn unit_matrix(&self, grid: &Grid) -> Result<DMatrix<f64>, MicrogridError> {
        let nodes = self.unit_nodes(grid)?;
        let mut u = DMatrix::zeros(grid.node_count(), nodes.len());
        for (j, &n) in nodes.iter().enumerate() {
            u[(n, j)] = 1.0;
        }
        Ok(u)
    }
}

impl Default for MicrogridConfig {
    fn default() -> Self {
        Self::table1()
    }
}
