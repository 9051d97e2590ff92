//! Radial grid topology with π-equivalent line parameters.
//!
//! Edges are unordered node pairs `{i, j}` stored as `(i, j)` with `i < j`
//! and kept in lexicographic order. Every direction-stamped quantity
//! (line power) is laid out as `[p_ij, p_ji]` per edge in that order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::GridError;

/// Bus identifier. Ids are arbitrary; dense indices follow sorted order.
pub type NodeId = u32;

/// Series and shunt admittances of one line, in per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub series_conductance: f64,
    pub series_susceptance: f64,
    #[serde(default)]
    pub shunt_conductance_from: f64,
    #[serde(default)]
    pub shunt_susceptance_from: f64,
    #[serde(default)]
    pub shunt_conductance_to: f64,
    #[serde(default)]
    pub shunt_susceptance_to: f64,
}

impl LineParams {
    /// Line with series admittance only (shunts zero).
    pub fn series(g: f64, b: f64) -> Self {
        Self {
            series_conductance: g,
            series_susceptance: b,
            shunt_conductance_from: 0.0,
            shunt_susceptance_from: 0.0,
            shunt_conductance_to: 0.0,
            shunt_susceptance_to: 0.0,
        }
    }

    /// The 2 pu / −20 pu line used throughout the case study.
    pub fn case_study() -> Self {
        Self::series(2.0, -20.0)
    }

    fn check(&self, edge: (NodeId, NodeId)) -> Result<(), GridError> {
        let g = self.series_conductance;
        let b = self.series_susceptance;
        if !(g * g + b * b > 0.0) || !g.is_finite() || !b.is_finite() {
            return Err(GridError::ZeroSeriesAdmittance(edge.0, edge.1));
        }
        if self.shunt_conductance_from < 0.0 || self.shunt_conductance_to < 0.0 {
            return Err(GridError::NegativeShuntConductance(edge.0, edge.1));
        }
        Ok(())
    }
}

/// Undirected weighted graph of buses and lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    edges: Vec<(NodeId, NodeId)>,
    lines: Vec<LineParams>,
    voltages: Vec<f64>,
}

impl Grid {
    /// Builds a grid from nodes, lines and per-node voltage magnitudes.
    ///
    /// Edge endpoints are normalized to `(min, max)` but the given edge
    /// order is preserved; [`Grid::validate_radial`] checks it.
    pub fn new(
        nodes: &[NodeId],
        lines: &[((NodeId, NodeId), LineParams)],
        voltages: Option<&[f64]>,
    ) -> Result<Self, GridError> {
        if nodes.is_empty() {
            return Err(GridError::Empty);
        }
        let mut sorted: Vec<NodeId> = nodes.to_vec();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(GridError::DuplicateNode(w[0]));
        }
        let index: BTreeMap<NodeId, usize> =
            sorted.iter().enumerate().map(|(k, &id)| (id, k)).collect();

        let voltages = match voltages {
            Some(v) if v.len() != sorted.len() => {
                return Err(GridError::VoltageCount {
                    expected: sorted.len(),
                    got: v.len(),
                })
            }
            Some(v) => v.to_vec(),
            None => vec![1.0; sorted.len()],
        };
        for (k, &v) in voltages.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GridError::NonpositiveVoltage(sorted[k]));
            }
        }

        let mut edges = Vec::with_capacity(lines.len());
        let mut params = Vec::with_capacity(lines.len());
        let mut seen = BTreeSet::new();
        for &((a, b), p) in lines {
            for n in [a, b] {
                if !index.contains_key(&n) {
                    return Err(GridError::UnknownNode(n));
                }
            }
            if a == b {
                return Err(GridError::SelfLoop(a));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GridError::DuplicateEdge(e.0, e.1));
            }
            // Shunt ends follow the normalized orientation.
            let p = if a <= b {
                p
            } else {
                LineParams {
                    shunt_conductance_from: p.shunt_conductance_to,
                    shunt_susceptance_from: p.shunt_susceptance_to,
                    shunt_conductance_to: p.shunt_conductance_from,
                    shunt_susceptance_to: p.shunt_susceptance_from,
                    ..p
                }
            };
            p.check(e)?;
            edges.push(e);
            params.push(p);
        }

        Ok(Self {
            nodes: sorted,
            index,
            edges,
            lines: params,
            voltages,
        })
    }

    /// Same as [`Grid::new`] but sorts the lines into canonical order first.
    pub fn new_sorted(
        nodes: &[NodeId],
        lines: &[((NodeId, NodeId), LineParams)],
        voltages: Option<&[f64]>,
    ) -> Result<Self, GridError> {
        let mut grid = Self::new(nodes, lines, voltages)?;
        let mut order: Vec<usize> = (0..grid.edges.len()).collect();
        order.sort_by_key(|&k| grid.edges[k]);
        grid.edges = order.iter().map(|&k| grid.edges[k]).collect();
        grid.lines = order.iter().map(|&k| grid.lines[k]).collect();
        Ok(grid)
    }

    /// Five-bus microgrid: edges {1,2},{2,4},{2,5},{3,5}, all lines 2 − j20 pu.
    pub fn case_study() -> Self {
        let line = LineParams::case_study();
        Self::new(
            &[1, 2, 3, 4, 5],
            &[
                ((1, 2), line),
                ((2, 4), line),
                ((2, 5), line),
                ((3, 5), line),
            ],
            None,
        )
        .expect("case-study grid is well formed")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn lines(&self) -> &[LineParams] {
        &self.lines
    }

    pub fn voltages(&self) -> &[f64] {
        &self.voltages
    }

    /// Dense index of a node id.
    pub fn node_index(&self, id: NodeId) -> Result<usize, GridError> {
        self.index
            .get(&id)
            .copied()
            .ok_or(GridError::UnknownNode(id))
    }

    pub fn voltage(&self, id: NodeId) -> Result<f64, GridError> {
        Ok(self.voltages[self.node_index(id)?])
    }

    /// Position of edge `{a, b}` in canonical order, if present.
    pub fn edge_position(&self, a: NodeId, b: NodeId) -> Option<usize> {
        let e = (a.min(b), a.max(b));
        self.edges.iter().position(|&x| x == e)
    }

    /// Checks edge ordering, connectivity and acyclicity.
    pub fn validate_radial(&self) -> Result<(), GridError> {
        if let Some(k) = self.edges.windows(2).position(|w| w[0] >= w[1]) {
            return Err(GridError::EdgeOrderViolation(k + 1));
        }

        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut cycle = Vec::new();
        for &(a, b) in &self.edges {
            let (ia, ib) = (self.index[&a], self.index[&b]);
            let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
            if ra == rb {
                cycle.push((a, b));
            } else {
                parent[ra] = rb;
            }
        }
        if !cycle.is_empty() {
            return Err(GridError::CycleDetected(cycle));
        }

        let mut components: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
        for (k, &id) in self.nodes.iter().enumerate() {
            let r = find(&mut parent, k);
            components.entry(r).or_default().push(id);
        }
        if components.len() > 1 {
            let mut comps: Vec<Vec<NodeId>> = components.into_values().collect();
            comps.sort();
            return Err(GridError::Disconnected(comps));
        }
        Ok(())
    }

    /// Nodes sharing a line with `id`.
    pub fn adjacent_nodes(&self, id: NodeId) -> Result<BTreeSet<NodeId>, GridError> {
        self.node_index(id)?;
        Ok(self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect())
    }

    /// All unordered node pairs in lexicographic order, N_b(N_b−1)/2 of them.
    pub fn all_node_pairs(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::with_capacity(self.nodes.len() * self.nodes.len().saturating_sub(1) / 2);
        for (k, &a) in self.nodes.iter().enumerate() {
            for &b in &self.nodes[k + 1..] {
                out.push((a, b));
            }
        }
        out
    }

    /// Node-to-directional-line incidence: `p_g = M p_e` with `M` of shape N_b × 2N_e.
    pub fn injection_incidence(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for (l, &(a, b)) in self.edges.iter().enumerate() {
            out.push((self.index[&a], 2 * l));
            out.push((self.index[&b], 2 * l + 1));
        }
        out
    }

    /// Adjacency list on dense indices: `(neighbor index, edge position)`.
    pub(crate) fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (l, &(a, b)) in self.edges.iter().enumerate() {
            let (ia, ib) = (self.index[&a], self.index[&b]);
            adj[ia].push((ib, l));
            adj[ib].push((ia, l));
        }
        adj
    }
}

/// Sorts an edge list into canonical lexicographic order with `i < j`.
pub fn canonical_edge_order(edges: &[(NodeId, NodeId)]) -> Vec<(NodeId, NodeId)> {
    let mut out: Vec<_> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    out.sort_unstable();
    out
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    nodes: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    voltages: Option<Vec<f64>>,
    lines: Vec<LineEntry>,
}

#[derive(Serialize, Deserialize)]
struct LineEntry {
    from: NodeId,
    to: NodeId,
    #[serde(flatten)]
    params: LineParams,
}

impl Grid {
    /// Reads `nodes`, optional `voltages` and `[[lines]]` tables with
    /// `from`, `to` and the [`LineParams`] fields.
    pub fn from_toml(text: &str) -> Result<Self, GridError> {
        let file: GridFile =
            toml::from_str(text).map_err(|e| GridError::Parse(e.message().to_string()))?;
        let lines: Vec<_> = file
            .lines
            .iter()
            .map(|l| ((l.from, l.to), l.params))
            .collect();
        let grid = Self::new_sorted(&file.nodes, &lines, file.voltages.as_deref())?;
        grid.validate_radial()?;
        Ok(grid)
    }

    pub fn to_toml(&self) -> String {
        let file = GridFile {
            nodes: self.nodes.clone(),
            voltages: (!self.voltages.iter().all(|v| *v == 1.0)).then(|| self.voltages.clone()),
            lines: self
                .edges
                .iter()
                .zip(&self.lines)
                .map(|(&(from, to), &params)| LineEntry { from, to, params })
                .collect(),
        };
        toml::to_string(&file).expect("grid serializes")
    }
}
