//! Communication graphs and their initial mixing weights.
//!
//! Every neighborhood includes the client itself, adjacency is symmetric, and
//! the graph is connected. Initial aggregation weights are uniform over the
//! neighborhood, `1/|N_i|`, which makes the fully-connected graph's weight
//! matrix doubly stochastic — the configuration under which the global
//! gradient-tracking identity holds exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detection::WeightRow;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Full,
    Line,
    Ring,
    Star,
    Grid { rows: usize, cols: usize },
}

impl TopologyKind {
    pub fn name(&self) -> &'static str {
        match self {
            TopologyKind::Full => "full",
            TopologyKind::Line => "line",
            TopologyKind::Ring => "ring",
            TopologyKind::Star => "star",
            TopologyKind::Grid { .. } => "grid",
        }
    }
}

/// An undirected communication graph over `n` clients. Neighbor sets always
/// contain the owning client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    kind: TopologyKind,
    neighbors: Vec<BTreeSet<usize>>,
}

impl Topology {
    /// Build one of the named graphs. Grid is a 4-neighborhood lattice
    /// without wraparound and requires `n = rows * cols` with both at least 2.
    pub fn build(kind: TopologyKind, n: usize) -> Result<Topology> {
        if n < 2 {
            return Err(Error::Config(format!(
                "topology needs at least 2 clients, got {n}"
            )));
        }
        let mut neighbors: Vec<BTreeSet<usize>> =
            (0..n).map(|i| BTreeSet::from([i])).collect();
        let mut connect = |a: usize, b: usize, neighbors: &mut Vec<BTreeSet<usize>>| {
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        };
        match kind {
            TopologyKind::Full => {
                for a in 0..n {
                    for b in a + 1..n {
                        connect(a, b, &mut neighbors);
                    }
                }
            }
            TopologyKind::Line => {
                for a in 0..n - 1 {
                    connect(a, a + 1, &mut neighbors);
                }
            }
            TopologyKind::Ring => {
                for a in 0..n - 1 {
                    connect(a, a + 1, &mut neighbors);
                }
                connect(n - 1, 0, &mut neighbors);
            }
            TopologyKind::Star => {
                for b in 1..n {
                    connect(0, b, &mut neighbors);
                }
            }
            TopologyKind::Grid { rows, cols } => {
                if rows < 2 || cols < 2 || rows * cols != n {
                    return Err(Error::Config(format!(
                        "grid requires n = rows * cols with rows, cols >= 2; \
                         got {rows}x{cols} for n = {n}"
                    )));
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let id = r * cols + c;
                        if c + 1 < cols {
                            connect(id, id + 1, &mut neighbors);
                        }
                        if r + 1 < rows {
                            connect(id, id + cols, &mut neighbors);
                        }
                    }
                }
            }
        }
        let topo = Topology { kind, neighbors };
        topo.check()?;
        Ok(topo)
    }

    /// Wrap an explicit neighbor structure (used for custom graphs in tests
    /// and single-client setups). Validates self-membership, symmetry, and
    /// connectivity.
    pub fn from_neighbors(kind: TopologyKind, neighbors: Vec<BTreeSet<usize>>) -> Result<Topology> {
        let topo = Topology { kind, neighbors };
        topo.check()?;
        Ok(topo)
    }

    fn check(&self) -> Result<()> {
        let n = self.neighbors.len();
        for (i, set) in self.neighbors.iter().enumerate() {
            if !set.contains(&i) {
                return Err(Error::Config(format!("client {i} missing from its own neighborhood")));
            }
            for &j in set {
                if j >= n {
                    return Err(Error::Config(format!("neighbor id {j} out of range")));
                }
                if !self.neighbors[j].contains(&i) {
                    return Err(Error::Config(format!(
                        "asymmetric adjacency between {i} and {j}"
                    )));
                }
            }
        }
        if !self.is_connected() {
            return Err(Error::Config("topology is not connected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.neighbors.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Initial per-client weight rows: `1/|N_i|` on the neighborhood, zero
    /// elsewhere. Each row sums to one.
    pub fn initial_weights(&self) -> Vec<WeightRow> {
        (0..self.n())
            .map(|i| WeightRow::uniform(i, &self.neighbors[i]))
            .collect()
    }
}
