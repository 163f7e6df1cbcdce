//! Communication topology, mixing-weight construction, communication
//! schedules, and machine-checkable validators for the standing assumptions
//! (weights rule, symmetry, double stochasticity, connectivity of the
//! recurrent edge set).

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Row-sum / column-sum tolerance for stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

pub type Edge = (usize, usize);
pub type EdgeSet = BTreeSet<Edge>;

/// Undirected communication graph over agents `0..m`. Edges are stored with
/// the smaller endpoint first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    num_agents: usize,
    edges: EdgeSet,
}

impl CommGraph {
    pub fn new(num_agents: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if num_agents == 0 {
            return Err(Error::Unsupported("graph needs at least one agent".into()));
        }
        let mut set = EdgeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Unsupported(format!("self-loop on agent {a}")));
            }
            if a >= num_agents || b >= num_agents {
                return Err(Error::Unsupported(format!(
                    "edge ({a}, {b}) out of range for {num_agents} agents"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(CommGraph {
            num_agents,
            edges: set,
        })
    }

    pub fn ring(num_agents: usize) -> Result<Self> {
        let edges = (0..num_agents).map(|i| (i, (i + 1) % num_agents));
        CommGraph::new(num_agents, if num_agents > 1 { edges.collect() } else { vec![] })
    }

    pub fn path(num_agents: usize) -> Result<Self> {
        CommGraph::new(num_agents, (0..num_agents.saturating_sub(1)).map(|i| (i, i + 1)))
    }

    pub fn complete(num_agents: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..num_agents {
            for j in i + 1..num_agents {
                edges.push((i, j));
            }
        }
        CommGraph::new(num_agents, edges)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|(a, b)| *a == i || *b == i).count()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Induced subgraph on a subset of agents, with agents renumbered by
    /// their position in `members`.
    pub fn induced(&self, members: &[usize]) -> Result<CommGraph> {
        let index_of = |v: usize| members.iter().position(|&m| m == v);
        let edges = self.edges.iter().filter_map(|&(a, b)| {
            match (index_of(a), index_of(b)) {
                (Some(x), Some(y)) => Some((x, y)),
                _ => None,
            }
        });
        CommGraph::new(members.len().max(1), edges.collect::<Vec<_>>())
    }
}

/// BFS connectivity; a single vertex counts as connected.
pub fn is_connected(graph: &CommGraph) -> bool {
    connected_with_edges(graph.num_agents, &graph.edges)
}

fn connected_with_edges(n: usize, edges: &EdgeSet) -> bool {
    if n <= 1 {
        return true;
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == n
}

/// Mixing weights `a_ij` with the lower bound `eta` they were built against.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: Matrix,
    eta: f64,
    doubly_stochastic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// Every entry `1/m`; mixes as if the graph were complete.
    Uniform,
    /// `a_ij = 1 / (1 + max(deg_i, deg_j))` on edges, diagonal absorbs the rest.
    Metropolis,
}

impl WeightMatrix {
    /// Validating constructor. `graph` defines which off-diagonal entries may
    /// be nonzero and must carry at least `eta`.
    pub fn new(entries: Matrix, eta: f64, graph: &CommGraph, doubly_stochastic: bool) -> Result<Self> {
        let w = WeightMatrix {
            entries,
            eta,
            doubly_stochastic,
        };
        w.check(graph)?;
        Ok(w)
    }

    /// Constructor that skips invariant checks; used to build validator
    /// fixtures and per-step masked matrices.
    pub fn new_unchecked(entries: Matrix, eta: f64, doubly_stochastic: bool) -> Self {
        WeightMatrix {
            entries,
            eta,
            doubly_stochastic,
        }
    }

    fn check(&self, graph: &CommGraph) -> Result<()> {
        let m = graph.num_agents();
        if self.entries.rows() != m || self.entries.cols() != m {
            return Err(Error::Dimension {
                what: "weight matrix",
                expected: m,
                got: self.entries.rows(),
            });
        }
        for i in 0..m {
            let row_sum: f64 = self.entries.row(i).iter().sum();
            if (row_sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Unsupported(format!(
                    "row {i} sums to {row_sum}, expected 1"
                )));
            }
            if self.entries.get(i, i) < self.eta {
                return Err(Error::Unsupported(format!(
                    "diagonal entry a_{i}{i} = {} below eta = {}",
                    self.entries.get(i, i),
                    self.eta
                )));
            }
            for j in 0..m {
                if i == j {
                    continue;
                }
                let a = self.entries.get(i, j);
                if a < 0.0 {
                    return Err(Error::Unsupported(format!("negative weight a_{i}{j}")));
                }
                if graph.has_edge(i, j) {
                    if a < self.eta {
                        return Err(Error::Unsupported(format!(
                            "edge weight a_{i}{j} = {a} below eta = {}",
                            self.eta
                        )));
                    }
                } else if a != 0.0 {
                    return Err(Error::Unsupported(format!(
                        "nonzero weight a_{i}{j} on a non-edge"
                    )));
                }
            }
        }
        if self.doubly_stochastic {
            for j in 0..m {
                let col_sum: f64 = (0..m).map(|i| self.entries.get(i, j)).sum();
                if (col_sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::Unsupported(format!(
                        "column {j} sums to {col_sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(i, j)
    }

    pub fn num_agents(&self) -> usize {
        self.entries.rows()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_doubly_stochastic_flagged(&self) -> bool {
        self.doubly_stochastic
    }

    /// Per-step matrix with inactive edges zeroed and their weight folded
    /// into the diagonal; row (and column) stochasticity is preserved.
    pub fn effective(&self, active: &EdgeSet) -> WeightMatrix {
        let m = self.num_agents();
        let mut out = Matrix::zeros(m, m);
        for i in 0..m {
            let mut dropped = 0.0;
            for j in 0..m {
                if i == j {
                    continue;
                }
                let a = self.entries.get(i, j);
                if a == 0.0 {
                    continue;
                }
                let key = (i.min(j), i.max(j));
                if active.contains(&key) {
                    out.set(i, j, a);
                } else {
                    dropped += a;
                }
            }
            out.set(i, i, self.entries.get(i, i) + dropped);
        }
        WeightMatrix::new_unchecked(out, self.eta, self.doubly_stochastic)
    }
}

/// Default weight lower bound `1/(2m)`.
pub fn default_eta(num_agents: usize) -> f64 {
    1.0 / (2.0 * num_agents as f64)
}

/// Build mixing weights for a graph.
pub fn build_weights(graph: &CommGraph, scheme: WeightScheme) -> Result<WeightMatrix> {
    let m = graph.num_agents();
    let eta = default_eta(m);
    match scheme {
        WeightScheme::Uniform => {
            let mut entries = Matrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    entries.set(i, j, 1.0 / m as f64);
                }
            }
            // Uniform weights mix every pair, so they are validated against
            // the complete graph regardless of `graph`'s edge set.
            WeightMatrix::new(entries, eta, &CommGraph::complete(m)?, true)
        }
        WeightScheme::Metropolis => {
            if !is_connected(graph) {
                return Err(Error::Disconnected);
            }
            let mut entries = Matrix::zeros(m, m);
            for &(i, j) in graph.edges() {
                let w = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
                entries.set(i, j, w);
                entries.set(j, i, w);
            }
            for i in 0..m {
                let off: f64 = (0..m).filter(|&j| j != i).map(|j| entries.get(i, j)).sum();
                entries.set(i, i, 1.0 - off);
            }
            WeightMatrix::new(entries, eta, graph, true)
        }
    }
}

/// Communication schedule: which edges exchange at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Synchronous,
    Gossip,
    Broadcast,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Synchronous => write!(f, "synchronous"),
            ScheduleKind::Gossip => write!(f, "gossip"),
            ScheduleKind::Broadcast => write!(f, "broadcast"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub seed: u64,
    /// Claimed intercommunication bound `B`, checked empirically by
    /// [`check_intercommunication_bound`].
    pub bound: Option<usize>,
}

impl Schedule {
    pub fn synchronous() -> Self {
        Schedule {
            kind: ScheduleKind::Synchronous,
            seed: 0,
            bound: None,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Active edges at a step. Deterministic in `(schedule.seed, step)`: querying
/// the same step twice yields the same set bit for bit.
pub fn next_active_edges(schedule: &Schedule, step: usize, graph: &CommGraph) -> Result<EdgeSet> {
    match schedule.kind {
        ScheduleKind::Synchronous => Ok(graph.edges().clone()),
        ScheduleKind::Gossip => {
            if graph.edges().is_empty() {
                return Err(Error::EmptyEdgeSet("gossip"));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(schedule.seed ^ splitmix64(step as u64)));
            let idx = rng.random_range(0..graph.edges().len());
            let edge = *graph.edges().iter().nth(idx).expect("index in range");
            Ok(EdgeSet::from([edge]))
        }
        ScheduleKind::Broadcast => {
            if graph.edges().is_empty() {
                return Err(Error::EmptyEdgeSet("broadcast"));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(schedule.seed ^ splitmix64(step as u64)));
            let node = rng.random_range(0..graph.num_agents());
            Ok(graph
                .edges()
                .iter()
                .copied()
                .filter(|&(a, b)| a == node || b == node)
                .collect())
        }
    }
}

/// Empirically determine the smallest window `B` such that over
/// `steps 0..horizon` every graph edge recurs within any `B` consecutive
/// steps. Errors if some edge never activates.
pub fn check_intercommunication_bound(
    schedule: &Schedule,
    graph: &CommGraph,
    horizon: usize,
) -> Result<usize> {
    let edges: Vec<Edge> = graph.edges().iter().copied().collect();
    if edges.is_empty() {
        return Ok(1);
    }
    let mut last_seen = vec![None::<usize>; edges.len()];
    let mut max_gap = vec![0usize; edges.len()];
    for step in 0..horizon {
        let active = next_active_edges(schedule, step, graph)?;
        for (e, edge) in edges.iter().enumerate() {
            if active.contains(edge) {
                let gap = step - last_seen[e].map_or(0, |s| s + 1) + 1;
                max_gap[e] = max_gap[e].max(gap);
                last_seen[e] = Some(step);
            }
        }
    }
    for (e, seen) in last_seen.iter().enumerate() {
        match seen {
            None => {
                return Err(Error::Unsupported(format!(
                    "edge {:?} never activated within {horizon} steps",
                    edges[e]
                )))
            }
            Some(s) => {
                // Tail window from the last activation to the horizon end.
                max_gap[e] = max_gap[e].max(horizon - s);
            }
        }
    }
    Ok(max_gap.into_iter().max().unwrap_or(1))
}

/// Outcome of a single assumption check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(detail: impl Into<String>) -> Self {
        CheckResult {
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        CheckResult {
            passed: false,
            detail: detail.into(),
        }
    }
}

/// Pass/fail report over a sequence of weight matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub weights_rule: CheckResult,
    pub symmetry: CheckResult,
    pub double_stochasticity: CheckResult,
    pub connectivity: CheckResult,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.weights_rule.passed
            && self.symmetry.passed
            && self.double_stochasticity.passed
            && self.connectivity.passed
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, check) in [
            ("weights rule", &self.weights_rule),
            ("symmetry", &self.symmetry),
            ("double stochasticity", &self.double_stochasticity),
            ("connectivity of (V, E_inf)", &self.connectivity),
        ] {
            writeln!(
                f,
                "{name}: {}{}",
                if check.passed { "pass" } else { "FAIL" },
                if check.detail.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", check.detail)
                }
            )?;
        }
        Ok(())
    }
}

/// Report-only checks of the standing assumptions over a weight-matrix
/// sequence: eta bounds and row stochasticity, symmetry, double
/// stochasticity, and connectivity of the recurrent edge set (here: edges
/// carrying positive weight at least once in the sequence).
pub fn validate_assumptions(
    sequence: &[WeightMatrix],
    graph: &CommGraph,
    eta: f64,
) -> ValidationReport {
    let m = graph.num_agents();
    let mut weights_rule = CheckResult::pass("");
    let mut symmetry = CheckResult::pass("");
    let mut doubly = CheckResult::pass("");
    let mut recurrent = EdgeSet::new();

    for (k, w) in sequence.iter().enumerate() {
        let a = w.entries();
        if a.rows() != m || a.cols() != m {
            weights_rule = CheckResult::fail(format!("matrix {k} has wrong shape"));
            continue;
        }
        for i in 0..m {
            let row_sum: f64 = a.row(i).iter().sum();
            if weights_rule.passed && (row_sum - 1.0).abs() > STOCHASTIC_TOL {
                weights_rule =
                    CheckResult::fail(format!("matrix {k} row {i} sums to {row_sum:.12}"));
            }
            if weights_rule.passed && a.get(i, i) < eta {
                weights_rule = CheckResult::fail(format!(
                    "matrix {k} diagonal a_{i}{i} = {} below eta {eta}",
                    a.get(i, i)
                ));
            }
            for j in 0..m {
                if i == j {
                    continue;
                }
                let v = a.get(i, j);
                if v > 0.0 {
                    recurrent.insert((i.min(j), i.max(j)));
                    if weights_rule.passed && v < eta {
                        weights_rule = CheckResult::fail(format!(
                            "matrix {k} active weight a_{i}{j} = {v} below eta {eta}"
                        ));
                    }
                }
                if symmetry.passed && (v - a.get(j, i)).abs() > STOCHASTIC_TOL {
                    symmetry = CheckResult::fail(format!(
                        "matrix {k}: a_{i}{j} = {v} but a_{j}{i} = {}",
                        a.get(j, i)
                    ));
                }
            }
        }
        for j in 0..m {
            let col_sum: f64 = (0..m).map(|i| a.get(i, j)).sum();
            if doubly.passed && (col_sum - 1.0).abs() > STOCHASTIC_TOL {
                doubly = CheckResult::fail(format!("matrix {k} column {j} sums to {col_sum:.12}"));
            }
        }
    }

    let connectivity = if connected_with_edges(m, &recurrent) {
        CheckResult::pass(format!("{} recurrent edges", recurrent.len()))
    } else {
        CheckResult::fail("recurrent edge set does not connect all agents".into())
    };

    ValidationReport {
        weights_rule,
        symmetry,
        double_stochasticity: doubly,
        connectivity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_vertex_is_connected() {
        assert!(is_connected(&CommGraph::new(1, []).unwrap()));
    }

    #[test]
    fn isolated_vertices_are_disconnected() {
        assert!(!is_connected(&CommGraph::new(2, []).unwrap()));
    }

    #[test]
    fn ring_of_four_is_connected() {
        assert!(is_connected(&CommGraph::ring(4).unwrap()));
    }

    #[test]
    fn rejects_self_loop_and_out_of_range() {
        assert!(CommGraph::new(3, [(1, 1)]).is_err());
        assert!(CommGraph::new(3, [(0, 3)]).is_err());
    }

    #[test]
    fn uniform_weights_all_quarters() {
        let g = CommGraph::ring(4).unwrap();
        let w = build_weights(&g, WeightScheme::Uniform).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(w.get(i, j), 0.25);
            }
        }
    }

    #[test]
    fn metropolis_on_path_of_three() {
        let g = CommGraph::path(3).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        let third = 1.0 / 3.0;
        assert!((w.get(0, 1) - third).abs() < 1e-15);
        assert!((w.get(1, 2) - third).abs() < 1e-15);
        assert!((w.get(0, 0) - 2.0 * third).abs() < 1e-15);
        assert!((w.get(1, 1) - third).abs() < 1e-15);
        assert!((w.get(2, 2) - 2.0 * third).abs() < 1e-15);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| w.get(i, j)).sum();
            let col: f64 = (0..3).map(|j| w.get(j, i)).sum();
            assert!((row - 1.0).abs() < 1e-15);
            assert!((col - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn metropolis_on_two_nodes() {
        let g = CommGraph::new(2, [(0, 1)]).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        assert_eq!(w.get(0, 1), 0.5);
        assert_eq!(w.get(1, 0), 0.5);
        assert_eq!(w.get(0, 0), 0.5);
        assert_eq!(w.get(1, 1), 0.5);
    }

    #[test]
    fn metropolis_rejects_disconnected() {
        let g = CommGraph::new(4, [(0, 1)]).unwrap();
        assert!(matches!(
            build_weights(&g, WeightScheme::Metropolis),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn validators_pass_uniform_on_connected_graph() {
        let g = CommGraph::ring(4).unwrap();
        let w = build_weights(&g, WeightScheme::Uniform).unwrap();
        let report = validate_assumptions(&[w], &CommGraph::complete(4).unwrap(), default_eta(4));
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn validators_flag_bad_row_sum() {
        let mut entries = Matrix::identity(2);
        entries.set(0, 0, 0.7);
        entries.set(0, 1, 0.2); // row sums to 0.9
        let w = WeightMatrix::new_unchecked(entries, 0.1, false);
        let g = CommGraph::new(2, [(0, 1)]).unwrap();
        let report = validate_assumptions(&[w], &g, 0.1);
        assert!(!report.weights_rule.passed);
    }

    #[test]
    fn validators_flag_asymmetry() {
        let entries = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let w = WeightMatrix::new_unchecked(entries, 0.1, false);
        let g = CommGraph::new(2, [(0, 1)]).unwrap();
        let report = validate_assumptions(&[w], &g, 0.1);
        assert!(!report.symmetry.passed);
        assert!(!report.double_stochasticity.passed);
    }

    #[test]
    fn synchronous_schedule_returns_all_edges() {
        let g = CommGraph::ring(4).unwrap();
        let s = Schedule::synchronous();
        let active = next_active_edges(&s, 17, &g).unwrap();
        assert_eq!(active, *g.edges());
    }

    #[test]
    fn gossip_is_deterministic_per_step() {
        let g = CommGraph::ring(4).unwrap();
        let s = Schedule {
            kind: ScheduleKind::Gossip,
            seed: 42,
            bound: None,
        };
        let a = next_active_edges(&s, 0, &g).unwrap();
        let b = next_active_edges(&s, 0, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn gossip_covers_every_edge_with_finite_bound() {
        let g = CommGraph::ring(4).unwrap();
        let s = Schedule {
            kind: ScheduleKind::Gossip,
            seed: 42,
            bound: None,
        };
        let bound = check_intercommunication_bound(&s, &g, 10_000).unwrap();
        assert!(bound >= 1);
        assert!(bound < 10_000);
    }

    #[test]
    fn broadcast_activates_incident_edges() {
        let g = CommGraph::ring(4).unwrap();
        let s = Schedule {
            kind: ScheduleKind::Broadcast,
            seed: 7,
            bound: None,
        };
        let active = next_active_edges(&s, 3, &g).unwrap();
        assert_eq!(active.len(), 2); // every ring node has two incident edges
    }

    #[test]
    fn gossip_errors_on_empty_edge_set() {
        let g = CommGraph::new(2, []).unwrap();
        let s = Schedule {
            kind: ScheduleKind::Gossip,
            seed: 1,
            bound: None,
        };
        assert!(next_active_edges(&s, 0, &g).is_err());
    }

    #[test]
    fn effective_matrix_stays_row_stochastic() {
        let g = CommGraph::ring(4).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        let active = EdgeSet::from([(0usize, 1usize)]);
        let eff = w.effective(&active);
        for i in 0..4 {
            let row: f64 = (0..4).map(|j| eff.get(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-15);
        }
        assert_eq!(eff.get(2, 3), 0.0);
        assert!(eff.get(2, 2) > w.get(2, 2));
    }
}
