//! Server graph topologies and combination matrices.
//!
//! The diffusion step mixes server models through a symmetric
//! doubly-stochastic combination matrix A. Mixing speed is governed by
//! iota2 = rho(A - (1/P) 11^T), which must be < 1 for a connected graph.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::rng::DetRng;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node index {0} out of range for P = {1}")]
    NodeOutOfRange(usize, usize),
    #[error("self-loop edge ({0}, {0}) is implicit and must not be listed")]
    ExplicitSelfLoop(usize),
    #[error("P must be at least 1")]
    EmptyGraph,
    #[error("graph is disconnected: node {0} is unreachable from node 0")]
    Disconnected(usize),
}

/// Undirected server graph. Self-loops are implicit on every node.
#[derive(Clone, Debug)]
pub struct Topology {
    units: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    pub fn new(units: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        if units == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= units {
                return Err(GraphError::NodeOutOfRange(a, units));
            }
            if b >= units {
                return Err(GraphError::NodeOutOfRange(b, units));
            }
            if a == b {
                return Err(GraphError::ExplicitSelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { units, edges: set })
    }

    pub fn complete(units: usize) -> Self {
        let edges = (0..units)
            .flat_map(|a| (a + 1..units).map(move |b| (a, b)))
            .collect();
        Self { units, edges }
    }

    pub fn ring(units: usize) -> Self {
        let mut edges = BTreeSet::new();
        if units >= 2 {
            for a in 0..units {
                let b = (a + 1) % units;
                edges.insert((a.min(b), a.max(b)));
            }
        }
        Self { units, edges }
    }

    pub fn star(units: usize) -> Self {
        let edges = (1..units).map(|b| (0, b)).collect();
        Self { units, edges }
    }

    /// Erdos-Renyi G(P, prob), regenerated with a bumped seed until connected.
    pub fn erdos_renyi(units: usize, prob: f64, seed: u64) -> Self {
        let mut attempt = 0u64;
        loop {
            let mut rng = DetRng::keyed(seed.wrapping_add(attempt), &[units as u64]);
            let mut edges = BTreeSet::new();
            for a in 0..units {
                for b in a + 1..units {
                    if rng.next_f64() < prob {
                        edges.insert((a, b));
                    }
                }
            }
            let topo = Self { units, edges };
            if topo.unreachable_node().is_none() {
                return topo;
            }
            attempt += 1;
        }
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Degree excluding the implicit self-loop.
    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == node || b == node)
            .count()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a != b && self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// First node unreachable from node 0, if any (BFS).
    pub fn unreachable_node(&self) -> Option<usize> {
        let mut seen = vec![false; self.units];
        let mut queue = vec![0usize];
        seen[0] = true;
        while let Some(v) = queue.pop() {
            for &(a, b) in &self.edges {
                let other = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    queue.push(other);
                }
            }
        }
        seen.iter().position(|&s| !s)
    }
}

/// Symmetric doubly-stochastic weight matrix with cached iota2.
#[derive(Clone, Debug)]
pub struct CombinationMatrix {
    weights: DMatrix<f64>,
    iota2: f64,
}

impl CombinationMatrix {
    /// Wrap raw weights without validation; iota2 is computed eagerly.
    pub fn from_weights(weights: DMatrix<f64>) -> Self {
        assert_eq!(weights.nrows(), weights.ncols(), "matrix must be square");
        let iota2 = second_eigenvalue_modulus(&weights);
        Self { weights, iota2 }
    }

    pub fn units(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, p: usize, m: usize) -> f64 {
        self.weights[(p, m)]
    }

    pub fn iota2(&self) -> f64 {
        self.iota2
    }

    /// Ordered (receiver, sender) pairs with nonzero weight, self-loops included.
    pub fn links(&self) -> Vec<(usize, usize)> {
        let p = self.units();
        let mut out = Vec::new();
        for r in 0..p {
            for s in 0..p {
                if self.weights[(r, s)] != 0.0 {
                    out.push((r, s));
                }
            }
        }
        out
    }
}

/// Metropolis-Hastings weights: a_pm = 1 / (1 + max(deg_p, deg_m)) on edges,
/// diagonal absorbs the remainder. Satisfies Assumption-1 style conditions
/// with a_pp > 0 on every connected topology.
pub fn build_metropolis(topology: &Topology) -> Result<CombinationMatrix, GraphError> {
    if let Some(node) = topology.unreachable_node() {
        return Err(GraphError::Disconnected(node));
    }
    let p = topology.units();
    let deg: Vec<usize> = (0..p).map(|v| topology.degree(v)).collect();
    let mut weights = DMatrix::zeros(p, p);
    for (a, b) in topology.edges() {
        let w = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        weights[(a, b)] = w;
        weights[(b, a)] = w;
    }
    for v in 0..p {
        let off: f64 = (0..p).filter(|&m| m != v).map(|m| weights[(v, m)]).sum();
        weights[(v, v)] = 1.0 - off;
    }
    Ok(CombinationMatrix::from_weights(weights))
}

const DENSE_EIG_LIMIT: usize = 64;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Spectral radius of A - (1/P) 11^T for symmetric doubly-stochastic A.
/// Dense symmetric eigendecomposition for P <= 64, deflated power iteration
/// beyond that.
pub fn second_eigenvalue_modulus(weights: &DMatrix<f64>) -> f64 {
    let p = weights.nrows();
    if p == 1 {
        return 0.0;
    }
    let deflated = weights - DMatrix::from_element(p, p, 1.0 / p as f64);
    if p <= DENSE_EIG_LIMIT {
        let sym = (&deflated + deflated.transpose()) * 0.5;
        sym.symmetric_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, &l| acc.max(l.abs()))
    } else {
        power_iteration(&deflated)
    }
}

fn power_iteration(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows();
    let mut v = DVector::from_fn(p, |i, _| ((i * 2654435761 + 1) % 97) as f64 / 97.0 - 0.5);
    // Deflate the all-ones direction.
    let ones = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let mut last = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        v -= &ones * ones.dot(&v);
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let mv = m * &v;
        let lambda = v.dot(&mv).abs();
        if (lambda - last).abs() <= POWER_TOL * lambda.max(1.0) {
            return lambda;
        }
        last = lambda;
        v = mv;
    }
    last
}

/// Per-invariant pass/fail with measured residuals.
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub max_asymmetry: f64,
    pub max_row_sum_deviation: f64,
    pub max_col_sum_deviation: f64,
    pub min_diagonal: f64,
    pub min_entry: f64,
    pub iota2: f64,
    pub symmetric: bool,
    pub doubly_stochastic: bool,
    pub entries_in_range: bool,
    pub mixing: bool,
    pub positive_diagonal: bool,
    pub pass: bool,
}

impl ValidationReport {
    pub fn lines(&self) -> Vec<String> {
        let f = |ok: bool| if ok { "pass" } else { "FAIL" };
        vec![
            format!("symmetry            {}  max |a_pm - a_mp| = {:e}", f(self.symmetric), self.max_asymmetry),
            format!(
                "doubly stochastic   {}  max row dev = {:e}, max col dev = {:e}",
                f(self.doubly_stochastic),
                self.max_row_sum_deviation,
                self.max_col_sum_deviation
            ),
            format!("entries in [0,1]    {}  min entry = {:e}", f(self.entries_in_range), self.min_entry),
            format!("iota2 < 1           {}  iota2 = {:.12}", f(self.mixing), self.iota2),
            format!("diagonal > 0        {}  min diagonal = {:.12}", f(self.positive_diagonal), self.min_diagonal),
            format!("overall             {}", f(self.pass)),
        ]
    }
}

pub const STOCHASTICITY_TOL: f64 = 1e-12;

/// Check the Assumption-1 conditions plus the a_pp > 0 requirement of
/// graph-homomorphic noise. Failures are report entries, never errors.
pub fn validate(matrix: &CombinationMatrix) -> ValidationReport {
    let a = matrix.weights();
    let p = matrix.units();
    let mut max_asym = 0.0_f64;
    let mut max_row = 0.0_f64;
    let mut max_col = 0.0_f64;
    let mut min_diag = f64::INFINITY;
    let mut min_entry = f64::INFINITY;
    let mut max_entry = f64::NEG_INFINITY;
    for i in 0..p {
        let row: f64 = (0..p).map(|j| a[(i, j)]).sum();
        let col: f64 = (0..p).map(|j| a[(j, i)]).sum();
        max_row = max_row.max((row - 1.0).abs());
        max_col = max_col.max((col - 1.0).abs());
        min_diag = min_diag.min(a[(i, i)]);
        for j in 0..p {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
            min_entry = min_entry.min(a[(i, j)]);
            max_entry = max_entry.max(a[(i, j)]);
        }
    }
    let symmetric = max_asym == 0.0;
    let doubly_stochastic = max_row <= STOCHASTICITY_TOL && max_col <= STOCHASTICITY_TOL;
    let entries_in_range = min_entry >= 0.0 && max_entry <= 1.0;
    let mixing = matrix.iota2() < 1.0;
    let positive_diagonal = min_diag > 0.0;
    let pass = symmetric && doubly_stochastic && entries_in_range && mixing;
    ValidationReport {
        max_asymmetry: max_asym,
        max_row_sum_deviation: max_row,
        max_col_sum_deviation: max_col,
        min_diagonal: min_diag,
        min_entry,
        iota2: matrix.iota2(),
        symmetric,
        doubly_stochastic,
        entries_in_range,
        mixing,
        positive_diagonal,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_node_is_identity() {
        let topo = Topology::new(1, []).unwrap();
        let a = build_metropolis(&topo).unwrap();
        assert_eq!(a.weight(0, 0), 1.0);
        assert_eq!(a.iota2(), 0.0);
    }

    #[test]
    fn complete_three_is_uniform() {
        let a = build_metropolis(&Topology::complete(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(a.weight(i, j), 1.0 / 3.0, epsilon = 1e-15);
            }
        }
        assert!(a.iota2() < 1e-10, "iota2 = {}", a.iota2());
    }

    #[test]
    fn ring_four_weights_and_iota2() {
        let a = build_metropolis(&Topology::ring(4)).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(a.weight(i, i), 1.0 / 3.0, epsilon = 1e-15);
            assert_abs_diff_eq!(a.weight(i, (i + 1) % 4), 1.0 / 3.0, epsilon = 1e-15);
            assert_eq!(a.weight(i, (i + 2) % 4), 0.0);
        }
        // Oracle: brute-force eigendecomposition of A - (1/4) 11^T.
        let deflated = a.weights() - DMatrix::from_element(4, 4, 0.25);
        let oracle = deflated
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0_f64, |m, &l| m.max(l.abs()));
        assert_abs_diff_eq!(a.iota2(), oracle, epsilon = 1e-12);
        // circulant(1/3, 1/3, 0, 1/3) eigenvalues: 1, 1/3, -1/3, 1/3.
        assert_abs_diff_eq!(a.iota2(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn disconnected_reports_unreachable_node() {
        let topo = Topology::new(4, [(0, 1), (2, 3)]).unwrap();
        match build_metropolis(&topo) {
            Err(GraphError::Disconnected(n)) => assert!(n == 2 || n == 3),
            other => panic!("expected Disconnected, got {other:?}"),
        }
    }

    #[test]
    fn identity_rejected_by_iota2() {
        let a = CombinationMatrix::from_weights(DMatrix::identity(3, 3));
        let report = validate(&a);
        assert!(!report.pass);
        assert!(report.symmetric && report.doubly_stochastic && report.entries_in_range);
        assert!(!report.mixing);
        assert_abs_diff_eq!(report.iota2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_projector_has_zero_iota2() {
        for p in [2usize, 5, 10] {
            let a = CombinationMatrix::from_weights(DMatrix::from_element(p, p, 1.0 / p as f64));
            assert!(a.iota2() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_matrix_fails_validation() {
        let a = CombinationMatrix::from_weights(DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.5, 0.5]));
        let report = validate(&a);
        assert!(!report.pass);
        assert!(!report.symmetric);
        assert!(!report.doubly_stochastic);
    }

    #[test]
    fn metropolis_ring_validates() {
        let a = build_metropolis(&Topology::ring(4)).unwrap();
        let report = validate(&a);
        assert!(report.pass);
        assert_abs_diff_eq!(report.min_diagonal, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn power_iteration_matches_dense() {
        // Force the power-iteration path by building a P > 64 ring.
        let topo = Topology::ring(80);
        let a = build_metropolis(&topo).unwrap();
        let deflated = a.weights() - DMatrix::from_element(80, 80, 1.0 / 80.0);
        let dense = deflated
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0_f64, |m, &l| m.max(l.abs()));
        assert_abs_diff_eq!(a.iota2(), dense, epsilon = 1e-8);
    }

    #[test]
    fn erdos_renyi_is_connected() {
        for seed in 0..5 {
            let topo = Topology::erdos_renyi(12, 0.2, seed);
            assert!(topo.unreachable_node().is_none());
        }
    }
}
