//! Bipartite variable/constraint graph with static node and edge features.
//!
//! Only features computable from `(c, A, b)` are produced; nothing here looks
//! at an LP relaxation or at any solution.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ip::IpInstance;

pub const VAR_FEATURES: [&str; 7] = [
    "type_binary",
    "type_integer",
    "type_implicit_integer",
    "type_continuous",
    "coef",
    "has_lb",
    "has_ub",
];
pub const CONS_FEATURES: [&str; 2] = ["obj_cos_sim", "bias"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BipartiteGraph {
    pub n_vars: usize,
    pub n_cons: usize,
    /// Row-major `n_vars x VAR_FEATURES.len()`.
    pub var_features: Vec<f64>,
    /// Row-major `n_cons x CONS_FEATURES.len()`.
    pub cons_features: Vec<f64>,
    /// `(constraint, variable, a_kj / ||a_k||)` for every nonzero of `A`.
    pub edges: Vec<(usize, usize, f64)>,
    pub var_feature_names: Vec<String>,
    pub cons_feature_names: Vec<String>,
}

impl BipartiteGraph {
    pub fn var_dim(&self) -> usize {
        self.var_feature_names.len()
    }

    pub fn cons_dim(&self) -> usize {
        self.cons_feature_names.len()
    }

    pub fn var_row(&self, j: usize) -> &[f64] {
        let d = self.var_dim();
        &self.var_features[j * d..(j + 1) * d]
    }

    pub fn cons_row(&self, k: usize) -> &[f64] {
        let d = self.cons_dim();
        &self.cons_features[k * d..(k + 1) * d]
    }
}

/// Featurizes the canonical (minimization) form of `inst`.
pub fn build_bipartite(inst: &IpInstance) -> Result<BipartiteGraph> {
    let canon = inst.canonicalize();
    let c = canon.c();
    let c_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut var_features = Vec::with_capacity(inst.n() * VAR_FEATURES.len());
    for &cj in c {
        let coef = if c_norm > 0.0 { cj / c_norm } else { 0.0 };
        // every variable is binary with both bounds present
        var_features.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, coef, 1.0, 1.0]);
    }

    let mut cons_features = Vec::with_capacity(inst.m() * CONS_FEATURES.len());
    let mut edges = Vec::with_capacity(inst.nnz());
    for (k, (row, &rhs)) in canon.rows().iter().zip(canon.b()).enumerate() {
        let norm = row.iter().map(|&(_, a)| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInstance(format!("constraint {k} has a zero row")));
        }
        let dot: f64 = row.iter().map(|&(j, a)| a * c[j]).sum();
        let cos = if c_norm > 0.0 { dot / (norm * c_norm) } else { 0.0 };
        cons_features.extend_from_slice(&[cos, rhs / norm]);
        edges.extend(row.iter().map(|&(j, a)| (k, j, a / norm)));
    }

    Ok(BipartiteGraph {
        n_vars: inst.n(),
        n_cons: inst.m(),
        var_features,
        cons_features,
        edges,
        var_feature_names: VAR_FEATURES.iter().map(|s| s.to_string()).collect(),
        cons_feature_names: CONS_FEATURES.iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ip::Sense;
    use approx::assert_abs_diff_eq;

    #[test]
    fn parallel_row_has_unit_cosine() {
        let inst = IpInstance::new(
            "p",
            vec![1.0, 2.0],
            vec![vec![(0, 3.0), (1, 6.0)]],
            vec![4.0],
            Sense::Minimize,
        )
        .unwrap();
        let g = build_bipartite(&inst).unwrap();
        assert_abs_diff_eq!(g.cons_row(0)[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_contract() {
        let inst = IpInstance::new(
            "s",
            vec![1.0, -1.0],
            vec![vec![(0, 1.0), (1, 2.0)]],
            vec![1.0],
            Sense::Maximize,
        )
        .unwrap();
        let g = build_bipartite(&inst).unwrap();
        assert_eq!(g.var_features.len(), 2 * g.var_dim());
        assert_eq!(g.cons_features.len(), g.cons_dim());
        assert_eq!(g.edges.len(), inst.nnz());
    }

    #[test]
    fn zero_objective_gives_zero_features() {
        let inst = IpInstance::new(
            "z",
            vec![0.0, 0.0],
            vec![vec![(0, 1.0)]],
            vec![1.0],
            Sense::Minimize,
        )
        .unwrap();
        let g = build_bipartite(&inst).unwrap();
        assert_eq!(g.var_row(0)[4], 0.0);
        assert_eq!(g.cons_row(0)[0], 0.0);
    }

    #[test]
    fn zero_row_is_an_error() {
        let inst = IpInstance::new(
            "z",
            vec![1.0],
            vec![vec![(0, 0.0)]],
            vec![1.0],
            Sense::Minimize,
        )
        .unwrap();
        assert!(build_bipartite(&inst).is_err());
    }
}
