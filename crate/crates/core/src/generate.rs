//! Seeded random generators for set cover, capacitated facility location,
//! combinatorial auction and independent set instances.
//!
//! The constructions follow the usual benchmark recipes (random coverage
//! matrices, Cornuejols facility layouts, bundle bids with complementarity,
//! Barabasi-Albert or Erdos-Renyi graphs). Facility location is kept in its
//! 0-1 assignment form so every variable stays binary.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ip::{IpInstance, Sense, SparseRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum GraphModel {
    /// Exactly `edges` distinct edges drawn uniformly.
    ErdosRenyi { edges: usize },
    /// Preferential attachment, each new node linking to `affinity` others.
    BarabasiAlbert { affinity: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    SetCover {
        rows: usize,
        cols: usize,
        density: f64,
    },
    CapFacility {
        customers: usize,
        facilities: usize,
        #[serde(default = "default_capacity_ratio")]
        ratio: f64,
    },
    CombAuction {
        items: usize,
        bids: usize,
    },
    IndepSet {
        nodes: usize,
        graph: GraphModel,
    },
}

fn default_capacity_ratio() -> f64 {
    5.0
}

impl Family {
    pub fn short_name(&self) -> &'static str {
        match self {
            Family::SetCover { .. } => "sc",
            Family::CapFacility { .. } => "cf",
            Family::CombAuction { .. } => "ca",
            Family::IndepSet { .. } => "is",
        }
    }

    /// Optimization direction of the family.
    pub fn sense(&self) -> Sense {
        match self {
            Family::SetCover { .. } | Family::CapFacility { .. } => Sense::Minimize,
            Family::CombAuction { .. } | Family::IndepSet { .. } => Sense::Maximize,
        }
    }

    /// Desk-scale set cover.
    pub fn desk_set_cover() -> Self {
        Family::SetCover {
            rows: 12,
            cols: 20,
            density: 0.15,
        }
    }

    /// Desk-scale independent set on a preferential-attachment graph.
    pub fn desk_indep_set(nodes: usize) -> Self {
        Family::IndepSet {
            nodes,
            graph: GraphModel::BarabasiAlbert { affinity: 2 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(flatten)]
    pub family: Family,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(family: Family, seed: u64) -> Self {
        GeneratorConfig { family, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{what} must be at least 1")))
            } else {
                Ok(())
            }
        };
        match &self.family {
            Family::SetCover {
                rows,
                cols,
                density,
            } => {
                positive("rows", *rows)?;
                positive("cols", *cols)?;
                if !(*density > 0.0 && *density <= 1.0) {
                    return Err(Error::Config(format!("density {density} not in (0, 1]")));
                }
            }
            Family::CapFacility {
                customers,
                facilities,
                ratio,
            } => {
                positive("customers", *customers)?;
                positive("facilities", *facilities)?;
                if !(*ratio > 0.0 && ratio.is_finite()) {
                    return Err(Error::Config(format!("capacity ratio {ratio} must be positive")));
                }
            }
            Family::CombAuction { items, bids } => {
                positive("items", *items)?;
                positive("bids", *bids)?;
            }
            Family::IndepSet { nodes, graph } => {
                positive("nodes", *nodes)?;
                match graph {
                    GraphModel::ErdosRenyi { edges } => {
                        let max = nodes * (nodes - 1) / 2;
                        if *edges > max {
                            return Err(Error::Infeasible(format!(
                                "{edges} edges exceed the {max} of a complete graph on {nodes} nodes"
                            )));
                        }
                    }
                    GraphModel::BarabasiAlbert { affinity } => {
                        if *affinity == 0 || affinity >= nodes {
                            return Err(Error::Infeasible(format!(
                                "affinity {affinity} must be in [1, {nodes})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds one instance; identical configs give identical instances.
pub fn generate(cfg: &GeneratorConfig) -> Result<IpInstance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let name = format!("{}-{}", cfg.family.short_name(), cfg.seed);
    match &cfg.family {
        Family::SetCover {
            rows,
            cols,
            density,
        } => set_cover(&mut rng, name, *rows, *cols, *density),
        Family::CapFacility {
            customers,
            facilities,
            ratio,
        } => cap_facility(&mut rng, name, *customers, *facilities, *ratio),
        Family::CombAuction { items, bids } => comb_auction(&mut rng, name, *items, *bids),
        Family::IndepSet { nodes, graph } => {
            let edges = match graph {
                GraphModel::ErdosRenyi { edges } => erdos_renyi(&mut rng, *nodes, *edges),
                GraphModel::BarabasiAlbert { affinity } => {
                    barabasi_albert(&mut rng, *nodes, *affinity)
                }
            };
            let mut inst = graph_to_is_instance(&edges, *nodes)?;
            inst.set_name(name);
            Ok(inst)
        }
    }
}

/// Mixes a base seed with an index into an independent per-instance seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train/valid/test sizes in the 8:1:1 proportion, at least one each when `total >= 3`.
pub fn split_counts(total: usize) -> (usize, usize, usize) {
    if total < 3 {
        return (total, 0, 0);
    }
    let valid = ((total as f64) * 0.1).round().max(1.0) as usize;
    let test = valid;
    (total - valid - test, valid, test)
}

/// Independent set formulation: one variable per node, `x_u + x_v <= 1` per
/// edge, maximize the number of chosen nodes.
pub fn graph_to_is_instance(edges: &[(usize, usize)], num_nodes: usize) -> Result<IpInstance> {
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(edges.len());
    for &(u, v) in edges {
        if u >= num_nodes || v >= num_nodes {
            return Err(Error::InvalidInstance(format!(
                "edge ({u}, {v}) has an endpoint outside 0..{num_nodes}"
            )));
        }
        if u == v {
            return Err(Error::InvalidInstance(format!("self-loop on node {u}")));
        }
        let key = (u.min(v), u.max(v));
        if !seen.insert(key) {
            return Err(Error::InvalidInstance(format!("duplicate edge ({u}, {v})")));
        }
        rows.push(vec![(key.0, 1.0), (key.1, 1.0)]);
    }
    let b = vec![1.0; rows.len()];
    IpInstance::new(
        format!("is-graph-{num_nodes}"),
        vec![1.0; num_nodes],
        rows,
        b,
        Sense::Maximize,
    )
}

fn erdos_renyi(rng: &mut ChaCha8Rng, nodes: usize, edges: usize) -> Vec<(usize, usize)> {
    let total = nodes * (nodes - 1) / 2;
    let mut picked: Vec<usize> = sample(rng, total, edges).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|idx| pair_from_index(idx, nodes))
        .collect()
}

/// Inverse of the row-major enumeration of pairs `u < v`.
fn pair_from_index(mut idx: usize, nodes: usize) -> (usize, usize) {
    let mut u = 0;
    loop {
        let span = nodes - u - 1;
        if idx < span {
            return (u, u + 1 + idx);
        }
        idx -= span;
        u += 1;
    }
}

fn barabasi_albert(rng: &mut ChaCha8Rng, nodes: usize, affinity: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut degree = vec![0usize; nodes];
    // seed clique on the first affinity + 1 nodes
    for u in 0..=affinity {
        for v in (u + 1)..=affinity {
            edges.push((u, v));
            degree[u] += 1;
            degree[v] += 1;
        }
    }
    for new in (affinity + 1)..nodes {
        let mut targets: Vec<usize> = Vec::with_capacity(affinity);
        while targets.len() < affinity {
            let total: usize = (0..new)
                .filter(|v| !targets.contains(v))
                .map(|v| degree[v])
                .sum();
            let mut r = rng.random_range(0..total);
            let pick = (0..new)
                .filter(|v| !targets.contains(v))
                .find(|&v| {
                    if r < degree[v] {
                        true
                    } else {
                        r -= degree[v];
                        false
                    }
                })
                .expect("degree mass is positive");
            targets.push(pick);
        }
        targets.sort_unstable();
        for &t in &targets {
            edges.push((t, new));
            degree[t] += 1;
            degree[new] += 1;
        }
    }
    edges
}

fn set_cover(
    rng: &mut ChaCha8Rng,
    name: String,
    rows: usize,
    cols: usize,
    density: f64,
) -> Result<IpInstance> {
    let target = ((rows * cols) as f64 * density).round() as usize;
    let target = target.clamp(rows.max(1), rows * cols);
    let mut member = vec![vec![false; cols]; rows];
    let mut nnz = 0;
    // every row coverable
    for row in member.iter_mut() {
        row[rng.random_range(0..cols)] = true;
        nnz += 1;
    }
    // every column used, while the budget allows
    let mut col_used = vec![false; cols];
    for row in &member {
        for (j, &m) in row.iter().enumerate() {
            col_used[j] |= m;
        }
    }
    for j in 0..cols {
        if nnz >= target {
            break;
        }
        if !col_used[j] {
            let r = rng.random_range(0..rows);
            member[r][j] = true;
            col_used[j] = true;
            nnz += 1;
        }
    }
    while nnz < target {
        let r = rng.random_range(0..rows);
        let j = rng.random_range(0..cols);
        if !member[r][j] {
            member[r][j] = true;
            nnz += 1;
        }
    }
    let c: Vec<f64> = (0..cols).map(|_| rng.random_range(1..=100) as f64).collect();
    let a: Vec<SparseRow> = member
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(j, _)| (j, -1.0))
                .collect()
        })
        .collect();
    IpInstance::new(name, c, a, vec![-1.0; rows], Sense::Minimize)
}

fn cap_facility(
    rng: &mut ChaCha8Rng,
    name: String,
    customers: usize,
    facilities: usize,
    ratio: f64,
) -> Result<IpInstance> {
    let cx: Vec<(f64, f64)> = (0..customers)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let fx: Vec<(f64, f64)> = (0..facilities)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let demand: Vec<f64> = (0..customers).map(|_| rng.random_range(5..=35) as f64).collect();
    let raw_cap: Vec<f64> = (0..facilities)
        .map(|_| rng.random_range(10..=160) as f64)
        .collect();
    let fixed: Vec<f64> = raw_cap
        .iter()
        .map(|s| {
            let base = rng.random_range(100..=110) as f64 * s.sqrt();
            (base + rng.random_range(0..=90) as f64).round()
        })
        .collect();
    let total_demand: f64 = demand.iter().sum();
    let total_cap: f64 = raw_cap.iter().sum();
    let max_demand = demand.iter().cloned().fold(0.0, f64::max);
    let capacity: Vec<f64> = raw_cap
        .iter()
        .map(|s| (s * ratio * total_demand / total_cap).round().max(max_demand))
        .collect();

    let assign = |c: usize, f: usize| c * facilities + f;
    let open = |f: usize| customers * facilities + f;
    let n = customers * facilities + facilities;

    let mut cost = vec![0.0; n];
    for c in 0..customers {
        for f in 0..facilities {
            let dist = ((cx[c].0 - fx[f].0).powi(2) + (cx[c].1 - fx[f].1).powi(2)).sqrt();
            cost[assign(c, f)] = (dist * 10.0 * demand[c] * 100.0).round() / 100.0;
        }
    }
    for f in 0..facilities {
        cost[open(f)] = fixed[f];
    }

    let mut rows: Vec<SparseRow> = Vec::new();
    let mut b = Vec::new();
    for c in 0..customers {
        rows.push((0..facilities).map(|f| (assign(c, f), -1.0)).collect());
        b.push(-1.0);
    }
    for f in 0..facilities {
        let mut row: SparseRow = (0..customers).map(|c| (assign(c, f), demand[c])).collect();
        row.push((open(f), -capacity[f]));
        rows.push(row);
        b.push(0.0);
    }
    rows.push((0..facilities).map(|f| (open(f), -capacity[f])).collect());
    b.push(-total_demand);
    for c in 0..customers {
        for f in 0..facilities {
            rows.push(vec![(assign(c, f), 1.0), (open(f), -1.0)]);
            b.push(0.0);
        }
    }
    IpInstance::new(name, cost, rows, b, Sense::Minimize)
}

fn comb_auction(
    rng: &mut ChaCha8Rng,
    name: String,
    items: usize,
    bids: usize,
) -> Result<IpInstance> {
    const ADD_ITEM_PROB: f64 = 0.65;
    const DEVIATION: f64 = 0.5;
    const ADDITIVITY: f64 = 0.2;

    let values: Vec<f64> = (0..items).map(|_| rng.random_range(1.0..100.0)).collect();
    let mut compat = vec![vec![0.0; items]; items];
    for i in 0..items {
        for k in (i + 1)..items {
            let w: f64 = rng.random();
            compat[i][k] = w;
            compat[k][i] = w;
        }
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut bundles: Vec<(Vec<usize>, f64)> = Vec::with_capacity(bids);
    let mut attempts = 0;
    while bundles.len() < bids {
        attempts += 1;
        if attempts > bids * 100 {
            return Err(Error::Infeasible(format!(
                "could not draw {bids} distinct bundles over {items} items"
            )));
        }
        let private: Vec<f64> = values
            .iter()
            .map(|v| v * (1.0 + DEVIATION * rng.random_range(-1.0..1.0)))
            .collect();
        let mut bundle = vec![weighted_pick(rng, &private, &[])];
        while bundle.len() < items && rng.random::<f64>() < ADD_ITEM_PROB {
            let weights: Vec<f64> = (0..items)
                .map(|i| bundle.iter().map(|&k| compat[i][k]).sum::<f64>() * private[i])
                .collect();
            bundle.push(weighted_pick(rng, &weights, &bundle));
        }
        bundle.sort_unstable();
        if !seen.insert(bundle.clone()) {
            continue;
        }
        let base: f64 = bundle.iter().map(|&i| private[i]).sum();
        let price = base + (bundle.len() as f64).powf(1.0 + ADDITIVITY);
        bundles.push((bundle, (price * 100.0).round() / 100.0));
    }

    let mut rows: Vec<SparseRow> = vec![Vec::new(); items];
    for (bid, (bundle, _)) in bundles.iter().enumerate() {
        for &i in bundle {
            rows[i].push((bid, 1.0));
        }
    }
    let rows: Vec<SparseRow> = rows.into_iter().filter(|r| !r.is_empty()).collect();
    let b = vec![1.0; rows.len()];
    let c = bundles.iter().map(|(_, p)| *p).collect();
    IpInstance::new(name, c, rows, b, Sense::Maximize)
}

/// Index drawn proportionally to `weights`, skipping `exclude`.
fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64], exclude: &[usize]) -> usize {
    let mass = |i: usize| {
        if exclude.contains(&i) {
            0.0
        } else {
            weights[i].max(0.0)
        }
    };
    let total: f64 = (0..weights.len()).map(mass).sum();
    if total <= 0.0 {
        return (0..weights.len())
            .find(|i| !exclude.contains(i))
            .expect("at least one item left");
    }
    let mut r = rng.random::<f64>() * total;
    let mut last = 0;
    for i in 0..weights.len() {
        let w = mass(i);
        if w > 0.0 {
            last = i;
            if r < w {
                return i;
            }
            r -= w;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ip::Solution;

    #[test]
    fn single_edge_instance() {
        let inst = generate(&GeneratorConfig::new(
            Family::IndepSet {
                nodes: 2,
                graph: GraphModel::ErdosRenyi { edges: 1 },
            },
            7,
        ))
        .unwrap();
        assert_eq!(inst.n(), 2);
        assert_eq!(inst.rows(), &[vec![(0, 1.0), (1, 1.0)]]);
        assert_eq!(inst.b(), &[1.0]);
        assert_eq!(inst.c(), &[1.0, 1.0]);
        assert_eq!(inst.sense(), Sense::Maximize);
    }

    #[test]
    fn single_row_set_cover() {
        let inst = generate(&GeneratorConfig::new(
            Family::SetCover {
                rows: 1,
                cols: 3,
                density: 1.0,
            },
            1,
        ))
        .unwrap();
        assert_eq!(inst.m(), 1);
        assert_eq!(inst.rows()[0], vec![(0, -1.0), (1, -1.0), (2, -1.0)]);
        assert_eq!(inst.b(), &[-1.0]);
        assert_eq!(inst.sense(), Sense::Minimize);
        assert!(inst.c().iter().all(|&c| (1.0..=100.0).contains(&c)));
    }

    #[test]
    fn erdos_renyi_exact_counts() {
        let inst = generate(&GeneratorConfig::new(
            Family::IndepSet {
                nodes: 15,
                graph: GraphModel::ErdosRenyi { edges: 22 },
            },
            3,
        ))
        .unwrap();
        assert_eq!((inst.n(), inst.m()), (15, 22));
    }

    #[test]
    fn too_many_edges_is_an_error() {
        let cfg = GeneratorConfig::new(
            Family::IndepSet {
                nodes: 4,
                graph: GraphModel::ErdosRenyi { edges: 7 },
            },
            0,
        );
        assert!(matches!(generate(&cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn barabasi_albert_edge_count() {
        let (nodes, a) = (20, 2);
        let inst = generate(&GeneratorConfig::new(
            Family::IndepSet {
                nodes,
                graph: GraphModel::BarabasiAlbert { affinity: a },
            },
            11,
        ))
        .unwrap();
        assert_eq!(inst.m(), a * (a + 1) / 2 + (nodes - a - 1) * a);
    }

    #[test]
    fn pair_index_enumerates_all_pairs() {
        let nodes = 6;
        let pairs: Vec<_> = (0..nodes * (nodes - 1) / 2)
            .map(|i| pair_from_index(i, nodes))
            .collect();
        let mut expected = Vec::new();
        for u in 0..nodes {
            for v in (u + 1)..nodes {
                expected.push((u, v));
            }
        }
        assert_eq!(pairs, expected);
    }

    #[test]
    fn graph_errors() {
        assert!(graph_to_is_instance(&[(0, 0)], 2).is_err());
        assert!(graph_to_is_instance(&[(0, 1), (1, 0)], 2).is_err());
        assert!(graph_to_is_instance(&[(0, 5)], 2).is_err());
    }

    #[test]
    fn empty_graph_all_ones_feasible() {
        let inst = graph_to_is_instance(&[], 3).unwrap();
        let ones = Solution::ones(3);
        assert!(inst.is_feasible(&ones).unwrap());
        assert_eq!(inst.objective_value(&ones).unwrap(), 3.0);
    }

    #[test]
    fn families_are_feasible_and_deterministic() {
        let families = [
            Family::desk_set_cover(),
            Family::desk_indep_set(18),
            Family::CombAuction { items: 8, bids: 15 },
            Family::CapFacility {
                customers: 4,
                facilities: 3,
                ratio: 5.0,
            },
        ];
        for fam in families {
            for seed in 0..5 {
                let cfg = GeneratorConfig::new(fam.clone(), seed);
                let a = generate(&cfg).unwrap();
                let b = generate(&cfg).unwrap();
                assert_eq!(a.to_text(), b.to_text());
                assert_eq!(a.sense(), fam.sense());
                match fam {
                    Family::SetCover { .. } => {
                        assert!(a.is_feasible(&Solution::ones(a.n())).unwrap())
                    }
                    Family::IndepSet { .. } | Family::CombAuction { .. } => {
                        assert!(a.is_feasible(&Solution::zeros(a.n())).unwrap())
                    }
                    Family::CapFacility { .. } => {}
                }
            }
        }
    }

    #[test]
    fn cap_facility_shape() {
        let inst = generate(&GeneratorConfig::new(
            Family::CapFacility {
                customers: 5,
                facilities: 3,
                ratio: 5.0,
            },
            2,
        ))
        .unwrap();
        assert_eq!(inst.n(), 5 * 3 + 3);
        assert_eq!(inst.m(), 5 + 3 + 1 + 15);
    }

    #[test]
    fn split_counts_ratio() {
        assert_eq!(split_counts(1000), (800, 100, 100));
        assert_eq!(split_counts(50), (40, 5, 5));
        assert_eq!(split_counts(2), (2, 0, 0));
    }
}
