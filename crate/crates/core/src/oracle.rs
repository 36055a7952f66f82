//! Exact depth-first branch-and-bound for small 0-1 programs.
//!
//! The search keeps the `pool_cap` best distinct feasible solutions rather
//! than a single incumbent, so a node is only pruned when its bound is worse
//! than the worst solution still kept. Bounds need no LP: the fixed objective
//! plus every negative cost among the free variables, raised by the cheapest
//! repair of any row that the fixed part already violates.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ip::{format_bits, parse_bits, IpInstance, PartialAssignment, Sense, Solution, FEAS_TOL};

pub const POOL_HEADER: &str = "ipdiff-pool v1";
pub const DEFAULT_POOL_CAP: usize = 50;
pub const LARGE_POOL_CAP: usize = 500;
pub const DEFAULT_NODE_LIMIT: u64 = 20_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    LimitReached,
    Infeasible,
}

impl SolveStatus {
    fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::LimitReached => "limit_reached",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub solution: Solution,
    /// Objective in the instance's authored sense.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolvePool {
    /// Best first; equal objectives are ordered lexicographically by bits.
    pub solutions: Vec<PoolEntry>,
    pub status: SolveStatus,
    pub explored_nodes: u64,
}

impl SolvePool {
    pub fn best(&self) -> Option<&PoolEntry> {
        self.solutions.first()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.solutions.len()
    }
}

struct Search<'a> {
    inst: &'a IpInstance,
    /// canonical (minimization) costs
    cost: Vec<f64>,
    order: Vec<usize>,
    columns: Vec<Vec<(usize, f64)>>,
    value: Vec<Option<bool>>,
    fixed_act: Vec<f64>,
    free_neg: Vec<f64>,
    fixed_obj: f64,
    free_neg_cost: f64,
    pool: Vec<(f64, Solution)>,
    pool_cap: usize,
    nodes: u64,
    node_limit: u64,
    hit_limit: bool,
}

impl<'a> Search<'a> {
    fn new(inst: &'a IpInstance, pool_cap: usize, node_limit: u64) -> Self {
        let canon = inst.canonicalize();
        let cost = canon.c().to_vec();
        let n = inst.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            cost[b]
                .abs()
                .total_cmp(&cost[a].abs())
                .then(a.cmp(&b))
        });
        let mut columns = vec![Vec::new(); n];
        for (k, row) in inst.rows().iter().enumerate() {
            for &(j, a) in row {
                columns[j].push((k, a));
            }
        }
        let free_neg = inst
            .rows()
            .iter()
            .map(|row| row.iter().map(|&(_, a)| a.min(0.0)).sum())
            .collect();
        let free_neg_cost = cost.iter().map(|c| c.min(0.0)).sum();
        Search {
            inst,
            cost,
            order,
            columns,
            value: vec![None; n],
            fixed_act: vec![0.0; inst.m()],
            free_neg,
            fixed_obj: 0.0,
            free_neg_cost,
            pool: Vec::new(),
            pool_cap,
            nodes: 0,
            node_limit,
            hit_limit: false,
        }
    }

    fn row_infeasible(&self) -> bool {
        self.fixed_act
            .iter()
            .zip(&self.free_neg)
            .zip(self.inst.b())
            .any(|((f, neg), b)| f + neg - b > FEAS_TOL)
    }

    fn bound(&self) -> f64 {
        let mut repair: f64 = 0.0;
        for (k, row) in self.inst.rows().iter().enumerate() {
            if self.fixed_act[k] - self.inst.b()[k] <= FEAS_TOL {
                continue;
            }
            // some free variable with a negative coefficient must switch on
            let cheapest = row
                .iter()
                .filter(|&&(j, a)| a < 0.0 && self.value[j].is_none())
                .map(|&(j, _)| self.cost[j].max(0.0))
                .fold(f64::INFINITY, f64::min);
            repair = repair.max(cheapest);
        }
        self.fixed_obj + self.free_neg_cost + repair
    }

    fn worst_kept(&self) -> Option<f64> {
        (self.pool.len() >= self.pool_cap).then(|| self.pool.last().unwrap().0)
    }

    fn assign(&mut self, j: usize, v: bool) {
        self.value[j] = Some(v);
        self.free_neg_cost -= self.cost[j].min(0.0);
        if v {
            self.fixed_obj += self.cost[j];
        }
        for &(k, a) in &self.columns[j] {
            self.free_neg[k] -= a.min(0.0);
            if v {
                self.fixed_act[k] += a;
            }
        }
    }

    fn unassign(&mut self, j: usize, v: bool) {
        self.value[j] = None;
        self.free_neg_cost += self.cost[j].min(0.0);
        if v {
            self.fixed_obj -= self.cost[j];
        }
        for &(k, a) in &self.columns[j] {
            self.free_neg[k] += a.min(0.0);
            if v {
                self.fixed_act[k] -= a;
            }
        }
    }

    fn dfs(&mut self, depth: usize) {
        if self.hit_limit {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.node_limit {
            self.hit_limit = true;
            return;
        }
        if self.row_infeasible() {
            return;
        }
        if let Some(worst) = self.worst_kept() {
            if self.bound() > worst + 1e-9 * (1.0 + worst.abs()) {
                return;
            }
        }
        if depth == self.order.len() {
            self.record_leaf();
            return;
        }
        let j = self.order[depth];
        let first = self.cost[j] < 0.0;
        for v in [first, !first] {
            self.assign(j, v);
            self.dfs(depth + 1);
            self.unassign(j, v);
        }
    }

    fn record_leaf(&mut self) {
        let x = Solution::new(self.value.iter().map(|v| v.unwrap()).collect());
        if !self.inst.is_feasible(&x).unwrap_or(false) {
            return;
        }
        let obj: f64 = self
            .cost
            .iter()
            .zip(x.bits())
            .filter(|(_, &b)| b)
            .map(|(c, _)| *c)
            .sum();
        let key = |(o, s): &(f64, Solution)| (*o, s.clone());
        let cmp = |a: &(f64, Solution), b: &(f64, Solution)| -> Ordering {
            a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
        };
        let entry = (obj, x);
        if self.pool.len() >= self.pool_cap {
            let worst = key(self.pool.last().unwrap());
            if cmp(&entry, &worst) != Ordering::Less {
                return;
            }
        }
        let pos = self
            .pool
            .binary_search_by(|probe| cmp(probe, &entry))
            .unwrap_or_else(|p| p);
        self.pool.insert(pos, entry);
        self.pool.truncate(self.pool_cap);
    }
}

/// Enumerates the `pool_cap` best distinct feasible solutions by
/// branch-and-bound, stopping after `node_limit` search nodes.
pub fn solve_exact(inst: &IpInstance, pool_cap: usize, node_limit: u64) -> SolvePool {
    let mut search = Search::new(inst, pool_cap.max(1), node_limit);
    search.dfs(0);
    let status = if search.hit_limit {
        SolveStatus::LimitReached
    } else if search.pool.is_empty() {
        SolveStatus::Infeasible
    } else {
        SolveStatus::Optimal
    };
    let flip = inst.sense() == Sense::Maximize;
    let mut solutions: Vec<PoolEntry> = search
        .pool
        .into_iter()
        .map(|(obj, solution)| PoolEntry {
            solution,
            objective: if flip { -obj } else { obj },
        })
        .collect();
    solutions.truncate(pool_cap);
    SolvePool {
        solutions,
        status,
        explored_nodes: search.nodes,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Completion {
    Found {
        solution: Solution,
        objective: f64,
        optimal: bool,
    },
    /// The fixed values conflict with the constraints.
    Infeasible,
    /// The node limit ran out before any completion was found.
    Exhausted,
}

impl Completion {
    pub fn solution(&self) -> Option<&Solution> {
        match self {
            Completion::Found { solution, .. } => Some(solution),
            _ => None,
        }
    }
}

/// Fixes the masked variables, solves the residual program exactly and
/// returns the best completion.
pub fn complete_solution(
    inst: &IpInstance,
    partial: &PartialAssignment,
    node_limit: u64,
) -> Result<Completion> {
    if partial.len() != inst.n() {
        return Err(Error::Dimension {
            expected: inst.n(),
            got: partial.len(),
        });
    }
    let free: Vec<usize> = (0..inst.n()).filter(|&j| partial.fixed(j).is_none()).collect();
    let mut local = vec![usize::MAX; inst.n()];
    for (i, &j) in free.iter().enumerate() {
        local[j] = i;
    }

    let mut rows = Vec::new();
    let mut b = Vec::new();
    for (row, rhs) in inst.rows().iter().zip(inst.b()) {
        let mut fixed_act = 0.0;
        let mut residual = Vec::new();
        for &(j, a) in row {
            match partial.fixed(j) {
                Some(true) => fixed_act += a,
                Some(false) => {}
                None => residual.push((local[j], a)),
            }
        }
        if residual.is_empty() {
            if fixed_act - rhs > FEAS_TOL {
                return Ok(Completion::Infeasible);
            }
        } else {
            rows.push(residual);
            b.push(rhs - fixed_act);
        }
    }

    let assemble = |sub: Option<&Solution>| -> Solution {
        let mut x = Solution::zeros(inst.n());
        for j in 0..inst.n() {
            let v = match partial.fixed(j) {
                Some(v) => v,
                None => sub.expect("free variable needs a residual value").get(local[j]),
            };
            x.set(j, v);
        }
        x
    };

    if free.is_empty() {
        let x = assemble(None);
        if !inst.is_feasible(&x)? {
            return Ok(Completion::Infeasible);
        }
        let objective = inst.objective_value(&x)?;
        return Ok(Completion::Found {
            solution: x,
            objective,
            optimal: true,
        });
    }

    let c = free.iter().map(|&j| inst.c()[j]).collect();
    let residual = IpInstance::new(format!("{}-residual", inst.name()), c, rows, b, inst.sense())?;
    let pool = solve_exact(&residual, 1, node_limit);
    match (pool.best(), pool.status) {
        (Some(best), status) => {
            let x = assemble(Some(&best.solution));
            let objective = inst.objective_value(&x)?;
            Ok(Completion::Found {
                solution: x,
                objective,
                optimal: status == SolveStatus::Optimal,
            })
        }
        (None, SolveStatus::Infeasible) => Ok(Completion::Infeasible),
        (None, _) => Ok(Completion::Exhausted),
    }
}

pub fn pool_to_text(pool: &SolvePool) -> String {
    let mut out = String::new();
    writeln!(out, "{POOL_HEADER}").unwrap();
    writeln!(
        out,
        "# status={} explored={}",
        pool.status.as_str(),
        pool.explored_nodes
    )
    .unwrap();
    for e in &pool.solutions {
        writeln!(out, "obj={} x={}", e.objective, format_bits(&e.solution)).unwrap();
    }
    out
}

pub fn pool_from_text(text: &str) -> Result<SolvePool> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h == POOL_HEADER => {}
        _ => return Err(Error::parse(1, format!("expected header `{POOL_HEADER}`"))),
    }
    let mut status = SolveStatus::Optimal;
    let mut explored = 0;
    let mut solutions = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for tok in meta.split_whitespace() {
                match tok.split_once('=') {
                    Some(("status", "optimal")) => status = SolveStatus::Optimal,
                    Some(("status", "limit_reached")) => status = SolveStatus::LimitReached,
                    Some(("status", "infeasible")) => status = SolveStatus::Infeasible,
                    Some(("explored", v)) => explored = v.parse().unwrap_or(0),
                    _ => {}
                }
            }
            continue;
        }
        let mut obj = None;
        let mut bits = None;
        for tok in line.split_whitespace() {
            if let Some(v) = tok.strip_prefix("obj=") {
                obj = Some(
                    v.parse::<f64>()
                        .map_err(|_| Error::parse(ln, format!("bad objective `{v}`")))?,
                );
            } else if let Some(v) = tok.strip_prefix("x=") {
                bits = Some(parse_bits(v).ok_or_else(|| Error::parse(ln, "bad bit string"))?);
            } else {
                return Err(Error::parse(ln, format!("unexpected token `{tok}`")));
            }
        }
        match (obj, bits) {
            (Some(objective), Some(solution)) => solutions.push(PoolEntry {
                solution,
                objective,
            }),
            _ => return Err(Error::parse(ln, "expected `obj=<real> x=<bits>`")),
        }
    }
    Ok(SolvePool {
        solutions,
        status,
        explored_nodes: explored,
    })
}

pub fn write_pool(pool: &SolvePool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pool_to_text(pool)).map_err(|e| Error::io(path, e))
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<SolvePool> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    pool_from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::graph_to_is_instance;

    fn triangle() -> IpInstance {
        graph_to_is_instance(&[(0, 1), (1, 2), (0, 2)], 3).unwrap()
    }

    #[test]
    fn triangle_pool() {
        let pool = solve_exact(&triangle(), 4, 1_000);
        assert_eq!(pool.status, SolveStatus::Optimal);
        let objs: Vec<f64> = pool.solutions.iter().map(|e| e.objective).collect();
        assert_eq!(objs, vec![1.0, 1.0, 1.0, 0.0]);
        let bits: Vec<String> = pool.solutions.iter().map(|e| e.solution.to_string()).collect();
        // ties broken lexicographically
        assert_eq!(bits, vec!["001", "010", "100", "000"]);
    }

    #[test]
    fn single_cover_row() {
        let inst = IpInstance::new(
            "sc",
            vec![1.0, 2.0, 3.0],
            vec![vec![(0, -1.0), (1, -1.0), (2, -1.0)]],
            vec![-1.0],
            Sense::Minimize,
        )
        .unwrap();
        let pool = solve_exact(&inst, 5, 1_000);
        let best = pool.best().unwrap();
        assert_eq!(best.objective, 1.0);
        assert_eq!(best.solution.bits(), &[true, false, false]);
        assert!(pool.solutions.windows(2).all(|w| w[0].objective <= w[1].objective));
    }

    #[test]
    fn infeasible_instance() {
        let inst = IpInstance::new(
            "inf",
            vec![1.0],
            vec![vec![(0, 1.0)]],
            vec![-1.0],
            Sense::Minimize,
        )
        .unwrap();
        let pool = solve_exact(&inst, 3, 100);
        assert_eq!(pool.status, SolveStatus::Infeasible);
        assert!(pool.is_empty());
    }

    #[test]
    fn node_limit_reports_limit() {
        let inst = graph_to_is_instance(&[], 12).unwrap();
        let pool = solve_exact(&inst, 10_000, 50);
        assert_eq!(pool.status, SolveStatus::LimitReached);
        assert!(pool.explored_nodes <= 51);
    }

    #[test]
    fn completion_of_fixed_solution() {
        let inst = triangle();
        let x = Solution::new(vec![false, true, false]);
        let out = complete_solution(&inst, &PartialAssignment::from_solution(&x), 100).unwrap();
        assert_eq!(out.solution(), Some(&x));
    }

    #[test]
    fn conflicting_fixes_are_infeasible() {
        let inst = triangle();
        let mut p = PartialAssignment::empty(3);
        p.fix(0, true);
        p.fix(1, true);
        assert_eq!(complete_solution(&inst, &p, 100).unwrap(), Completion::Infeasible);
    }

    #[test]
    fn completion_respects_fixed_values() {
        let inst = triangle();
        let mut p = PartialAssignment::empty(3);
        p.fix(0, false);
        p.fix(2, false);
        let out = complete_solution(&inst, &p, 100).unwrap();
        assert_eq!(out.solution().unwrap().bits(), &[false, true, false]);
    }

    #[test]
    fn pool_text_round_trip() {
        let pool = solve_exact(&triangle(), 4, 1_000);
        let back = pool_from_text(&pool_to_text(&pool)).unwrap();
        assert_eq!(back, pool);
    }
}
