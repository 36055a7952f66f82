//! Canonical 0-1 integer program data model.
//!
//! Every instance is stored as `min/max c·x  s.t.  A x <= b,  x in {0,1}^n`
//! with `A` held as sparse rows. Imports convert `>=` and `=` rows into this
//! form before an [`IpInstance`] is built.

mod io;
mod mps;

pub use io::{
    format_bits, parse_bits, read_instance, read_solution, write_instance, write_solution,
    INSTANCE_HEADER, SOLUTION_HEADER,
};
pub use mps::{parse_mps, read_mps};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row excess at or below this value counts as satisfied.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    pub fn as_str(self) -> &'static str {
        match self {
            Sense::Minimize => "min",
            Sense::Maximize => "max",
        }
    }

    /// True when `a` is strictly better than `b` under this sense.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Sense::Minimize => a < b,
            Sense::Maximize => a > b,
        }
    }
}

impl fmt::Display for Sense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sparse constraint row `a_k`, as `(variable, coefficient)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

/// A 0-1 program in `A x <= b` form.
#[derive(Clone, Debug, PartialEq)]
pub struct IpInstance {
    name: String,
    c: Vec<f64>,
    rows: Vec<SparseRow>,
    b: Vec<f64>,
    sense: Sense,
}

impl IpInstance {
    pub fn new(
        name: impl Into<String>,
        c: Vec<f64>,
        rows: Vec<SparseRow>,
        b: Vec<f64>,
        sense: Sense,
    ) -> Result<Self> {
        let inst = IpInstance {
            name: name.into(),
            c,
            rows,
            b,
            sense,
        };
        inst.validate()?;
        Ok(inst)
    }

    fn validate(&self) -> Result<()> {
        let n = self.c.len();
        if n == 0 {
            return Err(Error::InvalidInstance("instance needs at least one variable".into()));
        }
        if self.name.contains('\n') {
            return Err(Error::InvalidInstance("name may not contain newlines".into()));
        }
        if let Some(j) = self.c.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInstance(format!("objective coefficient {j} is not finite")));
        }
        if self.rows.len() != self.b.len() {
            return Err(Error::InvalidInstance(format!(
                "{} rows but {} right-hand sides",
                self.rows.len(),
                self.b.len()
            )));
        }
        for (k, (row, rhs)) in self.rows.iter().zip(&self.b).enumerate() {
            if row.is_empty() {
                return Err(Error::InvalidInstance(format!("row {k} has no entries")));
            }
            if !rhs.is_finite() {
                return Err(Error::InvalidInstance(format!("rhs of row {k} is not finite")));
            }
            for &(j, a) in row {
                if j >= n {
                    return Err(Error::InvalidInstance(format!(
                        "row {k} references variable {j} but n = {n}"
                    )));
                }
                if !a.is_finite() {
                    return Err(Error::InvalidInstance(format!(
                        "row {k} coefficient for variable {j} is not finite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Equivalent minimization instance. Maximization objectives are negated;
    /// constraints are untouched.
    pub fn canonicalize(&self) -> IpInstance {
        match self.sense {
            Sense::Minimize => self.clone(),
            Sense::Maximize => IpInstance {
                name: self.name.clone(),
                c: self.c.iter().map(|v| -v).collect(),
                rows: self.rows.clone(),
                b: self.b.clone(),
                sense: Sense::Minimize,
            },
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                got: len,
            });
        }
        Ok(())
    }

    /// `a_k · x` for every row.
    pub fn row_activities(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, a)| a * x[j]).sum())
            .collect()
    }

    /// `c · x` in the authored sense.
    pub fn objective_value(&self, x: &Solution) -> Result<f64> {
        self.check_len(x.len())?;
        Ok(self
            .c
            .iter()
            .zip(x.bits())
            .filter(|(_, &bit)| bit)
            .map(|(c, _)| *c)
            .sum())
    }

    /// `sum_k max(a_k·x - b_k, 0)`.
    pub fn violation_sum(&self, x: &Solution) -> Result<f64> {
        self.check_len(x.len())?;
        Ok(self.violation_sum_soft(&x.to_f64()))
    }

    /// Violation of a fractional point; used by the training penalty and guidance checks.
    pub fn violation_sum_soft(&self, x: &[f64]) -> f64 {
        self.row_activities(x)
            .into_iter()
            .zip(&self.b)
            .map(|(act, rhs)| {
                let excess = act - rhs;
                if excess > FEAS_TOL {
                    excess
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// `violation_sum / m`, zero when there are no constraints.
    pub fn violation_mean(&self, x: &Solution) -> Result<f64> {
        let total = self.violation_sum(x)?;
        if self.m() == 0 {
            return Ok(0.0);
        }
        Ok(total / self.m() as f64)
    }

    pub fn is_feasible(&self, x: &Solution) -> Result<bool> {
        Ok(self.violation_sum(x)? == 0.0)
    }

    /// Objective, feasibility and violation of `x`, plus the gap against
    /// `reference` (an objective value in the authored sense) when given.
    pub fn evaluate(&self, x: &Solution, reference: Option<f64>) -> Result<EvalReport> {
        let objective = self.objective_value(x)?;
        let violation_sum = self.violation_sum(x)?;
        Ok(EvalReport {
            objective,
            feasible: violation_sum == 0.0,
            violation_sum,
            gap: reference.map(|r| gap(objective, r)),
            mixed_sign: reference.is_some_and(|r| objective * r < 0.0),
        })
    }
}

/// `|a - b| / max(|a|, |b|)`; defined as 0 when both are zero.
pub fn gap(obj_x: f64, obj_ref: f64) -> f64 {
    let denom = obj_x.abs().max(obj_ref.abs());
    if denom == 0.0 {
        return 0.0;
    }
    (obj_x - obj_ref).abs() / denom
}

/// A complete 0-1 assignment.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Solution {
    bits: Vec<bool>,
}

impl Solution {
    pub fn new(bits: Vec<bool>) -> Self {
        Solution { bits }
    }

    pub fn zeros(n: usize) -> Self {
        Solution {
            bits: vec![false; n],
        }
    }

    pub fn ones(n: usize) -> Self {
        Solution { bits: vec![true; n] }
    }

    /// Builds from 0/1 integers; anything else is rejected.
    pub fn from_u8(values: &[u8]) -> Result<Self> {
        values
            .iter()
            .enumerate()
            .map(|(j, &v)| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidInstance(format!(
                    "solution entry {j} is {other}, expected 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Solution::new)
    }

    /// Rounds a soft vector at 0.5; exact ties round to 0.
    pub fn round(soft: &[f64]) -> Self {
        Solution {
            bits: soft.iter().map(|&v| v > 0.5).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn set(&mut self, j: usize, value: bool) {
        self.bits[j] = value;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for Solution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_bits(self))
    }
}

/// Fixed subset of variables; `values[j]` is only meaningful where `mask[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialAssignment {
    mask: Vec<bool>,
    values: Vec<bool>,
}

impl PartialAssignment {
    pub fn new(mask: Vec<bool>, values: Vec<bool>) -> Result<Self> {
        if mask.len() != values.len() {
            return Err(Error::Dimension {
                expected: mask.len(),
                got: values.len(),
            });
        }
        Ok(PartialAssignment { mask, values })
    }

    pub fn empty(n: usize) -> Self {
        PartialAssignment {
            mask: vec![false; n],
            values: vec![false; n],
        }
    }

    /// Fixes every variable to the value it has in `x`.
    pub fn from_solution(x: &Solution) -> Self {
        PartialAssignment {
            mask: vec![true; x.len()],
            values: x.bits().to_vec(),
        }
    }

    /// Fixes the listed variables to their values in `x`.
    pub fn from_subset(x: &Solution, fixed: &[usize]) -> Self {
        let mut p = PartialAssignment::empty(x.len());
        for &j in fixed {
            p.fix(j, x.get(j));
        }
        p
    }

    pub fn fix(&mut self, j: usize, value: bool) {
        self.mask[j] = true;
        self.values[j] = value;
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn fixed(&self, j: usize) -> Option<bool> {
        self.mask[j].then(|| self.values[j])
    }

    pub fn fixed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl Serialize for Solution {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&format_bits(self))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub objective: f64,
    pub feasible: bool,
    pub violation_sum: f64,
    pub gap: Option<f64>,
    /// The reference and `objective` have opposite signs, so `gap` may exceed 1.
    pub mixed_sign: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn edge() -> IpInstance {
        IpInstance::new(
            "edge",
            vec![1.0, 1.0],
            vec![vec![(0, 1.0), (1, 1.0)]],
            vec![1.0],
            Sense::Maximize,
        )
        .unwrap()
    }

    #[test]
    fn canonicalize_min_is_identity() {
        let inst = edge().canonicalize();
        assert_eq!(inst.canonicalize(), inst);
    }

    #[test]
    fn canonicalize_flips_max() {
        let inst = IpInstance::new(
            "m",
            vec![1.0, 2.0],
            vec![vec![(0, 1.0)]],
            vec![1.0],
            Sense::Maximize,
        )
        .unwrap();
        let canon = inst.canonicalize();
        assert_eq!(canon.c(), &[-1.0, -2.0]);
        assert_eq!(canon.sense(), Sense::Minimize);
        assert_eq!(canon.rows(), inst.rows());
        assert_eq!(canon.b(), inst.b());
    }

    #[test]
    fn objective_examples() {
        let inst = IpInstance::new("o", vec![3.0, -1.0], vec![], vec![], Sense::Minimize).unwrap();
        assert_eq!(inst.objective_value(&Solution::zeros(2)).unwrap(), 0.0);
        assert_eq!(inst.objective_value(&Solution::ones(2)).unwrap(), 2.0);
        assert!(matches!(
            inst.objective_value(&Solution::ones(3)),
            Err(Error::Dimension { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn violation_examples() {
        let inst = edge();
        assert_eq!(inst.violation_sum(&Solution::ones(2)).unwrap(), 1.0);
        assert_eq!(inst.violation_sum(&Solution::zeros(2)).unwrap(), 0.0);
        assert!(!inst.is_feasible(&Solution::ones(2)).unwrap());
        assert!(inst.is_feasible(&Solution::zeros(2)).unwrap());
        assert!(inst.violation_sum(&Solution::zeros(3)).is_err());
    }

    #[test]
    fn violation_mean_examples() {
        let none = IpInstance::new("e", vec![1.0], vec![], vec![], Sense::Minimize).unwrap();
        assert_eq!(none.violation_mean(&Solution::ones(1)).unwrap(), 0.0);

        // one row violated by 2, three satisfied
        let inst = IpInstance::new(
            "v",
            vec![1.0, 1.0, 1.0],
            vec![
                vec![(0, 1.0), (1, 1.0), (2, 1.0)],
                vec![(0, 1.0)],
                vec![(1, 1.0)],
                vec![(2, -1.0)],
            ],
            vec![1.0, 1.0, 1.0, 0.0],
            Sense::Minimize,
        )
        .unwrap();
        assert_abs_diff_eq!(inst.violation_mean(&Solution::ones(3)).unwrap(), 0.5);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap(168.3, 168.3), 0.0);
        assert_abs_diff_eq!(gap(522.4, 168.3), 0.678, epsilon = 1e-3);
        assert_abs_diff_eq!(gap(30052.0, 36102.6), 0.168, epsilon = 1e-3);
        assert_eq!(gap(0.0, 0.0), 0.0);
        // mixed signs are computed by the same formula
        assert_abs_diff_eq!(gap(-1.0, 1.0), 2.0);
    }

    #[test]
    fn evaluate_flags_mixed_sign() {
        let inst = IpInstance::new("o", vec![3.0, -1.0], vec![], vec![], Sense::Minimize).unwrap();
        let r = inst.evaluate(&Solution::new(vec![false, true]), Some(3.0)).unwrap();
        assert!(r.mixed_sign);
        assert!(r.feasible);
        assert_abs_diff_eq!(r.gap.unwrap(), 4.0 / 3.0);
        let r = inst.evaluate(&Solution::zeros(2), None).unwrap();
        assert_eq!(r.gap, None);
    }

    #[test]
    fn rejects_bad_instances() {
        assert!(IpInstance::new("x", vec![], vec![], vec![], Sense::Minimize).is_err());
        assert!(IpInstance::new("x", vec![1.0], vec![vec![(1, 1.0)]], vec![0.0], Sense::Minimize)
            .is_err());
        assert!(IpInstance::new("x", vec![1.0], vec![vec![]], vec![0.0], Sense::Minimize).is_err());
        assert!(
            IpInstance::new("x", vec![f64::NAN], vec![], vec![], Sense::Minimize).is_err()
        );
        assert!(IpInstance::new("x", vec![1.0], vec![vec![(0, 1.0)]], vec![], Sense::Minimize)
            .is_err());
    }

    #[test]
    fn round_ties_to_zero() {
        assert_eq!(Solution::round(&[0.9, 0.1, 0.5]).bits(), &[true, false, false]);
    }

    #[test]
    fn from_u8_rejects_non_binary() {
        assert!(Solution::from_u8(&[0, 1, 2]).is_err());
        assert_eq!(Solution::from_u8(&[1, 0]).unwrap().bits(), &[true, false]);
    }
}
