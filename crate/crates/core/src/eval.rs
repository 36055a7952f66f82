//! Metrics over sampled solutions, ablations, partial-solution completion,
//! histogram export and guidance tuning.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::generate::derive_seed;
use crate::guidance::{sample_many, GuidanceConfig};
use crate::ip::{gap, IpInstance, PartialAssignment, Solution};
use crate::oracle::{complete_solution, Completion};
use crate::pipeline::TrainedModels;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceReport {
    pub name: String,
    pub sample_count: usize,
    pub feasible_count: usize,
    pub feasible_ratio: f64,
    /// Mean authored-sense objective over feasible samples.
    pub mean_objective: Option<f64>,
    pub best_objective: Option<f64>,
    /// Mean gap of feasible samples to the reference optimum.
    pub mean_gap: Option<f64>,
    pub reference: Option<f64>,
    pub objectives: Vec<Option<f64>>,
}

/// Scores `solutions` against `inst`; feasibility is always recomputed here.
pub fn evaluate_pool(inst: &IpInstance, solutions: &[Solution], reference: Option<f64>) -> Result<InstanceReport> {
    if solutions.is_empty() {
        return Err(Error::EmptyData("no solutions to evaluate".into()));
    }
    let mut objectives = Vec::with_capacity(solutions.len());
    for x in solutions {
        let obj = inst.objective_value(x)?;
        objectives.push(inst.is_feasible(x)?.then_some(obj));
    }
    let feasible: Vec<f64> = objectives.iter().flatten().copied().collect();
    let k = feasible.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let gaps: Vec<f64> = reference
        .map(|r| feasible.iter().map(|&o| gap(o, r)).collect())
        .unwrap_or_default();
    let best = feasible.iter().copied().reduce(|a, b| if inst.sense().better(b, a) { b } else { a });
    Ok(InstanceReport {
        name: inst.name().to_string(),
        sample_count: solutions.len(),
        feasible_count: k,
        feasible_ratio: k as f64 / solutions.len() as f64,
        mean_objective: mean(&feasible),
        best_objective: best,
        mean_gap: if reference.is_some() { mean(&gaps) } else { None },
        reference,
        objectives,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub label: String,
    pub instances: Vec<InstanceReport>,
    pub sample_count: usize,
    pub feasible_count: usize,
    pub feasible_ratio: f64,
    /// Mean of per-instance mean objectives (instances with a feasible sample).
    pub mean_objective: Option<f64>,
    /// Mean gap over all feasible samples.
    pub mean_gap: Option<f64>,
    pub config: serde_json::Value,
    pub runtime_secs: f64,
}

impl ExperimentReport {
    pub fn aggregate(label: &str, instances: Vec<InstanceReport>, config: serde_json::Value, runtime_secs: f64) -> Self {
        let sample_count = instances.iter().map(|r| r.sample_count).sum();
        let feasible_count = instances.iter().map(|r| r.feasible_count).sum();
        let objs: Vec<f64> = instances.iter().filter_map(|r| r.mean_objective).collect();
        let gaps: Vec<f64> = instances
            .iter()
            .filter(|r| r.mean_gap.is_some())
            .flat_map(|r| {
                let reference = r.reference.expect("gap implies reference");
                r.objectives.iter().flatten().map(move |&o| gap(o, reference))
            })
            .collect();
        ExperimentReport {
            label: label.to_string(),
            feasible_ratio: if sample_count == 0 { 0.0 } else { feasible_count as f64 / sample_count as f64 },
            sample_count,
            feasible_count,
            mean_objective: (!objs.is_empty()).then(|| objs.iter().sum::<f64>() / objs.len() as f64),
            mean_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
            instances,
            config,
            runtime_secs,
        }
    }
}

/// Samples `count` solutions per instance and scores them against each pool's best.
pub fn run_sampling(data: &Dataset, models: &TrainedModels, cfg: &GuidanceConfig, count: usize, label: &str) -> Result<ExperimentReport> {
    let start = Instant::now();
    let reports = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let solutions = sample_solutions(s, models, cfg, count, i as u64)?;
            evaluate_pool(&s.inst, &solutions, s.best_objective())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::aggregate(
        label,
        reports,
        serde_json::to_value(cfg).expect("config serializes"),
        start.elapsed().as_secs_f64(),
    ))
}

/// Raw samples for one dataset entry; instance `index` gets its own seed stream.
pub fn sample_solutions(s: &Sample, models: &TrainedModels, cfg: &GuidanceConfig, count: usize, index: u64) -> Result<Vec<Solution>> {
    let z_i = models.embed(s);
    let cfg = GuidanceConfig {
        seed: derive_seed(cfg.seed, index),
        ..cfg.clone()
    };
    Ok(sample_many(&s.inst, &z_i, &models.diffusion, &cfg, count, None)?
        .into_iter()
        .map(|r| r.solution)
        .collect())
}

pub const ABLATION_COLUMNS: [&str; 5] = [
    "unguided",
    "constraint_guided",
    "objective_guided",
    "ip_guided",
    "ip_guided_no_pretraining",
];

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub cells: Vec<(String, Option<ExperimentReport>)>,
}

impl AblationTable {
    /// One row per method: `method,objective,feasible_ratio,gap`; absent cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,objective,feasible_ratio,gap\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for (name, cell) in &self.cells {
            match cell {
                Some(r) => out.push_str(&format!(
                    "{name},{},{},{}\n",
                    fmt(r.mean_objective),
                    r.feasible_ratio,
                    fmt(r.mean_gap)
                )),
                None => out.push_str(&format!("{name},,,\n")),
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&ExperimentReport> {
        self.cells.iter().find(|(n, _)| n == name).and_then(|(_, r)| r.as_ref())
    }
}

/// Unguided, constraint-only, objective-only and combined guidance, plus the
/// combined setting on models trained without contrastive pretraining.
pub fn run_ablation(
    data: &Dataset,
    models: &TrainedModels,
    no_pretraining: Option<&TrainedModels>,
    base: &GuidanceConfig,
    count: usize,
) -> Result<AblationTable> {
    let settings = [
        GuidanceConfig { s: 0.0, ..base.clone() },
        GuidanceConfig { gamma: 0.0, ..base.clone() },
        GuidanceConfig { gamma: 1.0, ..base.clone() },
        base.clone(),
    ];
    let mut cells = Vec::with_capacity(ABLATION_COLUMNS.len());
    for (name, cfg) in ABLATION_COLUMNS.iter().zip(&settings) {
        cells.push((name.to_string(), Some(run_sampling(data, models, cfg, count, name)?)));
    }
    let last = match no_pretraining {
        Some(m) => Some(run_sampling(data, m, base, count, ABLATION_COLUMNS[4])?),
        None => None,
    };
    cells.push((ABLATION_COLUMNS[4].to_string(), last));
    Ok(AblationTable { cells })
}

/// Fixes `floor(proportion * n)` uniformly chosen variables of `x` and
/// completes the rest exactly. Returns `None` when no completion was found.
pub fn complete_partial(inst: &IpInstance, x: &Solution, proportion: f64, seed: u64, node_limit: u64) -> Result<Option<Solution>> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Config(format!("proportion {proportion} outside (0, 1]")));
    }
    let n = inst.n();
    let k = ((proportion * n as f64).floor() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixed = sample_indices(&mut rng, n, k).into_vec();
    let partial = PartialAssignment::from_subset(x, &fixed);
    Ok(match complete_solution(inst, &partial, node_limit)? {
        Completion::Found { solution, .. } => Some(solution),
        Completion::Infeasible | Completion::Exhausted => None,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PartialReport {
    pub proportion: f64,
    pub completed: ExperimentReport,
    pub direct: ExperimentReport,
}

/// Compares direct samples with completions of their `proportion` partial fixes.
/// Failed completions count as infeasible samples.
pub fn run_partial_complete(
    data: &Dataset,
    models: &TrainedModels,
    proportion: f64,
    cfg: &GuidanceConfig,
    count: usize,
    node_limit: u64,
) -> Result<PartialReport> {
    let start = Instant::now();
    let mut direct = Vec::with_capacity(data.len());
    let mut completed = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let samples = sample_solutions(s, models, cfg, count, i as u64)?;
        let completions = samples
            .par_iter()
            .enumerate()
            .map(|(j, x)| {
                let seed = derive_seed(derive_seed(cfg.seed ^ 0x5eed, i as u64), j as u64);
                complete_partial(&s.inst, x, proportion, seed, node_limit).map(|c| c.unwrap_or_else(|| x.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        // a failed completion falls back to the sample, which is then infeasible
        direct.push(evaluate_pool(&s.inst, &samples, s.best_objective())?);
        completed.push(evaluate_pool(&s.inst, &completions, s.best_objective())?);
    }
    let echo = serde_json::json!({ "guidance": cfg, "proportion": proportion });
    let secs = start.elapsed().as_secs_f64();
    Ok(PartialReport {
        proportion,
        completed: ExperimentReport::aggregate("partial_complete", completed, echo.clone(), secs),
        direct: ExperimentReport::aggregate("direct", direct, echo, secs),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub optimum: Option<f64>,
    pub sample_count: usize,
    /// Objectives of feasible samples, in sampling order.
    pub objectives: Vec<f64>,
}

impl Histogram {
    /// `objective,optimum` with one row per feasible sample.
    pub fn to_csv(&self) -> String {
        let opt = self.optimum.map(|v| format!("{v}")).unwrap_or_default();
        let mut out = String::from("objective,optimum\n");
        for o in &self.objectives {
            out.push_str(&format!("{o},{opt}\n"));
        }
        out
    }

    pub fn mode_bin(&self, bins: usize) -> Option<f64> {
        let lo = self.objectives.iter().cloned().reduce(f64::min)?;
        let hi = self.objectives.iter().cloned().reduce(f64::max)?;
        let width = ((hi - lo) / bins as f64).max(1e-12);
        let mut counts = vec![0usize; bins];
        for o in &self.objectives {
            counts[(((o - lo) / width) as usize).min(bins - 1)] += 1;
        }
        let best = (0..bins).max_by_key(|&b| (counts[b], std::cmp::Reverse(b)))?;
        Some(lo + (best as f64 + 0.5) * width)
    }
}

pub fn export_histogram(sample: &Sample, models: &TrainedModels, cfg: &GuidanceConfig, count: usize) -> Result<Histogram> {
    let solutions = sample_solutions(sample, models, cfg, count, 0)?;
    let report = evaluate_pool(&sample.inst, &solutions, sample.best_objective())?;
    Ok(Histogram {
        optimum: sample.best_objective(),
        sample_count: count,
        objectives: report.objectives.iter().flatten().copied().collect(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TuneResult {
    pub best: GuidanceConfig,
    /// `(s, gamma, feasible_ratio, mean_gap)` for every grid point.
    pub grid: Vec<(f64, f64, f64, Option<f64>)>,
}

/// Grid search over `(s, gamma)` on `data`: highest feasible ratio wins,
/// ties go to the smaller mean gap, then to the earlier grid point.
pub fn tune_guidance(data: &Dataset, models: &TrainedModels, base: &GuidanceConfig, scales: &[f64], gammas: &[f64], count: usize) -> Result<TuneResult> {
    if scales.is_empty() || gammas.is_empty() {
        return Err(Error::Config("empty tuning grid".into()));
    }
    let mut grid = Vec::new();
    let mut best: Option<(f64, f64, GuidanceConfig)> = None;
    for &s in scales {
        for &gamma in gammas {
            let cfg = GuidanceConfig { s, gamma, ..base.clone() };
            let r = run_sampling(data, models, &cfg, count, "tune")?;
            grid.push((s, gamma, r.feasible_ratio, r.mean_gap));
            let gap_key = r.mean_gap.unwrap_or(f64::INFINITY);
            let better = match &best {
                None => true,
                Some((f, g, _)) => r.feasible_ratio > *f || (r.feasible_ratio == *f && gap_key < *g),
            };
            if better {
                best = Some((r.feasible_ratio, gap_key, cfg));
            }
        }
    }
    Ok(TuneResult {
        best: best.expect("non-empty grid").2,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::graph_to_is_instance;

    fn path3() -> IpInstance {
        graph_to_is_instance(&[(0, 1), (1, 2)], 3).unwrap()
    }

    #[test]
    fn all_infeasible_pool() {
        let r = evaluate_pool(&path3(), &[Solution::ones(3), Solution::from_u8(&[1, 1, 0]).unwrap()], Some(2.0)).unwrap();
        assert_eq!(r.feasible_ratio, 0.0);
        assert_eq!(r.mean_objective, None);
        assert_eq!(r.mean_gap, None);
    }

    #[test]
    fn optimum_only_pool() {
        let x = Solution::from_u8(&[1, 0, 1]).unwrap();
        let r = evaluate_pool(&path3(), &[x], Some(2.0)).unwrap();
        assert_eq!(r.feasible_ratio, 1.0);
        assert_eq!(r.mean_gap, Some(0.0));
        assert_eq!(r.best_objective, Some(2.0));
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(evaluate_pool(&path3(), &[], None).is_err());
    }

    #[test]
    fn aggregate_recounts() {
        let inst = path3();
        let a = evaluate_pool(&inst, &[Solution::from_u8(&[1, 0, 1]).unwrap(), Solution::ones(3)], Some(2.0)).unwrap();
        let b = evaluate_pool(&inst, &[Solution::from_u8(&[0, 1, 0]).unwrap()], Some(2.0)).unwrap();
        let agg = ExperimentReport::aggregate("x", vec![a, b], serde_json::Value::Null, 0.0);
        assert_eq!(agg.sample_count, 3);
        assert_eq!(agg.feasible_count, 2);
        assert!((agg.mean_gap.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn full_proportion_keeps_feasible_sample() {
        let inst = path3();
        let x = Solution::from_u8(&[0, 1, 0]).unwrap();
        assert_eq!(complete_partial(&inst, &x, 1.0, 3, 1000).unwrap(), Some(x.clone()));
        assert!(complete_partial(&inst, &Solution::ones(3), 1.0, 3, 1000).unwrap().is_none());
        assert!(complete_partial(&inst, &x, 0.0, 3, 1000).is_err());
    }

    #[test]
    fn tiny_proportion_gives_optimum() {
        let inst = path3();
        let done = complete_partial(&inst, &Solution::ones(3), 0.2, 1, 1000).unwrap().unwrap();
        assert_eq!(inst.objective_value(&done).unwrap(), 2.0);
    }

    #[test]
    fn histogram_rows_match_feasible_samples() {
        let h = Histogram {
            optimum: Some(5.0),
            sample_count: 4,
            objectives: vec![6.0, 7.0, 6.5],
        };
        assert_eq!(h.to_csv().lines().count(), 4);
        assert!(h.mode_bin(2).is_some());
    }

    #[test]
    fn ablation_csv_shape() {
        let inst = path3();
        let r = evaluate_pool(&inst, &[Solution::zeros(3)], Some(2.0)).unwrap();
        let rep = ExperimentReport::aggregate("a", vec![r], serde_json::Value::Null, 0.0);
        let table = AblationTable {
            cells: ABLATION_COLUMNS
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), (i < 4).then(|| rep.clone())))
                .collect(),
        };
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().all(|l| l.split(',').count() == 4));
        assert!(table.get("ip_guided_no_pretraining").is_none());
    }
}
