use ipdiff::cisp::{cisp_loss, similarity_matrix};
use ipdiff::diffusion::{forward_noise, make_schedule, standard_normal};
use ipdiff::encoders::{ip_encode, IpEncoder, ModelConfig};
use ipdiff::eval::evaluate_pool;
use ipdiff::featurize::build_bipartite;
use ipdiff::generate::graph_to_is_instance;
use ipdiff::ip::{gap, IpInstance, PartialAssignment, Sense, Solution};
use ipdiff::nn::Matrix;
use ipdiff::oracle::{complete_solution, solve_exact, Completion, SolveStatus};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_instance(max_n: usize) -> impl Strategy<Value = IpInstance> {
    (1..=max_n, 0usize..6).prop_flat_map(|(n, m)| {
        (
            proptest::collection::vec(-10i32..10, n),
            proptest::collection::vec(proptest::collection::vec((0..n, -5i32..6), 1..4), m),
            proptest::collection::vec(-3i32..8, m),
            any::<bool>(),
        )
            .prop_map(|(c, rows, b, max)| {
                let sense = if max { Sense::Maximize } else { Sense::Minimize };
                let rows = rows
                    .into_iter()
                    .map(|r| {
                        let mut r: Vec<(usize, f64)> = r.into_iter().map(|(j, a)| (j, a as f64)).collect();
                        r.sort_by_key(|e| e.0);
                        r.dedup_by_key(|e| e.0);
                        r
                    })
                    .collect();
                IpInstance::new(
                    "prop",
                    c.into_iter().map(f64::from).collect(),
                    rows,
                    b.into_iter().map(f64::from).collect(),
                    sense,
                )
                .unwrap()
            })
    })
}

fn all_solutions(n: usize) -> impl Iterator<Item = Solution> {
    (0u32..1 << n).map(move |mask| Solution::new((0..n).map(|j| mask >> j & 1 == 1).collect()))
}

fn brute_best(inst: &IpInstance) -> Option<f64> {
    all_solutions(inst.n())
        .filter(|x| inst.is_feasible(x).unwrap())
        .map(|x| inst.objective_value(&x).unwrap())
        .reduce(|a, b| if inst.sense().better(b, a) { b } else { a })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_matches_enumeration(inst in arb_instance(10)) {
        let pool = solve_exact(&inst, 4, 10_000_000);
        let best = brute_best(&inst);
        prop_assert_eq!(pool.best().map(|e| e.objective), best);
        prop_assert_eq!(pool.status == SolveStatus::Infeasible, best.is_none());
        for e in &pool.solutions {
            prop_assert!(inst.is_feasible(&e.solution).unwrap());
        }
    }

    #[test]
    fn canonical_form_preserves_feasibility(inst in arb_instance(8), seed in any::<u64>()) {
        let canon = inst.canonicalize();
        prop_assert_eq!(canon.sense(), Sense::Minimize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Solution::new((0..inst.n()).map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect());
        prop_assert_eq!(canon.is_feasible(&x).unwrap(), inst.is_feasible(&x).unwrap());
        let flip = if inst.sense() == Sense::Maximize { -1.0 } else { 1.0 };
        prop_assert_eq!(canon.objective_value(&x).unwrap(), flip * inst.objective_value(&x).unwrap());
    }

    #[test]
    fn completions_respect_fixes(inst in arb_instance(9), fix_bits in proptest::collection::vec(proptest::option::of(any::<bool>()), 9)) {
        let n = inst.n();
        let mut partial = PartialAssignment::empty(n);
        for (j, v) in fix_bits.iter().take(n).enumerate() {
            if let Some(v) = v {
                partial.fix(j, *v);
            }
        }
        let consistent = all_solutions(n)
            .filter(|x| (0..n).all(|j| partial.fixed(j).is_none_or(|v| v == x.get(j))))
            .filter(|x| inst.is_feasible(x).unwrap())
            .map(|x| inst.objective_value(&x).unwrap())
            .reduce(|a, b| if inst.sense().better(b, a) { b } else { a });
        match complete_solution(&inst, &partial, 10_000_000).unwrap() {
            Completion::Found { solution, objective, .. } => {
                prop_assert!(inst.is_feasible(&solution).unwrap());
                for j in 0..n {
                    if let Some(v) = partial.fixed(j) {
                        prop_assert_eq!(solution.get(j), v);
                    }
                }
                prop_assert_eq!(Some(objective), consistent);
            }
            Completion::Infeasible => prop_assert!(consistent.is_none()),
            Completion::Exhausted => prop_assert!(false, "tiny instance exhausted the node limit"),
        }
    }

    #[test]
    fn gap_is_symmetric_and_bounded(a in -1e4f64..1e4, b in -1e4f64..1e4) {
        let g = gap(a, b);
        prop_assert!((g - gap(b, a)).abs() < 1e-12);
        if a * b > 0.0 {
            prop_assert!((0.0..=1.0).contains(&g));
        }
        prop_assert_eq!(gap(a, a), 0.0);
    }

    #[test]
    fn pool_report_matches_recount(inst in arb_instance(8), seed in any::<u64>(), count in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sols: Vec<Solution> = (0..count)
            .map(|_| Solution::new((0..inst.n()).map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect()))
            .collect();
        let r = evaluate_pool(&inst, &sols, None).unwrap();
        let feasible = sols.iter().filter(|x| inst.is_feasible(x).unwrap()).count();
        prop_assert_eq!(r.feasible_count, feasible);
        prop_assert_eq!(r.feasible_ratio, feasible as f64 / count as f64);
        prop_assert_eq!(r.mean_gap, None);
    }

    #[test]
    fn schedules_are_monotone(steps in 1usize..400, lo in 1e-5f64..0.01, span in 0.0f64..0.5) {
        let s = make_schedule(steps, lo, lo + span).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn similarity_matches_brute_force(n in 1usize..6, b in 1usize..5, seed in any::<u64>(), tau in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zi: Vec<Matrix> = (0..b).map(|_| standard_normal(&mut rng, n, 3)).collect();
        let zx: Vec<Matrix> = (0..b).map(|_| standard_normal(&mut rng, n, 3)).collect();
        let sim = similarity_matrix(&zi, &zx, tau).unwrap();
        let flat = |m: &Matrix| -> Vec<f64> {
            let v: Vec<f64> = (0..m.rows).flat_map(|r| m.row(r).to_vec()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        };
        for j in 0..b {
            for k in 0..b {
                let want: f64 = flat(&zi[j]).iter().zip(flat(&zx[k])).map(|(p, q)| p * q).sum::<f64>() * tau.exp();
                prop_assert!((sim.s.get(j, k) - want).abs() < 1e-9);
            }
        }
        prop_assert!(cisp_loss(&sim.s).is_finite());
    }
}

#[test]
fn isomorphic_graphs_embed_equivariantly() {
    let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (3, 4), (4, 5)];
    let perm = [4usize, 2, 5, 0, 1, 3];
    let relabeled: Vec<(usize, usize)> = edges.iter().rev().map(|&(a, b)| (perm[b], perm[a])).collect();
    let a = graph_to_is_instance(&edges, 6).unwrap();
    let b = graph_to_is_instance(&relabeled, 6).unwrap();
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        max_len: 8,
        ..ModelConfig::default()
    };
    let enc = IpEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let za = ip_encode(&build_bipartite(&a).unwrap(), &enc).unwrap();
    let zb = ip_encode(&build_bipartite(&b).unwrap(), &enc).unwrap();
    for (j, &pj) in perm.iter().enumerate() {
        for c in 0..cfg.dim {
            assert!((za.get(j, c) - zb.get(pj, c)).abs() < 1e-9, "node {j} feature {c}");
        }
    }
}

#[test]
fn forward_noise_has_the_schedule_variance() {
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z0 = Matrix::filled(200, 50, 1.0);
    for t in [1usize, 30, 100] {
        let eps = standard_normal(&mut rng, 200, 50);
        let zt = forward_noise(&z0, t, &eps, &sched).unwrap();
        let n = zt.len() as f64;
        let mean = zt.sum() / n;
        let var = zt.map(|v| (v - mean) * (v - mean)).sum() / (n - 1.0);
        let ab = sched.alpha_bar(t);
        // 10000 draws: standard error of the mean ~1%, of the variance ~1.4%
        assert!((mean - ab.sqrt()).abs() < 0.04 * (1.0 - ab).sqrt().max(0.05), "t={t} mean {mean}");
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.06, "t={t} var {var}");
    }
}
