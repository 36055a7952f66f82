//! Contrastive pretraining that aligns instance embeddings with the
//! embeddings of their own good solutions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::encoders::{solution_tokens, GraphTensors, IpEncoder, ModelConfig, SolEncoder, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::ip::Sense;
use crate::nn::{Adam, AdamConfig, Matrix, ParamStore, Tape, Var};
use crate::oracle::SolvePool;

/// Upper bound on the learned log-temperature (scale at most 100).
pub const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Matrix,
    pub tau: f64,
}

impl SimilarityMatrix {
    /// Fraction of rows whose diagonal entry exceeds the mean of the rest of the row.
    pub fn diagonal_dominance(&self) -> f64 {
        let n = self.s.rows;
        if n < 2 {
            return 1.0;
        }
        let hits = (0..n)
            .filter(|&j| {
                let row = self.s.row(j);
                let off = (row.iter().sum::<f64>() - row[j]) / (n - 1) as f64;
                row[j] > off
            })
            .count();
        hits as f64 / n as f64
    }

    /// 1-based rank of the diagonal entry within each row (1 = largest).
    pub fn diagonal_ranks(&self) -> Vec<usize> {
        (0..self.s.rows)
            .map(|j| {
                let row = self.s.row(j);
                1 + row.iter().filter(|&&v| v > row[j]).count()
            })
            .collect()
    }
}

fn flatten(z: &Matrix) -> &[f64] {
    &z.data
}

/// Pairwise cosine similarity of flattened (equal-shape) embeddings, times `e^tau`.
pub fn similarity_matrix(z_i: &[Matrix], z_x: &[Matrix], tau: f64) -> Result<SimilarityMatrix> {
    if z_i.len() != z_x.len() {
        return Err(Error::Dimension {
            expected: z_i.len(),
            got: z_x.len(),
        });
    }
    let len = z_i.first().map(|m| m.len()).unwrap_or(0);
    for m in z_i.iter().chain(z_x) {
        if m.len() != len {
            return Err(Error::Dimension {
                expected: len,
                got: m.len(),
            });
        }
    }
    let norms = |zs: &[Matrix]| -> Result<Vec<f64>> {
        zs.iter()
            .map(|m| {
                let n = m.norm();
                if n > 0.0 && n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::Degenerate("zero-norm flattened embedding".into()))
                }
            })
            .collect()
    };
    let ni = norms(z_i)?;
    let nx = norms(z_x)?;
    let scale = tau.exp();
    let n = z_i.len();
    let mut s = Matrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let dot: f64 = flatten(&z_i[j]).iter().zip(flatten(&z_x[k])).map(|(a, b)| a * b).sum();
            s.set(j, k, scale * dot / (ni[j] * nx[k]));
        }
    }
    Ok(SimilarityMatrix { s, tau })
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Symmetric cross-entropy with the diagonal as the target class.
pub fn cisp_loss(s: &Matrix) -> f64 {
    assert_eq!(s.rows, s.cols, "similarity matrix must be square");
    let n = s.rows;
    if n == 0 {
        return 0.0;
    }
    let st = s.transpose();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for j in 0..n {
        rows -= log_softmax_row(s.row(j))[j];
        cols -= log_softmax_row(st.row(j))[j];
    }
    (rows + cols) / (2.0 * n as f64)
}

/// Pool-sampling weights: softmax of `-(obj - best)/(worst - best + 1e-8)`,
/// measured in the minimization sense.
pub fn pool_weights(pool: &SolvePool, sense: Sense) -> Vec<f64> {
    let objs: Vec<f64> = pool
        .solutions
        .iter()
        .map(|e| match sense {
            Sense::Minimize => e.objective,
            Sense::Maximize => -e.objective,
        })
        .collect();
    let lo = objs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = objs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = objs.iter().map(|o| (-(o - lo) / (hi - lo + 1e-8)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn sample_pool_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// The two encoders plus the learned log-temperature.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub config: ModelConfig,
    pub ip: IpEncoder,
    pub sol: SolEncoder,
    pub temperature: ParamStore,
}

impl Encoders {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ip = IpEncoder::new(config, &mut rng);
        let sol = SolEncoder::new(config, &mut rng);
        let mut temperature = ParamStore::new();
        temperature.add("log_scale", Matrix::scalar(0.0));
        Ok(Encoders {
            config: config.clone(),
            ip,
            sol,
            temperature,
        })
    }

    pub fn tau(&self) -> f64 {
        self.temperature.get(0).item()
    }

    /// `N x N` scaled similarity for a batch of (graph, tokens) on `t`.
    fn batch_similarity(&self, t: &mut Tape, items: &[(&GraphTensors, Vec<u8>)]) -> Result<Var> {
        let n_max = items.iter().map(|(_, tok)| tok.len()).max().unwrap_or(0);
        let d = self.config.dim;
        let len = n_max * d;
        let mut zi_cols = Vec::with_capacity(items.len());
        let mut zx_cols = Vec::with_capacity(items.len());
        for (graph, tok) in items {
            let n = graph.n_vars();
            let zi = self.ip.forward(t, graph);
            let flat = t.reshape(zi, 1, n * d);
            let flat = if n < n_max {
                let zeros = t.constant(Matrix::zeros(1, len - n * d));
                t.concat_cols(&[flat, zeros])
            } else {
                flat
            };
            zi_cols.push(t.transpose(flat));
            let mut padded = tok.clone();
            padded.resize(n_max, PAD_TOKEN);
            let zx = self.sol.forward(t, &padded)?;
            let flat = t.reshape(zx, len, 1);
            zx_cols.push(flat);
        }
        let zi = t.concat_cols(&zi_cols);
        let zx = t.concat_cols(&zx_cols);
        let zi = unit_columns(t, zi);
        let zx = unit_columns(t, zx);
        let zit = t.transpose(zi);
        let s = t.matmul(zit, zx);
        let log_scale = t.param(&self.temperature, 0);
        let scale = t.exp(log_scale);
        Ok(t.mul_scalar(s, scale))
    }

    /// Similarity matrix of a batch, without gradients.
    pub fn similarity(&self, items: &[(&Sample, Vec<u8>)]) -> Result<SimilarityMatrix> {
        let mut t = Tape::frozen();
        let refs: Vec<(&GraphTensors, Vec<u8>)> = items.iter().map(|(s, tok)| (&s.graph, tok.clone())).collect();
        let s = self.batch_similarity(&mut t, &refs)?;
        let value = t.value(s).clone();
        if !value.is_finite() {
            return Err(Error::Degenerate("non-finite similarity".into()));
        }
        Ok(SimilarityMatrix { s: value, tau: self.tau() })
    }
}

fn unit_columns(t: &mut Tape, z: Var) -> Var {
    let (rows, cols) = t.shape(z);
    let sq = t.mul(z, z);
    let ones = t.constant(Matrix::filled(1, rows, 1.0));
    let norms2 = t.matmul(ones, sq);
    let norms = t.sqrt(norms2);
    let one = t.constant(Matrix::filled(1, cols, 1.0));
    let inv = t.div(one, norms);
    t.mul_row(z, inv)
}

fn symmetric_ce(t: &mut Tape, s: Var) -> Var {
    let n = t.shape(s).0;
    let diag: Vec<(usize, usize)> = (0..n).map(|j| (j, j)).collect();
    let lr = t.log_softmax_rows(s);
    let st = t.transpose(s);
    let lc = t.log_softmax_rows(st);
    let a = t.pick(lr, &diag);
    let b = t.pick(lc, &diag);
    let both = t.add(a, b);
    let m = t.mean(both);
    t.scale(m, -0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CispConfig {
    pub epochs: usize,
    /// Capped at the dataset size.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for CispConfig {
    fn default() -> Self {
        CispConfig {
            epochs: 100,
            batch_size: 64,
            seed: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Mean contrastive loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossCurve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossCurve {
    pub fn new(columns: &[&str]) -> Self {
        LossCurve {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        let i = self.columns.iter().position(|c| c == name).expect("unknown column");
        self.rows.iter().map(|r| r[i]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,{}\n", self.columns.join(","));
        for (e, row) in self.rows.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{},{}\n", e + 1, vals.join(",")));
        }
        out
    }
}

/// Trains both encoders in place; returns the per-epoch loss curve.
pub fn train_cisp(data: &Dataset, enc: &mut Encoders, cfg: &CispConfig) -> Result<LossCurve> {
    data.require_pools()?;
    let weights: Vec<Vec<f64>> = data
        .samples
        .iter()
        .map(|s| pool_weights(&s.pool, s.inst.sense()))
        .collect();
    let batch = cfg.batch_size.clamp(1, data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_ip = Adam::new(cfg.optimizer.clone(), &enc.ip.store);
    let mut opt_sol = Adam::new(cfg.optimizer.clone(), &enc.sol.store);
    let tau_cfg = AdamConfig {
        weight_decay: 0.0,
        ..cfg.optimizer.clone()
    };
    let mut opt_tau = Adam::new(tau_cfg, &enc.temperature);
    let mut curve = LossCurve::new(&["loss"]);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.optimizer.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let items: Vec<(&GraphTensors, Vec<u8>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    let k = sample_pool_index(&weights[i], &mut rng);
                    (&s.graph, solution_tokens(&s.pool.solutions[k].solution))
                })
                .collect();
            let mut t = Tape::new();
            let s = enc.batch_similarity(&mut t, &items)?;
            let loss = symmetric_ce(&mut t, s);
            let value = t.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Degenerate(format!("contrastive loss is {value} at epoch {}", epoch + 1)));
            }
            let grads = t.backward(loss);
            let g_ip = grads.for_store(&enc.ip.store);
            let g_sol = grads.for_store(&enc.sol.store);
            let g_tau = grads.for_store(&enc.temperature);
            opt_ip.step(&mut enc.ip.store, &g_ip, lr);
            opt_sol.step(&mut enc.sol.store, &g_sol, lr);
            opt_tau.step(&mut enc.temperature, &g_tau, lr);
            let ls = &mut enc.temperature.get_mut(0).data[0];
            *ls = ls.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("cisp epoch {} loss {mean:.5}", epoch + 1);
        curve.rows.push(vec![mean]);
    }
    Ok(curve)
}

/// Similarity on a batch pairing each sample with its best pool solution.
pub fn evaluate_alignment(data: &Dataset, enc: &Encoders) -> Result<SimilarityMatrix> {
    data.require_pools()?;
    let items: Vec<(&Sample, Vec<u8>)> = data
        .samples
        .iter()
        .map(|s| (s, solution_tokens(&s.pool.solutions[0].solution)))
        .collect();
    enc.similarity(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;
    use crate::generate::Family;
    use approx::assert_abs_diff_eq;

    #[test]
    fn self_similarity_diagonal_is_one() {
        let z = vec![
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, -1.0]),
            Matrix::from_vec(2, 2, vec![0.5, 0.0, 3.0, 1.0]),
        ];
        let s = similarity_matrix(&z, &z, 0.0).unwrap();
        assert_abs_diff_eq!(s.s.get(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.s.get(1, 1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_pair_is_zero() {
        let a = vec![Matrix::row_vector(vec![1.0, 0.0])];
        let b = vec![Matrix::row_vector(vec![0.0, 2.0])];
        assert_eq!(similarity_matrix(&a, &b, 0.0).unwrap().s.item(), 0.0);
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let a = vec![Matrix::zeros(1, 2)];
        let b = vec![Matrix::row_vector(vec![0.0, 2.0])];
        assert!(matches!(similarity_matrix(&a, &b, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loss_special_cases() {
        assert_eq!(cisp_loss(&Matrix::scalar(3.7)), 0.0);
        for n in [2usize, 5, 9] {
            assert_abs_diff_eq!(cisp_loss(&Matrix::filled(n, n, 0.3)), (n as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn pool_weights_prefer_better_objectives() {
        let data = build_dataset(&[Family::desk_indep_set(10)], 1, 2, 10, 1_000_000).unwrap();
        let s = &data.samples[0];
        let w = pool_weights(&s.pool, s.inst.sense());
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for i in 1..w.len() {
            let (prev, cur) = (s.pool.solutions[i - 1].objective, s.pool.solutions[i].objective);
            if prev == cur {
                assert_abs_diff_eq!(w[i - 1], w[i], epsilon = 1e-15);
            } else {
                assert!(w[i - 1] > w[i]);
            }
        }
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        let data = build_dataset(&[Family::desk_indep_set(9)], 3, 7, 5, 1_000_000).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            max_len: 16,
            ..ModelConfig::default()
        };
        let enc = Encoders::new(&cfg, 1).unwrap();
        let sim = evaluate_alignment(&data, &enc).unwrap();
        let items: Vec<(&GraphTensors, Vec<u8>)> = data
            .samples
            .iter()
            .map(|s| (&s.graph, solution_tokens(&s.pool.solutions[0].solution)))
            .collect();
        let mut t = Tape::frozen();
        let s = enc.batch_similarity(&mut t, &items).unwrap();
        let l = symmetric_ce(&mut t, s);
        assert_abs_diff_eq!(t.value(l).item(), cisp_loss(&sim.s), epsilon = 1e-12);
    }

    #[test]
    fn single_instance_has_zero_loss() {
        let data = build_dataset(&[Family::desk_indep_set(8)], 1, 3, 4, 1_000_000).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            max_len: 16,
            ..ModelConfig::default()
        };
        let mut enc = Encoders::new(&cfg, 1).unwrap();
        let curve = train_cisp(
            &data,
            &mut enc,
            &CispConfig {
                epochs: 2,
                ..CispConfig::default()
            },
        )
        .unwrap();
        assert!(curve.column("loss").iter().all(|&l| l.abs() < 1e-12));
    }
}
