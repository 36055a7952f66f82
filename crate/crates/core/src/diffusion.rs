//! Latent diffusion over solution embeddings: noise schedule, a denoiser
//! that predicts the clean embedding, a decoder back to bit probabilities,
//! joint training and the unguided samplers.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cisp::{pool_weights, sample_pool_index, Encoders, LossCurve};
use crate::data::{Dataset, Sample};
use crate::encoders::{solution_tokens, ModelConfig};
use crate::error::{Error, Result};
use crate::ip::{IpInstance, Solution};
use crate::nn::{sinusoidal_embedding, Adam, AdamConfig, Linear, Matrix, ParamStore, SparseMatrix, Tape, TransformerLayer, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Variance schedule indexed by time step `1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Fixed reverse-step variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Coefficients of `z_t` and of the clean prediction in the posterior mean.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        (
            self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            ab_prev.sqrt() * self.beta(t) / (1.0 - ab),
        )
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("time step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(z0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Dimension {
            expected: z0.len(),
            got: eps.len(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub store: ParamStore,
    dim: usize,
    time_proj: Linear,
    input: Linear,
    layers: Vec<TransformerLayer>,
    output: Linear,
}

impl Denoiser {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let time_proj = Linear::new(s, "time_proj", d, d, true, rng);
        let input = Linear::new(s, "input", 3 * d, d, true, rng);
        let layers = (0..cfg.denoiser_layers)
            .map(|i| TransformerLayer::new(s, &format!("layer{i}"), d, cfg.heads, rng))
            .collect();
        let output = Linear::new(s, "output", d, d, true, rng);
        Denoiser {
            store,
            dim: d,
            time_proj,
            input,
            layers,
            output,
        }
    }

    /// Clean-embedding prediction `sqrt(abar) z_t + sqrt(1 - abar) net(z_t, z_i, step)`,
    /// so the map tends to the identity as the noise vanishes.
    pub fn forward(&self, t: &mut Tape, z_t: Var, z_i: Var, step: usize, alpha_bar: f64) -> Var {
        let st = &self.store;
        let n = t.shape(z_t).0;
        let te = t.constant(sinusoidal_embedding(step as f64, self.dim));
        let te = self.time_proj.forward(t, st, te);
        let te = t.silu(te);
        let te = t.gather_rows(te, &vec![0; n]);
        let h = t.concat_cols(&[z_t, z_i, te]);
        let mut h = self.input.forward(t, st, h);
        for layer in &self.layers {
            h = layer.forward(t, st, h, None);
        }
        let net = self.output.forward(t, st, h);
        let net = t.scale(net, (1.0 - alpha_bar).sqrt());
        let skip = t.scale(z_t, alpha_bar.sqrt());
        t.add(skip, net)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub store: ParamStore,
    input: Linear,
    layers: Vec<TransformerLayer>,
    output: Linear,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let input = Linear::new(s, "input", 2 * d, d, true, rng);
        let layers = (0..cfg.decoder_layers)
            .map(|i| TransformerLayer::new(s, &format!("layer{i}"), d, cfg.heads, rng))
            .collect();
        let output = Linear::new(s, "output", d, 1, true, rng);
        Decoder {
            store,
            input,
            layers,
            output,
        }
    }

    /// Per-variable logits, `n x 1`.
    pub fn logits(&self, t: &mut Tape, z: Var, z_i: Var) -> Var {
        let st = &self.store;
        let h = t.concat_cols(&[z, z_i]);
        let mut h = self.input.forward(t, st, h);
        for layer in &self.layers {
            h = layer.forward(t, st, h, None);
        }
        self.output.forward(t, st, h)
    }
}

/// Denoiser, decoder and the schedule they were trained with.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: ModelConfig,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub decoder: Decoder,
}

impl DiffusionModel {
    pub fn new(config: &ModelConfig, schedule: &ScheduleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(DiffusionModel {
            config: config.clone(),
            schedule_config: schedule.clone(),
            schedule: NoiseSchedule::from_config(schedule)?,
            denoiser: Denoiser::new(config, &mut rng),
            decoder: Decoder::new(config, &mut rng),
        })
    }
}

fn check_pair(z: &Matrix, z_i: &Matrix) -> Result<()> {
    if z.shape() != z_i.shape() {
        return Err(Error::Dimension {
            expected: z_i.len(),
            got: z.len(),
        });
    }
    Ok(())
}

/// Clean-embedding prediction from a noisy latent.
pub fn denoise(z_t: &Matrix, z_i: &Matrix, step: usize, model: &DiffusionModel) -> Result<Matrix> {
    check_pair(z_t, z_i)?;
    model.schedule.check(step)?;
    let mut t = Tape::frozen();
    let zt = t.constant(z_t.clone());
    let zi = t.constant(z_i.clone());
    let out = model.denoiser.forward(&mut t, zt, zi, step, model.schedule.alpha_bar(step));
    Ok(t.value(out).clone())
}

/// Soft solution in `(0,1)^n`.
pub fn decode(z: &Matrix, z_i: &Matrix, model: &DiffusionModel) -> Result<Vec<f64>> {
    check_pair(z, z_i)?;
    let mut t = Tape::frozen();
    let zv = t.constant(z.clone());
    let zi = t.constant(z_i.clone());
    let logits = model.decoder.logits(&mut t, zv, zi);
    let x = t.sigmoid(logits);
    Ok(t.value(x).data.clone())
}

/// Threshold at 0.5; exact ties round down.
pub fn round_soft(x: &[f64]) -> Solution {
    Solution::round(x)
}

/// Constraint matrix of `inst` as a constant sparse operator.
pub fn constraint_operator(inst: &IpInstance) -> Arc<SparseMatrix> {
    let entries = inst
        .rows()
        .iter()
        .enumerate()
        .flat_map(|(k, row)| row.iter().map(move |&(j, a)| (k, j, a)))
        .collect();
    Arc::new(SparseMatrix::new(inst.m(), inst.n(), entries))
}

/// `sum_k relu(a_k . x - b_k)` for an `n x 1` node `x`.
pub fn violation_sum_node(t: &mut Tape, a: &Arc<SparseMatrix>, b: &[f64], x: Var) -> Option<Var> {
    if b.is_empty() {
        return None;
    }
    let ax = t.spmm(a, x);
    let bv = t.constant(Matrix::column(b.to_vec()));
    let r = t.sub(ax, bv);
    let r = t.relu(r);
    Some(t.sum(r))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// One per variable of the instance.
    PerVariable,
}

/// Weight of the constraint-violation loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ViolationWeight {
    Value(f64),
    Rule(WeightRule),
}

impl ViolationWeight {
    pub fn resolve(self, n: usize) -> f64 {
        match self {
            ViolationWeight::Value(v) => v,
            ViolationWeight::Rule(WeightRule::PerVariable) => n as f64,
        }
    }
}

impl std::str::FromStr for ViolationWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ViolationWeight::Rule(WeightRule::PerVariable)),
            _ => s
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .map(ViolationWeight::Value)
                .ok_or_else(|| Error::Config(format!("violation weight `{s}` is not `auto` or a real >= 0"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub ce: f64,
    pub cv: f64,
}

/// Loss graph for one (instance, solution) pair.
pub struct JointLoss {
    pub total: Var,
    pub parts: LossParts,
}

/// Builds `MSE + CE + weight * CV` on `t` from embeddings already on the tape.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    t: &mut Tape,
    model: &DiffusionModel,
    canonical: &IpInstance,
    z_i: Var,
    z_x: Var,
    bits: &Solution,
    step: usize,
    eps: &Matrix,
    weight: f64,
) -> Result<JointLoss> {
    model.schedule.check(step)?;
    let (n, d) = t.shape(z_x);
    if bits.len() != n || eps.shape() != (n, d) || canonical.n() != n {
        return Err(Error::Dimension {
            expected: n,
            got: bits.len(),
        });
    }
    let ab = model.schedule.alpha_bar(step);
    let signal = t.scale(z_x, ab.sqrt());
    let noise = t.constant(eps.scale((1.0 - ab).sqrt()));
    let z_t = t.add(signal, noise);
    let pred = model.denoiser.forward(t, z_t, z_i, step, ab);

    let diff = t.sub(pred, z_x);
    let sq = t.mul(diff, diff);
    let mse = t.mean(sq);

    let logits = model.decoder.logits(t, pred, z_i);
    let y = t.constant(Matrix::column(bits.to_f64()));
    let sp = t.softplus(logits);
    let yl = t.mul(y, logits);
    let bce = t.sub(sp, yl);
    let ce = t.mean(bce);

    let mut total = t.add(mse, ce);
    let mut cv_value = 0.0;
    if canonical.m() > 0 {
        let x = t.sigmoid(logits);
        let a = constraint_operator(canonical);
        let v = violation_sum_node(t, &a, canonical.b(), x).expect("rows present");
        let cv = t.scale(v, 1.0 / canonical.m() as f64);
        cv_value = t.value(cv).item();
        if weight != 0.0 {
            let w = t.scale(cv, weight);
            total = t.add(total, w);
        }
    }
    let parts = LossParts {
        total: t.value(total).item(),
        mse: t.value(mse).item(),
        ce: t.value(ce).item(),
        cv: cv_value,
    };
    Ok(JointLoss { total, parts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub violation_weight: ViolationWeight,
    /// Also update the encoders (used when no contrastive pretraining ran).
    pub train_encoders: bool,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            violation_weight: ViolationWeight::Value(0.0),
            train_encoders: false,
            seed: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

struct Draw {
    sample: usize,
    pool_index: usize,
    step: usize,
    eps: Matrix,
}

struct SampleGrads {
    parts: LossParts,
    grads: Vec<Vec<Matrix>>,
}

/// Instance and solution embeddings of every pool entry under frozen encoders.
pub struct EmbeddingCache {
    pub z_i: Vec<Matrix>,
    pub z_x: Vec<Vec<Matrix>>,
}

impl EmbeddingCache {
    pub fn build(data: &Dataset, enc: &Encoders) -> Result<Self> {
        let rows: Vec<(Matrix, Vec<Matrix>)> = data
            .samples
            .par_iter()
            .map(|s| {
                let mut t = Tape::frozen();
                let zi = enc.ip.forward(&mut t, &s.graph);
                let zi = t.value(zi).clone();
                let zx = s
                    .pool
                    .solutions
                    .iter()
                    .map(|e| crate::encoders::sol_encode(&solution_tokens(&e.solution), &enc.sol))
                    .collect::<Result<Vec<_>>>()?;
                Ok((zi, zx))
            })
            .collect::<Result<Vec<_>>>()?;
        let (z_i, z_x) = rows.into_iter().unzip();
        Ok(EmbeddingCache { z_i, z_x })
    }
}

fn sample_grads(
    sample: &Sample,
    draw: &Draw,
    enc: &Encoders,
    model: &DiffusionModel,
    cache: Option<&EmbeddingCache>,
    weight: f64,
) -> Result<SampleGrads> {
    let mut t = Tape::new();
    let sol = &sample.pool.solutions[draw.pool_index].solution;
    let (zi, zx) = match cache {
        Some(c) => (
            t.constant(c.z_i[draw.sample].clone()),
            t.constant(c.z_x[draw.sample][draw.pool_index].clone()),
        ),
        None => (
            enc.ip.forward(&mut t, &sample.graph),
            enc.sol.forward(&mut t, &solution_tokens(sol))?,
        ),
    };
    let loss = joint_loss(&mut t, model, &sample.canonical, zi, zx, sol, draw.step, &draw.eps, weight)?;
    let g = t.backward(loss.total);
    let mut grads = vec![g.for_store(&model.denoiser.store), g.for_store(&model.decoder.store)];
    if cache.is_none() {
        grads.push(g.for_store(&enc.ip.store));
        grads.push(g.for_store(&enc.sol.store));
    }
    Ok(SampleGrads {
        parts: loss.parts,
        grads,
    })
}

/// Trains the denoiser and decoder (and optionally the encoders) in place.
/// Returns per-epoch means of the total loss and its three parts.
pub fn train_joint(data: &Dataset, enc: &mut Encoders, model: &mut DiffusionModel, cfg: &TrainConfig) -> Result<LossCurve> {
    data.require_pools()?;
    if let Some(s) = data.samples.iter().find(|s| s.n() > enc.sol.max_len()) {
        return Err(Error::Config(format!(
            "instance {} has {} variables, more than max_len {}",
            s.inst.name(),
            s.n(),
            enc.sol.max_len()
        )));
    }
    let weights: Vec<Vec<f64>> = data.samples.iter().map(|s| pool_weights(&s.pool, s.inst.sense())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opts = vec![
        Adam::new(cfg.optimizer.clone(), &model.denoiser.store),
        Adam::new(cfg.optimizer.clone(), &model.decoder.store),
    ];
    if cfg.train_encoders {
        opts.push(Adam::new(cfg.optimizer.clone(), &enc.ip.store));
        opts.push(Adam::new(cfg.optimizer.clone(), &enc.sol.store));
    }
    let cache = if cfg.train_encoders {
        None
    } else {
        Some(EmbeddingCache::build(data, enc)?)
    };
    let batch = cfg.batch_size.clamp(1, data.len());
    let steps = model.schedule.steps();
    let d = model.config.dim;
    let mut curve = LossCurve::new(&["total", "mse", "ce", "cv"]);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.optimizer.lr_at(epoch);
        let mut sums = LossParts::default();
        for chunk in order.chunks(batch) {
            let draws: Vec<Draw> = chunk
                .iter()
                .map(|&i| Draw {
                    sample: i,
                    pool_index: sample_pool_index(&weights[i], &mut rng),
                    step: rng.random_range(1..=steps),
                    eps: standard_normal(&mut rng, data.samples[i].n(), d),
                })
                .collect();
            let results = draws
                .par_iter()
                .map(|dr| {
                    let s = &data.samples[dr.sample];
                    let w = cfg.violation_weight.resolve(s.n());
                    sample_grads(s, dr, enc, model, cache.as_ref(), w)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut total: Vec<Vec<Matrix>> = results[0].grads.iter().map(|g| g.iter().map(|m| m.scale(0.0)).collect()).collect();
            for r in &results {
                if !r.parts.total.is_finite() {
                    return Err(Error::Degenerate(format!("joint loss is {} at epoch {}", r.parts.total, epoch + 1)));
                }
                for (acc, g) in total.iter_mut().zip(&r.grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        a.axpy(scale, b);
                    }
                }
                sums.total += r.parts.total;
                sums.mse += r.parts.mse;
                sums.ce += r.parts.ce;
                sums.cv += r.parts.cv;
            }
            let mut stores: Vec<&mut ParamStore> = vec![&mut model.denoiser.store, &mut model.decoder.store];
            if cfg.train_encoders {
                stores.push(&mut enc.ip.store);
                stores.push(&mut enc.sol.store);
            }
            for ((opt, store), g) in opts.iter_mut().zip(stores).zip(&total) {
                opt.step(store, g, lr);
            }
        }
        let k = data.len() as f64;
        curve.rows.push(vec![sums.total / k, sums.mse / k, sums.ce / k, sums.cv / k]);
        log::debug!("diffusion epoch {} total {:.5}", epoch + 1, sums.total / k);
    }
    Ok(curve)
}

/// Descending DDIM time steps: `round(i * T / steps)` for `i = steps..1`,
/// each paired with its predecessor (0 after the last).
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("DDIM steps must be in 1..={total}, got {steps}")));
    }
    let seq: Vec<usize> = (1..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect();
    Ok((0..steps).rev().map(|i| (seq[i], if i == 0 { 0 } else { seq[i - 1] })).collect())
}

/// `sigma` of one DDIM transition for a given `eta`.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, prev: usize, eta: f64) -> f64 {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// Final latent and rounded solution of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub latent: Matrix,
    pub soft: Vec<f64>,
    pub solution: Solution,
}

fn finish(z: Matrix, z_i: &Matrix, model: &DiffusionModel) -> Result<Chain> {
    let soft = decode(&z, z_i, model)?;
    Ok(Chain {
        solution: round_soft(&soft),
        soft,
        latent: z,
    })
}

/// Ancestral sampling over all `T` steps, no guidance.
pub fn sample_ddpm(z_i: &Matrix, model: &DiffusionModel, seed: u64) -> Result<Chain> {
    let sched = &model.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = standard_normal(&mut rng, z_i.rows, z_i.cols);
    for t in (1..=sched.steps()).rev() {
        let f = denoise(&z, z_i, t, model)?;
        let (cz, cf) = sched.posterior_mean_coefs(t);
        let mut mu = z.scale(cz);
        mu.axpy(cf, &f);
        z = if t > 1 {
            let sd = sched.posterior_variance(t).sqrt();
            let noise = standard_normal(&mut rng, z_i.rows, z_i.cols);
            mu.axpy(sd, &noise);
            mu
        } else {
            mu
        };
    }
    finish(z, z_i, model)
}

/// Strided non-Markovian sampling, no guidance.
pub fn sample_ddim(z_i: &Matrix, model: &DiffusionModel, steps: usize, eta: f64, seed: u64) -> Result<Chain> {
    let sched = &model.schedule;
    let plan = ddim_timesteps(sched.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = standard_normal(&mut rng, z_i.rows, z_i.cols);
    for (t, prev) in plan {
        let f = denoise(&z, z_i, t, model)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(prev);
        let eps = z.zip_map(&f, |zv, fv| (zv - ab.sqrt() * fv) / (1.0 - ab).sqrt());
        let sigma = ddim_sigma(sched, t, prev, eta);
        let dir = 1.0 - ab_prev - sigma * sigma;
        if dir < -1e-12 {
            return Err(Error::Config(format!("sigma {sigma} too large at step {t}")));
        }
        let mut next = f.scale(ab_prev.sqrt());
        next.axpy(dir.max(0.0).sqrt(), &eps);
        if sigma > 0.0 {
            let noise = standard_normal(&mut rng, z_i.rows, z_i.cols);
            next.axpy(sigma, &noise);
        }
        z = next;
    }
    finish(z, z_i, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.posterior_mean_coefs(1), (0.0, 1.0));
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn default_schedule_is_monotone() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
        }
        assert_abs_diff_eq!(s.beta(1), 1e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta(1000), 0.02, epsilon = 1e-15);
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let z0 = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let zero = Matrix::zeros(2, 2);
        let eps = Matrix::from_vec(2, 2, vec![0.3, 0.1, -0.2, 0.9]);
        let a = forward_noise(&z0, 4, &zero, &s).unwrap();
        assert!(a.max_abs_diff(&z0.scale(s.alpha_bar(4).sqrt())) < 1e-15);
        let b = forward_noise(&zero, 4, &eps, &s).unwrap();
        assert!(b.max_abs_diff(&eps.scale((1.0 - s.alpha_bar(4)).sqrt())) < 1e-15);
        assert!(forward_noise(&z0, 0, &eps, &s).is_err());
        assert!(forward_noise(&z0, 11, &eps, &s).is_err());
    }

    #[test]
    fn ddim_plan() {
        let plan = ddim_timesteps(200, 50).unwrap();
        assert_eq!(plan.len(), 50);
        assert_eq!(plan[0], (200, 196));
        assert_eq!(plan[49], (4, 0));
        assert_eq!(ddim_timesteps(10, 10).unwrap().last(), Some(&(1, 0)));
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn violation_weight_parsing() {
        assert_eq!("auto".parse::<ViolationWeight>().unwrap().resolve(7), 7.0);
        assert_eq!("0".parse::<ViolationWeight>().unwrap().resolve(7), 0.0);
        assert_eq!("2.5".parse::<ViolationWeight>().unwrap().resolve(7), 2.5);
        assert!("-1".parse::<ViolationWeight>().is_err());
        let w: TrainConfig = toml::from_str("violation_weight = \"per_variable\"").unwrap();
        assert_eq!(w.violation_weight, ViolationWeight::Rule(WeightRule::PerVariable));
        let w: TrainConfig = toml::from_str("violation_weight = 3.0").unwrap();
        assert_eq!(w.violation_weight, ViolationWeight::Value(3.0));
    }

    #[test]
    fn decoder_outputs_are_probabilities() {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let model = DiffusionModel::new(&cfg, &ScheduleConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = standard_normal(&mut rng, 5, 8);
        let zi = standard_normal(&mut rng, 5, 8);
        let x = decode(&z, &zi, &model).unwrap();
        assert!(x.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(denoise(&z, &zi, 17, &model).unwrap().shape(), (5, 8));
        assert!(denoise(&z, &zi.select_rows(&[0, 1]), 17, &model).is_err());
    }

    #[test]
    fn rounding_threshold() {
        assert_eq!(round_soft(&[0.9, 0.1, 0.5]).bits(), &[true, false, false]);
    }
}
