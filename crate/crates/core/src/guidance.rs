//! Constraint/objective guidance energy and the guided samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    constraint_operator, ddim_sigma, ddim_timesteps, decode, denoise, round_soft, sample_ddim, sample_ddpm, standard_normal,
    violation_sum_node, Chain, DiffusionModel,
};
use crate::error::{Error, Result};
use crate::generate::derive_seed;
use crate::ip::{EvalReport, IpInstance, Sense, Solution};
use crate::nn::{Matrix, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Variant::Ddpm),
            "ddim" => Ok(Variant::Ddim),
            _ => Err(Error::Config(format!("unknown sampler `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub variant: Variant,
    /// DDPM must use every schedule step; DDIM strides over them.
    pub steps: usize,
    /// Gradient scale.
    pub s: f64,
    /// Weight of the objective term; `1 - gamma` weights the violation term.
    pub gamma: f64,
    /// DDIM stochasticity; 0 is deterministic given the initial latent.
    pub eta: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            variant: Variant::Ddim,
            steps: 100,
            s: 0.0,
            gamma: 0.5,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("gradient scale {} must be >= 0", self.s)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta {} must be >= 0", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        match self.variant {
            Variant::Ddpm if self.steps != schedule_steps => Err(Error::Config(format!(
                "ancestral sampling runs all {schedule_steps} schedule steps, got steps = {}",
                self.steps
            ))),
            Variant::Ddim if self.steps > schedule_steps => Err(Error::Config(format!(
                "DDIM steps {} exceed schedule length {schedule_steps}",
                self.steps
            ))),
            _ => Ok(()),
        }
    }

    pub fn unguided(&self) -> Self {
        GuidanceConfig { s: 0.0, ..self.clone() }
    }
}

/// Large-scale `(s, gamma)` settings as `(family, variant, s, gamma)`.
pub const LARGE_SCALE_PRESETS: [(&str, Variant, f64, f64); 12] = [
    ("sc-2000", Variant::Ddim, 100_000.0, 0.9),
    ("sc-3000", Variant::Ddim, 150_000.0, 0.9),
    ("sc-4000", Variant::Ddim, 200_000.0, 0.9),
    ("cf", Variant::Ddim, 1_000.0, 0.7),
    ("ca", Variant::Ddim, 20_000.0, 0.7),
    ("is", Variant::Ddim, 20_000.0, 0.5),
    ("sc-2000", Variant::Ddpm, 15_000.0, 0.1),
    ("sc-3000", Variant::Ddpm, 22_500.0, 0.1),
    ("sc-4000", Variant::Ddpm, 30_000.0, 0.1),
    ("cf", Variant::Ddpm, 500_000.0, 0.1),
    ("ca", Variant::Ddpm, 10_000.0, 0.3),
    ("is", Variant::Ddpm, 10_000.0, 0.1),
];

/// Named large-scale preset with the usual step counts (1000 / 100).
pub fn large_scale_preset(name: &str, variant: Variant) -> Option<GuidanceConfig> {
    LARGE_SCALE_PRESETS
        .iter()
        .find(|(n, v, _, _)| *n == name && *v == variant)
        .map(|&(_, variant, s, gamma)| GuidanceConfig {
            variant,
            steps: if variant == Variant::Ddpm { 1000 } else { 100 },
            s,
            gamma,
            ..GuidanceConfig::default()
        })
}

fn require_min(inst: &IpInstance) -> Result<()> {
    if inst.sense() != Sense::Minimize {
        return Err(Error::InvalidInstance("guidance needs the minimization form".into()));
    }
    Ok(())
}

/// Energy and its gradient with respect to `z_t`.
pub fn grad_energy(z_t: &Matrix, z_i: &Matrix, canonical: &IpInstance, gamma: f64, model: &DiffusionModel) -> Result<(f64, Matrix)> {
    require_min(canonical)?;
    if z_t.shape() != z_i.shape() || z_t.rows != canonical.n() {
        return Err(Error::Dimension {
            expected: canonical.n(),
            got: z_t.rows,
        });
    }
    let mut t = Tape::frozen();
    let z = t.input(z_t.clone());
    let zi = t.constant(z_i.clone());
    let logits = model.decoder.logits(&mut t, z, zi);
    let x = t.sigmoid(logits);
    let c = t.constant(Matrix::row_vector(canonical.c().to_vec()));
    let obj = t.matmul(c, x);
    let obj = t.scale(obj, gamma);
    let energy = match violation_sum_node(&mut t, &constraint_operator(canonical), canonical.b(), x) {
        Some(v) => {
            let v = t.scale(v, 1.0 - gamma);
            t.add(v, obj)
        }
        None => obj,
    };
    let value = t.value(energy).item();
    let grad = t.backward(energy).get(z).cloned().unwrap_or_else(|| Matrix::zeros(z_t.rows, z_t.cols));
    Ok((value, grad))
}

/// `(1 - gamma) * sum_k relu(a_k . x - b_k) + gamma * c . x` with `x = decode(z_t)`.
pub fn guidance_energy(z_t: &Matrix, z_i: &Matrix, canonical: &IpInstance, gamma: f64, model: &DiffusionModel) -> Result<f64> {
    require_min(canonical)?;
    let x = decode(z_t, z_i, model)?;
    Ok((1.0 - gamma) * canonical.violation_sum_soft(&x) + gamma * canonical.c().iter().zip(&x).map(|(c, v)| c * v).sum::<f64>())
}

/// Guided ancestral sampling; `cfg.s = 0` reproduces [`sample_ddpm`] exactly.
pub fn sample_ddpm_guided(canonical: &IpInstance, z_i: &Matrix, model: &DiffusionModel, cfg: &GuidanceConfig) -> Result<Chain> {
    require_min(canonical)?;
    let sched = &model.schedule;
    cfg.validate(sched.steps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = standard_normal(&mut rng, z_i.rows, z_i.cols);
    for t in (1..=sched.steps()).rev() {
        let f = denoise(&z, z_i, t, model)?;
        let (cz, cf) = sched.posterior_mean_coefs(t);
        let mut mu = z.scale(cz);
        mu.axpy(cf, &f);
        if cfg.s != 0.0 {
            let (_, g) = grad_energy(&z, z_i, canonical, cfg.gamma, model)?;
            mu.axpy(-cfg.s * sched.posterior_variance(t), &g);
        }
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

/// Guided strided sampling; `cfg.s = 0` reproduces [`sample_ddim`] exactly.
pub fn sample_ddim_guided(canonical: &IpInstance, z_i: &Matrix, model: &DiffusionModel, cfg: &GuidanceConfig) -> Result<Chain> {
    require_min(canonical)?;
    let sched = &model.schedule;
    cfg.validate(sched.steps())?;
    let plan = ddim_timesteps(sched.steps(), cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = standard_normal(&mut rng, z_i.rows, z_i.cols);
    for (t, prev) in plan {
        let f = denoise(&z, z_i, t, model)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(prev);
        let mut eps = z.zip_map(&f, |zv, fv| (zv - ab.sqrt() * fv) / (1.0 - ab).sqrt());
        if cfg.s != 0.0 {
            let (_, g) = grad_energy(&z, z_i, canonical, cfg.gamma, model)?;
            eps.axpy(-cfg.s, &g);
        }
        let sigma = ddim_sigma(sched, t, prev, cfg.eta);
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

fn finish(z: Matrix, z_i: &Matrix, model: &DiffusionModel) -> Result<Chain> {
    let soft = decode(&z, z_i, model)?;
    Ok(Chain {
        solution: round_soft(&soft),
        soft,
        latent: z,
    })
}

/// Runs the configured sampler; unguided configurations use the plain samplers.
pub fn sample_one(canonical: &IpInstance, z_i: &Matrix, model: &DiffusionModel, cfg: &GuidanceConfig) -> Result<Chain> {
    match (cfg.variant, cfg.s == 0.0) {
        (Variant::Ddpm, true) => {
            cfg.validate(model.schedule.steps())?;
            sample_ddpm(z_i, model, cfg.seed)
        }
        (Variant::Ddim, true) => {
            cfg.validate(model.schedule.steps())?;
            sample_ddim(z_i, model, cfg.steps, cfg.eta, cfg.seed)
        }
        (Variant::Ddpm, false) => sample_ddpm_guided(canonical, z_i, model, cfg),
        (Variant::Ddim, false) => sample_ddim_guided(canonical, z_i, model, cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub solution: Solution,
    pub report: EvalReport,
}

/// `count` independent chains with seeds derived from `cfg.seed`; reports
/// use the authored sense of `inst`.
pub fn sample_many(
    inst: &IpInstance,
    z_i: &Matrix,
    model: &DiffusionModel,
    cfg: &GuidanceConfig,
    count: usize,
    reference: Option<f64>,
) -> Result<Vec<SampleRecord>> {
    cfg.validate(model.schedule.steps())?;
    let canonical = inst.canonicalize();
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i);
            let chain = sample_one(&canonical, z_i, model, &GuidanceConfig { seed, ..cfg.clone() })?;
            let report = inst.evaluate(&chain.solution, reference)?;
            Ok(SampleRecord {
                seed,
                solution: chain.solution,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::encoders::ModelConfig;

    fn small_model(steps: usize) -> DiffusionModel {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let sched = ScheduleConfig {
            steps,
            ..ScheduleConfig::default()
        };
        DiffusionModel::new(&cfg, &sched, 9).unwrap()
    }

    fn triangle() -> IpInstance {
        crate::generate::graph_to_is_instance(&[(0, 1), (1, 2), (0, 2)], 3).unwrap().canonicalize()
    }

    #[test]
    fn config_validation() {
        let ok = GuidanceConfig::default();
        assert!(ok.validate(200).is_ok());
        assert!(GuidanceConfig { gamma: 1.5, ..ok.clone() }.validate(200).is_err());
        assert!(GuidanceConfig { s: -1.0, ..ok.clone() }.validate(200).is_err());
        assert!(GuidanceConfig { steps: 0, ..ok.clone() }.validate(200).is_err());
        assert!(GuidanceConfig { steps: 300, ..ok.clone() }.validate(200).is_err());
        let ddpm = GuidanceConfig {
            variant: Variant::Ddpm,
            steps: 200,
            ..ok
        };
        assert!(ddpm.validate(200).is_ok());
        assert!(ddpm.validate(100).is_err());
    }

    #[test]
    fn presets_are_available() {
        let p = large_scale_preset("sc-2000", Variant::Ddim).unwrap();
        assert_eq!((p.s, p.gamma, p.steps), (100_000.0, 0.9, 100));
        let p = large_scale_preset("is", Variant::Ddpm).unwrap();
        assert_eq!((p.s, p.gamma, p.steps), (10_000.0, 0.1, 1000));
        assert!(large_scale_preset("knapsack", Variant::Ddim).is_none());
    }

    #[test]
    fn energy_endpoints() {
        let model = small_model(20);
        let inst = triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = standard_normal(&mut rng, 3, 8);
        let zi = standard_normal(&mut rng, 3, 8);
        let x = decode(&z, &zi, &model).unwrap();
        let obj: f64 = inst.c().iter().zip(&x).map(|(c, v)| c * v).sum();
        let viol = inst.violation_sum_soft(&x);
        assert!((guidance_energy(&z, &zi, &inst, 1.0, &model).unwrap() - obj).abs() < 1e-12);
        assert!((guidance_energy(&z, &zi, &inst, 0.0, &model).unwrap() - viol).abs() < 1e-12);
        let (e, _) = grad_energy(&z, &zi, &inst, 0.3, &model).unwrap();
        assert!((e - guidance_energy(&z, &zi, &inst, 0.3, &model).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn maximization_form_is_rejected() {
        let model = small_model(20);
        let inst = crate::generate::graph_to_is_instance(&[(0, 1)], 2).unwrap();
        let z = Matrix::zeros(2, 8);
        assert!(grad_energy(&z, &z, &inst, 0.5, &model).is_err());
    }

    #[test]
    fn zero_scale_matches_unguided() {
        let model = small_model(30);
        let inst = triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zi = standard_normal(&mut rng, 3, 8);
        let cfg = GuidanceConfig {
            variant: Variant::Ddpm,
            steps: 30,
            seed: 5,
            ..GuidanceConfig::default()
        };
        let a = sample_ddpm_guided(&inst, &zi, &model, &cfg).unwrap();
        let b = sample_ddpm(&zi, &model, 5).unwrap();
        assert_eq!(a, b);
        let cfg = GuidanceConfig {
            variant: Variant::Ddim,
            steps: 10,
            eta: 0.5,
            seed: 6,
            ..GuidanceConfig::default()
        };
        let a = sample_ddim_guided(&inst, &zi, &model, &cfg).unwrap();
        let b = sample_ddim(&zi, &model, 10, 0.5, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_many_edge_cases() {
        let model = small_model(20);
        let inst = crate::generate::graph_to_is_instance(&[(0, 1), (1, 2)], 3).unwrap();
        let zi = Matrix::filled(3, 8, 0.1);
        let cfg = GuidanceConfig {
            steps: 5,
            s: 10.0,
            ..GuidanceConfig::default()
        };
        assert!(sample_many(&inst, &zi, &model, &cfg, 0, None).unwrap().is_empty());
        let recs = sample_many(&inst, &zi, &model, &cfg, 6, None).unwrap();
        assert_eq!(recs.len(), 6);
        for r in &recs {
            assert_eq!(r.report.feasible, inst.is_feasible(&r.solution).unwrap());
        }
    }
}
