use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ipdiff::cisp::{evaluate_alignment, train_cisp, CispConfig, Encoders};
use ipdiff::data::{collect_pools, generate_splits, Dataset, INSTANCE_EXT};
use ipdiff::diffusion::{train_joint, DiffusionModel, ScheduleConfig, TrainConfig, ViolationWeight};
use ipdiff::encoders::ModelConfig;
use ipdiff::eval::{export_histogram, run_ablation, run_partial_complete, run_sampling, tune_guidance};
use ipdiff::featurize::build_bipartite;
use ipdiff::generate::{generate, Family, GeneratorConfig, GraphModel};
use ipdiff::guidance::{large_scale_preset, sample_many, GuidanceConfig, Variant};
use ipdiff::ip::{read_instance, read_mps, write_instance, IpInstance};
use ipdiff::nn::{AdamConfig, Checkpoint};
use ipdiff::oracle::{read_pool, DEFAULT_NODE_LIMIT, DEFAULT_POOL_CAP};
use ipdiff::pipeline::{write_text, Manifest, TrainedModels};
use serde_json::{json, Value};

const MODELS_FILE: &str = "models.ckpt";
const ENCODERS_FILE: &str = "encoders.ckpt";

#[derive(Parser)]
#[command(name = "ipdiff", version, about = "Guided diffusion sampling for 0-1 integer programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate instances (one file, or train/valid/test splits with --count).
    Gen(GenArgs),
    /// Solve every instance in a dataset directory into a solution pool.
    Collect(CollectArgs),
    /// Dump the bipartite features of one instance as JSON.
    Featurize(FeaturizeArgs),
    /// Contrastive pretraining of the instance and solution encoders.
    TrainCisp(TrainCispArgs),
    /// Train the denoiser and decoder on frozen (or jointly trained) encoders.
    TrainDiffusion(TrainDiffusionArgs),
    /// Sample solutions for one instance.
    Sample(SampleArgs),
    /// Sample every instance of a split and report feasibility and gaps.
    Eval(EvalArgs),
    /// Unguided / constraint / objective / combined guidance comparison.
    Ablate(AblateArgs),
    /// Fix a fraction of each sample and complete it exactly.
    Partial(PartialArgs),
    /// Objective values of many samples from one instance, for plotting.
    Hist(HistArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyName {
    Sc,
    Cf,
    Ca,
    Is,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    family: FamilyName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of instances split 8:1:1; without it a single instance is written.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Set cover rows / auction items / facility customers / graph nodes.
    #[arg(long)]
    size: Option<usize>,
    /// Set cover columns / auction bids / facilities / attachment degree.
    #[arg(long)]
    size2: Option<usize>,
    /// Set cover density.
    #[arg(long)]
    density: Option<f64>,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_POOL_CAP)]
    pool: usize,
    #[arg(long, default_value_t = DEFAULT_NODE_LIMIT)]
    node_limit: u64,
}

#[derive(Args)]
struct InstanceArg {
    #[arg(long)]
    inst: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: InstanceFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum InstanceFormat {
    Text,
    Mps,
}

impl InstanceArg {
    fn load(&self) -> ipdiff::Result<IpInstance> {
        match self.format {
            InstanceFormat::Text => read_instance(&self.inst),
            InstanceFormat::Mps => read_mps(&self.inst),
        }
    }
}

#[derive(Args)]
struct FeaturizeArgs {
    #[command(flatten)]
    inst: InstanceArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Raised automatically to the largest instance in the data.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
}

impl ModelArgs {
    fn resolve(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            max_len: self.max_len.max(data.max_n()),
            ..ModelConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainCommon {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCispArgs {
    #[command(flatten)]
    common: TrainCommon,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Pretrained encoders (file or directory); fresh encoders when omitted.
    #[arg(long)]
    cisp: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Constraint-violation weight: `auto` (per-variable) or a real >= 0.
    #[arg(long, default_value = "0")]
    lambda: ViolationWeight,
    /// Diffusion length.
    #[arg(long, default_value_t = 1000)]
    timesteps: usize,
    #[arg(long)]
    train_encoders: bool,
}

#[derive(Args, Clone)]
struct GuidanceArgs {
    #[arg(long, value_enum, default_value = "ddim")]
    variant: VariantArg,
    /// Sampling steps; defaults to the full schedule for ddpm and 100 for ddim.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    s: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Named large-scale (s, gamma) preset such as `sc-2000` or `is`; overrides --s/--gamma.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Ddpm,
    Ddim,
}

impl GuidanceArgs {
    fn resolve(&self, schedule_steps: usize) -> anyhow::Result<GuidanceConfig> {
        let variant = match self.variant {
            VariantArg::Ddpm => Variant::Ddpm,
            VariantArg::Ddim => Variant::Ddim,
        };
        let (s, gamma) = match &self.preset {
            Some(name) => {
                let p = large_scale_preset(name, variant).with_context(|| format!("unknown preset `{name}`"))?;
                (p.s, p.gamma)
            }
            None => (self.s, self.gamma),
        };
        let steps = self.steps.unwrap_or(match variant {
            Variant::Ddpm => schedule_steps,
            Variant::Ddim => schedule_steps.min(100),
        });
        let cfg = GuidanceConfig {
            variant,
            steps,
            s,
            gamma,
            eta: self.eta,
            seed: self.seed,
        };
        cfg.validate(schedule_steps)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    inst: InstanceArg,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long, default_value_t = 30)]
    count: usize,
    /// Pool file whose best entry is used as the gap reference.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long, default_value_t = 30)]
    count: usize,
    /// Grid-search s and gamma on the train split first; overrides --s/--gamma.
    #[arg(long)]
    tune: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,3,10,30")]
    tune_scales: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3")]
    tune_gammas: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    tune_samples: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Models trained without contrastive pretraining; the column is left empty without it.
    #[arg(long)]
    no_cisp_ckpt: Option<PathBuf>,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long, default_value_t = 30)]
    count: usize,
}

#[derive(Args)]
struct PartialArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 0.2)]
    proportion: f64,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long, default_value_t = 30)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_NODE_LIMIT)]
    node_limit: u64,
}

#[derive(Args)]
struct HistArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Position of the instance in the sorted split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long, default_value_t = 1000)]
    count: usize,
}

fn family_of(args: &GenArgs) -> Family {
    match args.family {
        FamilyName::Sc => {
            let desk = Family::desk_set_cover();
            let Family::SetCover { rows, cols, density } = desk else { unreachable!() };
            Family::SetCover {
                rows: args.size.unwrap_or(rows),
                cols: args.size2.unwrap_or(cols),
                density: args.density.unwrap_or(density),
            }
        }
        FamilyName::Cf => Family::CapFacility {
            customers: args.size.unwrap_or(10),
            facilities: args.size2.unwrap_or(5),
            ratio: 5.0,
        },
        FamilyName::Ca => Family::CombAuction {
            items: args.size.unwrap_or(20),
            bids: args.size2.unwrap_or(30),
        },
        FamilyName::Is => Family::IndepSet {
            nodes: args.size.unwrap_or(20),
            graph: GraphModel::BarabasiAlbert {
                affinity: args.size2.unwrap_or(2),
            },
        },
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn finish(command: &str, config: Value, dir: &Path, artifacts: Vec<PathBuf>) -> anyhow::Result<()> {
    let mut m = Manifest::new(command, config);
    m.artifacts = artifacts;
    let path = m.write(dir)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn resolve_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn load_models(path: &Path) -> anyhow::Result<TrainedModels> {
    Ok(TrainedModels::load(resolve_file(path, MODELS_FILE))?)
}

fn load_split(data: &Path, split: &str) -> anyhow::Result<Dataset> {
    let set = Dataset::load_split(data, split)?;
    set.require_pools()?;
    Ok(set)
}

fn optimizer(common: &TrainCommon) -> AdamConfig {
    AdamConfig {
        lr: common.lr,
        ..AdamConfig::default()
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let family = family_of(&args);
            let config = json!({ "family": family, "seed": args.seed, "count": args.count });
            let artifacts = match args.count {
                Some(total) => generate_splits(&family, total, args.seed, &args.out)?,
                None => {
                    let inst = generate(&GeneratorConfig::new(family, args.seed))?;
                    let path = args.out.join(inst.name()).with_extension(INSTANCE_EXT);
                    fs::create_dir_all(&args.out)?;
                    write_instance(&inst, &path)?;
                    vec![path]
                }
            };
            println!("wrote {} instance(s) under {}", artifacts.len(), args.out.display());
            finish("gen", config, &args.out, artifacts)
        }
        Command::Collect(args) => {
            let solved = collect_pools(&args.data, args.pool, args.node_limit)?;
            println!("solved {solved} instance(s)");
            let config = json!({ "pool_cap": args.pool, "node_limit": args.node_limit });
            finish("collect", config, &args.data, Vec::new())
        }
        Command::Featurize(args) => {
            let graph = build_bipartite(&args.inst.load()?)?;
            write_json(&args.out, &graph)?;
            Ok(())
        }
        Command::TrainCisp(args) => {
            let c = &args.common;
            let train = load_split(&c.data, "train")?;
            let model = args.model.resolve(&train);
            let cfg = CispConfig {
                epochs: c.epochs,
                batch_size: c.batch_size.unwrap_or(CispConfig::default().batch_size),
                seed: c.seed,
                optimizer: optimizer(c),
            };
            let mut enc = Encoders::new(&model, c.seed)?;
            let curve = train_cisp(&train, &mut enc, &cfg)?;
            let ckpt = c.out.join(ENCODERS_FILE);
            TrainedModels::encoder_checkpoint(&enc).save(&ckpt)?;
            let loss = c.out.join("cisp_loss.csv");
            write_text(&loss, &curve.to_csv())?;
            let mut artifacts = vec![ckpt, loss];
            if let Ok(valid) = load_split(&c.data, "valid") {
                let sim = evaluate_alignment(&valid, &enc)?;
                let path = c.out.join("alignment.json");
                write_json(
                    &path,
                    &json!({ "diagonal_dominance": sim.diagonal_dominance(), "diagonal_ranks": sim.diagonal_ranks() }),
                )?;
                println!("validation diagonal dominance {:.3}", sim.diagonal_dominance());
                artifacts.push(path);
            }
            finish("train-cisp", json!({ "model": model, "cisp": cfg }), &c.out, artifacts)
        }
        Command::TrainDiffusion(args) => {
            let c = &args.common;
            let train = load_split(&c.data, "train")?;
            let mut encoders = match &args.cisp {
                Some(p) => TrainedModels::load_encoders(&Checkpoint::load(resolve_file(p, ENCODERS_FILE))?)?,
                None => Encoders::new(&args.model.resolve(&train), c.seed)?,
            };
            if encoders.config.max_len < train.max_n() {
                bail!("encoders handle {} variables but the data needs {}", encoders.config.max_len, train.max_n());
            }
            let schedule = ScheduleConfig {
                steps: args.timesteps,
                ..ScheduleConfig::default()
            };
            let cfg = TrainConfig {
                epochs: c.epochs,
                batch_size: c.batch_size.unwrap_or(TrainConfig::default().batch_size),
                violation_weight: args.lambda,
                train_encoders: args.train_encoders,
                seed: c.seed,
                optimizer: optimizer(c),
            };
            let mut diffusion = DiffusionModel::new(&encoders.config, &schedule, c.seed.wrapping_add(1))?;
            let curve = train_joint(&train, &mut encoders, &mut diffusion, &cfg)?;
            let models = TrainedModels { encoders, diffusion };
            let ckpt = c.out.join(MODELS_FILE);
            models.save(&ckpt)?;
            let loss = c.out.join("diffusion_loss.csv");
            write_text(&loss, &curve.to_csv())?;
            let config = json!({ "model": models.encoders.config, "schedule": schedule, "train": cfg, "cisp": args.cisp });
            finish("train-diffusion", config, &c.out, vec![ckpt, loss])
        }
        Command::Sample(args) => {
            let inst = args.inst.load()?;
            let models = load_models(&args.ckpt)?;
            let cfg = args.guidance.resolve(models.diffusion.schedule.steps())?;
            let reference = match &args.reference {
                Some(p) => read_pool(p)?.best().map(|e| e.objective),
                None => None,
            };
            let z_i = models.embed_instance(&inst)?;
            let records = sample_many(&inst, &z_i, &models.diffusion, &cfg, args.count, reference)?;
            let feasible = records.iter().filter(|r| r.report.feasible).count();
            println!("{feasible}/{} feasible", records.len());
            let path = args.out.join("samples.json");
            write_json(&path, &records)?;
            finish("sample", json!({ "guidance": cfg, "count": args.count }), &args.out, vec![path])
        }
        Command::Eval(args) => {
            let sp = &args.split;
            let data = load_split(&sp.data, &sp.split)?;
            let models = load_models(&sp.ckpt)?;
            let mut cfg = args.guidance.resolve(models.diffusion.schedule.steps())?;
            let mut artifacts = Vec::new();
            if args.tune {
                let train = load_split(&sp.data, "train")?;
                let tuned = tune_guidance(&train, &models, &cfg, &args.tune_scales, &args.tune_gammas, args.tune_samples)?;
                let path = sp.out.join("tuning.json");
                write_json(&path, &tuned)?;
                artifacts.push(path);
                cfg = tuned.best;
            }
            let guided = run_sampling(&data, &models, &cfg, args.count, "guided")?;
            let unguided = run_sampling(&data, &models, &cfg.unguided(), args.count, "unguided")?;
            println!(
                "guided feasible {:.3} gap {:?} | unguided feasible {:.3}",
                guided.feasible_ratio, guided.mean_gap, unguided.feasible_ratio
            );
            let path = sp.out.join("report.json");
            write_json(&path, &json!({ "guided": guided, "unguided": unguided }))?;
            artifacts.push(path);
            finish("eval", json!({ "guidance": cfg, "count": args.count, "split": sp.split }), &sp.out, artifacts)
        }
        Command::Ablate(args) => {
            let sp = &args.split;
            let data = load_split(&sp.data, &sp.split)?;
            let models = load_models(&sp.ckpt)?;
            let cfg = args.guidance.resolve(models.diffusion.schedule.steps())?;
            let no_cisp = match &args.no_cisp_ckpt {
                Some(p) => match load_models(p) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        log::warn!("no-pretraining checkpoint unavailable, column left empty: {e:#}");
                        None
                    }
                },
                None => None,
            };
            let table = run_ablation(&data, &models, no_cisp.as_ref(), &cfg, args.count)?;
            let csv = sp.out.join("ablation.csv");
            write_text(&csv, &table.to_csv())?;
            print!("{}", table.to_csv());
            let json_path = sp.out.join("ablation.json");
            write_json(&json_path, &table)?;
            finish("ablate", json!({ "guidance": cfg, "count": args.count }), &sp.out, vec![csv, json_path])
        }
        Command::Partial(args) => {
            let sp = &args.split;
            let data = load_split(&sp.data, &sp.split)?;
            let models = load_models(&sp.ckpt)?;
            let cfg = args.guidance.resolve(models.diffusion.schedule.steps())?;
            let report = run_partial_complete(&data, &models, args.proportion, &cfg, args.count, args.node_limit)?;
            println!(
                "partial+complete gap {:?} feasible {:.3} | direct gap {:?} feasible {:.3}",
                report.completed.mean_gap, report.completed.feasible_ratio, report.direct.mean_gap, report.direct.feasible_ratio
            );
            let path = sp.out.join("partial.json");
            write_json(&path, &report)?;
            let config = json!({ "guidance": cfg, "proportion": args.proportion, "count": args.count });
            finish("partial", config, &sp.out, vec![path])
        }
        Command::Hist(args) => {
            let sp = &args.split;
            let data = load_split(&sp.data, &sp.split)?;
            let sample = data
                .samples
                .get(args.index)
                .with_context(|| format!("split has {} instances, index {} requested", data.len(), args.index))?;
            let models = load_models(&sp.ckpt)?;
            let cfg = args.guidance.resolve(models.diffusion.schedule.steps())?;
            let hist = export_histogram(sample, &models, &cfg, args.count)?;
            let path = sp.out.join("histogram.csv");
            write_text(&path, &hist.to_csv())?;
            println!("{} feasible of {} samples", hist.objectives.len(), hist.sample_count);
            let config = json!({ "guidance": cfg, "count": args.count, "instance": sample.inst.name() });
            finish("hist", config, &sp.out, vec![path])
        }
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<ipdiff::Error>() {
        e.category()
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "usage"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their cause in the message
            match e.downcast_ref::<ipdiff::Error>() {
                Some(inner) => eprintln!("error[{}]: {inner}", category(&e)),
                None => eprintln!("error[{}]: {e:#}", category(&e)),
            }
            ExitCode::from(2)
        }
    }
}
