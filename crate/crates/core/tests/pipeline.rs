use ipdiff::cisp::{train_cisp, CispConfig};
use ipdiff::data::{build_dataset, Dataset};
use ipdiff::diffusion::{train_joint, ScheduleConfig, TrainConfig};
use ipdiff::encoders::ModelConfig;
use ipdiff::eval::{export_histogram, run_ablation, run_partial_complete, run_sampling, ABLATION_COLUMNS};
use ipdiff::generate::Family;
use ipdiff::guidance::{GuidanceConfig, Variant};
use ipdiff::pipeline::TrainedModels;

fn tiny_models(data: &Dataset) -> TrainedModels {
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        max_len: 32,
        ..ModelConfig::default()
    };
    let sched = ScheduleConfig {
        steps: 20,
        ..ScheduleConfig::default()
    };
    let mut m = TrainedModels::new(&cfg, &sched, 1).unwrap();
    let cisp = CispConfig {
        epochs: 3,
        batch_size: 4,
        ..CispConfig::default()
    };
    train_cisp(data, &mut m.encoders, &cisp).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train_joint(data, &mut m.encoders, &mut m.diffusion, &tc).unwrap();
    m
}

fn guided() -> GuidanceConfig {
    GuidanceConfig {
        variant: Variant::Ddim,
        steps: 5,
        s: 2.0,
        gamma: 0.2,
        seed: 4,
        ..GuidanceConfig::default()
    }
}

#[test]
fn checkpoints_reproduce_samples() {
    let data = build_dataset(&[Family::desk_set_cover()], 6, 3, 5, 1_000_000).unwrap();
    let models = tiny_models(&data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("models.ckpt");
    models.save(&path).unwrap();
    let back = TrainedModels::load(&path).unwrap();
    let a = run_sampling(&data, &models, &guided(), 4, "a").unwrap();
    let b = run_sampling(&data, &back, &guided(), 4, "b").unwrap();
    for (x, y) in a.instances.iter().zip(&b.instances) {
        assert_eq!(x.objectives, y.objectives);
    }
}

#[test]
fn ablation_unguided_column_is_zero_scale() {
    let data = build_dataset(&[Family::desk_indep_set(10)], 4, 5, 5, 1_000_000).unwrap();
    let models = tiny_models(&data);
    let table = run_ablation(&data, &models, None, &guided(), 3).unwrap();
    assert_eq!(table.cells.len(), ABLATION_COLUMNS.len());
    assert!(table.get("ip_guided_no_pretraining").is_none());
    let zero = GuidanceConfig { s: 0.0, ..guided() };
    let direct = run_sampling(&data, &models, &zero, 3, "s0").unwrap();
    let unguided = table.get("unguided").unwrap();
    for (x, y) in unguided.instances.iter().zip(&direct.instances) {
        assert_eq!(x.objectives, y.objectives);
    }
}

#[test]
fn histogram_and_partial_reports_are_consistent() {
    let data = build_dataset(&[Family::desk_set_cover()], 3, 9, 5, 1_000_000).unwrap();
    let models = tiny_models(&data);
    let hist = export_histogram(&data.samples[0], &models, &guided(), 20).unwrap();
    let opt = hist.optimum.unwrap();
    assert!(hist.objectives.iter().all(|&o| o >= opt - 1e-9));
    assert_eq!(hist.to_csv().lines().count(), hist.objectives.len() + 1);
    assert_eq!(hist.to_csv(), export_histogram(&data.samples[0], &models, &guided(), 20).unwrap().to_csv());

    let r = run_partial_complete(&data, &models, 0.2, &guided(), 4, 1_000_000).unwrap();
    assert_eq!(r.completed.sample_count, 12);
    assert_eq!(r.direct.sample_count, 12);
    assert!(r.completed.feasible_ratio >= r.direct.feasible_ratio);
}
