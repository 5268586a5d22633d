use trajpool_core::config::DatasetConfig;
use trajpool_core::dataset::{Scene, TrackPoint};
use trajpool_core::evaluation::PersistencePredictor;
use trajpool_core::model::{read_checkpoint, Variant};
use trajpool_core::pipeline::{evaluate_on, run_loo, training_data, LooPlan, PipelineConfig, PreparedScene};
use trajpool_core::synthetic::{constant_velocity_scene, write_dataset, WalkerSpec};
use trajpool_core::training::Trainer;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.model.hidden = 12;
    cfg.model.embed = 6;
    cfg.model.social_size = 2;
    cfg.model.nav_size = 4;
    cfg.model.sem_size = 2;
    cfg.subsample = 0.2;
    cfg.train.epochs = 2;
    cfg
}

fn prepared(dir: &std::path::Path, names: &[&str], cfg: &PipelineConfig) -> Vec<PreparedScene> {
    let spec = WalkerSpec {
        pedestrians: 8,
        frames: 60,
        ..WalkerSpec::default()
    };
    let scenes: Vec<Scene> = names.iter().enumerate().map(|(i, n)| constant_velocity_scene(n, &spec, i as u64)).collect();
    let path = write_dataset(dir, &scenes.iter().collect::<Vec<_>>()).unwrap();
    let dataset = DatasetConfig::load(&path).unwrap();
    dataset
        .load_all(cfg.map_cell)
        .unwrap()
        .into_iter()
        .map(|l| PreparedScene::new(l, cfg).unwrap())
        .collect()
}

#[test]
fn leave_one_out_over_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let scenes = prepared(&dir.path().join("data"), &["A", "B", "C"], &cfg);
    let variants = [Variant::Vanilla, Variant::SNS];
    let plan = LooPlan {
        held_out: None,
        variants: &variants,
    };
    let out = dir.path().join("out");
    let results = run_loo(&scenes, &plan, &cfg, Some(&out)).unwrap();
    assert_eq!(results.len(), 6);
    for r in &results {
        assert!(r.ade.is_finite() && r.fde.is_finite() && r.n_peds > 0, "{r:?}");
        assert!(["vanilla", "sns"].contains(&r.variant.as_str()));
    }
    assert!(out.join("report.txt").exists() && out.join("c/sns/model.ckpt").exists());
    // same inputs, same numbers
    let again = run_loo(&scenes, &plan, &cfg, None).unwrap();
    for (a, b) in results.iter().zip(&again) {
        assert_eq!((a.ade, a.fde), (b.ade, b.fde));
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    let scenes = prepared(&dir.path().join("data"), &["A", "B"], &cfg);
    let refs: Vec<&PreparedScene> = scenes.iter().collect();
    let data = training_data(&refs, &cfg);
    let init = trajpool_core::model::ModelParams::init(cfg.model.clone(), cfg.train.seed);

    let mut straight = Trainer::new(init.clone(), cfg.train.clone()).unwrap();
    straight.fit(&data, None).unwrap();

    cfg.train.epochs = 1;
    let first_dir = dir.path().join("first");
    std::fs::create_dir_all(&first_dir).unwrap();
    Trainer::new(init, cfg.train.clone()).unwrap().fit(&data, Some(&first_dir)).unwrap();
    cfg.train.epochs = 2;
    let mut resumed = Trainer::resume(read_checkpoint(&first_dir.join("last.ckpt")).unwrap(), cfg.train.clone()).unwrap();
    resumed.fit(&data, None).unwrap();

    assert_eq!(resumed.epoch, 2);
    assert_eq!(resumed.params, straight.params);
}

#[test]
fn persistence_baseline_is_exact_on_stationary_walkers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let points: Vec<TrackPoint> = (0..5)
        .flat_map(|ped| {
            (0..40).map(move |f| TrackPoint {
                frame: f * 10,
                ped,
                x: ped as f64,
                y: 2.0 * ped as f64,
            })
        })
        .collect();
    let scene = Scene::from_points("still", &points, 0.4).unwrap();
    let path = write_dataset(dir.path(), &[&scene]).unwrap();
    let loaded = DatasetConfig::load(&path).unwrap().load_all(cfg.map_cell).unwrap().remove(0);
    let prepared = PreparedScene::new(loaded, &cfg).unwrap();
    let r = evaluate_on(&prepared, &PersistencePredictor, "persistence", &cfg).unwrap();
    assert!(r.n_windows > 0);
    assert_eq!((r.ade, r.fde), (0.0, 0.0));
}
