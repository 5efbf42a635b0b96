use hvpr::config::{DataSource, RunConfig, SynthJob};
use hvpr::pipeline::{
    load_kitti_dir, run_eval, run_infer, run_train, synthetic_scenes, write_kitti_dir,
};
use hvpr::scene::SceneSpec;
use tempfile::TempDir;

fn small_job() -> SynthJob {
    SynthJob {
        num_scenes: 3,
        scene: SceneSpec {
            num_objects: 2,
            seed: 9,
            ..SceneSpec::default()
        },
    }
}

#[test]
fn kitti_directory_round_trip() {
    let tmp = TempDir::new().unwrap();
    let scenes = synthetic_scenes(&small_job()).unwrap();
    write_kitti_dir(tmp.path(), &scenes).unwrap();
    let back = load_kitti_dir(tmp.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.cloud.len(), b.cloud.len());
        // velodyne stores f32
        for (p, q) in a.cloud.points.iter().zip(&b.cloud.points) {
            assert!((0..4).all(|k| (p[k] - q[k]).abs() <= 1e-5 * p[k].abs().max(1.0)));
        }
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (g, h) in a.boxes.iter().zip(&b.boxes) {
            let (g, h) = (g.bbox.to_array(), h.bbox.to_array());
            assert!((0..7).all(|k| (g[k] - h[k]).abs() < 1e-6), "{g:?} vs {h:?}");
        }
    }
}

#[test]
fn checkpoint_reproduces_training_detections() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::desk();
    cfg.optim.max_steps = Some(3);
    cfg.data = DataSource::Synthetic {
        num_scenes: 4,
        scene: small_job().scene,
    };
    let outcome = run_train(&cfg, Some(tmp.path())).unwrap();
    let log = std::fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let bytes = std::fs::read(tmp.path().join("final.ckpt")).unwrap();
    assert_eq!(bytes, outcome.checkpoint_bytes());
    let scenes = synthetic_scenes(&small_job()).unwrap();
    for s in &scenes {
        let direct = outcome.detector.detect(&outcome.store, &s.cloud).unwrap();
        let loaded = run_infer(&bytes, &s.cloud).unwrap();
        assert_eq!(direct.len(), loaded.len());
        for (a, b) in direct.iter().zip(&loaded) {
            assert_eq!(
                a.bbox.to_array().map(f64::to_bits),
                b.bbox.to_array().map(f64::to_bits)
            );
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    write_kitti_dir(&tmp.path().join("data"), &scenes).unwrap();
    let report = run_eval(&bytes, &tmp.path().join("data")).unwrap();
    assert_eq!(report.num_gt, 6);
    assert_eq!(report.precision.len(), 40);
}

#[test]
fn config_toml_round_trip() {
    for cfg in [RunConfig::desk(), RunConfig::full()] {
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
    let job = small_job();
    assert_eq!(SynthJob::from_toml(&job.to_toml()).unwrap(), job);
}

#[test]
fn invalid_configs_rejected() {
    assert!(RunConfig::from_toml("[model]\nk = 500\n").is_err());
    assert!(RunConfig::from_toml("profile = \"nope\"\n").is_err());
    assert!(RunConfig::from_toml("[optim]\nlearning_rate = 1.0\n").is_err());
}
