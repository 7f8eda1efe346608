use super::batch::task_viable;
use super::*;
use crate::datagen::{generate_tile, MapTask};
use crate::geometry::default_band_registry;

fn small_run(seed: u64, steps: usize) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.model = ModelConfig::micro();
    cfg.train.steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.stats_tiles = 2;
    cfg.budget.max_tokens = 48;
    cfg.budget.ground_cover_max_m = 1280.0;
    cfg
}

fn small_batch(seed: u64) -> (RunConfig, Batch) {
    let cfg = small_run(seed, 1);
    let reg = default_band_registry();
    let mut rng = seeded(seed);
    let stats = reference_stats(2, &cfg.budget, &mut rng).unwrap();
    let data = DataConfig { budget: cfg.budget.clone(), mask_ratio: 0.5, sets: 2 };
    let batch = sample_batch(2, 2, &reg, &data, &cfg.model, &stats, &mut rng).unwrap();
    (cfg, batch)
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let mut p = ParamStore { tensors: [("x.w".to_string(), Tensor::full(&[1, 3], 2.0))].into() };
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    for _ in 0..500 {
        let x = p.get("x.w").unwrap().clone();
        let grad = x.map(|v| 2.0 * (v - 0.5));
        opt.step(&mut p, &[grad], 0.05);
    }
    assert!(p.get("x.w").unwrap().data().iter().all(|v| (v - 0.5).abs() < 1e-3));
}

#[test]
fn weight_decay_only_touches_matrices() {
    let mut p = ParamStore {
        tensors: [("a.w".to_string(), Tensor::full(&[1, 1], 1.0)), ("a.b".to_string(), Tensor::full(&[1, 1], 1.0))].into(),
    };
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
    opt.step(&mut p, &[Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])], 0.1);
    assert!((p.get("a.w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    assert_eq!(p.get("a.b").unwrap().data()[0], 1.0);
}

#[test]
fn prepared_targets_are_consistent() {
    let (_, batch) = small_batch(3);
    for s in &batch.samples {
        assert!(s.masked_flags().iter().any(|&m| !m));
        for (gp, gt) in s.plan.groups.iter().zip(&s.groups) {
            assert_eq!(gt.recon.shape(), &[gt.masked.len() * gt.channels, gp.patch_px * gp.patch_px]);
            assert_eq!(gt.mosaic.shape()[0], gp.grid_rows() * gp.patch_px);
            for m in &gt.maps {
                assert!(task_viable(gp.group_id, m.target));
                assert!((4..=32).contains(&m.side));
                match m.target {
                    HeadTarget::Dem => assert_eq!(m.values.as_ref().unwrap().shape(), &[gp.token_count, 2 * m.side * m.side]),
                    HeadTarget::Class(task) => {
                        assert_eq!(m.labels.len(), gp.token_count * m.side * m.side);
                        assert!(m.labels.iter().all(|&l| l < task.n_classes()));
                        for h in &m.histograms {
                            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
    assert_eq!(batch.labels, vec![0, 1]);
}

#[test]
fn viability_table() {
    for id in 1..=5 {
        assert!(task_viable(id, HeadTarget::Class(MapTask::WorldCover)));
        assert!(task_viable(id, HeadTarget::Dem));
        assert!(!task_viable(id, HeadTarget::Class(MapTask::Mcd)));
    }
    assert!(task_viable(7, HeadTarget::Class(MapTask::GlobCover)));
    assert!(task_viable(10, HeadTarget::Class(MapTask::Mcd)));
    assert!(!task_viable(10, HeadTarget::Dem));
}

#[test]
fn sar_groups_are_multilooked_onto_the_ladder() {
    let reg = default_band_registry();
    let tile = generate_tile(4, 2400.0).unwrap();
    let mut rng = seeded(1);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..40 {
        let (groups, images) = batch::sample_group_images(&tile, &reg, &mut rng).unwrap();
        for (g, img) in groups.iter().zip(&images) {
            assert_eq!(g.gsd_m, img.gsd_m);
            assert_eq!(img.image.shape()[0], crate::geometry::pixels_for(2400.0, g.gsd_m));
            if g.id == 4 {
                assert!(crate::geometry::MULTILOOK_LADDER.contains(&g.gsd_m));
                seen.insert(g.gsd_m as u32);
            } else if g.id == 1 {
                assert_eq!(g.gsd_m, 10.0);
            }
        }
    }
    assert!(seen.len() > 3);
}

#[test]
fn forward_is_deterministic_and_finite() {
    let (cfg, batch) = small_batch(5);
    let params = ParamStore::init(&cfg.model, &default_band_registry(), 2).unwrap();
    let (r1, g1) = loss_and_grads(&params, &cfg.model, &batch, &cfg.weights, 0.1).unwrap();
    let (r2, g2) = loss_and_grads(&params, &cfg.model, &batch, &cfg.weights, 0.1).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(g1, g2);
    assert!(r1.total.is_finite() && r1.total > 0.0);
    assert!(r1.get(Term::Mae).is_some());
    assert!(r1.get(Term::Era5).is_some());
    assert!(g1.iter().all(Tensor::is_finite));
}

#[test]
fn checkpoint_reload_reproduces_forward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(6, 2);
    let out = train_toy(&cfg, dir.path()).unwrap();
    let (mcfg, loaded) = ParamStore::load(&out.checkpoint_path).unwrap();
    assert_eq!(mcfg, cfg.model);
    assert_eq!(loaded, out.params);
    let (_, batch) = small_batch(7);
    let a = loss_and_grads(&out.params, &mcfg, &batch, &cfg.weights, 0.1).unwrap().0;
    let b = loss_and_grads(&loaded, &mcfg, &batch, &cfg.weights, 0.1).unwrap().0;
    assert_eq!(a, b);
    assert!(dir.path().join("run.ini").exists());
    assert!(dir.path().join("model.ckpt.cfg").exists());
}

#[test]
fn training_csv_is_reproducible() {
    let cfg = small_run(8, 3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_toy(&cfg, a.path()).unwrap();
    train_toy(&cfg, b.path()).unwrap();
    let ca = fs::read_to_string(a.path().join("losses.csv")).unwrap();
    let cb = fs::read_to_string(b.path().join("losses.csv")).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(ca.lines().count(), 4);
    assert_eq!(RunConfig::load(&a.path().join("run.ini")).unwrap(), cfg);
}
