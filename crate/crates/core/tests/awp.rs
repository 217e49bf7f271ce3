use grace_core::awp::{
    allocate_ranks, assign_radii, awp_ascend, curvature_proxy, project_awp, AscentConfig,
    AwpBranch, AwpConfig, CurvatureState,
};
use grace_core::data::Batch;
use grace_core::model::{cross_entropy, EncoderModel, ModelConfig};
use grace_core::rng::{normal_matrix, rng_for};
use grace_core::trainer::{Mode, TrainConfig, Trainer};
use grace_core::DenseMatrix;
use proptest::prelude::*;
use rand::Rng;

fn batch(seed: u64, n: usize, cfg: &ModelConfig) -> Batch {
    let mut rng = rng_for(seed, "awp-test/batch");
    let x = normal_matrix(&mut rng, n, cfg.input_dim, 1.0);
    let labels = (0..n)
        .map(|_| rng.random_range(0..cfg.num_classes))
        .collect();
    Batch::new(x, labels).unwrap()
}

/// Loss of the model's current perturbed weights, recomputed from scratch.
fn perturbed_loss(model: &EncoderModel, b: &Batch) -> f64 {
    let f = model.features(&b.inputs, true).unwrap();
    let logits = f
        .matmul(&model.class_head.transpose().scale(model.logit_scale))
        .unwrap();
    cross_entropy(&logits, &b.labels).unwrap()
}

#[test]
fn ascent_property_on_100_random_steps() {
    let cfg = ModelConfig::default();
    let mut halvings = 0;
    for step in 0..100u64 {
        let mut rng = rng_for(step, "awp-test/config");
        let mut model = EncoderModel::init(&cfg, step % 7).unwrap();
        for l in &mut model.layers {
            l.b = normal_matrix(&mut rng, l.b.rows(), l.b.cols(), 0.05);
            let r = rng.random_range(0..=l.awp.r_max());
            l.awp.set_active_rank(r);
        }
        let b = batch(step, 32, &cfg);
        // Step sizes from tiny to far beyond the radius exercise halving.
        let ascent = AscentConfig {
            inner_steps: rng.random_range(1..=4),
            lr_rel: [0.01, 0.1, 1.0, 5.0][rng.random_range(0..4)],
            init_rel: rng.random_range(0.0..1.0),
        };
        assign_radii(&mut model, [0.01, 0.05, 0.5][rng.random_range(0..3)]);
        let clean = model.loss(&b).unwrap();
        let report = awp_ascend(&mut model, &b, &ascent, &mut rng).unwrap();
        halvings += report.halvings;
        // Zero B_awp at entry leaves the clean loss in place.
        assert!((report.loss_entry - clean).abs() < 1e-12);
        assert!(report.loss_exit >= report.loss_entry - 1e-9, "step {step}");
        let mut prev = report.loss_entry;
        for &l in &report.step_losses {
            if l >= prev {
                prev = l;
            }
        }
        assert_eq!(prev, report.loss_exit);
        assert!((perturbed_loss(&model, &b) - report.loss_exit).abs() < 1e-9);
        for l in &model.layers {
            assert!(
                l.awp.combined_norm() <= l.awp.rho,
                "{} > {}",
                l.awp.combined_norm(),
                l.awp.rho
            );
            let r = l.awp.active_rank;
            assert!(l.awp.a.data()[r * l.awp.a.cols()..]
                .iter()
                .all(|&v| v == 0.0));
            for row in 0..l.awp.b.rows() {
                assert!(l.awp.b.row(row)[r..].iter().all(|&v| v == 0.0));
            }
        }
    }
    assert!(
        halvings > 0,
        "no step needed halving; the large-step cases are vacuous"
    );
}

#[test]
fn ascent_rejects_nonzero_entry_branch() {
    let cfg = ModelConfig::default();
    let mut model = EncoderModel::init(&cfg, 0).unwrap();
    assign_radii(&mut model, 0.05);
    model.layers[0].awp.a.set(0, 0, 1e-3);
    let b = batch(0, 8, &cfg);
    let ascent = AscentConfig::from(&AwpConfig::default());
    assert!(awp_ascend(&mut model, &b, &ascent, &mut rng_for(0, "r")).is_err());
}

#[test]
fn rank_mask_zeros_are_exact() {
    let mut rng = rng_for(3, "mask");
    for r in 0..=4 {
        let mut br = AwpBranch::new(6, 5, 4);
        br.a = normal_matrix(&mut rng, 4, 5, 1.0);
        br.b = normal_matrix(&mut rng, 6, 4, 1.0);
        br.set_active_rank(r);
        for i in 0..4 {
            let row_zero = br.a.row(i).iter().all(|&v| v == 0.0);
            let col_zero = (0..6).all(|k| br.b.get(k, i) == 0.0);
            assert_eq!(row_zero, i >= r);
            assert_eq!(col_zero, i >= r);
        }
        // Only the active block contributes to B A.
        let mut manual = DenseMatrix::zeros(6, 5);
        for k in 0..r {
            for i in 0..6 {
                for j in 0..5 {
                    let v = manual.get(i, j) + br.b.get(i, k) * br.a.get(k, j);
                    manual.set(i, j, v);
                }
            }
        }
        let d = br.delta();
        for (x, y) in d.data().iter().zip(manual.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        if r == 0 {
            assert!(br.is_zero());
        }
    }
}

/// Under the scale-invariant feature normalization, shrinking a layer's
/// frozen weight by `s` multiplies its weight gradient by `1/s`, so its
/// proxy score by `1/s^2`. Each seed plants one layer at ten times the
/// largest other score; the curriculum must hand it the full rank.
#[test]
fn planted_high_curvature_layer_gets_r_max() {
    let cfg = ModelConfig::default();
    let awp = AwpConfig::default();
    for seed in 0..5u64 {
        let planted = (seed % 3) as usize;
        let mut model = EncoderModel::init(&cfg, seed).unwrap();
        let pool = batch(seed, 256, &cfg);
        let base = curvature_proxy(&model, &pool).unwrap();
        let others = base
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != planted)
            .map(|(_, &v)| v)
            .fold(0.0, f64::max);
        let s = (base[planted] / (10.0 * others)).sqrt();
        model.layers[planted].w0.scale_in_place(s);
        let planted_score = curvature_proxy(&model, &pool).unwrap()[planted];
        assert!((planted_score / (10.0 * others) - 1.0).abs() < 1e-6);

        let train = TrainConfig {
            mode: Mode::Grace,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, train).unwrap();
        let mut reached = None;
        for update in 1..=3 {
            trainer.update_curriculum(&pool).unwrap();
            if trainer.curvature.ranks[planted] == awp.r_max {
                reached = Some(update);
                break;
            }
        }
        assert!(
            reached.is_some(),
            "seed {seed}: ranks {:?}",
            trainer.curvature.ranks
        );
        assert_eq!(trainer.model.layers[planted].awp.active_rank, awp.r_max);
    }
}

#[test]
fn curriculum_ranks_ten_layers() {
    let scores: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(
        allocate_ranks(&scores, 80.0, 4).unwrap(),
        vec![0, 0, 1, 2, 2, 2, 3, 4, 4, 4]
    );
}

#[test]
fn curriculum_ema_and_period() {
    let awp = AwpConfig {
        update_period: 5,
        ..AwpConfig::default()
    };
    let mut state = CurvatureState::new(3, &awp);
    assert_eq!(state.ranks, vec![4, 4, 4]);
    assert!(state.is_due(0) && state.is_due(10) && !state.is_due(7));
    state.update(&[1.0, 2.0, 3.0]).unwrap();
    assert!((state.ema[2] - 0.1 * 3.0).abs() < 1e-15);
    state.update(&[1.0, 2.0, 3.0]).unwrap();
    assert!((state.ema[2] - (0.9 * 0.3 + 0.1 * 3.0)).abs() < 1e-15);
    assert_eq!(state.ranks, vec![0, 2, 4]);
    assert!(state.update(&[1.0, f64::NAN, 0.0]).is_err());
    assert!(state.update(&[1.0]).is_err());
}

#[test]
fn proxy_is_nonnegative_and_finite() {
    let cfg = ModelConfig::default();
    let model = EncoderModel::init(&cfg, 1).unwrap();
    let s = curvature_proxy(&model, &batch(1, 64, &cfg)).unwrap();
    assert_eq!(s.len(), model.layers.len());
    assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 12),
        b in prop::collection::vec(-10.0f64..10.0, 15),
        rho in 0.0f64..5.0,
    ) {
        let mut br = AwpBranch::new(5, 4, 3);
        br.a = DenseMatrix::from_vec(3, 4, a).unwrap();
        br.b = DenseMatrix::from_vec(5, 3, b).unwrap();
        let before = br.clone();
        project_awp(&mut br, rho).unwrap();
        prop_assert!(br.combined_norm() <= rho);
        if before.combined_norm() <= rho {
            prop_assert_eq!(&br, &before);
        }
        let once = br.clone();
        project_awp(&mut br, rho).unwrap();
        prop_assert_eq!(br, once);
    }

    #[test]
    fn ranks_stay_in_range(scores in prop::collection::vec(0.0f64..100.0, 1..12), r_max in 1usize..6) {
        let ranks = allocate_ranks(&scores, 80.0, r_max).unwrap();
        prop_assert_eq!(ranks.len(), scores.len());
        prop_assert!(ranks.iter().all(|&r| r <= r_max));
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        for (s, r) in scores.iter().zip(&ranks) {
            if *s == top {
                prop_assert_eq!(*r, r_max);
            }
        }
    }
}
