//! Finite-difference verification of every differentiable kernel and
//! composite block, across multiple seeds, in high precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssa_unet_core::gradcheck::{check_with_params, finite_difference_check, weighted_sum};
use ssa_unet_core::model::{ModelConfig, SsaUnet};

use ssa_unet_core::nn::{
    Cbam, DepthwiseSeparableConv, DoubleConvBlock, Grads, Params, ShuffleAttention,
    ShuffledDepthwiseSeparableConv,
};
use ssa_unet_core::ops::{self, BnStats, Mode};
use ssa_unet_core::tensor::{Shape, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 5;

fn rand_t(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

#[test]
fn conv2d_dense_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(Shape::new(1, 2, 4, 4).unwrap(), &mut rng);
        let w = rand_t(Shape::new(3, 2, 3, 3).unwrap(), &mut rng);
        let b = rand_t(Shape::new(1, 3, 1, 1).unwrap(), &mut rng);
        let (y, ctx) = ops::conv2d_ctx(&x, &w, Some(&b), 1, 1, 1).unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let (gx, gw, gb) = ops::conv2d_backward(ctx, &r).unwrap();
        let report = finite_difference_check(
            |xs| {
                let out = ops::conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1, 1).unwrap();
                weighted_sum(&out, &r)
            },
            &[x, w, b],
            &[gx, gw, gb.unwrap()],
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn conv2d_grouped_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_t(Shape::new(1, 4, 4, 4).unwrap(), &mut rng);
        let w = rand_t(Shape::new(6, 2, 3, 3).unwrap(), &mut rng);
        let b = rand_t(Shape::new(1, 6, 1, 1).unwrap(), &mut rng);
        let (y, ctx) = ops::conv2d_ctx(&x, &w, Some(&b), 1, 1, 2).unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let (gx, gw, gb) = ops::conv2d_backward(ctx, &r).unwrap();
        let report = finite_difference_check(
            |xs| {
                let out = ops::conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1, 2).unwrap();
                weighted_sum(&out, &r)
            },
            &[x, w, b],
            &[gx, gw, gb.unwrap()],
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn batch_norm_train_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_t(Shape::new(2, 3, 4, 4).unwrap(), &mut rng);
        let gamma = Tensor::rand_uniform(Shape::new(1, 3, 1, 1).unwrap(), 0.5, 1.5, &mut rng);
        let beta = rand_t(Shape::new(1, 3, 1, 1).unwrap(), &mut rng);
        let mut stats = BnStats::new(3);
        let (y, ctx) =
            ops::batch_norm(&x, &gamma, &beta, &mut stats, Mode::Train, 0.1, 1e-5).unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let (gx, gg, gb) = ops::batch_norm_backward(&ctx, &r).unwrap();
        let report = finite_difference_check(
            |xs| {
                let mut fresh = BnStats::new(3);
                let (out, _) = ops::batch_norm(
                    &xs[0], &xs[1], &xs[2], &mut fresh, Mode::Train, 0.1, 1e-5,
                )
                .unwrap();
                weighted_sum(&out, &r)
            },
            &[x, gamma, beta],
            &[gx, gg, gb],
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn batch_norm_eval_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = rand_t(Shape::new(1, 3, 4, 4).unwrap(), &mut rng);
        let gamma = Tensor::rand_uniform(Shape::new(1, 3, 1, 1).unwrap(), 0.5, 1.5, &mut rng);
        let beta = rand_t(Shape::new(1, 3, 1, 1).unwrap(), &mut rng);
        let stats = BnStats {
            mean: vec![0.2, -0.3, 0.1],
            var: vec![0.9, 1.4, 0.6],
        };
        let (y, ctx) = ops::batch_norm(
            &x,
            &gamma,
            &beta,
            &mut stats.clone(),
            Mode::Eval,
            0.1,
            1e-5,
        )
        .unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let (gx, gg, gb) = ops::batch_norm_backward(&ctx, &r).unwrap();
        let report = finite_difference_check(
            |xs| {
                let (out, _) = ops::batch_norm(
                    &xs[0],
                    &xs[1],
                    &xs[2],
                    &mut stats.clone(),
                    Mode::Eval,
                    0.1,
                    1e-5,
                )
                .unwrap();
                weighted_sum(&out, &r)
            },
            &[x, gamma, beta],
            &[gx, gg, gb],
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn group_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = rand_t(Shape::new(2, 3, 4, 4).unwrap(), &mut rng);
        let gamma = Tensor::rand_uniform(Shape::new(1, 3, 1, 1).unwrap(), 0.5, 1.5, &mut rng);
        let beta = rand_t(Shape::new(1, 3, 1, 1).unwrap(), &mut rng);
        let (y, ctx) = ops::group_norm_per_channel(&x, &gamma, &beta, 1e-5).unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let (gx, gg, gb) = ops::group_norm_per_channel_backward(&ctx, &r).unwrap();
        let report = finite_difference_check(
            |xs| {
                let (out, _) = ops::group_norm_per_channel(&xs[0], &xs[1], &xs[2], 1e-5).unwrap();
                weighted_sum(&out, &r)
            },
            &[x, gamma, beta],
            &[gx, gg, gb],
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let shape = Shape::new(1, 2, 4, 4).unwrap();
        let x = rand_t(shape, &mut rng);
        let r = rand_t(shape, &mut rng);

        let g_relu = ops::relu_backward(&x, &r);
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::relu(&xs[0]), &r),
            std::slice::from_ref(&x),
            &[g_relu],
            STEP,
            TOL,
        );
        assert!(report.passed(), "relu seed {seed}:\n{report}");

        let y = ops::sigmoid(&x);
        let g_sig = ops::sigmoid_backward(&y, &r);
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::sigmoid(&xs[0]), &r),
            &[x],
            &[g_sig],
            STEP,
            TOL,
        );
        assert!(report.passed(), "sigmoid seed {seed}:\n{report}");
    }
}

#[test]
fn max_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = rand_t(Shape::new(1, 2, 6, 6).unwrap(), &mut rng);
        let (y, ctx) = ops::max_pool_2x2(&x).unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let gx = ops::max_pool_2x2_backward(&ctx, &r);
        let report = finite_difference_check(
            |xs| {
                let (out, _) = ops::max_pool_2x2(&xs[0]).unwrap();
                weighted_sum(&out, &r)
            },
            &[x],
            &[gx],
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn bilinear_upsample_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let x = rand_t(Shape::new(1, 2, 3, 4).unwrap(), &mut rng);
        let y = ops::bilinear_upsample_x2(&x).unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let gx = ops::bilinear_upsample_x2_backward(x.shape(), &r);
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::bilinear_upsample_x2(&xs[0]).unwrap(), &r),
            &[x],
            &[gx],
            STEP,
            1e-6,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn concat_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let a = rand_t(Shape::new(1, 2, 3, 3).unwrap(), &mut rng);
        let b = rand_t(Shape::new(1, 3, 3, 3).unwrap(), &mut rng);
        let y = ops::concat_channels(&a, &b).unwrap();
        let r = rand_t(y.shape(), &mut rng);
        let (ga, gb) = ops::concat_channels_backward(&r, 2).unwrap();
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::concat_channels(&xs[0], &xs[1]).unwrap(), &r),
            &[a, b],
            &[ga, gb],
            STEP,
            1e-6,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn global_avg_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let x = rand_t(Shape::new(2, 3, 4, 4).unwrap(), &mut rng);
        let y = ops::global_avg_pool(&x);
        let r = rand_t(y.shape(), &mut rng);
        let gx = ops::global_avg_pool_backward(x.shape(), &r);
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::global_avg_pool(&xs[0]), &r),
            &[x],
            &[gx],
            STEP,
            1e-6,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn channel_shuffle_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = rand_t(Shape::new(1, 6, 3, 3).unwrap(), &mut rng);
        let r = rand_t(x.shape(), &mut rng);
        let gx = ops::channel_shuffle_backward(&r, 2).unwrap();
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::channel_shuffle(&xs[0], 2).unwrap(), &r),
            &[x],
            &[gx],
            STEP,
            1e-8,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

// ---------------------------------------------------------------------------
// Composite blocks
// ---------------------------------------------------------------------------

#[test]
fn depthwise_separable_conv_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
        let mut ps = Params::<f64>::new();
        let dsc = DepthwiseSeparableConv::new(&mut ps, &mut rng, "dsc", 3, 4, 2).unwrap();
        let x = rand_t(Shape::new(1, 3, 5, 5).unwrap(), &mut rng);
        let r = rand_t(Shape::new(1, 4, 5, 5).unwrap(), &mut rng);
        let report = check_with_params(
            &ps,
            &x,
            &r,
            |ps, x| dsc.forward(ps, x).unwrap(),
            |ps, x, r, grads| {
                let (_, ctx) = dsc.forward_ctx(ps, x).unwrap();
                dsc.backward(ps, ctx, r, grads).unwrap()
            },
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn shuffled_depthwise_separable_conv_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1200 + seed);
        let mut ps = Params::<f64>::new();
        let sdsc =
            ShuffledDepthwiseSeparableConv::new(&mut ps, &mut rng, "sdsc", 4, 6, 3, 2).unwrap();
        let x = rand_t(Shape::new(1, 4, 4, 4).unwrap(), &mut rng);
        let r = rand_t(Shape::new(1, 6, 4, 4).unwrap(), &mut rng);
        let report = check_with_params(
            &ps,
            &x,
            &r,
            |ps, x| sdsc.forward(ps, x).unwrap(),
            |ps, x, r, grads| {
                let (_, ctx) = sdsc.forward_ctx(ps, x).unwrap();
                sdsc.backward(ps, ctx, r, grads).unwrap()
            },
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn double_conv_block_gradients_both_variants_and_modes() {
    for seed in 0..SEEDS {
        for shuffled in [false, true] {
            for mode in [Mode::Train, Mode::Eval] {
                let mut rng = ChaCha8Rng::seed_from_u64(1300 + seed);
                let mut ps = Params::<f64>::new();
                let block = if shuffled {
                    DoubleConvBlock::new_shuffled(&mut ps, &mut rng, "blk", 4, 6, 6, 2, 2).unwrap()
                } else {
                    DoubleConvBlock::new_classic(&mut ps, &mut rng, "blk", 4, 6, 6, 2).unwrap()
                };
                let x = rand_t(Shape::new(2, 4, 4, 4).unwrap(), &mut rng);
                let r = rand_t(Shape::new(2, 6, 4, 4).unwrap(), &mut rng);
                let report = check_with_params(
                    &ps,
                    &x,
                    &r,
                    |ps, x| {
                        let mut updates = Vec::new();
                        block
                            .forward_ctx(ps, x, mode, &mut updates, None)
                            .unwrap()
                            .0
                    },
                    |ps, x, r, grads| {
                        let mut updates = Vec::new();
                        let (_, ctx) = block.forward_ctx(ps, x, mode, &mut updates, None).unwrap();
                        block.backward(ps, ctx, r, grads, None).unwrap()
                    },
                    STEP,
                    TOL,
                );
                assert!(
                    report.passed(),
                    "seed {seed} shuffled={shuffled} mode={mode:?}:\n{report}"
                );
            }
        }
    }
}

#[test]
fn shuffle_attention_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1400 + seed);
        let mut ps = Params::<f64>::new();
        let sa = ShuffleAttention::new(&mut ps, "sa", 8, 2).unwrap();
        // move the gating vectors off their (0, 1) init so the check
        // exercises generic values
        for id in ps.trainable_ids() {
            let shape = ps.get(id).shape();
            *ps.get_mut(id) = Tensor::rand_uniform(shape, 0.2, 1.2, &mut rng);
        }
        let x = rand_t(Shape::new(1, 8, 4, 4).unwrap(), &mut rng);
        let r = rand_t(x.shape(), &mut rng);
        let report = check_with_params(
            &ps,
            &x,
            &r,
            |ps, x| sa.forward(ps, x).unwrap(),
            |ps, x, r, grads| {
                let (_, ctx) = sa.forward_ctx(ps, x).unwrap();
                sa.backward(ps, ctx, r, grads).unwrap()
            },
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

#[test]
fn cbam_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1500 + seed);
        let mut ps = Params::<f64>::new();
        let cbam = Cbam::new(&mut ps, &mut rng, "cbam", 8, 2).unwrap();
        let x = rand_t(Shape::new(1, 8, 4, 4).unwrap(), &mut rng);
        let r = rand_t(x.shape(), &mut rng);
        let report = check_with_params(
            &ps,
            &x,
            &r,
            |ps, x| cbam.forward(ps, x).unwrap(),
            |ps, x, r, grads| {
                let (_, ctx) = cbam.forward_ctx(ps, x).unwrap();
                cbam.backward(ps, ctx, r, grads).unwrap()
            },
            STEP,
            TOL,
        );
        assert!(report.passed(), "seed {seed}:\n{report}");
    }
}

// ---------------------------------------------------------------------------
// End-to-end model check (sampled elements, train-mode forward)
// ---------------------------------------------------------------------------

#[test]
fn tiny_model_end_to_end_gradients() {
    let mut config = ModelConfig::tiny(12, 6);
    config.seed = 1;
    let mut model = SsaUnet::<f64>::build(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::rand_uniform(Shape::new(1, 12, 32, 32).unwrap(), 0.0, 1.0, &mut rng);
    let r = Tensor::rand_uniform(Shape::new(1, 6, 32, 32).unwrap(), -1.0, 1.0, &mut rng);

    let (_, ctx) = model.forward_train(&x).unwrap();
    let mut grads = Grads::zeros_like(&model.params);
    model.backward(ctx, &r, &mut grads, None).unwrap();

    let mut loss = |m: &mut SsaUnet<f64>| -> f64 {
        let (y, _) = m.forward_train(&x).unwrap();
        weighted_sum(&y, &r)
    };

    // two sampled elements per parameter tensor, with the same kink
    // exclusion rule as the finite-difference checker (a probe that
    // crosses a relu or pooling boundary is not differentiable)
    let step = 1e-5;
    let base = loss(&mut model);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut kinks = 0usize;
    let ids = model.params.trainable_ids();
    for &id in &ids {
        let n = model.params.get(id).numel();
        for probe in 0..2usize.min(n) {
            let e = if probe == 0 {
                0
            } else {
                (rng.random::<f64>() * n as f64) as usize % n
            };
            let original = model.params.get(id).data()[e];
            model.params.get_mut(id).data_mut()[e] = original + step;
            let plus = loss(&mut model);
            model.params.get_mut(id).data_mut()[e] = original - step;
            let minus = loss(&mut model);
            model.params.get_mut(id).data_mut()[e] = original;
            let fwd = (plus - base) / step;
            let bwd = (base - minus) / step;
            if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 1e-7 {
                kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let ana = grads.get(id).data()[e];
            let rel = (numeric - ana).abs() / numeric.abs().max(ana.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
            checked += 1;
        }
    }
    assert!(checked > 200, "sampled {checked} elements ({kinks} kinks)");
    assert!(
        worst < 1e-3,
        "end-to-end max rel error {worst:.3e} over {checked} probes ({kinks} kinks excluded)"
    );
}
