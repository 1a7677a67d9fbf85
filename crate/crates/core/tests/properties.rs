use ddnet_core::datagen::{synthesize_lowlight, PairedSample, SYNTH_COEFF_RANGE};
use ddnet_core::log_ops::{extract_gradient, log_kernel};
use ddnet_core::losses::{loss_total, LossWeights};
use ddnet_core::metrics::ssim;
use ddnet_core::model::{build_model, count_params, Model, ModelConfig};
use ddnet_core::trainer::{lr_schedule, TrainConfig};
use ddnet_core::Image;
use proptest::prelude::*;

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |d| Image::new(h, w, 3, d).unwrap())
}

fn sized_image() -> impl Strategy<Value = Image> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| image(h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clamped_construction_stays_in_unit_range(data in proptest::collection::vec(-3.0f32..3.0, 12)) {
        let img = Image::from_clamped(2, 2, 3, data).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gradient_is_bounded_and_congruent(img in sized_image()) {
        let g = extract_gradient(&img);
        prop_assert_eq!((g.height(), g.width()), (img.height(), img.width()));
        prop_assert!(g.data().iter().all(|v| (-16.0..=16.0).contains(v)));
    }

    #[test]
    fn synthesis_scales_exactly(img in sized_image(), seed in any::<u64>()) {
        let (low, m) = synthesize_lowlight(&img, seed);
        prop_assert!((SYNTH_COEFF_RANGE.0..=SYNTH_COEFF_RANGE.1).contains(&m));
        prop_assert!(low.data().iter().zip(img.data()).all(|(l, c)| *l == c * m));
        prop_assert_eq!(synthesize_lowlight(&img, seed), (low, m));
    }

    #[test]
    fn paired_gradients_are_recomputable(low in image(9, 13), normal in image(9, 13)) {
        let pair = PairedSample::from_images("p", low, normal).unwrap();
        prop_assert_eq!(&pair.grad_in, &extract_gradient(&pair.low));
        prop_assert_eq!(&pair.grad_gt, &extract_gradient(&pair.normal));
    }

    #[test]
    fn loss_breakdown_is_bounded_and_combined_exactly(
        pred in image(12, 12),
        coarse in image(12, 12),
        gt in image(12, 12),
        w in (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
    ) {
        let weights = LossWeights { w1: w.0, w2: w.1, w3: w.2 };
        let sample = PairedSample::from_images("p", gt.map(|v| v * 0.3), gt).unwrap();
        let out = ddnet_core::model::ForwardOutput {
            grad_pred: Some(extract_gradient(&pred)),
            final_image: pred,
            coarse: Some(coarse),
        };
        let l = loss_total(&out, &sample, &weights).unwrap();
        prop_assert!(l.lap >= 0.0 && l.coarse >= 0.0 && (0.0..=2.0).contains(&l.final_));
        prop_assert_eq!(l.total, weights.w1 * l.lap + weights.w2 * l.coarse + weights.w3 * l.final_);
    }

    #[test]
    fn ssim_lies_in_closed_unit_interval(a in image(14, 12), b in image(14, 12)) {
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn schedule_is_piecewise_constant_and_nonincreasing(
        lr0 in 1e-5f64..1e-1,
        decay_factor in 0.05f64..=1.0,
        decay_every in 1usize..15,
        epochs in 1usize..60,
    ) {
        let cfg = TrainConfig { lr0, decay_factor, decay_every, epochs, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_schedule(e, &cfg).unwrap()).collect();
        prop_assert!((lrs[0] - lr0).abs() <= lr0 * 1e-14);
        for e in 1..epochs {
            prop_assert!(lrs[e] <= lrs[e - 1]);
            if e % decay_every != 0 {
                prop_assert_eq!(lrs[e], lrs[e - 1]);
            }
        }
        prop_assert!(lr_schedule(epochs, &cfg).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn forward_outputs_are_clamped_and_congruent(
        seed in any::<u64>(),
        (h, w) in (1usize..5, 1usize..5),
        flags in (any::<bool>(), any::<bool>()),
    ) {
        let cfg = ModelConfig {
            base_channels: 2,
            num_scales: 2,
            use_sam: flags.0,
            use_scm: flags.1,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, seed).unwrap();
        let low = Image::from_fn(2 * h, 2 * w, 3, |c, y, x| ((seed as usize + c + 3 * y + 7 * x) % 11) as f32 / 10.0).unwrap();
        let out = model.forward(&low, &extract_gradient(&low)).unwrap();
        let coarse = out.coarse.unwrap();
        let grad = out.grad_pred.unwrap();
        prop_assert!(out.final_image.same_shape(&low) && coarse.same_shape(&low));
        prop_assert_eq!((grad.height(), grad.width()), (low.height(), low.width()));
        prop_assert!(out.final_image.data().iter().chain(coarse.data()).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(model.params().iter().all(|p| p.data.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn parameter_count_depends_only_on_config(
        base in 1usize..5,
        scales in 1usize..4,
        seeds in (any::<u64>(), any::<u64>()),
    ) {
        let cfg = ModelConfig { base_channels: base, num_scales: scales, ..ModelConfig::default() };
        let a = build_model(&cfg, seeds.0).unwrap();
        let b = build_model(&cfg, seeds.1).unwrap();
        prop_assert_eq!(count_params(&a), count_params(&b));
        prop_assert_eq!(count_params(&a), count_params(&Model::zeroed(&cfg).unwrap()));
    }
}

#[test]
fn kernel_and_config_invariants() {
    let k = log_kernel();
    assert_eq!(k.size() % 2, 1);
    assert_eq!((0..5).flat_map(|r| (0..5).map(move |c| (r, c))).map(|(r, c)| k.tap(r, c)).sum::<f64>(), 0.0);
    assert_eq!(ModelConfig::default().blocks_per_path(), 6);
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { decay_factor: 0.0, ..TrainConfig::default() },
        TrainConfig { decay_factor: 1.5, ..TrainConfig::default() },
        TrainConfig { decay_every: 0, ..TrainConfig::default() },
        TrainConfig { patch: 90, ..TrainConfig::default() },
    ] {
        assert_eq!(bad.validate().unwrap_err().category(), "argument");
    }
    assert!(LossWeights { w1: -0.1, w2: 0.2, w3: 0.6 }.validate().is_err());
}
