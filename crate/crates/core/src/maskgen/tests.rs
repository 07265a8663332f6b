use super::*;
use crate::autograd::gradcheck::max_relative_error;
use crate::autograd::Tensor;
use ndarray::{arr1, Array4};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn generator(seed: u64) -> MaskGenerator {
    MaskGenerator::new(MaskGenConfig::default(), &BackboneConfig::default(), seed).unwrap()
}

fn feature(values: Array3<f64>) -> ExtractedFeature {
    ExtractedFeature { values }
}

fn random_array4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

#[test]
fn extraction_is_deterministic_and_aligned_with_backbone_features() {
    let seq = crate::synthdata::generate_sequence(1, 2, 3, 2.0).unwrap();
    let a = generator(5);
    let b = generator(5);
    let t1 = a.extract(&seq.frames[0]).unwrap();
    let t2 = a.extract(&seq.frames[0]).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(t1, b.extract(&seq.frames[0]).unwrap());
    let cfg = BackboneConfig::default();
    assert_eq!(t1.values.dim(), (16, cfg.feature_height(), cfg.feature_width()));
    let small = Frame {
        index: 0,
        pixels: Array3::zeros((3, 16, 16)),
    };
    assert!(matches!(a.extract(&small), Err(Error::Shape(_))));
}

#[test]
fn logits_have_one_entry_per_block_and_vanish_with_zeroed_output_layer() {
    let mut g = generator(2);
    let seq = crate::synthdata::generate_sequence(3, 2, 3, 3.0).unwrap();
    let t = g.extract(&seq.frames[0]).unwrap();
    let e = g.extract(&seq.frames[1]).unwrap();
    let logits = g.pruning_logits(&t, &e).unwrap();
    assert_eq!(logits.len(), 5);
    assert_ne!(logits, g.pruning_logits(&t, &t).unwrap());
    for name in ["gate.linear", "gate.linear_bias"] {
        let id = g.params.id(name).unwrap();
        g.params.get_mut(id).fill(0.0);
    }
    assert!(g.pruning_logits(&t, &e).unwrap().iter().all(|&v| v == 0.0));
    let odd = feature(Array3::zeros((16, 4, 4)));
    assert!(matches!(g.pruning_logits(&t, &odd), Err(Error::Shape(_))));
}

#[test]
fn probability_examples() {
    let mut s = VariationalPruningState::neutral(3, 0.5);
    s.mu = arr1(&[0.2, -1.0, 3.0]);
    let logits = s.mu.to_vec();
    assert_eq!(pruning_probabilities(&logits, &s, 0.0, None).unwrap(), vec![0.5; 3]);

    let huge = pruning_probabilities(&[1e300, 1e6, f64::MAX], &s, 0.0, None).unwrap();
    assert!(huge.iter().all(|&p| p == 1.0 - 1e-10));
    let tiny = pruning_probabilities(&[-1e300, -1e6, -5.0], &s, 0.0, None).unwrap();
    assert!(tiny.iter().all(|&p| p == 1e-10));

    s.sigma[1] = 0.0;
    assert!(pruning_probabilities(&logits, &s, 0.0, None).is_err());
}

#[test]
fn distortion_bias_examples() {
    let m = |v: f64| SpatialMask::new(Array2::from_elem((4, 4), v)).unwrap();
    assert!((distortion_bias(&m(0.2)) - 0.3).abs() < 1e-15);
    assert_eq!(distortion_bias(&m(0.5)), 0.0);
}

#[test]
fn noisy_shift_uses_softplus_scale() {
    let mut s = VariationalPruningState::neutral(1, 0.3);
    s.delta_uc = arr1(&[0.0]);
    let p = pruning_probabilities(&[0.0], &s, 0.0, Some(&[0.1])).unwrap();
    assert!((p[0] - (0.3 + 0.1 * 2f64.ln())).abs() < 1e-15);
}

#[test]
fn inference_mask_threshold_and_saturation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sat = sample_block_mask(&[1.0 - 1e-10; 5], SampleMode::Inference, 0.1, &mut rng).unwrap();
    assert_eq!(sat, BlockMask::ones(5));
    let tie = sample_block_mask(&[0.5, 0.4999], SampleMode::Inference, 0.1, &mut rng).unwrap();
    assert_eq!(tie.executed(), vec![true, false]);
    assert!(sample_block_mask(&[0.5], SampleMode::Train, 0.0, &mut rng).is_err());
    assert!(sample_block_mask(&[1.0], SampleMode::Train, 0.1, &mut rng).is_err());
}

#[test]
fn relaxed_samples_threshold_at_the_right_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let p = 0.3;
    let mut hits = 0usize;
    for _ in 0..n {
        let z = sample_block_mask(&[p], SampleMode::Train, 0.1, &mut rng).unwrap().values()[0];
        assert!(z > 0.0 && z < 1.0 || z == 0.0 || z == 1.0);
        if z > 0.5 {
            hits += 1;
        }
    }
    let freq = hits as f64 / n as f64;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((freq - p).abs() <= 3.0 * sd, "frequency {freq}");
}

#[test]
fn cosine_boundary_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Array3::from_shape_simple_fn((6, 3, 3), || rng.gen_range(0.1..1.0));
    let same = spatial_mask(&feature(t.clone()), &feature(t.clone())).unwrap();
    assert!(same.values.iter().all(|&v| v.abs() < 1e-15));
    let opposite = spatial_mask(&feature(t.clone()), &feature(-&t)).unwrap();
    assert!(opposite.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));

    let mut a = Array3::zeros((2, 1, 2));
    let mut b = Array3::zeros((2, 1, 2));
    a[[0, 0, 0]] = 3.0;
    b[[1, 0, 0]] = -2.0;
    // Second pixel: both vectors zero.
    let m = spatial_mask(&feature(a), &feature(b)).unwrap();
    assert_eq!(m.values[[0, 0]], 0.5);
    assert_eq!(m.values[[0, 1]], 0.5);
}

#[test]
fn magnitude_is_the_spatial_mean() {
    assert_eq!(mask_magnitude(&SpatialMask::new(Array2::zeros((3, 3))).unwrap()), 0.0);
    assert_eq!(mask_magnitude(&SpatialMask::new(Array2::ones((3, 3))).unwrap()), 1.0);
    let half = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 0.0 } else { 1.0 });
    assert_eq!(SpatialMask::new(half).unwrap().magnitude(), 0.5);
    assert!(SpatialMask::new(Array2::from_elem((1, 1), 1.5)).is_err());
}

#[test]
fn graph_values_match_direct_evaluation() {
    let g = generator(9);
    let seq = crate::synthdata::generate_sequence(4, 2, 3, 3.0).unwrap();
    let t = g.extract(&seq.frames[0]).unwrap();
    let e = g.extract(&seq.frames[1]).unwrap();
    let m = spatial_mask(&t, &e).unwrap();
    let logits = g.pruning_logits(&t, &e).unwrap();
    let eta = distortion_bias(&m);
    let direct = pruning_probabilities(&logits, &g.state(), eta, None).unwrap();

    let mut tape = Tape::inference();
    let binds = g.params.bind(&mut tape);
    let x = tape.constant(batch_of(&[&seq.frames[0], &seq.frames[1]]));
    let fx = g.extract_graph(&mut tape, &binds, x);
    let feats = tape.value(fx).clone();
    let both = crate::backbone::unbatch(&feats);
    let tv = tape.constant(both[0].clone().insert_axis(ndarray::Axis(0)));
    let ev = tape.constant(both[1].clone().insert_axis(ndarray::Axis(0)));
    let mg = spatial_mask_graph(&mut tape, tv, ev);
    let mv: Vec<f64> = tape.value(mg).iter().copied().collect();
    let md: Vec<f64> = m.values.iter().copied().collect();
    assert!(mv.iter().zip(&md).all(|(a, b)| (a - b).abs() < 1e-12));
    let lg = g.logits_graph(&mut tape, &binds, tv, ev);
    let phi = g.probabilities_graph(&mut tape, &binds, lg, Some(&arr1(&[eta])), None);
    let pv: Vec<f64> = tape.value(phi).iter().copied().collect();
    assert!(pv.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-12));

    let decision = g.decide(&t, &e, &m).unwrap();
    assert_eq!(decision.phi, direct);
    let keep: Vec<f64> = direct.iter().map(|&p| g.config().polarity.keep_probability(p)).collect();
    assert_eq!(decision.mask, hard_mask(&keep));
}

#[test]
fn prune_polarity_flips_keep_probabilities() {
    let mut cfg = MaskGenConfig::default();
    cfg.polarity = Polarity::Prune;
    let g = MaskGenerator::new(cfg, &BackboneConfig::default(), 1).unwrap();
    let mut tape = Tape::inference();
    let phi = tape.constant(arr1(&[0.2, 0.9]).into_dyn());
    let keep = g.keep_graph(&mut tape, phi);
    let v: Vec<f64> = tape.value(keep).iter().copied().collect();
    assert!((v[0] - 0.8).abs() < 1e-15 && (v[1] - 0.1).abs() < 1e-15);
    assert_eq!(Polarity::Prune.keep_probability(0.25), 0.75);
}

#[test]
fn running_statistics_follow_batches() {
    let mut g = generator(1);
    let batch = Array2::from_shape_fn((4, 5), |(i, k)| k as f64 + i as f64);
    for _ in 0..400 {
        g.update_statistics(&batch);
    }
    let s = g.state();
    let expected_sd = batch.column(0).var(0.0).sqrt();
    for k in 0..5 {
        assert!((s.mu[k] - (k as f64 + 1.5)).abs() < 1e-9);
        assert!((s.sigma[k] - expected_sd).abs() < 1e-9);
    }
    g.update_statistics(&Array2::zeros((1, 5)));
    assert!(g.state().sigma.iter().all(|&s| s >= 1e-3));
}

#[test]
fn config_validation() {
    let bb = BackboneConfig::default();
    let mut c = MaskGenConfig::default();
    c.extractor_channels = vec![8, 16];
    assert!(c.validate(&bb).unwrap_err().to_string().contains("maskgen.extractor_channels"));
    let mut c = MaskGenConfig::default();
    c.rho = 0.0;
    assert!(c.validate(&bb).is_err());
    let mut c = MaskGenConfig::default();
    c.temperature = -1.0;
    assert!(c.validate(&bb).is_err());
}

#[test]
fn spatial_mask_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let t: Tensor = random_array4((2, 4, 3, 3), seed).into_dyn();
        let e: Tensor = random_array4((2, 4, 3, 3), seed + 100).into_dyn();
        let w: Tensor = random_array4((2, 1, 3, 3), seed + 200).into_shape_with_order(ndarray::IxDyn(&[2, 3, 3])).unwrap();
        let err = max_relative_error(
            &[t, e],
            |tape, v| {
                let m = spatial_mask_graph(tape, v[0], v[1]);
                let wv = tape.constant(w.clone());
                let p = tape.mul(m, wv);
                tape.sum(p)
            },
            1e-6,
        );
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn relaxed_gate_path_gradient_matches_finite_differences() {
    let g = generator(4);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(-0.5..0.5));
        let eps = Array2::from_shape_simple_fn((3, 5), || StandardNormal.sample(&mut rng));
        let u = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(0.05..0.95));
        let eta = Array1::from_shape_simple_fn(3, || rng.gen_range(0.0..0.5));
        let weights = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(-1.0..1.0)).into_dyn();
        let s = g.state();
        let inputs = [
            logits.into_dyn(),
            s.gamma.into_dyn(),
            Array1::from_elem(5, 0.4).into_dyn(),
            s.delta_uc.into_dyn(),
        ];
        let err = max_relative_error(
            &inputs,
            |tape, v| {
                let phi = graph::gate_probabilities(
                    tape,
                    graph::GateInputs {
                        logits: v[0],
                        gamma: v[1],
                        beta_bn: v[2],
                        delta_uc: v[3],
                    },
                    &s.mu,
                    &s.sigma,
                    Some(&eta),
                    Some(&eps),
                    1e-10,
                );
                let keep = g.keep_graph(tape, phi);
                let z = relaxed_bernoulli_graph(tape, keep, &u, 0.5);
                let wv = tape.constant(weights.clone());
                let p = tape.mul(z, wv);
                tape.sum(p)
            },
            1e-6,
        );
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn probabilities_stay_in_range(
        logits in prop::collection::vec(-1e6f64..1e6, 5),
        gamma in prop::collection::vec(-10f64..10.0, 5),
        beta in prop::collection::vec(-5f64..5.0, 5),
        sigma in prop::collection::vec(1e-6f64..100.0, 5),
        eta in -1f64..1.0,
        eps in prop::collection::vec(-5f64..5.0, 5),
    ) {
        let mut s = VariationalPruningState::neutral(5, 0.0);
        s.gamma = Array1::from(gamma);
        s.beta_bn = Array1::from(beta);
        s.sigma = Array1::from(sigma);
        for p in pruning_probabilities(&logits, &s, eta, Some(&eps)).unwrap() {
            prop_assert!((1e-10..=1.0 - 1e-10).contains(&p));
        }
    }

    #[test]
    fn spatial_mask_is_symmetric_and_scale_invariant(
        seed in 0u64..1000,
        scale_t in 0.01f64..100.0,
        scale_e in 0.01f64..100.0,
    ) {
        let t = random_array4((1, 5, 3, 3), seed).index_axis_move(ndarray::Axis(0), 0);
        let e = random_array4((1, 5, 3, 3), seed + 1).index_axis_move(ndarray::Axis(0), 0);
        let m = spatial_mask(&feature(t.clone()), &feature(e.clone())).unwrap();
        let swapped = spatial_mask(&feature(e.clone()), &feature(t.clone())).unwrap();
        let scaled = spatial_mask(&feature(&t * scale_t), &feature(&e * scale_e)).unwrap();
        for ((a, b), c) in m.values.iter().zip(swapped.values.iter()).zip(scaled.values.iter()) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn more_distortion_never_raises_pre_clamp_values(
        logits in prop::collection::vec(-3f64..3.0, 5),
        lo in 0f64..1.0,
        hi in 0f64..1.0,
    ) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let mut s = VariationalPruningState::neutral(5, 0.2);
        s.gamma = Array1::from_elem(5, 0.7);
        let m = |v: f64| SpatialMask::new(Array2::from_elem((2, 2), v)).unwrap();
        let a = pre_clamp_probabilities(&logits, &s, distortion_bias(&m(lo)), None).unwrap();
        let b = pre_clamp_probabilities(&logits, &s, distortion_bias(&m(hi)), None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y <= x);
        }
    }
}
