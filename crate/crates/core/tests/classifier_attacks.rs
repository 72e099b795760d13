use mixdefense::attacks::{self, attack_batch, AchievedNorms, AttackSpec, Method, Norm, PerturbationBudget};
use mixdefense::classifier::{argmax, ClassifierArch, Classifier, LossSpec, TargetClassifier};
use mixdefense::data::{Image, LabeledDataset, LabeledExample, Split};
use mixdefense::nn::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: [usize; 3] = [1, 12, 12];

fn clf() -> TargetClassifier {
    TargetClassifier::init(ClassifierArch::lenet(SHAPE, 10), 7)
}

fn noise_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(1, 12, 12, (0..144).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn softmax_is_a_distribution_and_predict_is_argmax() {
    let c = clf();
    for s in 0..5 {
        let x = noise_image(s);
        let z = c.logits(&x).unwrap();
        let p = softmax(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(c.predict(&x).unwrap(), argmax(&z));
        assert_eq!(z, c.logits(&x).unwrap());
    }
    let zero = Image::new(1, 12, 12, vec![0.0; 144]).unwrap();
    assert_eq!(c.predict(&zero).unwrap(), c.predict(&zero).unwrap());
    assert!(c.logits(&Image::new(1, 8, 8, vec![0.0; 64]).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn argmax_ignores_constant_shift(z in proptest::collection::vec(-50.0f64..50.0, 2..20), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let exact = z.iter().all(|v| v + c - c == *v);
        if exact {
            prop_assert_eq!(argmax(&z), argmax(&shifted));
        }
    }
}

fn ce(c: &Classifier<f64>, x: &[f64], y: usize) -> f64 {
    let z = c.logits_batch(&Tensor::new(vec![1, 1, 12, 12], x.to_vec())).unwrap().into_vec();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

#[test]
fn input_gradient_matches_central_differences() {
    let c64: Classifier<f64> = clf().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..144).map(|_| rng.random::<f64>()).collect();
    let y = 3;
    let (g, _) = c64.input_gradient_batch(&Tensor::new(vec![1, 1, 12, 12], x.clone()), &[LossSpec::TrueLabel(y)]).unwrap();
    let h = 1e-6;
    for _ in 0..20 {
        let i = rng.random_range(0..144);
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[i] += h;
        dn[i] -= h;
        let fd = (ce(&c64, &up, y) - ce(&c64, &dn, y)) / (2.0 * h);
        let an = g.data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        assert!(rel < 1e-3, "pixel {i}: fd {fd} vs {an}");
    }
}

#[test]
fn logit_expression_gradients() {
    let c = clf();
    let x = noise_image(3);
    let zero = c.input_gradient(&x, &LossSpec::Logits(vec![0.0; 10])).unwrap();
    assert!(zero.pixels().iter().all(|&v| v == 0.0));
    assert!(c.input_gradient(&x, &LossSpec::Logits(vec![1.0; 3])).is_err());
    assert!(c.input_gradient(&x, &LossSpec::Targeted(10)).is_err());
}

fn labelled(n: usize) -> (Vec<Image>, Vec<usize>) {
    let c = clf();
    let xs: Vec<Image> = (0..n as u64).map(|s| noise_image(100 + s)).collect();
    // use the model's own predictions so every input starts correctly classified
    let ys = xs.iter().map(|x| c.predict(x).unwrap()).collect();
    (xs, ys)
}

#[test]
fn zero_budget_is_identity() {
    let c = clf();
    let (xs, ys) = labelled(4);
    for spec in [AttackSpec::fgsm(0.0), AttackSpec::fgm(0.0), AttackSpec::bim(Norm::Linf, 0.0, 5), AttackSpec::bim(Norm::L2, 0.0, 5)] {
        for a in attack_batch(&c, &xs, &ys, &spec).unwrap() {
            assert_eq!(a.perturbed, a.original, "{:?}", spec.method);
            assert!(!a.success);
        }
    }
}

#[test]
fn fgsm_moves_every_free_pixel_by_eps() {
    let c = clf();
    let x = Image::new(1, 12, 12, (0..144).map(|i| 0.3 + 0.4 * (i as f32 / 143.0)).collect()).unwrap();
    let y = c.predict(&x).unwrap();
    let g = c.input_gradient(&x, &LossSpec::TrueLabel(y)).unwrap();
    let a = attacks::fgsm(&c, &x, y, 0.1).unwrap();
    for ((&p, &o), &gi) in a.perturbed.pixels().iter().zip(x.pixels()).zip(g.pixels()) {
        let want = if gi > 0.0 { o + 0.1 } else if gi < 0.0 { o - 0.1 } else { o };
        assert_eq!(p, want.clamp(0.0, 1.0));
    }
}

#[test]
fn fgm_step_has_l2_norm_eps_before_clipping() {
    let c = clf();
    // mid-gray input so a 0.5 step never clips
    let x = Image::new(1, 12, 12, vec![0.5; 144]).unwrap();
    let y = c.predict(&x).unwrap();
    let a = attacks::fgm(&c, &x, y, 0.5).unwrap();
    assert!((a.norms.l2 - 0.5).abs() < 1e-5, "{}", a.norms.l2);
}

#[test]
fn single_step_bim_equals_fgsm() {
    let c = clf();
    let (xs, ys) = labelled(6);
    let mut bim = AttackSpec::bim(Norm::Linf, 0.07, 1);
    bim.step_size = Some(0.07);
    let a = attack_batch(&c, &xs, &ys, &bim).unwrap();
    let b = attack_batch(&c, &xs, &ys, &AttackSpec::fgsm(0.07)).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.perturbed.pixels(), q.perturbed.pixels());
    }
}

#[test]
fn already_misclassified_inputs_are_left_alone() {
    let c = clf();
    let x = noise_image(42);
    let wrong = (c.predict(&x).unwrap() + 1) % 10;
    let cw = attacks::cw_l2(&c, &x, wrong, 0.0, 3, 50).unwrap();
    assert!(cw.norms.l2 < 1e-3, "{}", cw.norms.l2);
    assert!(cw.success);
    for norm in [Norm::L2, Norm::Linf] {
        let df = attacks::deepfool(&c, &x, wrong, norm, 50, 0.02).unwrap();
        assert_eq!(df.perturbed, x);
    }
}

#[test]
fn deepfool_lands_near_the_boundary_without_overshoot() {
    let c = clf();
    let (xs, ys) = labelled(4);
    let out = attack_batch(&c, &xs, &ys, &AttackSpec::deepfool(Norm::L2, 50, 0.0)).unwrap();
    for a in out.iter().filter(|a| a.success) {
        let mut z = c.logits(&a.perturbed).unwrap();
        z.sort_by(|p, q| q.total_cmp(p));
        assert!(z[0] - z[1] < 0.5, "margin {}", z[0] - z[1]);
    }
}

#[test]
fn successful_flag_means_prediction_changed() {
    let c = clf();
    let (xs, ys) = labelled(8);
    for a in attack_batch(&c, &xs, &ys, &AttackSpec::bim(Norm::Linf, 0.3, 10)).unwrap() {
        assert_eq!(a.success, a.predicted_label != a.true_label);
        assert_eq!(a.predicted_label, c.predict(&a.perturbed).unwrap());
    }
}

#[test]
fn unsupported_combinations_rejected() {
    assert!(AttackSpec::new(Method::Fgsm, Norm::L2, Some(0.1)).validate().is_err());
    assert!(AttackSpec::new(Method::Cw, Norm::Linf, None).validate().is_err());
    assert!(AttackSpec::new(Method::Bim, Norm::Linf, None).validate().is_err());
    assert!(AttackSpec::fgsm(-0.1).validate().is_err());
    let c = clf();
    let x = noise_image(1);
    assert!(attacks::fgsm(&c, &x, 10, 0.1).is_err());
}

#[test]
fn attack_sets_are_seeded() {
    let c = clf();
    let ex = (0..30).map(|s| LabeledExample { image: noise_image(s), label: s as usize % 10 }).collect();
    let ds = LabeledDataset::from_examples("noise", Split::Test, 10, ex).unwrap();
    let spec = AttackSpec::fgsm(0.1);
    let a = attacks::generate_attack_set(&c, &ds, &spec, 12, 5).unwrap();
    assert_eq!(a, attacks::generate_attack_set(&c, &ds, &spec, 12, 5).unwrap());
    assert!(attacks::generate_attack_set(&c, &ds, &spec, 0, 5).unwrap().is_empty());
    assert!(attacks::generate_attack_set(&c, &ds, &spec, 31, 5).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("set.ckpt");
    attacks::save_attack_set(&p, &a, &spec, &serde_json::json!({})).unwrap();
    let (s2, a2) = attacks::load_attack_set(&p).unwrap();
    assert_eq!((s2, a2), (spec, a));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn budgets_are_respected(seed in 0u64..1000, eps in 0.0f64..0.6, which in 0usize..4) {
        let c = clf();
        let x = noise_image(seed);
        let y = c.predict(&x).unwrap();
        let spec = match which {
            0 => AttackSpec::fgsm(eps),
            1 => AttackSpec::fgm(eps * 4.0),
            2 => AttackSpec::bim(Norm::Linf, eps, 4),
            _ => AttackSpec::bim(Norm::L2, eps * 4.0, 4),
        };
        let a = attack_batch(&c, std::slice::from_ref(&x), &[y], &spec).unwrap().remove(0);
        let PerturbationBudget { norm, eps } = spec.budget().unwrap();
        let n = AchievedNorms::between(a.original.pixels(), a.perturbed.pixels());
        prop_assert!(n.get(norm) <= eps + 1e-6, "{} > {}", n.get(norm), eps);
        prop_assert_eq!(n, a.norms);
        prop_assert!(a.perturbed.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
