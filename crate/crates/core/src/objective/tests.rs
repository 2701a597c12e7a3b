use super::*;
use crate::model::EncoderSpec;
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn emb(n: usize, p: usize, d: usize, data: Vec<f64>) -> PatchEmbeddings<f64> {
    PatchEmbeddings { n, p, d, data }
}

fn random_unit_rows(n: usize, p: usize, d: usize, rng: &mut ChaCha8Rng) -> PatchEmbeddings<f64> {
    let mut data = Vec::new();
    for _ in 0..n * p {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    emb(n, p, d, data)
}

/// Literal evaluation: positive term once in the denominator plus `j ≠ i`.
fn naive_patchnce(a: &PatchEmbeddings<f64>, t: &PatchEmbeddings<f64>, tau: f64) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let mut total = 0.0;
    for s in 0..a.n {
        let (aa, tt) = (a.sample(s), t.sample(s));
        for i in 0..a.p {
            let ai = &aa[i * a.d..(i + 1) * a.d];
            let pos = (dot(ai, &tt[i * a.d..(i + 1) * a.d]) / tau).exp();
            let mut neg = 0.0;
            for j in (0..a.p).filter(|&j| j != i) {
                neg += (dot(ai, &tt[j * a.d..(j + 1) * a.d]) / tau).exp();
            }
            total += -(pos / (pos + neg)).ln();
        }
    }
    total / a.n as f64
}

#[test]
fn cross_entropy_values() {
    let (l, _) = cross_entropy(&[0.3f64; 5], &[2], 5).unwrap();
    assert!((l - 5f64.ln()).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for margin in [0.0, 1.0, 2.0, 5.0, 10.0] {
        let (l, _) = cross_entropy(&[margin, 0.0, 0.0], &[0], 3).unwrap();
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-4);
    let (a, _) = cross_entropy(&[1.0, 0.0], &[0], 2).unwrap();
    let (b, _) = cross_entropy(&[0.0, 2.0], &[0], 2).unwrap();
    let (ab, _) = cross_entropy(&[1.0, 0.0, 0.0, 2.0], &[0, 0], 2).unwrap();
    assert!((ab - (a + b) / 2.0).abs() < 1e-12);
    assert!(cross_entropy(&[1.0f64, 0.0], &[2], 2).is_err());
}

#[test]
fn cross_entropy_gradient() {
    let logits = [0.2f64, -1.0, 0.7, 1.5, 0.1, -0.3];
    let labels = [2, 0];
    let (_, g) = cross_entropy(&logits, &labels, 3).unwrap();
    for i in 0..6 {
        let mut lp = logits;
        lp[i] += 1e-6;
        let mut lm = logits;
        lm[i] -= 1e-6;
        let fd = (cross_entropy(&lp, &labels, 3).unwrap().0 - cross_entropy(&lm, &labels, 3).unwrap().0) / 2e-6;
        assert!((fd - g[i]).abs() < 1e-8);
    }
}

#[test]
fn patchnce_two_patch_example() {
    let x = emb(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let l = patchnce(&x, &x, 1.0).unwrap().loss;
    let expect = 2.0 * -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((l - expect).abs() < 1e-12);
    assert!((l - 0.6265).abs() < 1e-4);
}

#[test]
fn patchnce_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let p = rng.random_range(2..=8);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=3);
        let tau = rng.random_range(0.05..2.0);
        let a = random_unit_rows(n, p, d, &mut rng);
        let t = random_unit_rows(n, p, d, &mut rng);
        let got = patchnce(&a, &t, tau).unwrap().loss;
        let want = naive_patchnce(&a, &t, tau);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn patchnce_symmetric_and_orthonormal_cases() {
    for p in 2..=8 {
        let x = emb(1, p, 3, [0.6, 0.0, 0.8].repeat(p));
        for tau in [0.07, 0.5, 3.0] {
            let l = patchnce(&x, &x, tau).unwrap().loss;
            assert!((l - p as f64 * (p as f64).ln()).abs() < 1e-9);
        }
    }
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let x = emb(1, 4, 4, eye);
    assert!(patchnce(&x, &x, 0.07).unwrap().loss < 1e-5);
    let one = emb(1, 1, 2, vec![1.0, 0.0]);
    assert!(patchnce(&one, &one, 0.07).is_err());
}

#[test]
fn patchnce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_unit_rows(2, 4, 3, &mut rng);
    let t = random_unit_rows(2, 4, 3, &mut rng);
    let g = patchnce(&a, &t, 0.3).unwrap();
    for (which, base) in [(0, &a), (1, &t)] {
        for i in 0..base.data.len() {
            let mut plus = base.clone();
            plus.data[i] += 1e-6;
            let mut minus = base.clone();
            minus.data[i] -= 1e-6;
            let f = |x: &PatchEmbeddings<f64>| {
                if which == 0 {
                    patchnce(x, &t, 0.3).unwrap().loss
                } else {
                    patchnce(&a, x, 0.3).unwrap().loss
                }
            };
            let fd = (f(&plus) - f(&minus)) / 2e-6;
            let an = if which == 0 { g.d_anchor[i] } else { g.d_target[i] };
            assert!((fd - an).abs() < 1e-7, "{which} {i}: {fd} vs {an}");
        }
    }
}

#[test]
fn alternative_matching_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_unit_rows(2, 3, 4, &mut rng);
    for kind in [MatchingKind::Mse, MatchingKind::SmoothL1] {
        assert_eq!(matching_loss(&a, &a, kind, 0.07).unwrap().loss, 0.0);
    }
    let d = [1e-3, -2e-3, 5e-4, 0.0];
    let mut shifted = a.clone();
    for row in shifted.data.chunks_mut(4) {
        for (v, dv) in row.iter_mut().zip(&d) {
            *v += dv;
        }
    }
    let d2: f64 = d.iter().map(|v| v * v).sum();
    assert!((mse(&shifted, &a).unwrap().loss - d2).abs() < 1e-9);
    let x = emb(1, 1, 2, vec![0.5, 3.0]);
    let z = emb(1, 1, 2, vec![0.0, 0.0]);
    assert!((smooth_l1(&x, &z).unwrap().loss - (0.125 + 2.5) / 2.0).abs() < 1e-12);
    let t = random_unit_rows(2, 3, 4, &mut rng);
    assert_eq!(
        matching_loss(&a, &t, MatchingKind::Patchnce, 0.2).unwrap().loss,
        patchnce(&a, &t, 0.2).unwrap().loss
    );
    assert_eq!("smooth_l1".parse::<MatchingKind>().unwrap(), MatchingKind::SmoothL1);
    assert!("l2".parse::<MatchingKind>().is_err());
}

#[test]
fn cross_contrast_cases() {
    let p = 5;
    let x = emb(1, p, 2, [1.0, 0.0].repeat(p));
    let cc = cross_contrast(&x, &x, &x, &x, MatchingKind::Patchnce, 0.07, Directions::BOTH).unwrap();
    assert!((cc.loss - 2.0 * p as f64 * (p as f64).ln()).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let po = random_unit_rows(2, 3, 3, &mut rng);
    let pa = random_unit_rows(2, 3, 3, &mut rng);
    let cc = cross_contrast(&po, &pa, &pa, &po, MatchingKind::Mse, 0.07, Directions::BOTH).unwrap();
    assert_eq!(cc.loss, 0.0);
}

#[test]
fn beta_ramp() {
    assert_eq!(beta_schedule(5.0, 5.0, 0.5, true), 0.5);
    assert_eq!(beta_schedule(12.0, 5.0, 0.5, true), 0.5);
    assert!((beta_schedule(0.0, 5.0, 1.0, true) - 0.006738).abs() < 1e-6);
    assert_eq!(beta_schedule(0.0, 5.0, 0.1, false), 0.1);
    let mut prev = 0.0;
    for e in 0..=5 {
        let b = beta_schedule(e as f64, 5.0, 1.0, true);
        assert!(b > prev);
        prev = b;
    }
}

#[test]
fn ema_rule() {
    let mut m = ParamSet::<f64>::new();
    m.push("w", crate::nn::Tensor { shape: vec![2], data: vec![1.0, 1.0] });
    let mut n = m.zeros_like();
    ema_update(&mut m, &n, 0.9).unwrap();
    assert_eq!(m.flat(), vec![0.9, 0.9]);
    n.get_mut(crate::nn::ParamId(0)).data = vec![2.0, -1.0];
    let mut gap: Vec<f64> = m.flat().iter().zip(n.flat()).map(|(a, b)| a - b).collect();
    for _ in 0..1000 {
        ema_update(&mut m, &n, 0.99).unwrap();
        let now: Vec<f64> = m.flat().iter().zip(n.flat()).map(|(a, b)| a - b).collect();
        for ((g, x), t) in gap.iter().zip(&now).zip(n.flat()) {
            // rounding is relative to the operands, not to the shrinking gap
            assert!((x - 0.99 * g).abs() <= 4.0 * f64::EPSILON * (t.abs() + g.abs()));
        }
        gap = now;
    }
    assert!(gap.iter().all(|g| g.abs() < 1e-4));
    let mut other = ParamSet::<f64>::new();
    other.push("w", crate::nn::Tensor::zeros(&[3]));
    assert!(ema_update(&mut m, &other, 0.9).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn breakdown_total_invariant(a in 0.0f64..10.0, b in 0.0f64..10.0, c in -5.0f64..50.0, beta in 0.0f64..5.0) {
        let l = total_loss(a, b, c, beta);
        prop_assert!((l.total - (0.5 * (l.cls_original + l.cls_augmented) + l.beta_effective * l.contrast)).abs() < 1e-9);
    }
}

fn tiny() -> (Network, ParamSet<f64>, Act<f64>, Act<f64>, Vec<usize>) {
    let spec = EncoderSpec {
        blocks: 2,
        width: 3,
        proj_dim: 4,
        fusion_levels: [1, 2],
        ..EncoderSpec::small_convnet(3, 4)
    };
    let (net, mut params) = Network::new::<f64>(&spec, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for t in params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let mut img = || -> Act<f64> {
        let v: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        Act::from_nchw(2, 3, 4, 4, &v)
    };
    let (xo, xa) = (img(), img());
    (net, params, xo, xa, vec![0, 2])
}

fn check_step_gradients(variant: AblationVariant, kind: MatchingKind) {
    let (net, params, xo, xa, labels) = tiny();
    let mut momentum = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in momentum.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let cfg = ObjectiveSettings {
        variant,
        kind,
        tau: 0.5,
        beta: 0.7,
    };
    let run = |p: &ParamSet<f64>| {
        phama_step(&net, p, Some(&momentum), &xo, Some(&xa), &labels, &cfg, false)
            .unwrap()
            .breakdown
            .total
    };
    let step = phama_step(&net, &params, Some(&momentum), &xo, Some(&xa), &labels, &cfg, true).unwrap();
    let analytic = step.grads.flat();
    let mut probe = params.clone();
    for i in 0..params.numel() {
        let orig = *probe.scalar_mut(i);
        *probe.scalar_mut(i) = orig + 1e-6;
        let fp = run(&probe);
        *probe.scalar_mut(i) = orig - 1e-6;
        let fm = run(&probe);
        *probe.scalar_mut(i) = orig;
        let fd = (fp - fm) / 2e-6;
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
        assert!(rel < 1e-4, "{variant:?} param {i}: {fd} vs {}", analytic[i]);
    }
    if variant.uses_momentum() {
        assert!(step.momentum_grads.unwrap().flat().iter().all(|&g| g == 0.0));
    }
}

#[test]
fn full_objective_gradients() {
    check_step_gradients(AblationVariant::FullPhama, MatchingKind::Patchnce);
    check_step_gradients(AblationVariant::BNoMomentum, MatchingKind::Patchnce);
    check_step_gradients(AblationVariant::CO2aOnly, MatchingKind::Mse);
    check_step_gradients(AblationVariant::AApdaOnly, MatchingKind::Patchnce);
    check_step_gradients(AblationVariant::BaselineErm, MatchingKind::Patchnce);
}

#[test]
fn momentum_side_changes_value_but_gets_no_gradient() {
    let (net, params, xo, xa, labels) = tiny();
    let cfg = ObjectiveSettings {
        variant: AblationVariant::FullPhama,
        kind: MatchingKind::Patchnce,
        tau: 0.07,
        beta: 1.0,
    };
    let base = phama_step(&net, &params, Some(&params), &xo, Some(&xa), &labels, &cfg, true).unwrap();
    assert!(base.momentum_grads.unwrap().flat().iter().all(|&g| g == 0.0));
    let mut moved = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in moved.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.01..0.01));
    }
    let other = phama_step(&net, &params, Some(&moved), &xo, Some(&xa), &labels, &cfg, false).unwrap();
    assert_ne!(base.breakdown.total, other.breakdown.total);
    // identical nets and identical views give equal classification terms
    let same = phama_step(&net, &params, Some(&params), &xo, Some(&xo), &labels, &cfg, false).unwrap();
    assert_eq!(same.breakdown.cls_original, same.breakdown.cls_augmented);
    let a_only = ObjectiveSettings {
        variant: AblationVariant::AApdaOnly,
        ..cfg
    };
    let a = phama_step(&net, &params, None, &xo, Some(&xa), &labels, &a_only, false).unwrap();
    assert_eq!(a.breakdown.total, 0.5 * (a.breakdown.cls_original + a.breakdown.cls_augmented));
}

#[test]
fn variant_names_round_trip() {
    for v in AblationVariant::ALL {
        assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        assert_eq!(serde_json::to_value(v).unwrap(), v.name());
    }
}
