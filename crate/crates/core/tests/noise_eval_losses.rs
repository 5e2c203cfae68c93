use caricature_core::diffcore::{Graph, Shape4, Tensor4};
use caricature_core::eval::{
    inception_score, inception_score_from_probs, patch_response_stats, ClassifierHead, CyclingOneHotStub, UniformStub,
};
use caricature_core::losses::{tape, total_generator_objective, LossWeights};
use caricature_core::networks::{DiscriminatorKind, Generator, GeneratorConfig, PatchDiscriminator};
use caricature_core::noisemix::{alpha_sweep, mix_noise, noise_field, NoiseSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw_image(seed: u64, size: usize) -> Tensor4 {
    Tensor4::uniform(Shape4::new(1, 3, size, size), 0.0, 255.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn noise_mix_laws() {
    let x = raw_image(1, 4);
    assert_eq!(mix_noise(&x, &NoiseSpec::new(1.0, 5).unwrap()).unwrap(), x);
    assert_eq!(mix_noise(&x, &NoiseSpec::new(0.0, 5).unwrap()).unwrap(), noise_field(x.shape(), 5));
    for seed in 0..50 {
        let alpha = seed as f64 / 49.0;
        let n = noise_field(x.shape(), seed);
        let out = mix_noise(&x, &NoiseSpec::new(alpha, seed).unwrap()).unwrap();
        for ((o, a), b) in out.data().iter().zip(x.data()).zip(n.data()) {
            assert!(*o >= a.min(*b) && *o <= a.max(*b));
            assert!((0.0..=255.0).contains(o));
        }
    }
}

#[test]
fn noise_mix_monte_carlo_mean() {
    let x = raw_image(2, 4);
    let seeds = 2000;
    for alpha in [0.3, 0.5, 0.9] {
        let mut sum = vec![0.0; x.len()];
        for seed in 0..seeds {
            let out = mix_noise(&x, &NoiseSpec::new(alpha, seed).unwrap()).unwrap();
            for (s, v) in sum.iter_mut().zip(out.data()) {
                *s += v;
            }
        }
        // Var of (1-α)·U[0,255] is (1-α)²·255²/12.
        let sigma = (1.0 - alpha) * 255.0 / 12f64.sqrt() / (seeds as f64).sqrt();
        for (s, xv) in sum.iter().zip(x.data()) {
            let mean = s / seeds as f64;
            let expect = alpha * xv + (1.0 - alpha) * 127.5;
            assert!((mean - expect).abs() <= 3.0 * sigma, "alpha {alpha}: {mean} vs {expect} (σ {sigma})");
        }
    }
}

#[test]
fn alpha_sweep_reuses_one_field() {
    let cfg = GeneratorConfig {
        base_channels: 8,
        n_residual_blocks: 1,
        in_channels: 3,
        out_channels: 3,
    };
    let g = Generator::with_std(cfg, 0, 0.3).unwrap();
    let x = raw_image(3, 16);
    let plain = g.forward(&caricature_core::data::normalize_raw(&x)).unwrap();
    assert_eq!(alpha_sweep(&g, &x, &[1.0], 9).unwrap()[0], plain);
    let pair = alpha_sweep(&g, &x, &[0.5, 0.5], 9).unwrap();
    assert_eq!(pair[0], pair[1]);
    let three = alpha_sweep(&g, &x, &[1.0, 0.7, 0.4], 9).unwrap();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(caricature_core::diffcore::l1_mean(&three[i], &three[j]).unwrap() > 0.0);
        }
    }
    assert!(alpha_sweep(&g, &x, &[1.2], 9).is_err());
}

/// Direct summation of exp(mean KL(p ‖ marginal)) over contiguous splits.
fn kl_oracle(probs: &[Vec<f64>], splits: usize) -> (f64, f64) {
    let n = probs.len();
    let mut scores = Vec::new();
    for k in 0..splits {
        let part = &probs[k * n / splits..(k + 1) * n / splits];
        let c = part[0].len();
        let mut marginal = vec![0.0; c];
        for p in part {
            for j in 0..c {
                marginal[j] += p[j] / part.len() as f64;
            }
        }
        let mut kl = 0.0;
        for p in part {
            for j in 0..c {
                if p[j] > 0.0 {
                    kl += p[j] * (p[j] / marginal[j]).ln();
                }
            }
        }
        scores.push((kl / part.len() as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    (mean, var.sqrt())
}

fn fixed_vectors() -> Vec<Vec<f64>> {
    let raw = [
        [0.7, 0.2, 0.1],
        [0.1, 0.8, 0.1],
        [0.2, 0.2, 0.6],
        [0.5, 0.25, 0.25],
        [0.05, 0.05, 0.9],
        [0.3, 0.3, 0.4],
        [0.9, 0.05, 0.05],
        [0.15, 0.7, 0.15],
        [0.4, 0.4, 0.2],
        [0.01, 0.98, 0.01],
    ];
    raw.iter().map(|r| r.to_vec()).collect()
}

#[test]
fn inception_score_matches_kl_oracle() {
    let probs = fixed_vectors();
    let (m, s) = inception_score_from_probs(&probs, 2).unwrap();
    let (om, os) = kl_oracle(&probs, 2);
    assert!((m - om).abs() <= 1e-9, "{m} vs {om}");
    assert!((s - os).abs() <= 1e-9, "{s} vs {os}");
    let (m1, _) = inception_score_from_probs(&probs, 1).unwrap();
    let mut reversed = probs.clone();
    reversed.reverse();
    assert!((inception_score_from_probs(&reversed, 1).unwrap().0 - m1).abs() <= 1e-12);
    assert!((1.0..=3.0).contains(&m1));
}

#[test]
fn inception_score_stub_cases() {
    let images = vec![Tensor4::zeros(Shape4::new(1, 3, 4, 4)); 20];
    let (m, s) = inception_score(&UniformStub { classes: 5 }, &images, 2).unwrap();
    assert_eq!((m, s), (1.0, 0.0));
    let (m, _) = inception_score(&CyclingOneHotStub { classes: 5 }, &images, 2).unwrap();
    assert!((m - 5.0).abs() <= 1e-6);
    assert!(inception_score(&UniformStub { classes: 5 }, &images[..3], 10).is_err());
    assert_eq!(CyclingOneHotStub { classes: 5 }.probabilities(&images).unwrap().len(), 20);
}

#[test]
fn patch_stats_on_identical_sets() {
    let d = PatchDiscriminator::new(DiscriminatorKind::coarse().with_grid(4), 16, 4, 0, 0.02).unwrap();
    let imgs: Vec<Tensor4> = (0..3).map(|i| raw_image(i, 16).map(|v| v / 127.5 - 1.0)).collect();
    let s = patch_response_stats(&d, &imgs, &imgs).unwrap();
    assert_eq!(s.real, s.fake);
    assert!(s.real.mean > 0.0 && s.real.mean < 1.0);
}

#[test]
fn objective_composition_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    assert_eq!((w.gamma, w.sigma), (10.0, 2.0));
    for _ in 0..200 {
        let (ac, af, cyc, pc): (f64, f64, f64, f64) = (rng.random(), rng.random(), rng.random(), rng.random());
        let expect = (0.5 * ac + 0.5 * af) + 10.0 * cyc + 2.0 * pc;
        assert!((total_generator_objective(ac, af, cyc, pc, &w) - expect).abs() <= 1e-12);

        let mut g = Graph::new();
        let ids: Vec<_> = [ac, af, cyc, pc].iter().map(|v| g.constant(Tensor4::scalar(*v))).collect();
        let t = tape::total(&mut g, ids[0], ids[1], ids[2], ids[3], &w).unwrap();
        assert!((g.scalar(t) - expect).abs() <= 1e-12);

        let off = LossWeights {
            gamma: 0.0,
            sigma: 0.0,
            ..w.clone()
        };
        assert!((total_generator_objective(ac, af, cyc, pc, &off) - (0.5 * ac + 0.5 * af)).abs() <= 1e-12);
    }
    assert!((total_generator_objective(1.0, 1.0, 0.2, 0.1, &w) - 3.2).abs() <= 1e-12);
}
