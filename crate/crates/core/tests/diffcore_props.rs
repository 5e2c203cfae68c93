use approx::assert_abs_diff_eq;
use caricature_core::diffcore::{conv2d, conv_transpose2d, instance_norm2d, l1_mean, ConvSpec, Graph, Shape4, Tensor4};
use caricature_core::verify::{check_component, gradcheck_suite, SuiteOptions, COMPONENTS, GRADCHECK_TOLERANCE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn every_component_passes_gradcheck_at_16() {
    let opts = SuiteOptions::default();
    let report = gradcheck_suite(&opts).unwrap();
    assert_eq!(report.len(), COMPONENTS.len());
    for c in &report {
        assert!(c.passed(), "{} max rel error {:e}", c.component, c.max_rel_error);
        assert!(c.checked > c.skipped, "{}: {} checked, {} skipped", c.component, c.checked, c.skipped);
    }
}

#[test]
fn gradcheck_holds_across_seeds_at_8() {
    for seed in 1..4 {
        let opts = SuiteOptions {
            size: 8,
            seed,
            ..Default::default()
        };
        for c in gradcheck_suite(&opts).unwrap() {
            assert!(c.max_rel_error < GRADCHECK_TOLERANCE, "seed {seed}: {} {:e}", c.component, c.max_rel_error);
        }
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let opts = SuiteOptions {
        size: 8,
        corrupt: vec!["cycle_loss".into()],
        ..Default::default()
    };
    assert!(!check_component("cycle_loss", &opts).unwrap().passed());
    assert!(check_component("tanh", &opts).unwrap().passed());
}

#[test]
fn conv_adjoint_identity() {
    let mut r = rng(3);
    let mut checked = 0;
    for (k, s, p) in [(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 0)] {
        let spec = ConvSpec::new(2, 3, k, s, p);
        let x = Tensor4::randn(Shape4::new(2, 2, 4, 4), 1.0, &mut r);
        let w = Tensor4::randn(spec.conv_weight_shape(), 1.0, &mut r);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        let v = Tensor4::randn(y.shape(), 1.0, &mut r);
        // conv_transpose2d with the adjoint spec (in/out swapped) reuses `w`.
        let tspec = ConvSpec::new(3, 2, k, s, p);
        let xt = conv_transpose2d(&v, &w, None, &tspec).unwrap();
        if xt.shape() != x.shape() {
            // Strided convs may drop trailing rows; the adjoint then has a smaller extent.
            continue;
        }
        let lhs = y.dot(&v).unwrap();
        let rhs = x.dot(&xt).unwrap();
        assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "k{k} s{s} p{p}: {lhs} vs {rhs}");
        checked += 1;
    }
    assert_eq!(checked, 3);
}

#[test]
fn forward_ops_are_bitwise_deterministic() {
    let run = || {
        let mut r = rng(9);
        let spec = ConvSpec::new(3, 4, 4, 2, 1);
        let x = Tensor4::randn(Shape4::new(2, 3, 8, 8), 1.0, &mut r);
        let w = Tensor4::randn(spec.conv_weight_shape(), 0.3, &mut r);
        let mut g = Graph::new();
        let xi = g.variable(x);
        let wi = g.variable(w);
        let y = g.conv2d(xi, wi, None, spec).unwrap();
        let t = g.tanh(y);
        let loss = g.dot_const(t, Tensor4::full(Shape4::new(2, 4, 4, 4), 0.5)).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.scalar(loss).to_bits(), grads.get(wi).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

fn tensor(shape: Shape4) -> impl Strategy<Value = Tensor4> {
    prop::collection::vec(-3.0f64..3.0, shape.len()).prop_map(move |d| Tensor4::from_vec(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_follows_shape_formula(h in 3usize..10, k in 1usize..4, s in 1usize..3, p in 0usize..2) {
        let spec = ConvSpec::new(2, 3, k, s, p);
        let x = Tensor4::zeros(Shape4::new(1, 2, h, h + 1));
        let w = Tensor4::zeros(spec.conv_weight_shape());
        let y = conv2d(&x, &w, None, &spec).unwrap();
        prop_assert_eq!(y.shape(), Shape4::new(1, 3, (h + 2 * p - k) / s + 1, (h + 1 + 2 * p - k) / s + 1));
        let tspec = ConvSpec::new(3, 2, k, s, p);
        if let Ok(t) = conv_transpose2d(&y, &Tensor4::zeros(tspec.transpose_weight_shape()), None, &tspec) {
            prop_assert_eq!(t.shape().h(), (y.shape().h() - 1) * s + k - 2 * p);
        }
    }

    #[test]
    fn instance_norm_standardizes(x in tensor(Shape4::new(2, 3, 4, 4))) {
        let ones = Tensor4::full(Shape4::new(1, 3, 1, 1), 1.0);
        let zeros = Tensor4::zeros(Shape4::new(1, 3, 1, 1));
        let (y, _) = instance_norm2d(&x, &ones, &zeros, 1e-5).unwrap();
        for plane in y.data().chunks(16) {
            let m = plane.iter().sum::<f64>() / 16.0;
            let v = plane.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(m.abs() < 1e-9);
            // eps shrinks the variance of near-constant planes below one.
            prop_assert!(v <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn l1_is_symmetric_and_zero_only_on_equality(a in tensor(Shape4::new(1, 2, 3, 3)), b in tensor(Shape4::new(1, 2, 3, 3))) {
        let ab = l1_mean(&a, &b).unwrap();
        prop_assert_eq!(ab, l1_mean(&b, &a).unwrap());
        prop_assert_eq!(l1_mean(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab == 0.0, a == b);
    }

    #[test]
    fn activations_stay_in_range(x in tensor(Shape4::new(1, 1, 4, 4)), scale in 1.0f64..400.0) {
        let mut g = Graph::new();
        let xi = g.constant(x.map(|v| v * scale));
        let s = g.sigmoid(xi);
        let t = g.tanh(xi);
        prop_assert!(g.value(s).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert!(g.value(t).data().iter().all(|v| *v > -1.0 && *v < 1.0));
    }
}

#[test]
fn instance_norm_on_zero_to_three() {
    let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let (y, _) = instance_norm2d(&x, &Tensor4::scalar(1.0), &Tensor4::scalar(0.0), 1e-5).unwrap();
    let m = y.mean();
    let v = y.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
    assert_abs_diff_eq!(m, 0.0, epsilon = 1e-4);
    assert_abs_diff_eq!(v, 1.0, epsilon = 1e-4);
}
