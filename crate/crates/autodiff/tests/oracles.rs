use l2tww_autodiff::check::{gradcheck_suite, hvpcheck_suite, CaseReport};
use l2tww_autodiff::{grad, Graph, Tensor};
use proptest::prelude::*;

fn worst(reports: &[CaseReport]) -> &CaseReport {
    reports
        .iter()
        .max_by(|a, b| (a.error / a.tolerance).total_cmp(&(b.error / b.tolerance)))
        .unwrap()
}

#[test]
fn every_op_matches_central_differences() {
    let reports = gradcheck_suite(100, 1e-6, 1e-6).unwrap();
    let failing: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failing.is_empty(), "{} failures, first {:?}", failing.len(), failing.first());
    eprintln!("gradcheck worst: {:?}", worst(&reports));
}

#[test]
fn second_order_products_match_fd_of_gradients() {
    let reports = hvpcheck_suite(20, 1e-5, 1e-5, 1e-10).unwrap();
    let failing: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failing.is_empty(), "{} failures, first {:?}", failing.len(), failing.first());
}

#[test]
fn quadratic_and_linear_gradients() {
    let g = Graph::new();
    let theta = g.param(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let half_sq = theta.square().unwrap().sum().unwrap().scale(0.5);
    let d = grad(&half_sq, &[theta.clone()], false).unwrap();
    assert_eq!(*d[0].value(), *theta.value());

    let a = g.constant(Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap());
    let lin = a.mul(&theta).unwrap().sum().unwrap();
    let d = grad(&lin, &[theta], false).unwrap();
    assert_eq!(*d[0].value(), *a.value());
}

#[test]
fn unreachable_input_gets_zero_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    let y = g.param(Tensor::ones(&[3]));
    let f = x.sum().unwrap();
    let d = grad(&f, &[y], false).unwrap();
    assert_eq!(d[0].value().data(), &[0.0; 3]);
}

#[test]
fn strict_graph_reports_non_finite_op() {
    let g = Graph::strict();
    let x = g.param(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let f = x.recip().sum().unwrap();
    let err = grad(&f, &[x], false).unwrap_err();
    assert!(err.to_string().contains("recip"), "{err}");
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 6, 6], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0));
        let k = g.param(Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13) % 29) as f64 / 14.0 - 1.0));
        let y = x
            .conv2d(&k, l2tww_autodiff::ConvGeom { stride: 1, padding: 1 })
            .unwrap()
            .relu()
            .global_avg_pool()
            .unwrap()
            .cross_entropy(&[1, 3])
            .unwrap();
        let d = grad(&y, &[x, k], true).unwrap();
        let s = d[1].square().unwrap().sum().unwrap();
        let h = grad(&s, &[d[0].clone()], false);
        (y.value().item().to_bits(), (*d[1].value()).clone(), h.is_ok())
    };
    let (a, da, _) = run();
    let (b, db, _) = run();
    assert_eq!(a, b);
    assert!(da.data().iter().zip(db.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let g = Graph::new();
        let n = xs.len();
        let x = g.param(Tensor::new(&[n], xs.clone()).unwrap());
        let y = x.softmax().unwrap().value();
        let total: f64 = y.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&p| p > 0.0 || p == 0.0));
        let xs2: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let y2 = g.param(Tensor::new(&[n], xs2).unwrap()).softmax().unwrap().value();
        for (a, b) in y.data().iter().zip(y2.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu6_stays_in_range(xs in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let g = Graph::new();
        let n = xs.len();
        let y = g.param(Tensor::new(&[n], xs).unwrap()).relu6().value();
        prop_assert!(y.data().iter().all(|&v| (0.0..=6.0).contains(&v)));
    }

    #[test]
    fn resize_to_same_size_is_identity(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let g = Graph::new();
        let x = g.param(Tensor::from_fn(&[1, 2, h, w], |i| ((i as u64 * 31 + seed) % 97) as f64 / 7.0));
        let y = x.bilinear_resize(h, w).unwrap().value();
        for (a, b) in y.data().iter().zip(x.value().data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
