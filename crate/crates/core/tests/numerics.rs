mod common;

use common::{assert_close, check_gradients, tensor};
use ganaug::numerics::{
    load_params, save_params, AdamConfig, AdamState, BoundParams, Graph, LayerSpec, NodeId,
    NumericsError, ParamSet, PixelShift, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn square_and_its_derivative() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.scalar(y).unwrap(), 9.0);
    assert_eq!(g.backprop(y, &[x]).unwrap()[0].data(), &[6.0]);
}

#[test]
fn fidelity_term_at_zero_logit() {
    let mut g = Graph::new();
    let d = g.input("d", Tensor::scalar(0.0)).unwrap();
    let neg = g.scale(d, -1.0).unwrap();
    let l = g.softplus(neg).unwrap();
    assert_close(g.scalar(l).unwrap(), std::f64::consts::LN_2, 1e-15);
    assert_close(g.backprop(l, &[d]).unwrap()[0].data()[0], -0.5, 1e-15);
}

#[test]
fn mse_of_identical_tensors_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::randn(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let a = g.input("a", t.clone()).unwrap();
    let b = g.constant(t);
    let d = g.sub(a, b).unwrap();
    let s = g.square(d).unwrap();
    let m = g.mean(s).unwrap();
    assert_eq!(g.scalar(m).unwrap(), 0.0);
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input("b", Tensor::zeros(&[3, 2])).unwrap();
    let err = g.add(a, b).unwrap_err();
    match err {
        NumericsError::ShapeMismatch { node, .. } => assert!(node.contains("#2"), "{node}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn evaluate_rejects_shape_change_and_unknown_input() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::zeros(&[2])).unwrap();
    let s = g.sum(a).unwrap();
    assert!(matches!(
        g.evaluate(s, &[("a", Tensor::zeros(&[3]))]),
        Err(NumericsError::ShapeMismatch { .. })
    ));
    assert!(matches!(
        g.evaluate(s, &[("zz", Tensor::zeros(&[2]))]),
        Err(NumericsError::UnknownInput(_))
    ));
    assert_eq!(g.evaluate(s, &[("a", tensor(&[2], &[1.0, 2.5]))]).unwrap(), 3.5);
}

#[test]
fn non_finite_intermediate_is_rejected() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::scalar(1e300)).unwrap();
    let err = g.scale(a, 1e300).unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { .. }));
    assert!(g.input("b", Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn gradient_of_constant_is_rejected() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::scalar(2.0)).unwrap();
    let c = g.constant(Tensor::scalar(3.0));
    let y = g.mul(a, c).unwrap();
    assert!(matches!(g.grad(y, &[c]), Err(NumericsError::NotDifferentiable(_))));
    let v = g.input("v", Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.grad(v, &[a]), Err(NumericsError::NotScalar(_))));
    // An input the output does not depend on gets a zero gradient.
    let unused = g.input("u", Tensor::ones(&[3])).unwrap();
    assert_eq!(g.backprop(y, &[unused]).unwrap()[0], Tensor::zeros(&[3]));
}

/// Every parameter of a random two-layer network, full coordinate sweep.
#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let l1 = LayerSpec::dense("l1", 5, 7).with_gain(2f64.sqrt());
    let l2 = LayerSpec::dense("l2", 7, 1);
    let mut params = ParamSet::new();
    l1.init(&mut params, &mut rng);
    l2.init(&mut params, &mut rng);
    for name in ["l1.b", "l2.b"] {
        let b = params.get_mut(name).unwrap();
        let shape = b.shape().to_vec();
        *b = Tensor::randn(&shape, &mut rng);
    }
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, &params, true).unwrap();
    let x = g.constant(Tensor::randn(&[4, 5], &mut rng));
    let h = l1.forward(&mut g, &p, x).unwrap();
    let h = g.leaky_relu(h, 0.2).unwrap();
    let y = l2.forward(&mut g, &p, h).unwrap();
    let l = g.softplus(y).unwrap();
    let loss = g.mean(l).unwrap();
    let ids: Vec<NodeId> = p.trainable().iter().map(|(_, id)| *id).collect();
    let report = check_gradients(&mut g, loss, &ids, usize::MAX, &mut rng);
    assert!(report.checked >= 40, "checked {} skipped {}", report.checked, report.skipped);
    assert!(report.max_rel_err < 1e-4, "{} ({})", report.max_rel_err, report.worst);
}

/// A graph touching every operation, including a gradient-penalty term whose
/// gradient requires differentiating through recorded backward nodes.
fn all_ops_graph(rng: &mut ChaCha8Rng) -> (Graph, NodeId, Vec<NodeId>) {
    let n = 2;
    let mut g = Graph::new();
    let x = g.input("x", Tensor::randn(&[n, 3, 6, 6], rng)).unwrap();
    let w1 = g.input("w1", Tensor::randn(&[4, 3, 3, 3], rng).map(|v| 0.3 * v)).unwrap();
    let w2 = g.input("w2", Tensor::randn(&[2, 4, 3, 3], rng).map(|v| 0.3 * v)).unwrap();
    let v = g.input("v", Tensor::randn(&[8, 3], rng)).unwrap();
    let b = g.input("b", Tensor::randn(&[3], rng)).unwrap();
    let s = g.input("s", Tensor::randn(&[1], rng)).unwrap();

    let h = g.conv2d(x, w1, 1, 1).unwrap();
    let h = g.leaky_relu(h, 0.2).unwrap();
    let pooled = g.sumpool2(h).unwrap();
    let up = g.upsample2(pooled).unwrap();
    let up = g.scale(up, 0.25).unwrap();
    let c = g.concat(h, up).unwrap();
    let c = g.slice(c, 2, 4).unwrap();
    let y = g.conv2d(c, w2, 2, 1).unwrap();
    let y = g.sigmoid(y).unwrap();
    let shifts: Vec<PixelShift> = (0..n)
        .map(|_| PixelShift {
            flip: rng.random_bool(0.5),
            dx: rng.random_range(-1..=1),
            dy: rng.random_range(-1..=1),
        })
        .collect();
    let y = g.pixel_shift(y, &shifts).unwrap();
    let y = g.crop(y, 1, 0, 2, 2).unwrap();
    let flat = g.reshape(y, &[n, 8]).unwrap();
    let z = g.matmul(flat, v).unwrap();
    let bb = g.broadcast_leading(b, n).unwrap();
    let z = g.add(z, bb).unwrap();
    let z = g.softplus(z).unwrap();
    let zt = g.transpose(z).unwrap();
    let rows = g.sum_trailing(zt, 1).unwrap();
    let rows2 = g.mul(rows, rows).unwrap();
    let sb = g.broadcast_scalar(s, &[3]).unwrap();
    let rows2 = g.sub(rows2, sb).unwrap();
    let part1 = g.sum(rows2).unwrap();

    let cent = Tensor::randn(&[n, 8], rng);
    let spread = vec![0.3, 1.2];
    let d = g.set_sq_dist(flat, cent, spread).unwrap();
    let part2 = g.sum(d).unwrap();

    let colsum = g.sum_leading(z).unwrap();
    let e = g.expand_trailing(colsum, &[2]).unwrap();
    let e = g.square(e).unwrap();
    let e = g.add_scalar(e, 1.0).unwrap();
    let part3 = g.mean(e).unwrap();

    // Penalty on the input gradient of a scalar "critic" score.
    let score = g.sum(z).unwrap();
    let gx = g.grad(score, &[x]).unwrap()[0];
    let gx2 = g.square(gx).unwrap();
    let pen = g.mean(gx2).unwrap();

    let t = g.add(part1, part2).unwrap();
    let t = g.add(t, part3).unwrap();
    let loss = g.add(t, pen).unwrap();
    (g, loss, vec![x, w1, w2, v, b, s])
}

#[test]
fn every_operation_matches_finite_differences_over_100_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut total = common::FdReport::new();
    for _ in 0..100 {
        let (mut g, loss, inputs) = all_ops_graph(&mut rng);
        total.merge(check_gradients(&mut g, loss, &inputs, 4, &mut rng));
    }
    assert!(total.checked > 1500, "checked {} skipped {}", total.checked, total.skipped);
    assert!(total.max_rel_err < 1e-4, "{} ({})", total.max_rel_err, total.worst);
}

#[test]
fn evaluation_is_bit_identical() {
    let (mut g1, l1, _) = all_ops_graph(&mut ChaCha8Rng::seed_from_u64(5));
    let (mut g2, l2, ins) = all_ops_graph(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(g1.scalar(l1).unwrap().to_bits(), g2.scalar(l2).unwrap().to_bits());
    let a = g1.backprop(l1, &ins).unwrap();
    let b = g2.backprop(l2, &ins).unwrap();
    assert_eq!(a, b);
    let x = g1.value(ins[0]).clone();
    let v1 = g1.evaluate(l1, &[("x", x.clone())]).unwrap();
    let v2 = g1.evaluate(l1, &[("x", x)]).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
}

#[test]
fn set_distance_matches_explicit_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 3;
    let m = 5;
    let x = Tensor::randn(&[n, m], &mut rng);
    let targets: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[n, m], &mut rng)).collect();
    let mut cent = Tensor::zeros(&[n, m]);
    for t in &targets {
        for (c, v) in cent.data_mut().iter_mut().zip(t.data()) {
            *c += v / targets.len() as f64;
        }
    }
    let spread: Vec<f64> = (0..n)
        .map(|i| {
            targets
                .iter()
                .map(|t| (0..m).map(|j| (t.data()[i * m + j] - cent.data()[i * m + j]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / targets.len() as f64
        })
        .collect();
    let mut g = Graph::new();
    let xi = g.input("x", x.clone()).unwrap();
    let d = g.set_sq_dist(xi, cent, spread).unwrap();
    for i in 0..n {
        let explicit = targets
            .iter()
            .map(|t| (0..m).map(|j| (x.data()[i * m + j] - t.data()[i * m + j]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (targets.len() * m) as f64;
        assert_close(g.value(d).data()[i], explicit, 1e-12);
    }
}

#[test]
fn pixel_shift_moves_content() {
    let mut g = Graph::new();
    let img: Vec<f64> = (1..=9).map(f64::from).collect();
    let x = g.constant(tensor(&[1, 1, 3, 3], &img));
    let right = g.pixel_shift(x, &[PixelShift { flip: false, dx: 1, dy: 0 }]).unwrap();
    assert_eq!(g.value(right).data(), &[0., 1., 2., 0., 4., 5., 0., 7., 8.]);
    let flip = g.pixel_shift(x, &[PixelShift { flip: true, dx: 0, dy: 0 }]).unwrap();
    assert_eq!(g.value(flip).data(), &[3., 2., 1., 6., 5., 4., 9., 8., 7.]);
    let down = g.pixel_shift(x, &[PixelShift { flip: false, dx: 0, dy: 2 }]).unwrap();
    assert_eq!(g.value(down).data(), &[0., 0., 0., 0., 0., 0., 1., 2., 3.]);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::new();
    LayerSpec::conv("c", 2, 3, 3, 1).init(&mut ps, &mut rng);
    LayerSpec::dense("d", 4, 2).init(&mut ps, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/params.json");
    save_params(&path, &ps, serde_json::Value::Null).unwrap();
    assert_eq!(load_params(&path).unwrap().params, ps);
    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_params(&path), Err(NumericsError::Checkpoint { .. })));
}

proptest! {
    /// Zero gradients leave parameters untouched whenever the first moment is
    /// zero, whatever the step count and second moment.
    #[test]
    fn adam_zero_gradient_is_identity(
        vals in prop::collection::vec(-10.0f64..10.0, 1..8),
        second in prop::collection::vec(0.0f64..5.0, 8),
        steps in 0u64..1000,
        lr in 1e-5f64..1.0,
    ) {
        let n = vals.len();
        let mut p = Tensor::new(vec![n], vals.clone()).unwrap();
        let mut st = AdamState::new(&[n]);
        st.step_count = steps;
        st.second_moment = Tensor::new(vec![n], second[..n].to_vec()).unwrap();
        st.step(&AdamConfig::default(), &mut p, &Tensor::zeros(&[n]), lr).unwrap();
        prop_assert_eq!(p.data(), &vals[..]);
        prop_assert_eq!(st.step_count, steps + 1);
    }
}
