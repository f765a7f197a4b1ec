use super::*;
use crate::testutil::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn sum_all(g: &mut Graph<f64>, v: Var) -> Result<Var, TensorError> {
    let axes: Vec<usize> = (0..g.shape(v).len()).collect();
    g.sum(v, &axes)
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Result<Var, TensorError> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    sum_all(g, p)
}

#[test]
fn conv_sum_of_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(1);
    let xv = uniform(&mut r, &[2, 1, 5, 6], -1.0, 1.0);
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let mut g = Graph::<f64>::new();
    let x = g.constant(xv.clone());
    let w = g.constant(t(&[1, 1, 3, 3], &kernel));
    let y = g.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(g.value(y), &xv);
}

#[test]
fn conv_matches_nested_loop_reference() {
    let mut r = rng(2);
    let xv = uniform(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let wv = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(xv.clone());
        let w = g.constant(wv.clone());
        let y = g.conv2d(x, w, stride, pad).unwrap();
        let want = conv_reference(&xv, &wv, stride, pad);
        assert_eq!(g.shape(y), want.shape());
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_shape_errors_name_axes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    match g.conv2d(x, w, 1, 1) {
        Err(TensorError::ShapeMismatch { axes, .. }) => assert_eq!(axes, vec![1]),
        other => panic!("unexpected {other:?}"),
    }
    let w = g.constant(Tensor::zeros(vec![1, 2, 5, 5]));
    assert!(matches!(g.conv2d(x, w, 1, 0), Err(TensorError::ShapeMismatch { .. })));
    let w = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    assert!(matches!(g.conv2d(x, w, 1, 0), Err(TensorError::Invalid { .. })));
}

#[test]
fn relu_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn sqrt_derivative_at_four() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[1], &[4.0]));
    let y = g.sqrt(x);
    let s = g.sum(y, &[0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn composite_expression_matches_finite_differences() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let b = uniform(&mut r, &[3, 1], 0.5, 2.0);
    let c = away_from_zero(&mut r, &[3, 4], 0.2, 1.0);
    let err = grad_check(&[a, b, c], |g, v| {
        let q = g.div(v[0], v[1])?;
        let s = g.sqrt(q);
        let m = g.mul(s, v[2])?;
        let l = g.log(v[0]);
        let d = g.sub(m, l)?;
        let r = g.relu(d);
        let n = g.add(r, v[2])?;
        weighted_sum(g, n)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn every_primitive_passes_gradient_check_on_random_inputs() {
    type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("relu", vec![vec![2, 3]], |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y)
        }),
        ("neg", vec![vec![4]], |g, v| {
            let y = g.neg(v[0]);
            weighted_sum(g, y)
        }),
        ("add_bcast", vec![vec![2, 3, 2], vec![2, 1, 1]], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("sub_bcast_lhs", vec![vec![2, 1], vec![2, 3]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("mul_bcast", vec![vec![3, 4], vec![3, 1]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("div", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.div(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("sqrt", vec![vec![5]], |g, v| {
            let a = g.mul(v[0], v[0])?;
            let y = g.sqrt(a);
            weighted_sum(g, y)
        }),
        ("log", vec![vec![5]], |g, v| {
            let a = g.mul(v[0], v[0])?;
            let y = g.log(a);
            weighted_sum(g, y)
        }),
        ("clamp", vec![vec![6]], |g, v| {
            let y = g.clamp(v[0], -0.5, 0.5);
            weighted_sum(g, y)
        }),
        ("scalar_ops", vec![vec![3]], |g, v| {
            let a = g.mul_scalar(v[0], 1.7);
            let y = g.add_scalar(a, -0.3);
            weighted_sum(g, y)
        }),
        ("recip", vec![vec![4]], |g, v| {
            let y = g.recip(v[0])?;
            weighted_sum(g, y)
        }),
        ("reshape", vec![vec![2, 3]], |g, v| {
            let y = g.reshape(v[0], &[3, 2])?;
            weighted_sum(g, y)
        }),
        ("sum_axes", vec![vec![2, 3, 4]], |g, v| {
            let y = g.sum(v[0], &[0, 2])?;
            weighted_sum(g, y)
        }),
        ("mean_trailing", vec![vec![2, 3, 4]], |g, v| {
            let y = g.mean(v[0], &[1, 2])?;
            weighted_sum(g, y)
        }),
        ("var_middle", vec![vec![3, 4, 2]], |g, v| {
            let y = g.var(v[0], &[1])?;
            weighted_sum(g, y)
        }),
        ("linear", vec![vec![3, 4], vec![2, 4]], |g, v| {
            let y = g.linear(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("l2_normalize", vec![vec![3, 4]], |g, v| {
            let y = g.l2_normalize(v[0], 1e-8)?;
            weighted_sum(g, y)
        }),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            weighted_sum(g, y)
        }),
    ];
    for (name, shapes, build) in cases {
        let mut worst = 0.0f64;
        for trial in 0..20u64 {
            let mut r = rng(100 + trial);
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| away_from_zero(&mut r, s, 0.1, 1.5))
                .collect();
            worst = worst.max(grad_check(&inputs, build));
        }
        assert!(worst < 1e-5, "{name}: max relative error {worst}");
    }
}

#[test]
fn division_guard_policies() {
    let mut g = Graph::<f64>::with_div_guard(DivGuard::Error);
    let a = g.constant(t(&[2], &[1.0, 1.0]));
    let b = g.constant(t(&[2], &[2.0, 0.0]));
    assert!(matches!(g.div(a, b), Err(TensorError::DivisionByZero { index: 1, .. })));

    let mut g = Graph::<f64>::new();
    let a = g.param(t(&[2], &[1.0, 1.0]));
    let b = g.param(t(&[2], &[2.0, -0.0]));
    let y = g.div(a, b).unwrap();
    let v = g.value(y).data().to_vec();
    assert_eq!(v[0], 0.5);
    assert!(v[1].is_finite() && v[1].abs() == 1.0 / f64::EPSILON);
    let s = g.sum(y, &[0]).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(b).unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn broadcast_is_limited_to_trailing_singletons() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![1, 3]));
    assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    let c = g.constant(Tensor::zeros(vec![3]));
    assert!(g.mul(a, c).is_err());
    let d = g.constant(Tensor::zeros(vec![2, 1]));
    assert!(g.mul(a, d).is_ok());
}

#[test]
fn reductions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let m = g.mean(x, &[0]).unwrap();
    assert_eq!(g.value(m).data(), &[2.0]);
    let c = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let v = g.var(c, &[0]).unwrap();
    assert_eq!(g.value(v).data(), &[0.0]);
    assert!(matches!(g.mean(x, &[]), Err(TensorError::EmptyReduction { .. })));
    assert!(matches!(g.sum(x, &[1]), Err(TensorError::InvalidAxes { .. })));
    let y = g.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(g.sum(y, &[0, 0]), Err(TensorError::InvalidAxes { .. })));
}

#[test]
fn variance_matches_two_pass_oracle() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[1000], -3.0, 5.0);
    let (_, std) = two_pass_mean_std(x.data());
    let mut g = Graph::<f64>::new();
    let v = g.constant(x);
    let var = g.var(v, &[0]).unwrap();
    assert!((g.value(var).data()[0] - std * std).abs() < 1e-10);
}

#[test]
fn reduction_over_leading_and_trailing_axes_matches_loops() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[3, 4, 5], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let v = g.constant(x.clone());
    let m = g.mean(v, &[0, 2]).unwrap();
    assert_eq!(g.shape(m), &[4]);
    for j in 0..4 {
        let mut s = 0.0;
        for i in 0..3 {
            for k in 0..5 {
                s += x.data()[(i * 4 + j) * 5 + k];
            }
        }
        assert!((g.value(m).data()[j] - s / 15.0).abs() < 1e-14);
    }
}

#[test]
fn normalize_and_linear() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 2], &[3.0, 4.0]));
    let y = g.l2_normalize(x, 1e-8).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

    let mut r = rng(6);
    let xv = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let x = g.constant(xv.clone());
    let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let l = g.linear(x, eye).unwrap();
    assert_eq!(g.value(l), &xv);

    let z = g.constant(t(&[3, 2], &[1.0, 1.0, 0.0, 0.0, 2.0, 0.0]));
    assert!(matches!(g.l2_normalize(z, 1e-8), Err(TensorError::ZeroNormRow { row: 1, .. })));
}

#[test]
fn normalized_inner_product_gradient() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[2, 5], -1.0, 1.0);
    let c = uniform(&mut r, &[2, 5], -1.0, 1.0);
    let err = grad_check_subset(&[x, c], &[true, false], |g, v| {
        let y = g.l2_normalize(v[0], 1e-8)?;
        let p = g.mul(y, v[1])?;
        sum_all(g, p)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn backward_twice_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let s = g.sum(x, &[0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let d = g.detach(p);
    let q = g.mul(d, x).unwrap();
    let s = g.sum(q, &[0]).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(d).is_none());
    assert_eq!(g.grad(x).unwrap(), &[3.0, 8.0]);
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(8);
        let xv = uniform(&mut r, &[3, 2, 9, 9], -1.0, 1.0).cast::<f32>();
        let wv = uniform(&mut r, &[4, 2, 3, 3], -1.0, 1.0).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let x = g.param(xv);
        let w = g.param(wv);
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let y = g.relu(y);
        let m = g.var(y, &[2, 3]).unwrap();
        let s = g.sum(m, &[0, 1]).unwrap();
        g.backward(s).unwrap();
        (
            g.value(y).data().to_vec(),
            g.grad(x).unwrap().to_vec(),
            g.grad(w).unwrap().to_vec(),
        )
    };
    let a = run();
    let b = run();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

#[test]
fn custom_node_routes_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, -2.0]));
    let value = Tensor::new(vec![2], g.value(x).data().iter().map(|v| v * v).collect()).unwrap();
    let y = g.custom(
        &[x],
        value,
        Box::new(|p, _, gr| vec![Some(p[0].data().iter().zip(gr).map(|(x, g)| 2.0 * x * g).collect())]),
    );
    let s = g.sum(y, &[0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
}
