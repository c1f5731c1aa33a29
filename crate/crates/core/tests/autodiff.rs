use haa::tensor::gradcheck::{check_at_smooth_point, finite_diff_grad};
use haa::tensor::{Graph, Tensor, Var};
use haa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>())
}

/// `sum(v * w)` with fixed pseudo-random weights, so every output coordinate
/// contributes a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7361).sin() + 0.3).collect();
    let w = g.constant(Tensor::from_f64(&shape, &w)?);
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

const POINTS: usize = 20;
const TOL: f64 = 1e-4;

fn check_primitive<F>(name: &str, build: F, shapes: &[&[usize]], lo: f64, hi: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for point in 0..POINTS {
        let outcome = check_at_smooth_point(
            |g, vars| {
                let y = build(g, vars)?;
                weighted_sum(g, y)
            },
            || shapes.iter().map(|s| uniform(&mut rng, s, lo, hi)).collect(),
            200,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(
            outcome.max_rel_error < TOL,
            "{name} point {point}: relative error {}",
            outcome.max_rel_error
        );
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);

    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);

    let z = g.constant(t(&[2], &[0.0, 0.0]));
    let sm = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(sm).data(), &[0.5, 0.5]);
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    let msg = g.matmul(a, a).unwrap_err().to_string();
    assert!(msg.contains("matmul"), "{msg}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1], &[3.0]));
    let y = g.mul(x, x).unwrap();
    let loss = g.sum_all(y).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[6.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    let loss = g.sum_all(r).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);

    // subgradient at the kink is zero
    let mut g = Graph::new();
    let x = g.param(t(&[1], &[0.0]));
    let r = g.relu(x);
    let loss = g.sum_all(r).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.exp(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn unreachable_leaf_gets_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let loss = g.sum_all(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    let c = g.constant(t(&[1], &[1.0]));
    assert!(grads.get(c).is_none());
}

#[test]
fn max_ties_route_to_first_element() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 3], &[1.0, 5.0, 5.0, 2.0, 2.0, 0.0]));
    let m = g.max(x, &[1], false).unwrap();
    let loss = g.sum_all(m).unwrap();
    let gx = g.backward(loss).unwrap().get(x).unwrap().to_vec();
    assert_eq!(gx, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn composite_three_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let h1 = g.matmul(v[0], v[1])?;
        let h1 = g.tanh(h1);
        let h2 = g.matmul(h1, v[2])?;
        let h2 = g.sigmoid(h2);
        let h3 = g.matmul(h2, v[3])?;
        let h3 = g.exp(h3);
        weighted_sum(g, h3)
    };
    for _ in 0..5 {
        let outcome = check_at_smooth_point(
            build,
            || {
                vec![
                    uniform(&mut rng, &[3, 4], -1.0, 1.0),
                    uniform(&mut rng, &[4, 5], -1.0, 1.0),
                    uniform(&mut rng, &[5, 3], -1.0, 1.0),
                    uniform(&mut rng, &[3, 2], -1.0, 1.0),
                ]
            },
            10,
        )
        .unwrap();
        assert!(outcome.max_rel_error < TOL, "{}", outcome.max_rel_error);
    }
}

#[test]
fn gradcheck_elementwise_primitives() {
    check_primitive("add", |g, v| g.add(v[0], v[1]), &[&[2, 3], &[3]], -2.0, 2.0);
    check_primitive("sub", |g, v| g.sub(v[0], v[1]), &[&[2, 1, 3], &[4, 1]], -2.0, 2.0);
    check_primitive("mul", |g, v| g.mul(v[0], v[1]), &[&[2, 3, 2], &[3, 1]], -2.0, 2.0);
    check_primitive(
        "div",
        |g, v| {
            let d = g.add_scalar(v[1], 3.0);
            g.div(v[0], d)
        },
        &[&[2, 3], &[2, 3]],
        -2.0,
        2.0,
    );
    check_primitive(
        "pow",
        |g, v| {
            let base = g.add_scalar(v[0], 2.5);
            let p = g.add_scalar(v[1], 3.0);
            g.pow(base, p)
        },
        &[&[2, 3], &[1]],
        -2.0,
        2.0,
    );
    check_primitive(
        "powf",
        |g, v| {
            let base = g.add_scalar(v[0], 2.5);
            Ok(g.powf(base, 1.7))
        },
        &[&[5]],
        -2.0,
        2.0,
    );
    check_primitive(
        "sqrt",
        |g, v| {
            let base = g.add_scalar(v[0], 2.5);
            Ok(g.sqrt(base))
        },
        &[&[5]],
        -2.0,
        2.0,
    );
    check_primitive("exp", |g, v| Ok(g.exp(v[0])), &[&[5]], -2.0, 2.0);
    check_primitive(
        "log",
        |g, v| {
            let base = g.add_scalar(v[0], 2.5);
            Ok(g.log(base))
        },
        &[&[5]],
        -2.0,
        2.0,
    );
    check_primitive("relu", |g, v| Ok(g.relu(v[0])), &[&[6]], -2.0, 2.0);
    check_primitive("sigmoid", |g, v| Ok(g.sigmoid(v[0])), &[&[6]], -2.0, 2.0);
    check_primitive("tanh", |g, v| Ok(g.tanh(v[0])), &[&[6]], -2.0, 2.0);
    check_primitive("clamp", |g, v| Ok(g.clamp(v[0], -0.5, 1.0)), &[&[6]], -2.0, 2.0);
    check_primitive("neg", |g, v| Ok(g.neg(v[0])), &[&[3]], -2.0, 2.0);
    check_primitive("mul_scalar", |g, v| Ok(g.mul_scalar(v[0], -1.5)), &[&[3]], -2.0, 2.0);
}

#[test]
fn gradcheck_structural_primitives() {
    check_primitive("matmul", |g, v| g.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]], -2.0, 2.0);
    check_primitive("transpose", |g, v| g.transpose(v[0]), &[&[3, 4]], -2.0, 2.0);
    check_primitive("sum", |g, v| g.sum(v[0], &[0, 2], true), &[&[2, 3, 4]], -2.0, 2.0);
    check_primitive("mean", |g, v| g.mean(v[0], &[1], false), &[&[2, 3, 4]], -2.0, 2.0);
    check_primitive("max", |g, v| g.max(v[0], &[1, 2], false), &[&[2, 3, 4]], -2.0, 2.0);
    check_primitive("reshape", |g, v| g.reshape(v[0], &[4, 3]), &[&[2, 6]], -2.0, 2.0);
    check_primitive("broadcast_to", |g, v| g.broadcast_to(v[0], &[2, 3, 4]), &[&[3, 1]], -2.0, 2.0);
    check_primitive("concat", |g, v| g.concat(&[v[0], v[1]], 1), &[&[2, 2, 3], &[2, 1, 3]], -2.0, 2.0);
    check_primitive("narrow", |g, v| g.narrow(v[0], 2, 1, 2), &[&[2, 3, 4]], -2.0, 2.0);
    check_primitive("softmax", |g, v| g.softmax(v[0], 1), &[&[2, 4]], -2.0, 2.0);
    check_primitive("conv2d", |g, v| g.conv2d(v[0], v[1], 2, 1), &[&[2, 2, 5, 4], &[3, 2, 3, 3]], -2.0, 2.0);
    check_primitive("conv2d_1x1", |g, v| g.conv2d(v[0], v[1], 1, 0), &[&[1, 3, 2, 2], &[2, 3, 1, 1]], -2.0, 2.0);
    check_primitive(
        "grid_sample",
        |g, v| {
            // keep scales positive and the crop partly inside the image
            let p = g.mul_scalar(v[1], 0.4);
            g.grid_sample(v[0], p, 3, 4)
        },
        &[&[2, 2, 5, 4], &[2, 4]],
        -2.0,
        2.0,
    );
}

#[test]
fn backprop_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let a = g.tanh(x);
        let l1 = g.sum_all(a).unwrap();
        let b = g.mul(x, x).unwrap();
        let b = g.exp(b);
        let l2 = g.mean_all(b).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap().get(x).unwrap().to_vec()
    };
    let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..g12.len() {
        assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-12);
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&mut rng, &[1, 2, 6, 5], -2.0, 2.0);
    let k = uniform(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
    let run = || {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let kv = g.param(k.clone());
        let c = g.conv2d(xv, kv, 1, 1).unwrap();
        let r = g.relu(c);
        let loss = g.mean_all(r).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).to_vec(), grads.get(kv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_diff_oracle_examples() {
    let x = t(&[1], &[1.0]);
    let d = finite_diff_grad(|v| v.data()[0].powi(2), &x, 1e-5);
    assert!((d.data()[0] - 2.0).abs() < 1e-8);
}

#[test]
fn forward_values_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut g = Graph::new();
    let x = g.constant(uniform(&mut rng, &[4, 8], -2.0, 2.0));
    let outs = [
        g.sigmoid(x),
        g.tanh(x),
        g.exp(x),
        g.relu(x),
        g.softmax(x, 1).unwrap(),
        g.max(x, &[0], false).unwrap(),
    ];
    for o in outs {
        assert!(g.value(o).is_finite());
    }
}
