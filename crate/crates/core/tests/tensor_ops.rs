use boxworld::rng::Rng;
use boxworld::tensor::{grad_check, Graph, ParamSet, Tensor, TensorError, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.next_f64() * 2.0 - 1.0)
}

/// Values with |v| in [0.2, 1.2], so relu and max never sit on a kink.
fn rand_away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = 0.2 + rng.next_f64();
        if rng.next_u64() & 1 == 0 {
            m
        } else {
            -m
        }
    })
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.push(n, t).unwrap();
    }
    p
}

/// Reduces `y` to a scalar with fixed random weights so no output
/// coordinate is gradient-symmetric.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = Rng::new(seed);
    let w = g.input(rand(g.shape(y), &mut rng));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn check(p: &ParamSet<f64>, op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>) -> f64 {
    let err = grad_check(
        |g, p| {
            let vars: Vec<Var> = (0..p.len()).map(|i| g.param(p, i)).collect();
            let y = op(g, &vars)?;
            project(g, y, 99)
        },
        p,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "relative error {err}");
    err
}

#[test]
fn grad_matmul_and_bmm() {
    let mut rng = Rng::new(1);
    let p = params(vec![("a", rand(&[3, 4], &mut rng)), ("b", rand(&[4, 5], &mut rng))]);
    check(&p, |g, v| g.matmul(v[0], v[1]));

    let p = params(vec![("a", rand(&[2, 3, 4], &mut rng)), ("b", rand(&[2, 4, 5], &mut rng))]);
    check(&p, |g, v| g.bmm(v[0], v[1], false));
    let p = params(vec![("a", rand(&[2, 3, 4], &mut rng)), ("b", rand(&[2, 5, 4], &mut rng))]);
    check(&p, |g, v| g.bmm(v[0], v[1], true));
    check(&p, |g, v| g.bmm_scaled(v[0], v[1], true, 0.125));
    // Self-attention style: both operands are the same node.
    let p = params(vec![("a", rand(&[2, 3, 4], &mut rng))]);
    check(&p, |g, v| g.bmm(v[0], v[0], true));
}

#[test]
fn grad_linear() {
    let mut rng = Rng::new(2);
    let p = params(vec![
        ("x", rand(&[2, 3, 4], &mut rng)),
        ("w", rand(&[4, 6], &mut rng)),
        ("b", rand(&[6], &mut rng)),
    ]);
    check(&p, |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(&p, |g, v| g.linear(v[0], v[1], None));
}

#[test]
fn grad_conv2d() {
    let mut rng = Rng::new(3);
    let p = params(vec![
        ("x", rand(&[2, 5, 4, 3], &mut rng)),
        ("w", rand(&[2, 2, 3, 4], &mut rng)),
        ("b", rand(&[4], &mut rng)),
    ]);
    check(&p, |g, v| g.conv2d(v[0], v[1], v[2], 1, 0));
    check(&p, |g, v| g.conv2d(v[0], v[1], v[2], 2, 1));
    let p = params(vec![
        ("x", rand(&[1, 4, 4, 2], &mut rng)),
        ("w", rand(&[3, 3, 2, 2], &mut rng)),
        ("b", rand(&[2], &mut rng)),
    ]);
    check(&p, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1));
}

#[test]
fn grad_pointwise_and_rows() {
    let mut rng = Rng::new(4);
    let p = params(vec![("x", rand_away_from_zero(&[3, 5], &mut rng))]);
    let relu = check(&p, |g, v| Ok(g.relu(v[0])));
    assert!(relu < 1e-6, "relu error {relu}");
    let p = params(vec![("x", rand(&[3, 5], &mut rng))]);
    check(&p, |g, v| Ok(g.softmax_rows(v[0])));
    check(&p, |g, v| Ok(g.log_softmax_rows(v[0])));
    check(&p, |g, v| Ok(g.scale(v[0], -1.7)));
    check(&p, |g, v| g.reshape(v[0], &[5, 3]));
    check(&p, |g, v| {
        let s = g.sum(v[0]);
        let t = g.mul(s, s)?;
        g.reshape(t, &[1])
    });
}

#[test]
fn grad_layer_norm() {
    let mut rng = Rng::new(5);
    let p = params(vec![
        ("x", rand(&[4, 6], &mut rng)),
        ("gain", rand(&[6], &mut rng)),
        ("bias", rand(&[6], &mut rng)),
    ]);
    check(&p, |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn grad_pool_concat_permute() {
    let mut rng = Rng::new(6);
    let p = params(vec![("x", rand(&[2, 5, 3], &mut rng))]);
    check(&p, |g, v| g.max_pool_space(v[0]));
    check(&p, |g, v| g.permute_rows(v[0], &[4, 0, 3, 1, 2]));
    let p = params(vec![("a", rand(&[2, 3, 2], &mut rng)), ("b", rand(&[2, 3, 4], &mut rng))]);
    check(&p, |g, v| g.concat_last(&[v[0], v[1], v[0]]));
}

#[test]
fn grad_binary() {
    let mut rng = Rng::new(7);
    let p = params(vec![("a", rand(&[3, 4], &mut rng)), ("b", rand(&[3, 4], &mut rng))]);
    check(&p, |g, v| g.add(v[0], v[1]));
    check(&p, |g, v| g.sub(v[0], v[1]));
    check(&p, |g, v| g.mul(v[0], v[1]));
    check(&p, |g, v| g.mul(v[0], v[0]));
}

#[test]
fn quadratic_check() {
    let p = params(vec![("x", Tensor::full(&[1], 3.0))]);
    let mut g = Graph::new();
    let x = g.param(&p, 0);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss, &p).unwrap();
    assert!((grads[0].item() - 6.0).abs() < 1e-12);
    let err = grad_check(
        |g, p| {
            let x = g.param(p, 0);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &p,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn sum_gradient_is_ones_and_unused_params_are_zero() {
    let p = params(vec![("x", Tensor::full(&[2, 3], 0.5)), ("unused", Tensor::full(&[4], 1.0))]);
    let mut g = Graph::new();
    let x = g.param(&p, 0);
    let _ = g.param(&p, 1);
    let loss = g.sum(x);
    let grads = g.backward(loss, &p).unwrap();
    assert!(grads[0].data().iter().all(|&v| v == 1.0));
    assert!(grads[1].data().iter().all(|&v| v == 0.0));
    assert_eq!(grads[1].shape(), &[4]);
}

#[test]
fn backward_errors() {
    let p = params(vec![("x", Tensor::full(&[2], 1.0))]);
    let mut g = Graph::new();
    let c = g.input(Tensor::full(&[2], 1.0));
    let s = g.sum(c);
    assert!(matches!(g.backward(s, &p), Err(TensorError::DisconnectedLoss)));
    let x = g.param(&p, 0);
    assert!(matches!(g.backward(x, &p), Err(TensorError::ShapeMismatch { .. })));
    let bad = g.input(Tensor::full(&[3], 1.0));
    assert!(matches!(g.add(x, bad), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(g.matmul(x, bad), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn non_finite_values_abort() {
    let p = params(vec![("x", Tensor::full(&[2], 1.0))]);
    let mut g = Graph::new();
    let x = g.param(&p, 0);
    let huge = g.scale(x, f64::MAX);
    let inf = g.scale(huge, 10.0);
    let loss = g.sum(inf);
    match g.check_finite() {
        Err(TensorError::NonFiniteValue { op, node }) => {
            assert_eq!(op, "scale");
            assert_eq!(node, inf.index());
        }
        other => panic!("expected NonFiniteValue, got {other:?}"),
    }
    assert!(g.backward(loss, &p).is_err());
}

#[test]
fn softmax_invariants() {
    let mut rng = Rng::new(8);
    let mut g = Graph::<f64>::new();
    let eq = g.input(Tensor::full(&[1, 4], 2.5));
    let s = g.softmax_rows(eq);
    for &v in g.value(s).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
    for _ in 0..50 {
        let x = Tensor::from_fn(&[3, 7], |_| (rng.next_f64() - 0.5) * 40.0);
        let shift = (rng.next_f64() - 0.5) * 100.0;
        let shifted = Tensor::from_fn(&[3, 7], |i| x.data()[i] + shift);
        let a = g.input(x);
        let b = g.input(shifted);
        let sa = g.softmax_rows(a);
        let sb = g.softmax_rows(b);
        for row in g.value(sa).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (u, v) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }
    // Large logits stay finite.
    let big = g.input(Tensor::new(&[1, 2], vec![1000.0, -1000.0]).unwrap());
    let sm = g.softmax_rows(big);
    let lsm = g.log_softmax_rows(big);
    assert!(g.check_finite().is_ok());
    assert_eq!(g.value(sm).data()[0], 1.0);
    assert!((g.value(lsm).data()[1] + 2000.0).abs() < 1e-9);
}

#[test]
fn layer_norm_normalises_rows() {
    let mut rng = Rng::new(9);
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn(&[10, 26], |_| rng.next_f64() * 10.0 - 3.0));
    let gain = g.input(Tensor::full(&[26], 1.0));
    let bias = g.input(Tensor::zeros(&[26]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for row in g.value(y).data().chunks(26) {
        let mean = row.iter().sum::<f64>() / 26.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 26.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, o) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * o];
    for bi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for oc in 0..o {
                    let mut acc = b.data()[oc];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ic in 0..c {
                                let xv = x.data()[((bi * h + iy as usize) * wd + ix as usize) * c + ic];
                                let wv = w.data()[((ky * kw + kx) * c + ic) * o + oc];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * ho + oy) * wo + ox) * o + oc] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, ho, wo, o], out).unwrap()
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = Rng::new(10);
    // Small integers: every partial sum is exact, so summation order cannot
    // hide an indexing error and equality must be exact.
    let ints = |shape: &[usize], rng: &mut Rng| Tensor::from_fn(shape, |_| rng.range_inclusive(0, 8) as f64 - 4.0);
    for &(stride, pad, k) in &[(1, 0, 2), (2, 0, 2), (1, 1, 3), (2, 1, 3)] {
        let x = ints(&[2, 7, 6, 3], &mut rng);
        let w = ints(&[k, k, 3, 5], &mut rng);
        let b = ints(&[5], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(g.value(y), &conv_reference(&x, &w, &b, stride, pad));

        let x = rand(&[2, 7, 6, 3], &mut rng);
        let w = rand(&[k, k, 3, 5], &mut rng);
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        let r = conv_reference(&x, &w, &b, stride, pad);
        for (u, v) in g.value(y).data().iter().zip(r.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn valid_conv_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 12, 12, 7]));
    let w1 = g.input(Tensor::zeros(&[2, 2, 7, 12]));
    let b1 = g.input(Tensor::zeros(&[12]));
    let w2 = g.input(Tensor::zeros(&[2, 2, 12, 24]));
    let b2 = g.input(Tensor::zeros(&[24]));
    let h = g.conv2d(x, w1, b1, 1, 0).unwrap();
    assert_eq!(g.shape(h), &[1, 11, 11, 12]);
    let h = g.conv2d(h, w2, b2, 1, 0).unwrap();
    assert_eq!(g.shape(h), &[1, 10, 10, 24]);
}

#[test]
fn max_pool_ignores_entity_order() {
    let mut rng = Rng::new(12);
    for _ in 0..20 {
        let x = rand(&[3, 9, 4], &mut rng);
        let mut perm: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut perm);
        let mut g = Graph::new();
        let xv = g.input(x);
        let px = g.permute_rows(xv, &perm).unwrap();
        let a = g.max_pool_space(xv).unwrap();
        let b = g.max_pool_space(px).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }
}

#[test]
fn float32_graph_runs() {
    let mut rng = Rng::new(13);
    let p: ParamSet<f32> = params(vec![("w", rand(&[4, 3], &mut rng))]).cast();
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(&[2, 4], 1.0));
    let w = g.param(&p, 0);
    let y = g.matmul(x, w).unwrap();
    let l = g.log_softmax_rows(y);
    let s = g.sum(l);
    let grads = g.backward(s, &p).unwrap();
    assert!(grads[0].all_finite());
}
