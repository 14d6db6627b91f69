use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wxnet_core::gradcheck::{grad_check, grad_check_many};
use wxnet_core::graph::{Activation, NormAxis};
use wxnet_core::{Error, Graph, Tensor, Var};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn eval(f: impl FnOnce(&mut Graph) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).clone()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_sum() {
    let m = t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]);
    let out = eval(|g| {
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(m.clone());
        g.matmul(i, m).unwrap()
    });
    assert_eq!(out, m);

    let out = eval(|g| {
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        g.matmul(a, b).unwrap()
    });
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_mismatch_names_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("[2, 3]")),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

fn naive_conv(x: &Tensor, k: &Tensor) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = Tensor::zeros(&[cout, h, w]);
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for c in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let (y, z) = (i as isize + a as isize - ph, j as isize + b as isize - pw);
                            if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                acc += x.get(&[c, y as usize, z as usize]) * k.get(&[o, c, a, b]);
                            }
                        }
                    }
                }
                out.set(&[o, i, j], acc);
            }
        }
    }
    out
}

#[test]
fn conv_identity_and_zero_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[1, 4, 5], &mut rng);
    let out = eval(|g| {
        let xv = g.constant(x.clone());
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        g.conv2d(xv, k).unwrap()
    });
    assert_eq!(out, x);
    let out = eval(|g| {
        let xv = g.constant(x.clone());
        let k = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        g.conv2d(xv, k).unwrap()
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_naive_loop() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (xs, ks) in [([1, 5, 5], [1, 1, 3, 3]), ([3, 4, 6], [2, 3, 3, 5])] {
            let x = rand_tensor(&xs, &mut rng);
            let k = rand_tensor(&ks, &mut rng);
            let out = eval(|g| {
                let xv = g.constant(x.clone());
                let kv = g.constant(k.clone());
                g.conv2d(xv, kv).unwrap()
            });
            assert!(out.max_abs_diff(&naive_conv(&x, &k)) < 1e-12);
        }
    }
}

#[test]
fn even_kernel_is_config_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
    assert!(matches!(g.conv2d(x, k), Err(Error::Config(_))));
}

#[test]
fn activations_at_known_points() {
    let out = eval(|g| {
        let x = g.constant(t(&[3], &[0.0, -3.0, 3.0]));
        g.sigmoid(x)
    });
    assert_eq!(out.data()[0], 0.5);
    let out = eval(|g| {
        let x = g.constant(t(&[2], &[-3.0, 3.0]));
        g.relu(x)
    });
    assert_eq!(out.data(), &[0.0, 3.0]);
    let out = eval(|g| {
        let x = g.constant(t(&[3], &[-50.0, 0.3, 50.0]));
        g.activation(x, Activation::Tanh)
    });
    assert!(out.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn softmax_known_rows() {
    let out = eval(|g| {
        let x = g.constant(t(&[3, 2], &[4.0, 4.0, 0.0, 2f64.ln(), 1000.0, 1001.0]));
        g.softmax_rows(x)
    });
    let d = out.data();
    assert_eq!(&d[..2], &[0.5, 0.5]);
    assert!((d[2] - 1.0 / 3.0).abs() < 1e-15 && (d[3] - 2.0 / 3.0).abs() < 1e-15);
    assert!(d[4].is_finite() && d[5].is_finite());
    assert!((d[4] + d[5] - 1.0).abs() < 1e-12);
}

#[test]
fn concat_singleton_and_blocks() {
    let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = t(&[2, 3], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    let out = eval(|g| {
        let av = g.constant(a.clone());
        g.concat(&[av], 1).unwrap()
    });
    assert_eq!(out, a);
    let out = eval(|g| {
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        g.concat(&[av, bv], 1).unwrap()
    });
    assert_eq!(out.shape(), &[2, 6]);
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 7.0, 8.0, 9.0, 4.0, 5.0, 6.0, 10.0, 11.0, 12.0]);

    let mut g = Graph::new();
    let av = g.constant(a);
    let cv = g.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(g.concat(&[av, cv], 1), Err(Error::Dimension(_))));
}

#[test]
fn reshape_round_trip_and_gradient() {
    let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let r = g.reshape(v, &[3, 2]).unwrap();
    let back = g.reshape(r, &[2, 3]).unwrap();
    assert_eq!(g.value(back), &x);
    assert!(g.reshape(v, &[4, 2]).is_err());
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[1.0; 6]);

    let cube = eval(|g| {
        let c = g.constant(Tensor::zeros(&[10, 4, 3]));
        g.flatten(c)
    });
    assert_eq!(cube.shape(), &[120]);
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn accumulation_doubles_random_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let a = g.variable(rand_tensor(&[3, 4], &mut rng));
    let b = g.variable(rand_tensor(&[4, 2], &mut rng));
    let p = g.matmul(a, b).unwrap();
    let p = g.tanh(p);
    let loss = g.mean(p);
    g.backward(loss).unwrap();
    let first: Vec<f64> = g.grad(a).unwrap().iter().chain(g.grad(b).unwrap()).copied().collect();
    g.backward(loss).unwrap();
    let second: Vec<f64> = g.grad(a).unwrap().iter().chain(g.grad(b).unwrap()).copied().collect();
    for (f, s) in first.iter().zip(&second) {
        assert_eq!(*s, 2.0 * f);
    }
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> wxnet_core::Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![2, 3, 4]], |g, v| g.transpose(v[0])),
        ("conv2d", vec![vec![2, 2, 4, 5], vec![3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1])),
        ("add", vec![vec![3, 2], vec![3, 2]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 2], vec![3, 2]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 2], vec![3, 2]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_along", vec![vec![2, 3, 4], vec![3]], |g, v| g.add_along(v[0], v[1], 1)),
        ("mul_along", vec![vec![2, 3, 4], vec![4]], |g, v| g.mul_along(v[0], v[1], 2)),
        ("sigmoid", vec![vec![6]], |g, v| Ok(g.sigmoid(v[0]))),
        ("tanh", vec![vec![6]], |g, v| Ok(g.tanh(v[0]))),
        ("relu", vec![vec![6]], |g, v| Ok(g.relu(v[0]))),
        ("recip", vec![vec![4]], |g, v| {
            let one = g.constant(Tensor::full(&[4], 3.0));
            let s = g.add(v[0], one)?;
            Ok(g.recip(s))
        }),
        ("softmax", vec![vec![3, 4]], |g, v| Ok(g.softmax_rows(v[0]))),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("narrow", vec![vec![5, 3]], |g, v| g.narrow(v[0], 0, 1, 3)),
        ("sum", vec![vec![4, 2]], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![4, 2]], |g, v| Ok(g.mean(v[0]))),
        ("layer_norm", vec![vec![3, 5]], |g, v| Ok(g.normalize(v[0], NormAxis::Last, 1e-9)?.0)),
        ("channel_norm", vec![vec![4, 3, 2]], |g, v| Ok(g.normalize(v[0], NormAxis::Channel(1), 1e-7)?.0)),
    ]
}

#[test]
fn every_primitive_passes_grad_check_over_ten_seeds() {
    for (name, shapes, f) in op_cases() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
            let err = grad_check_many(f, &xs, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn tanh_grad_check_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[20], |_| rng.gen_range(-3.0..3.0));
    assert!(grad_check(|g, v| Ok(g.tanh(v)), &x, 1e-5).unwrap() < 1e-6);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        c in -100.0f64..100.0,
    ) {
        let x = Tensor::new(&[3, 4], vals).unwrap();
        let a = eval(|g| { let v = g.constant(x.clone()); g.softmax_rows(v) });
        let b = eval(|g| { let v = g.constant(x.map(|e| e + c)); g.softmax_rows(v) });
        for row in a.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn reshape_inverse_is_bitwise_identity(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 24)) {
        let x = Tensor::new(&[2, 3, 4], vals).unwrap();
        let y = eval(|g| {
            let v = g.constant(x.clone());
            let f = g.flatten(v);
            let r = g.reshape(f, &[6, 4]).unwrap();
            g.reshape(r, &[2, 3, 4]).unwrap()
        });
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
