use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop convolution used as the reference.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[oc] as f64;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ic * h + iy as usize) * wd + ix as usize] as f64;
                            let wv = w.data()[((oc * c + ic) * k + ky) * k + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[o, ho, wo], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d_raw(xv, wv, bv, stride, pad)?;
    Ok(g.value(y).clone())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// `sum(weights * f(x))` with fixed random weights, keeping the scalar O(1).
fn projected<F>(f: F, out_len: usize, seed: u64) -> impl Fn(&mut Graph, Var) -> Result<Var>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let w = Tensor::uniform(&[out_len], -1.0, 1.0, &mut rng(seed ^ 0xabc));
    move |g: &mut Graph, x: Var| {
        let y = f(g, x)?;
        let y = g.reshape_flat(y)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    }
}

#[test]
fn conv_identity_kernel_is_identity() {
    let x = Tensor::randn(&[1, 5, 5], 1.0, &mut rng(1));
    let w = Tensor::full(&[1, 1, 1, 1], 1.0);
    let b = Tensor::zeros(&[1]);
    assert_eq!(conv(&x, &w, &b, 1, 0).unwrap(), x);
}

#[test]
fn conv_all_ones_counts_overlap() {
    let x = Tensor::full(&[1, 3, 3], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert_eq!(y.data()[4], 9.0);
    assert_eq!(y.data()[0], 4.0);
    assert_eq!(y.data()[8], 4.0);
    assert_eq!(y.data()[1], 6.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        for (s, p) in [(1, 1), (1, 0), (3, 1)] {
            let y = conv(&x, &w, &b, s, p).unwrap();
            assert!(max_abs_diff(&y, &conv_oracle(&x, &w, &b, s, p)) < 1e-5);
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::zeros(&[2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    assert!(matches!(conv(&x, &w, &Tensor::zeros(&[1]), 1, 1), Err(Error::Dimension(_))));
    let w = Tensor::zeros(&[1, 2, 3, 3]);
    assert!(matches!(conv(&x, &w, &Tensor::zeros(&[1]), 2, 0), Err(Error::Config(_))));
    let w = Tensor::zeros(&[1, 2, 5, 5]);
    assert!(matches!(conv(&x, &w, &Tensor::zeros(&[1]), 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn upsample_replicates_blocks() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
    let y = g.upsample2x(x).unwrap();
    #[rustfmt::skip]
    let expect = vec![
        1., 1., 2., 2.,
        1., 1., 2., 2.,
        3., 3., 4., 4.,
        3., 3., 4., 4.,
    ];
    assert_eq!(g.value(y).data(), &expect[..]);
    let c = g.constant(Tensor::full(&[2, 3, 3], 0.7));
    let yc = g.upsample2x(c).unwrap();
    assert!(g.value(yc).data().iter().all(|&v| v == 0.7));
}

#[test]
fn upsample_gradient_of_sum_is_four() {
    let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng(3));
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = g.upsample2x(xv).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().data().iter().all(|&v| v == 4.0));
    // finite differences agree
    let err = grad_check(
        |g, x| {
            let y = g.upsample2x(x)?;
            Ok(g.sum(y))
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn instance_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 2, 2], 5.0));
    let y = g.instance_norm(x, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::new(&[1, 1, 2], vec![-1.0, 1.0]).unwrap());
    let y = g.instance_norm(x, 1e-5).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

    let x = g.constant(Tensor::randn(&[3, 4, 4], 2.0, &mut rng(4)).map(|v| v + 3.0));
    let y = g.instance_norm(x, 1e-5).unwrap();
    for c in 0..3 {
        let (m, v) = kernels::moments(g.value(y).channel(c));
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((1.0 - 1e-3..=1.0).contains(&v), "var {v}");
    }
}

#[test]
fn glu_examples() {
    let mut r = rng(5);
    let a = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
    let mut g = Graph::new();
    let zero_gate = {
        let mut d = a.data().to_vec();
        d.extend(std::iter::repeat_n(0.0, a.numel()));
        Tensor::new(&[4, 3, 3], d).unwrap()
    };
    let x = g.constant(zero_gate);
    let y = g.glu(x).unwrap();
    for (o, i) in g.value(y).data().iter().zip(a.data()) {
        assert_eq!(*o, 0.5 * i);
    }
    let open_gate = {
        let mut d = a.data().to_vec();
        d.extend(std::iter::repeat_n(20.0, a.numel()));
        Tensor::new(&[4, 3, 3], d).unwrap()
    };
    let x = g.constant(open_gate);
    let y = g.glu(x).unwrap();
    for (o, i) in g.value(y).data().iter().zip(a.data()) {
        assert!((o - i).abs() < 1e-6);
    }

    let x = Tensor::randn(&[4, 2, 2], 2.0, &mut r);
    let xv = g.constant(x.clone());
    let y = g.glu(xv).unwrap();
    for k in 0..8 {
        let (av, bv) = (x.data()[k] as f64, x.data()[8 + k] as f64);
        let expect = av / (1.0 + (-bv).exp());
        assert!((g.value(y).data()[k] as f64 - expect).abs() < 1e-6);
    }

    let odd = g.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(matches!(g.glu(odd), Err(Error::Dimension(_))));
}

#[test]
fn grad_check_trivial_functions() {
    let x = Tensor::randn(&[5], 1.0, &mut rng(6));
    let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).unwrap();
    assert!(err < 1e-6, "{err}");

    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let sq = g.square(xv);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap().data(), &[2.0, 4.0]);
    let err = grad_check(
        |g, x| {
            let sq = g.square(x);
            Ok(g.sum(sq))
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_rejects_bad_step_and_nan() {
    let x = Tensor::full(&[2], 1.0);
    assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.5).is_err());
    let x = Tensor::full(&[2], -1.0);
    let r = grad_check(
        |g, x| {
            let l = g.log(x);
            Ok(g.sum(l))
        },
        &x,
        1e-3,
    );
    assert!(matches!(r, Err(Error::Evaluation(_))));
}

#[test]
fn glu_of_conv_passes_grad_check() {
    for seed in 0..3 {
        let mut r = rng(10 + seed);
        let w = Tensor::randn(&[4, 2, 3, 3], 0.3, &mut r);
        let b = Tensor::randn(&[4], 0.3, &mut r);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let f = |g: &mut Graph, x: Var| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d_raw(x, wv, bv, 1, 1)?;
            let y = g.glu(y)?;
            Ok(g.sum(y))
        };
        let err = grad_check(f, &x, 1e-2).unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn conv_weight_and_bias_gradients() {
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        for (s, p) in [(1, 1), (2, 1)] {
            let side: usize = (5 + 2 * p - 3) / s + 1;
            let out_len = 3 * side * side;
            let (xc, bc) = (x.clone(), b.clone());
            let fw = projected(
                move |g, wv| {
                    let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
                    g.conv2d_raw(xv, wv, bv, s, p)
                },
                out_len,
                seed,
            );
            assert!(grad_check(fw, &w, 1e-2).unwrap() < 1e-3);
            let (xc, wc) = (x.clone(), w.clone());
            let fb = projected(
                move |g, bv| {
                    let (xv, wv) = (g.constant(xc.clone()), g.constant(wc.clone()));
                    g.conv2d_raw(xv, wv, bv, s, p)
                },
                out_len,
                seed,
            );
            assert!(grad_check(fb, &b, 1e-2).unwrap() < 1e-3);
            let (wc, bc) = (w.clone(), b.clone());
            let fx = projected(
                move |g, xv| {
                    let (wv, bv) = (g.constant(wc.clone()), g.constant(bc.clone()));
                    g.conv2d_raw(xv, wv, bv, s, p)
                },
                out_len,
                seed,
            );
            assert!(grad_check(fx, &x, 1e-2).unwrap() < 1e-3);
        }
    }
}

#[test]
fn pointwise_conv_gradients() {
    let mut r = rng(30);
    let x = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
    let w = Tensor::randn(&[2, 3, 1, 1], 0.5, &mut r);
    let b = Tensor::zeros(&[2]);
    let (wc, bc) = (w.clone(), b.clone());
    let fx = projected(
        move |g, xv| {
            let (wv, bv) = (g.constant(wc.clone()), g.constant(bc.clone()));
            g.conv2d_raw(xv, wv, bv, 1, 0)
        },
        32,
        1,
    );
    assert!(grad_check(fx, &x, 1e-2).unwrap() < 1e-3);
    let xc = x.clone();
    let fw = projected(
        move |g, wv| {
            let (xv, bv) = (g.constant(xc.clone()), g.constant(b.clone()));
            g.conv2d_raw(xv, wv, bv, 1, 0)
        },
        32,
        2,
    );
    assert!(grad_check(fw, &w, 1e-2).unwrap() < 1e-3);
}

#[test]
fn elementwise_and_norm_gradients() {
    for seed in 0..3 {
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(40 + seed));
        let checks: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
            ("instance_norm", Box::new(|g, x| g.instance_norm(x, 1e-5))),
            ("glu", Box::new(|g, x| g.glu(x))),
            ("upsample", Box::new(|g, x| g.upsample2x(x))),
            ("avg_pool", Box::new(|g, x| {
                let x = g.reshape(x, &[1, 4, 6])?;
                g.avg_pool2x(x)
            })),
            ("sigmoid", Box::new(|g, x| Ok(g.sigmoid(x)))),
            ("tanh", Box::new(|g, x| Ok(g.tanh(x)))),
            ("softplus", Box::new(|g, x| Ok(g.softplus(x)))),
            ("exp", Box::new(|g, x| Ok(g.exp(x)))),
            ("square", Box::new(|g, x| Ok(g.square(x)))),
            ("softmax", Box::new(|g, x| {
                let m = g.reshape(x, &[4, 6])?;
                g.softmax_rows(m)
            })),
            ("log_softmax", Box::new(|g, x| {
                let m = g.reshape(x, &[4, 6])?;
                g.log_softmax_rows(m)
            })),
            ("transpose", Box::new(|g, x| {
                let m = g.reshape(x, &[4, 6])?;
                g.transpose(m)
            })),
            ("mean_axis0", Box::new(|g, x| {
                let m = g.reshape(x, &[4, 6])?;
                g.mean_axis(m, 0)
            })),
            ("mean_axis1", Box::new(|g, x| {
                let m = g.reshape(x, &[4, 6])?;
                g.mean_axis(m, 1)
            })),
            ("matmul_tt", Box::new(|g, x| {
                let a = g.reshape(x, &[4, 6])?;
                let b = g.constant(Tensor::randn(&[5, 4], 1.0, &mut rng(7)));
                g.matmul_t(a, b, true, true)
            })),
            ("matmul_rhs", Box::new(|g, x| {
                let b = g.reshape(x, &[6, 4])?;
                let a = g.constant(Tensor::randn(&[3, 6], 1.0, &mut rng(8)));
                g.matmul(a, b)
            })),
            ("matmul_rhs_t", Box::new(|g, x| {
                let b = g.reshape(x, &[4, 6])?;
                let a = g.constant(Tensor::randn(&[3, 6], 1.0, &mut rng(9)));
                g.matmul_t(a, b, false, true)
            })),
            ("concat_narrow", Box::new(|g, x| {
                let c = g.concat(&[x, x])?;
                g.narrow(c, 1, 2)
            })),
            ("channel_scale", Box::new(|g, x| {
                let s = g.narrow(x, 0, 1)?;
                let s = g.reshape(s, &[12])?;
                let s = g.narrow(s, 0, 2)?;
                g.channel_scale(x, s)
            })),
            ("scale_by", Box::new(|g, x| {
                let f = g.reshape_flat(x)?;
                let s = g.narrow(f, 3, 1)?;
                g.scale_by(x, s)
            })),
            ("tile", Box::new(|g, x| {
                let f = g.reshape_flat(x)?;
                let v = g.narrow(f, 0, 5)?;
                g.tile_spatial(v, 2, 3)
            })),
            ("cosine", Box::new(|g, x| {
                let b = g.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng(11)));
                g.cosine(x, b)
            })),
            ("div", Box::new(|g, x| {
                let d = g.constant(Tensor::uniform(&[2, 3, 4], 1.0, 2.0, &mut rng(12)));
                let q = g.div(x, d)?;
                let guarded = q.max_guard(g);
                g.div(d, guarded)
            })),
            ("gather", Box::new(|g, x| {
                let t = g.reshape(x, &[6, 4])?;
                g.gather_rows(t, &[1, 3, 1, 5])
            })),
        ];
        for (name, f) in checks {
            let n = {
                let mut g = Graph::new();
                let v = g.constant(x.clone());
                let y = f(&mut g, v).unwrap();
                g.value(y).numel()
            };
            let err = grad_check(projected(f, n, seed), &x, 1e-2).unwrap();
            assert!(err < 1e-3, "{name} seed {seed}: {err}");
        }
    }
}

trait MaxGuard {
    fn max_guard(self, g: &mut Graph) -> Var;
}

impl MaxGuard for Var {
    /// Shifts values away from zero so the reciprocal stays smooth.
    fn max_guard(self, g: &mut Graph) -> Var {
        let sq = g.square(self);
        g.add_scalar(sq, 1.0)
    }
}

#[test]
fn batch_norm_uses_batch_statistics_and_passes_grad_check() {
    let mut store = ParamStore::new();
    let rm = store.add_buffer("bn/mean", Tensor::zeros(&[2])).unwrap();
    let rv = store.add_buffer("bn/var", Tensor::full(&[2], 1.0)).unwrap();
    let x = Tensor::randn(&[3, 2, 2, 2], 1.5, &mut rng(50));
    let f = |g: &mut Graph, x: Var| {
        g.set_training(true);
        let xs: Vec<Var> = (0..3)
            .map(|i| {
                let s = g.narrow(x, i, 1)?;
                g.reshape(s, &[2, 2, 2])
            })
            .collect::<Result<_>>()?;
        let ys = g.batch_norm(&store, &xs, rm, rv)?;
        g.concat(&ys)
    };
    let err = grad_check(projected(f, 24, 3), &x, 1e-2).unwrap();
    assert!(err < 1e-3, "{err}");

    let mut g = Graph::with_trainable(&[]);
    let xv = g.constant(x.clone().reshape(&[6, 2, 2]).unwrap());
    let parts: Vec<Var> = (0..3).map(|i| g.narrow(xv, 2 * i, 2).unwrap()).collect();
    let ys = g.batch_norm(&store, &parts, rm, rv).unwrap();
    for ch in 0..2 {
        let vals: Vec<f32> = ys.iter().flat_map(|&y| g.value(y).channel(ch).to_vec()).collect();
        let (m, v) = kernels::moments(&vals);
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3);
    }
    assert_eq!(g.take_buffer_updates().len(), 2);
}

#[test]
fn params_follow_trainable_prefixes() {
    let mut store = ParamStore::new();
    let mut r = rng(60);
    let a = ConvSpec::same3(&mut store, "main/a", 1, 1, &mut r).unwrap();
    let b = ConvSpec::same3(&mut store, "disc/b", 1, 1, &mut r).unwrap();
    let mut g = Graph::with_trainable(&["main/"]);
    let x = g.constant(Tensor::randn(&[1, 3, 3], 1.0, &mut r));
    let y = g.conv2d(&store, &a, x).unwrap();
    let y = g.conv2d(&store, &b, y).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let ids: Vec<ParamId> = g.param_grads().into_iter().map(|(id, _)| id).collect();
    assert_eq!(ids, vec![a.weight, a.bias]);

    store.set_frozen("main/", true);
    let mut g = Graph::with_trainable(&["main/"]);
    let x = g.constant(Tensor::randn(&[1, 3, 3], 1.0, &mut r));
    let y = g.conv2d(&store, &a, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.param_grads().is_empty());
}

#[test]
fn ops_are_deterministic() {
    let mut r = rng(70);
    let x = Tensor::randn(&[4, 6, 6], 1.0, &mut r);
    let w = Tensor::randn(&[6, 4, 3, 3], 0.2, &mut r);
    let b = Tensor::randn(&[6], 0.2, &mut r);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d_raw(xv, wv, bv, 1, 1).unwrap();
        let y = g.instance_norm(y, 1e-5).unwrap();
        let y = g.glu(y).unwrap();
        let y = g.upsample2x(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn instance_norm_moments(seed in 0u64..10_000, c in 1usize..4, h in 2usize..6, scale in 0.1f32..10.0) {
            let x = Tensor::randn(&[c, h, h], scale, &mut rng(seed));
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = g.instance_norm(xv, 1e-5).unwrap();
            for ch in 0..c {
                let (m, v) = kernels::moments(g.value(y).channel(ch));
                prop_assert!(m.abs() < 1e-4);
                prop_assert!(v <= 1.0 + 1e-6);
            }
        }

        #[test]
        fn tensor_shape_matches_data(dims in proptest::collection::vec(1usize..5, 1..4)) {
            let n: usize = dims.iter().product();
            prop_assert!(Tensor::new(&dims, vec![0.0; n]).is_ok());
            prop_assert!(Tensor::new(&dims, vec![0.0; n + 1]).is_err());
        }
    }
}

#[test]
fn spatial_max_picks_and_routes_to_peak() {
    let x = Tensor::new(&[2, 2, 2], vec![0.1, 0.9, -0.3, 0.2, -1.0, -2.0, -0.5, -0.7]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let m = g.spatial_max(v).unwrap();
    assert_eq!(g.value(m).data(), &[0.9, -0.5]);
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let err = grad_check(|g, v| {
        let m = g.spatial_max(v)?;
        Ok(g.sum(m))
    }, &x, 1e-2)
    .unwrap();
    assert!(err < 1e-3);
}
