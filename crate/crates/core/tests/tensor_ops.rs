use proptest::prelude::*;
use psdet::kernels::norm::{batch_norm, BnParams};
use psdet::rng::StreamRng;
use psdet::{Error, Graph, Tensor};
use rand::{Rng, SeedableRng};

/// Direct cross-correlation over all six loop indices.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4("oracle").unwrap();
    let (cout, _, kh, kw) = w.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(ni, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> psdet::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, stride, pad)?;
    Ok(g.value(y).clone())
}

fn random(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn conv_ramp_matches_six_loop_oracle() {
    let x = Tensor::new(&[1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let want = conv_oracle(&x, &w, None, 1, 0);
    assert_eq!(want.data(), &[54.0, 63.0, 90.0, 99.0]);
    assert_eq!(conv(&x, &w, None, 1, 0).unwrap(), want);
}

#[test]
fn conv_random_shapes_match_oracle() {
    let mut rng = StreamRng::seed_from_u64(11);
    for _ in 0..40 {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let (h, w) = (rng.random_range(k..8), rng.random_range(k..8));
        let x = random(&mut rng, &[2, cin, h, w]);
        let wt = random(&mut rng, &[cout, cin, k, k]);
        let b = random(&mut rng, &[cout]);
        let got = conv(&x, &wt, Some(&b), stride, pad).unwrap();
        let want = conv_oracle(&x, &wt, Some(b.data()), stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_identity_and_zero_kernels() {
    let mut rng = StreamRng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 1, 3, 3]);
    assert_eq!(conv(&x, &Tensor::ones(&[1, 1, 1, 1]), None, 1, 0).unwrap(), x);
    let y = conv(&x, &Tensor::zeros(&[2, 1, 3, 3]), None, 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_shape_errors_name_axes() {
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let err = conv(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 0).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
    assert!(err.to_string().contains("axis 1"), "{err}");
    assert!(conv(&x, &Tensor::zeros(&[1, 2, 5, 5]), None, 1, 0).is_err());
}

proptest! {
    #[test]
    fn conv_output_size_formula(h in 1usize..9, w in 1usize..9, k in 1usize..4, stride in 1usize..4, pad in 0usize..3) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let y = conv(&Tensor::zeros(&[1, 1, h, w]), &Tensor::zeros(&[2, 1, k, k]), None, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }
}

fn bn(x: &Tensor<f64>, p: &mut BnParams<f64>, training: bool) -> psdet::Result<Tensor<f64>> {
    batch_norm(x, p, training)
}

#[test]
fn bn_on_normalized_input_is_near_identity() {
    // each channel holds ±1 pairs: mean 0, biased variance 1
    let x = Tensor::new(&[2, 2, 1, 2], vec![1.0, -1.0, 2.0, -2.0, -1.0, 1.0, -2.0, 2.0]).unwrap();
    let mut p = BnParams::identity(2);
    let y = bn(&x, &mut p, true).unwrap();
    let var = [1.0, 4.0];
    for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
        let c = (i / 2) % 2;
        assert!((a - b / (var[c] + 1e-5f64).sqrt()).abs() < 1e-12);
    }
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let y = bn(&x, &mut BnParams::identity(1), true).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-5);
}

#[test]
fn bn_constant_channel_gives_beta() {
    let x = Tensor::full(&[2, 1, 2, 2], 3.7);
    let mut p = BnParams::identity(1);
    p.beta = vec![5.0];
    let y = bn(&x, &mut p, true).unwrap();
    assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
}

#[test]
fn bn_zero_gamma_gives_beta_in_both_modes() {
    let mut rng = StreamRng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 2, 2]);
    let mut p = BnParams::identity(3);
    p.gamma = vec![0.0; 3];
    p.beta = vec![0.5, -1.0, 2.0];
    for training in [true, false] {
        let y = bn(&x, &mut p, training).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            assert_eq!(v, p.beta[(i / 4) % 3]);
        }
    }
}

#[test]
fn bn_running_stats_update() {
    let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut p = BnParams::identity(1);
    bn(&x, &mut p, true).unwrap();
    // mean 2.5, unbiased variance 5/3
    assert!((p.running_mean[0] - 0.25).abs() < 1e-12);
    assert!((p.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    let y = bn(&x, &mut p, false).unwrap();
    let want = (1.0 - 0.25) / (p.running_var[0] + 1e-5).sqrt();
    assert!((y.data()[0] - want).abs() < 1e-12);
}

#[test]
fn bn_single_element_channel_is_degenerate() {
    let err = bn(&Tensor::zeros(&[1, 2, 1, 1]), &mut BnParams::identity(2), true).unwrap_err();
    assert!(matches!(err, Error::DegenerateStatistics { .. }), "{err}");
    assert!(bn(&Tensor::zeros(&[1, 2, 1, 1]), &mut BnParams::identity(2), false).is_ok());
}

#[test]
fn relu_values_and_subgradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

fn pool(x: Tensor<f64>, win: usize, stride: usize) -> psdet::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let v = g.input(x);
    let y = g.max_pool2d(v, win, stride)?;
    Ok(g.value(y).clone())
}

#[test]
fn max_pool_ramp_matches_window_scan() {
    let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| ((v * 7) % 16) as f64).collect()).unwrap();
    let mut want = Vec::new();
    for oy in 0..2 {
        for ox in 0..2 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.at4(0, 0, 2 * oy + dy, 2 * ox + dx));
                }
            }
            want.push(m);
        }
    }
    assert_eq!(pool(x, 2, 2).unwrap().data(), &want[..]);
    let small = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(pool(small, 2, 2).unwrap().data(), &[4.0]);
    assert!(pool(Tensor::full(&[1, 2, 4, 4], 1.5), 2, 2).unwrap().data().iter().all(|&v| v == 1.5));
    assert!(pool(Tensor::zeros(&[1, 1, 2, 2]), 3, 1).is_err());
}

#[test]
fn max_pool_tie_routes_to_first() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.max_pool2d(x, 2, 2).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn dropout_statistics_and_identities() {
    let n = 100_000;
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(&[n]));
    let mut rng = StreamRng::seed_from_u64(99);
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let mean = g.value(y).sum() / n as f64;
    // survivors are 2, so each element has variance 1
    assert!((mean - 1.0).abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    let same = g.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(same), g.value(x));
    let eval = g.dropout(x, 0.9, false, &mut rng).unwrap();
    assert_eq!(g.value(eval), g.value(x));
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn softmax_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(&[3, 3], vec![7.0, 7.0, 7.0, 0.0, 1000.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax(x).unwrap();
    let p = g.value(y).data();
    for v in &p[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(p[3] < 1e-300 && (p[4] - 1.0).abs() < 1e-15);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((p[6 + i] - v.exp() / z).abs() < 1e-15);
    }
    for row in p.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones(&[2, 3]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 3]));

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let twice = g.add(x, x).unwrap();
    g.backward(twice).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    let v = g.param(Tensor::ones(&[2]));
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(&[2], vec![1e300, 1e300]).unwrap());
    let err = g.mul(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn composite_net_matches_finite_differences() {
    use psdet::kernels::norm::RunningStats;
    let mut rng = StreamRng::seed_from_u64(5);
    let x0 = random(&mut rng, &[2, 2, 6, 6]);
    let w0 = random(&mut rng, &[3, 2, 3, 3]);
    let gamma0 = Tensor::new(&[3], vec![1.2, 0.7, -0.4]).unwrap();
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, grads: bool| {
        let mut g = Graph::new();
        let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
        let gm = g.param(gamma0.clone());
        let bt = g.param(Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());
        let c = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
        let stats = RunningStats {
            mean: &mut m,
            var: &mut v,
            eps: 1e-5,
            momentum_stat: 0.9,
        };
        let b = g.batch_norm(c, gm, bt, stats, true).unwrap();
        let r = g.relu(b).unwrap();
        let p = g.max_pool2d(r, 2, 2).unwrap();
        let s = g.sum(p).unwrap();
        let loss = g.value(s).data()[0];
        if grads {
            g.backward(s).unwrap();
            (loss, Some((g.grad(xv).unwrap(), g.grad(wv).unwrap())))
        } else {
            (loss, None)
        }
    };
    let (_, grads) = f(&x0, &w0, true);
    let (gx, gw) = grads.unwrap();
    let h = 1e-6;
    let (mut d2, mut a2) = (0.0, 0.0);
    for i in 0..w0.len() {
        let (mut wp, mut wm) = (w0.clone(), w0.clone());
        wp.data_mut()[i] += h;
        wm.data_mut()[i] -= h;
        let num = (f(&x0, &wp, false).0 - f(&x0, &wm, false).0) / (2.0 * h);
        d2 += (num - gw.data()[i]).powi(2);
        a2 += num * num;
    }
    for i in (0..x0.len()).step_by(3) {
        let (mut xp, mut xm) = (x0.clone(), x0.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let num = (f(&xp, &w0, false).0 - f(&xm, &w0, false).0) / (2.0 * h);
        d2 += (num - gx.data()[i]).powi(2);
        a2 += num * num;
    }
    assert!(d2.sqrt() / a2.sqrt() < 1e-4, "rel err {}", d2.sqrt() / a2.sqrt());
}
