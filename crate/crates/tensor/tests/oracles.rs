use cmunet_tensor::{Conv2dSpec, PoolKind, ResizeMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    (b, cin, h, wd): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cg = cin / groups;
    let og = cout / groups;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for co in 0..cout {
            let g = co / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * cin + g * cg + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cg + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = rand_vec(&mut rng, 2 * 3 * 5 * 5);
    let wv = rand_vec(&mut rng, 4 * 3 * 3 * 3);
    let x = Tensor::new(&[2, 3, 5, 5], xv.clone()).unwrap();
    let w = Tensor::new(&[4, 3, 3, 3], wv.clone()).unwrap();
    let y = x.conv2d(&w, None, Conv2dSpec::default()).unwrap();
    let (expect, ho, wo) = naive_conv(&xv, &wv, None, (2, 3, 5, 5), (4, 3, 3), 1, 0, 1);
    assert_eq!(y.shape(), &[2, 4, ho, wo]);
    assert!(max_rel(y.data(), &expect) < 1e-12);

    // f32 path against the same oracle
    let xf = Tensor::<f32>::new(&[2, 3, 5, 5], xv.iter().map(|&v| v as f32).collect()).unwrap();
    let wf = Tensor::<f32>::new(&[4, 3, 3, 3], wv.iter().map(|&v| v as f32).collect()).unwrap();
    let yf: Vec<f64> = xf.conv2d(&wf, None, Conv2dSpec::default()).unwrap().data().iter().map(|&v| v as f64).collect();
    assert!(max_rel(&yf, &expect) < 1e-5);
}

#[test]
fn conv_variants_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // (b, cin, h, w, cout, k, stride, pad, groups)
    let cases = [
        (1, 4, 7, 6, 6, 3, 2, 1, 2),
        (2, 3, 8, 8, 5, 1, 1, 0, 1),
        (1, 2, 9, 9, 3, 7, 2, 3, 1),
        (2, 6, 5, 5, 6, 5, 1, 2, 6),
        (1, 4, 6, 6, 8, 1, 2, 0, 1),
    ];
    for &(b, cin, h, wd, cout, k, s, p, g) in &cases {
        let xv = rand_vec(&mut rng, b * cin * h * wd);
        let wv = rand_vec(&mut rng, cout * (cin / g) * k * k);
        let bv = rand_vec(&mut rng, cout);
        let x = Tensor::new(&[b, cin, h, wd], xv.clone()).unwrap();
        let w = Tensor::new(&[cout, cin / g, k, k], wv.clone()).unwrap();
        let bias = Tensor::new(&[cout], bv.clone()).unwrap();
        let y = x.conv2d(&w, Some(&bias), Conv2dSpec::new(s, p, g)).unwrap();
        let (expect, ho, wo) = naive_conv(&xv, &wv, Some(&bv), (b, cin, h, wd), (cout, k, k), s, p, g);
        assert_eq!(y.shape(), &[b, cout, ho, wo]);
        assert!(max_rel(y.data(), &expect) < 1e-12, "case {:?}", (b, cin, h, wd, cout, k, s, p, g));
    }
}

#[test]
fn depthwise_equals_independent_single_channel_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = 5;
    let xv = rand_vec(&mut rng, 2 * c * 6 * 6);
    let wv = rand_vec(&mut rng, c * 9);
    let x = Tensor::new(&[2, c, 6, 6], xv.clone()).unwrap();
    let w = Tensor::new(&[c, 1, 3, 3], wv.clone()).unwrap();
    let y = x.conv2d(&w, None, Conv2dSpec::same(3).with_groups(c)).unwrap();
    for ch in 0..c {
        let xc = x.select(1, ch).unwrap().reshape(&[2, 1, 6, 6]).unwrap();
        let wc = Tensor::new(&[1, 1, 3, 3], wv[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
        let yc = xc.conv2d(&wc, None, Conv2dSpec::same(3)).unwrap();
        let got = y.select(1, ch).unwrap();
        assert!(max_rel(got.data(), yc.data()) < 1e-14);
    }
}

#[test]
fn linear_matches_brute_force() {
    let x = Tensor::<f64>::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let w = Tensor::new(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
    let b = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
    assert_eq!(x.linear(&w, Some(&b)).unwrap().data(), &[3.0, 5.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (rows, cin, cout) = (7, 5, 3);
    let xv = rand_vec(&mut rng, rows * cin);
    let wv = rand_vec(&mut rng, cout * cin);
    let bv = rand_vec(&mut rng, cout);
    let y = Tensor::new(&[rows, cin], xv.clone())
        .unwrap()
        .linear(&Tensor::new(&[cout, cin], wv.clone()).unwrap(), Some(&Tensor::new(&[cout], bv.clone()).unwrap()))
        .unwrap();
    for r in 0..rows {
        for j in 0..cout {
            let mut acc = bv[j];
            for i in 0..cin {
                acc += xv[r * cin + i] * wv[j * cin + i];
            }
            assert!((y.data()[r * cout + j] - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn broadcast_mul_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (b, c, h, w) = (2, 3, 4, 5);
    let xv = rand_vec(&mut rng, b * c * h * w);
    let gv = rand_vec(&mut rng, b * c);
    let x = Tensor::new(&[b, c, h, w], xv.clone()).unwrap();
    let gate = Tensor::new(&[b, c, 1, 1], gv.clone()).unwrap();
    let y = x.mul(&gate).unwrap();
    let y2 = gate.mul(&x).unwrap();
    for n in 0..b {
        for ch in 0..c {
            for p in 0..h * w {
                let i = (n * c + ch) * h * w + p;
                assert_eq!(y.data()[i], xv[i] * gv[n * c + ch]);
                assert_eq!(y2.data()[i], y.data()[i]);
            }
        }
    }
    // spatial map broadcast over channels
    let sv = rand_vec(&mut rng, b * h * w);
    let s = Tensor::new(&[b, 1, h, w], sv.clone()).unwrap();
    let z = x.add(&s).unwrap();
    for n in 0..b {
        for ch in 0..c {
            for p in 0..h * w {
                let i = (n * c + ch) * h * w + p;
                assert_eq!(z.data()[i], xv[i] + sv[n * h * w + p]);
            }
        }
    }
    assert!(x.mul(&Tensor::ones(&[b, 2, 1, 1])).is_err());
    assert_eq!(x.mul(&Tensor::ones(x.shape())).unwrap().data(), x.data());
    assert_eq!(x.add(&Tensor::zeros(x.shape())).unwrap().data(), x.data());
}

#[test]
fn bilinear_two_by_two_to_four_by_four() {
    let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = x.resize(4, 4, ResizeMode::Bilinear).unwrap();
    // Half-pixel centers: target i samples source (i + 0.5) / 2 - 0.5, clamped
    // to [0, 1], giving coordinates 0, 0.25, 0.75, 1 along each axis. The
    // input is the bilinear function 2y + x, so interpolation is exact.
    #[rustfmt::skip]
    let expect = [
        0.00, 0.25, 0.75, 1.00,
        0.50, 0.75, 1.25, 1.50,
        1.50, 1.75, 2.25, 2.50,
        2.00, 2.25, 2.75, 3.00,
    ];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn nearest_downsample_picks_floor_sources() {
    let x = Tensor::<f64>::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let y = x.resize(2, 2, ResizeMode::Nearest).unwrap();
    assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
}

#[test]
fn activations_and_softmax() {
    let z = Tensor::<f64>::zeros(&[1, 4, 1, 1]);
    assert_eq!(z.silu().data()[0], 0.0);
    assert_eq!(z.sigmoid().data()[0], 0.5);
    let s = z.softmax(1).unwrap();
    assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::new(&[2, 5, 3, 3], rand_vec(&mut rng, 90).iter().map(|v| v * 30.0).collect()).unwrap();
    let p = x.softmax(1).unwrap();
    for n in 0..2 {
        for pos in 0..9 {
            let total: f64 = (0..5).map(|c| p.data()[(n * 5 + c) * 9 + pos]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn mean_pool_equals_four_value_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let v = rand_vec(&mut rng, 64);
    let y = Tensor::new(&[1, 1, 8, 8], v.clone()).unwrap().pool2d(PoolKind::Mean, 2, 2, 0).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            let s = v[2 * oy * 8 + 2 * ox] + v[2 * oy * 8 + 2 * ox + 1] + v[(2 * oy + 1) * 8 + 2 * ox]
                + v[(2 * oy + 1) * 8 + 2 * ox + 1];
            assert_eq!(y.data()[oy * 4 + ox], s / 4.0);
        }
    }
    let m = Tensor::new(&[1, 1, 8, 8], v.clone()).unwrap().pool2d(PoolKind::Max, 3, 2, 1).unwrap();
    assert_eq!(m.shape(), &[1, 1, 4, 4]);
    for oy in 0..4 {
        for ox in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for dy in 0..3 {
                for dx in 0..3 {
                    let (iy, ix) = ((2 * oy + dy) as isize - 1, (2 * ox + dx) as isize - 1);
                    if (0..8).contains(&iy) && (0..8).contains(&ix) {
                        best = best.max(v[iy as usize * 8 + ix as usize]);
                    }
                }
            }
            assert_eq!(m.data()[oy * 4 + ox], best);
        }
    }
    let g = Tensor::new(&[1, 1, 8, 8], v).unwrap().global_max_pool().unwrap();
    assert_eq!(g.shape(), &[1, 1, 1, 1]);
}

#[test]
fn layer_norm_then_inverse_affine_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let c = 6;
    let x = Tensor::new(&[5, c], rand_vec(&mut rng, 5 * c).iter().map(|v| v * 4.0 + 1.0).collect()).unwrap();
    let gamma: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
    let beta: Vec<f64> = (0..c).map(|i| i as f64 - 2.0).collect();
    let y = x
        .layer_norm(&Tensor::new(&[c], gamma.clone()).unwrap(), &Tensor::new(&[c], beta.clone()).unwrap(), 1, 1e-5)
        .unwrap();
    for row in y.data().chunks(c) {
        let std: Vec<f64> = row.iter().enumerate().map(|(k, v)| (v - beta[k]) / gamma[k]).collect();
        let mean = std.iter().sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-6);
    }
}

#[test]
fn ops_are_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = Tensor::<f32>::randn(&[2, 4, 9, 9], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[6, 4, 3, 3], 0.3, &mut rng);
    let run = || {
        x.conv2d(&w, None, Conv2dSpec::same(3))
            .unwrap()
            .silu()
            .resize(18, 18, ResizeMode::Bilinear)
            .unwrap()
            .to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}
