use cmunet_tensor::{finite_diff_grad, grad_check, Conv2dSpec, PoolKind, ResizeMode, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBES: usize = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Random values bounded away from zero, for ops with a kink there.
fn rnd_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn check<F>(name: &str, f: F, inputs: &[Tensor<f64>])
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let rep = grad_check(f, inputs, PROBES, H, 99).unwrap();
    assert!(rep.max_rel_err <= TOL, "{name}: max rel err {:.3e}", rep.max_rel_err);
    assert!(rep.probes >= PROBES.min(inputs.iter().map(|t| t.numel()).sum()));
}

#[test]
fn finite_difference_of_square() {
    let x = Tensor::new(&[1], vec![3.0f64]).unwrap();
    let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
    assert!((g[0] - 6.0).abs() < 1e-8);
}

#[test]
fn linear_grads() {
    check("linear", |x| x[0].linear(&x[1], Some(&x[2])), &[rnd(&[2, 3, 4], 1), rnd(&[5, 4], 2), rnd(&[5], 3)]);
}

#[test]
fn conv_grads() {
    check(
        "conv2d",
        |x| x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::new(1, 1, 1)),
        &[rnd(&[2, 3, 5, 5], 4), rnd(&[4, 3, 3, 3], 5), rnd(&[4], 6)],
    );
    check(
        "conv2d strided grouped",
        |x| x[0].conv2d(&x[1], None, Conv2dSpec::new(2, 1, 2)),
        &[rnd(&[1, 4, 6, 6], 7), rnd(&[6, 2, 3, 3], 8)],
    );
    check(
        "conv2d depthwise",
        |x| x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::same(5).with_groups(3)),
        &[rnd(&[2, 3, 6, 6], 9), rnd(&[3, 1, 5, 5], 10), rnd(&[3], 11)],
    );
    check(
        "conv2d pointwise",
        |x| x[0].conv2d(&x[1], None, Conv2dSpec::default()),
        &[rnd(&[2, 3, 4, 4], 12), rnd(&[5, 3, 1, 1], 13)],
    );
}

#[test]
fn pool_grads() {
    check("max pool", |x| x[0].pool2d(PoolKind::Max, 3, 2, 1), &[rnd(&[2, 2, 6, 6], 14)]);
    check("mean pool", |x| x[0].pool2d(PoolKind::Mean, 2, 2, 0), &[rnd(&[2, 2, 6, 6], 15)]);
    check("global mean", |x| x[0].global_mean_pool(), &[rnd(&[2, 3, 4, 4], 16)]);
    check("global max", |x| x[0].global_max_pool(), &[rnd(&[2, 3, 4, 4], 17)]);
}

#[test]
fn norm_grads() {
    check(
        "layer_norm",
        |x| x[0].layer_norm(&x[1], &x[2], 1, 1e-5),
        &[rnd(&[2, 6, 3], 18), rnd(&[6], 19), rnd(&[6], 20)],
    );
    check(
        "batch_norm train",
        |x| Ok(x[0].batch_norm_train(&x[1], &x[2], 1e-5)?.0),
        &[rnd(&[3, 4, 3, 3], 21), rnd(&[4], 22), rnd(&[4], 23)],
    );
    let mean = vec![0.1, -0.2, 0.3, 0.0];
    let var = vec![1.5, 0.5, 2.0, 1.0];
    check(
        "batch_norm eval",
        |x| x[0].batch_norm_eval(&x[1], &x[2], &mean, &var, 1e-5),
        &[rnd(&[2, 4, 3, 3], 24), rnd(&[4], 25), rnd(&[4], 26)],
    );
}

#[test]
fn activation_grads() {
    check("silu", |x| Ok(x[0].silu()), &[rnd(&[3, 7], 27)]);
    check("sigmoid", |x| Ok(x[0].sigmoid()), &[rnd(&[3, 7], 28)]);
    check("relu", |x| Ok(x[0].relu()), &[rnd_away_from_zero(&[3, 7], 29)]);
    check("softplus", |x| Ok(x[0].softplus()), &[rnd(&[3, 7], 30)]);
    check("exp", |x| Ok(x[0].exp()), &[rnd(&[3, 7], 31)]);
    check("softmax channel", |x| x[0].softmax(1), &[rnd(&[2, 4, 3, 3], 32)]);
}

#[test]
fn elementwise_grads() {
    check("add", |x| x[0].add(&x[1]), &[rnd(&[2, 3, 4, 4], 33), rnd(&[2, 3, 4, 4], 34)]);
    check("mul", |x| x[0].mul(&x[1]), &[rnd(&[2, 3, 4, 4], 35), rnd(&[2, 3, 4, 4], 36)]);
    check("mul channel map", |x| x[0].mul(&x[1]), &[rnd(&[2, 3, 4, 4], 37), rnd(&[2, 3, 1, 1], 38)]);
    check("add spatial map", |x| x[0].add(&x[1]), &[rnd(&[2, 3, 4, 4], 39), rnd(&[2, 1, 4, 4], 40)]);
    check("sub", |x| x[1].sub(&x[0]), &[rnd(&[2, 3, 1, 1], 41), rnd(&[2, 3, 4, 4], 42)]);
    check(
        "div",
        |x| x[0].div(&x[1]),
        &[rnd(&[2, 3, 4], 43), Tensor::new(&[2, 3, 4], rnd(&[2, 3, 4], 44).data().iter().map(|v| v.abs() + 0.5).collect()).unwrap()],
    );
}

#[test]
fn shape_and_reduce_grads() {
    check("reshape+permute", |x| x[0].reshape(&[6, 4])?.permute(&[1, 0]), &[rnd(&[2, 3, 4], 45)]);
    check("select", |x| x[0].select(1, 2), &[rnd(&[2, 3, 4], 46)]);
    check("concat", |x| Tensor::concat(&[x[0].clone(), x[1].clone()], 1), &[rnd(&[2, 3, 4], 47), rnd(&[2, 2, 4], 48)]);
    check("stack", |x| Tensor::stack(&[x[0].clone(), x[1].clone()], 0), &[rnd(&[3, 4], 49), rnd(&[3, 4], 50)]);
    check("sum_axis", |x| x[0].sum_axis(1, false), &[rnd(&[2, 5, 3], 51)]);
    check("mean_axis", |x| x[0].mean_axis(2, true), &[rnd(&[2, 5, 3], 52)]);
    check("max_axis", |x| x[0].max_axis(1, true), &[rnd(&[2, 5, 3], 53)]);
    check("mean", |x| Ok(x[0].mean()), &[rnd(&[4, 5], 54)]);
}

#[test]
fn resize_grads() {
    check("bilinear up", |x| x[0].resize(7, 9, ResizeMode::Bilinear), &[rnd(&[2, 2, 3, 4], 55)]);
    check("bilinear down", |x| x[0].resize(3, 2, ResizeMode::Bilinear), &[rnd(&[1, 2, 7, 5], 56)]);
    check("nearest", |x| x[0].resize(6, 6, ResizeMode::Nearest), &[rnd(&[1, 2, 3, 3], 57)]);
}

#[test]
fn composite_silu_linear_conv_pipeline() {
    check(
        "silu(linear(conv))",
        |x| {
            let y = x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::same(3))?; // [1,4,5,5]
            let y = y.permute(&[0, 2, 3, 1])?.linear(&x[3], Some(&x[4]))?;
            Ok(y.silu())
        },
        &[rnd(&[1, 3, 5, 5], 58), rnd(&[4, 3, 3, 3], 59), rnd(&[4], 60), rnd(&[6, 4], 61), rnd(&[6], 62)],
    );
}
