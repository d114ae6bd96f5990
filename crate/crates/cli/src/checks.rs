//! Self-verification suites behind `cmunet check`.

use std::time::Instant;

use cmunet::blocks::{CsAttention, CsMambaBlock, CsMambaConfig, Msaa, MsaaConfig};
use cmunet::loss::{cross_entropy, dice_loss};
use cmunet::metrics::{compute_metrics, ConfusionMatrix};
use cmunet::model::{CmUnet, ModelConfig};
use cmunet::nn::Mode;
use cmunet::scan2d::{cross_merge, cross_scan, MergeMode, Ssm2d};
use cmunet::ssm::{discretize, selective_scan, zoh_gain, ScanInputs, ScanMode, SERIES_THRESHOLD};
use cmunet_tensor::{grad_check, rel_err, ridders, Conv2dSpec, Element, ParamStore, PoolKind, ResizeMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRAD_PROBES: usize = 20;
pub const GRAD_STEP: f64 = 1e-5;
/// Initial steps of the extrapolated parameter probes.
pub const PARAM_STEPS: [f64; 2] = [1e-3, 1e-4];
pub const GRAD_TOL: f64 = 1e-4;
pub const SCAN_TOL_F32: f64 = 1e-5;
pub const SCAN_TOL_F64: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), passed: measured <= tolerance, measured, tolerance }
    }

    fn failed(name: impl Into<String>, why: impl std::fmt::Display) -> Self {
        let name = format!("{} ({why})", name.into());
        Self { name, passed: false, measured: f64::NAN, tolerance: 0.0 }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:<44} measured {:.3e}  tol {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Grads,
    Scan,
    Metrics,
    All,
}

pub fn run_suite(suite: Suite) -> Vec<CheckResult> {
    match suite {
        Suite::Grads => grads_suite(),
        Suite::Scan => scan_suite(100, 0x5CA9),
        Suite::Metrics => metrics_suite(200, 0x3E7),
        Suite::All => {
            let mut v = scan_suite(100, 0x5CA9);
            v.extend(metrics_suite(200, 0x3E7));
            v.extend(grads_suite());
            v
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn<T: Element>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    Tensor::randn(shape, std, &mut rng(seed))
}

fn uniform<T: Element>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

/// `max |p - s| / max |s|` over all elements.
pub fn rel_linf<T: Element>(p: &[T], s: &[T]) -> f64 {
    let diff = p.iter().zip(s).map(|(a, b)| (*a - *b).to_f64().unwrap_or(f64::NAN).abs()).fold(0.0, f64::max);
    let scale = s.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).abs()).fold(0.0, f64::max);
    if diff.is_nan() {
        f64::NAN
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// A random scan problem with realistic positive step sizes and stable `A`.
pub fn random_scan_instance<T: Element>(b: usize, l: usize, d: usize, n: usize, seed: u64) -> (ScanInputs<T>, Tensor<T>, Tensor<T>) {
    let inputs = ScanInputs {
        x: randn(&[b, l, d], 1.0, seed),
        delta: uniform(&[b, l, d], 1e-3, 0.2, seed + 1),
        bsel: randn(&[b, l, n], 1.0, seed + 2),
        csel: randn(&[b, l, n], 1.0, seed + 3),
    };
    (inputs, uniform(&[d, n], -4.0, -0.05, seed + 4), randn(&[d], 1.0, seed + 5))
}

/// Parallel against sequential scan over random shapes, both precisions.
pub fn scan_suite(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut r = rng(seed);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut failure = None;
    for i in 0..instances {
        let (b, l, d, n) = (r.gen_range(1..=4), r.gen_range(1..=4096), r.gen_range(1..=32), r.gen_range(1..=16));
        let s = r.gen::<u64>();
        let e32 = scan_pair::<f32>(b, l, d, n, s);
        let e64 = scan_pair::<f64>(b, l, d, n, s);
        if failure.is_none() && !(e32 <= SCAN_TOL_F32 && e64 <= SCAN_TOL_F64) {
            failure = Some(format!("instance {i}: B={b} L={l} D={d} N={n}"));
        }
        worst32 = worst32.max(if e32.is_nan() { f64::INFINITY } else { e32 });
        worst64 = worst64.max(if e64.is_nan() { f64::INFINITY } else { e64 });
    }
    let mut out = vec![
        CheckResult::new(format!("scan parallel == sequential f32 ({instances})"), worst32, SCAN_TOL_F32),
        CheckResult::new(format!("scan parallel == sequential f64 ({instances})"), worst64, SCAN_TOL_F64),
    ];
    if let Some(f) = failure {
        out.push(CheckResult::failed("scan worst case", f));
    }
    out.extend(discretization_checks());
    out
}

fn scan_pair<T: Element>(b: usize, l: usize, d: usize, n: usize, seed: u64) -> f64 {
    let (inp, a, dskip) = random_scan_instance::<T>(b, l, d, n, seed);
    let seq = selective_scan(&inp, &a, &dskip, ScanMode::Sequential);
    let par = selective_scan(&inp, &a, &dskip, ScanMode::Parallel);
    match (seq, par) {
        (Ok(s), Ok(p)) => rel_linf(p.data(), s.data()),
        _ => f64::NAN,
    }
}

/// Series and closed-form zero-order-hold gains meet at the switch point; `A = 0` is exact.
pub fn discretization_checks() -> Vec<CheckResult> {
    let mut worst = 0.0f64;
    for z in [-SERIES_THRESHOLD, SERIES_THRESHOLD] {
        let below = zoh_gain(z * (1.0 - 1e-12));
        let above = zoh_gain(z * (1.0 + 1e-12));
        let exact = f64::exp_m1(z) / z;
        worst = worst.max(rel_err(below, exact)).max(rel_err(above, exact));
    }
    let mut limit = 0.0f64;
    for (b, delta) in [(0.7, 0.1), (-2.0, 1e-3), (5.0, 0.5)] {
        let (ab, bb) = discretize(0.0f64, b, delta);
        limit = limit.max((ab - 1.0).abs()).max((bb - delta * b).abs());
    }
    vec![
        CheckResult::new("ZOH series/exact agreement at threshold", worst, 1e-9),
        CheckResult::new("ZOH limit A -> 0", limit, 1e-12),
    ]
}

/// Metrics against a rational-arithmetic evaluation on random confusion matrices.
pub fn metrics_suite(matrices: usize, seed: u64) -> Vec<CheckResult> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..matrices {
        let k = r.gen_range(1..=8);
        let rows: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| if r.gen_bool(0.2) { 0 } else { r.gen_range(0..1000) }).collect()).collect();
        let cm = ConfusionMatrix::from_rows(&rows).expect("square");
        if cm.total() == 0 {
            continue;
        }
        let included: Vec<usize> = (0..k).filter(|_| r.gen_bool(0.8)).collect();
        let Ok(rep) = compute_metrics(&cm, &included) else {
            return vec![CheckResult::failed("metrics oracle", "compute_metrics rejected a valid matrix")];
        };
        let o = exact_metrics(&rows, &included);
        for (c, m) in rep.per_class.iter().enumerate() {
            for (got, want) in [(m.precision, o.per_class[c][0]), (m.recall, o.per_class[c][1]), (m.f1, o.per_class[c][2]), (m.iou, o.per_class[c][3])] {
                worst = worst.max((got - want).abs());
            }
        }
        for (got, want) in [(rep.mf1, o.mf1), (rep.miou, o.miou), (rep.oa, o.oa)] {
            worst = worst.max((got - want).abs());
        }
    }
    let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![1, 2]]).expect("square");
    let ex = compute_metrics(&cm, &[0, 1]).expect("non-empty");
    let worked = [(ex.per_class[0].f1, 2.0 / 3.0), (ex.per_class[0].iou, 0.5), (ex.oa, 2.0 / 3.0)]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    vec![
        CheckResult::new(format!("metrics == rational oracle ({matrices})"), worst, 4.0 * f64::EPSILON),
        CheckResult::new("metrics worked example [[2,1],[1,2]]", worked, 4.0 * f64::EPSILON),
    ]
}

/// Reduced fraction `n / d` with `0 / 0 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: u128, den: u128) -> Self {
        if num == 0 || den == 0 {
            return Self { num: 0, den: 1 };
        }
        let g = gcd(num, den);
        Self { num: num / g, den: den / g }
    }

    /// Correctly rounded while both parts stay below 2^53, which holds for
    /// the count ranges used here.
    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

pub struct ExactMetrics {
    /// `[precision, recall, f1, iou]` per class.
    pub per_class: Vec<[f64; 4]>,
    pub mf1: f64,
    pub miou: f64,
    pub oa: f64,
}

/// Precision, recall, F1 (from precision and recall), IoU and OA in exact rationals.
#[allow(clippy::needless_range_loop)]
pub fn exact_metrics(rows: &[Vec<u64>], included: &[usize]) -> ExactMetrics {
    let k = rows.len();
    let total: u128 = rows.iter().flatten().map(|&v| v as u128).sum();
    let mut per = Vec::new();
    let (mut f1s, mut ious) = (Vec::new(), Vec::new());
    for c in 0..k {
        let tp = rows[c][c] as u128;
        let fp: u128 = (0..k).filter(|&t| t != c).map(|t| rows[t][c] as u128).sum();
        let fn_: u128 = (0..k).filter(|&p| p != c).map(|p| rows[c][p] as u128).sum();
        let p = Ratio::new(tp, tp + fp);
        let r = Ratio::new(tp, tp + fn_);
        // 2PR / (P + R) with P = a/b, R = c/d is 2ac / (ad + cb).
        let f1 = Ratio::new(2 * p.num * r.num, p.num * r.den + r.num * p.den);
        let iou = Ratio::new(tp, tp + fp + fn_);
        per.push([p.to_f64(), r.to_f64(), f1.to_f64(), iou.to_f64()]);
        f1s.push(f1);
        ious.push(iou);
    }
    // Class means: error-free two-sum accumulation of the exact per-class values.
    let mean = |v: &[Ratio]| {
        if included.is_empty() {
            return 0.0;
        }
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        for &c in included {
            let x = v[c].to_f64();
            let s = hi + x;
            let bp = s - hi;
            lo += (hi - (s - bp)) + (x - bp);
            hi = s;
        }
        (hi + lo) / included.len() as f64
    };
    let trace: u128 = (0..k).map(|c| rows[c][c] as u128).sum();
    ExactMetrics { mf1: mean(&f1s), miou: mean(&ious), oa: Ratio::new(trace, total).to_f64(), per_class: per }
}

fn op_check<F>(name: &str, f: F, inputs: &[Tensor<f64>]) -> CheckResult
where
    F: Fn(&[Tensor<f64>]) -> cmunet_tensor::Result<Tensor<f64>>,
{
    match grad_check(f, inputs, GRAD_PROBES, GRAD_STEP, 0xC0FFEE) {
        Ok(rep) => CheckResult::new(name, rep.max_rel_err, GRAD_TOL),
        Err(e) => CheckResult::failed(name, e),
    }
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let v = (0..n).map(|_| r.gen_range(0.05..1.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape, v).expect("shape")
}

/// Analytic gradients of every differentiable op and layer, and of the full
/// mini model, against central differences in f64.
pub fn grads_suite() -> Vec<CheckResult> {
    let t = |s: &[usize], seed| randn::<f64>(s, 1.0, seed);
    let mut out = vec![
        op_check("linear", |x| x[0].linear(&x[1], Some(&x[2])), &[t(&[2, 3, 4], 1), t(&[5, 4], 2), t(&[5], 3)]),
        op_check("conv2d 3x3", |x| x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::same(3)), &[t(&[2, 3, 5, 5], 4), t(&[4, 3, 3, 3], 5), t(&[4], 6)]),
        op_check("conv2d strided grouped", |x| x[0].conv2d(&x[1], None, Conv2dSpec::new(2, 1, 2)), &[t(&[1, 4, 6, 6], 7), t(&[6, 2, 3, 3], 8)]),
        op_check("conv2d depthwise 7x7", |x| x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::same(7).with_groups(3)), &[t(&[1, 3, 8, 8], 9), t(&[3, 1, 7, 7], 10), t(&[3], 11)]),
        op_check("max pool 3/2/1", |x| x[0].pool2d(PoolKind::Max, 3, 2, 1), &[t(&[2, 2, 6, 6], 12)]),
        op_check("global mean / max pool", |x| x[0].global_mean_pool()?.add(&x[0].global_max_pool()?), &[t(&[2, 3, 4, 4], 13)]),
        op_check("layer norm (channel axis)", |x| x[0].layer_norm(&x[1], &x[2], 1, 1e-5), &[t(&[2, 4, 3, 3], 14), t(&[4], 15), t(&[4], 16)]),
        op_check("batch norm (train)", |x| Ok(x[0].batch_norm_train(&x[1], &x[2], 1e-5)?.0), &[t(&[3, 2, 3, 3], 17), t(&[2], 18), t(&[2], 19)]),
        op_check("relu / sigmoid / silu / softplus", |x| x[0].relu().add(&x[0].sigmoid())?.add(&x[0].silu())?.add(&x[0].softplus()), &[away_from_zero(&[3, 7], 20)]),
        op_check("broadcast add / mul / div", |x| x[0].add(&x[1])?.mul(&x[1])?.div(&x[2]), &[t(&[2, 3, 4, 4], 21), t(&[1, 3, 1, 1], 22), Tensor::full(&[1, 1, 4, 4], 1.5).add(&uniform(&[1, 1, 4, 4], 0.0, 1.0, 23)).expect("same shape")]),
        op_check("softmax", |x| x[0].softmax(1), &[t(&[2, 4, 3, 3], 24)]),
        op_check("bilinear resize", |x| x[0].resize(7, 5, ResizeMode::Bilinear), &[t(&[1, 2, 3, 4], 25)]),
        op_check("permute / reshape / concat / select", |x| Tensor::concat(&[x[0].permute(&[0, 2, 1])?.reshape(&[2, 12])?, x[1].select(0, 1)?], 1), &[t(&[2, 3, 4], 26), t(&[3, 2, 5], 27)]),
        op_check("sum / mean over axes", |x| x[0].sum_axis(1, true)?.add(&x[0].mean_axis(2, true)?), &[t(&[2, 3, 4], 28)]),
    ];
    out.extend(layer_checks());
    out.push(model_check(0xE2E));
    out
}

fn layer_checks() -> Vec<CheckResult> {
    let t = |s: &[usize], seed| randn::<f64>(s, 1.0, seed);
    let mut out = Vec::new();
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let (inp, a, d) = random_scan_instance::<f64>(2, 37, 3, 4, 30);
        out.push(op_check(
            &format!("selective scan ({mode:?})"),
            move |x| {
                let inp = ScanInputs { x: x[0].clone(), delta: x[1].clone(), bsel: x[3].clone(), csel: x[4].clone() };
                selective_scan(&inp, &x[2], &x[5], mode).map_err(into_tensor_err)
            },
            &[inp.x, inp.delta, a, inp.bsel, inp.csel, d],
        ));
    }
    out.push(op_check(
        "cross scan / merge",
        |x| {
            let s = cross_scan(&x[0]).map_err(into_tensor_err)?;
            cross_merge(&s.mul(&s)?, 3, 4, MergeMode::Mean).map_err(into_tensor_err)
        },
        &[t(&[2, 3, 3, 4], 31)],
    ));

    // Layers: check the input gradient and every parameter gradient through
    // the parameter store.
    let mut r = rng(32);
    let mut store = ParamStore::<f64>::new();
    let cs = CsAttention::new(&mut store, "cs", 4, &mut r).expect("cs");
    out.push(layer_check("CS attention", &store, &t(&[2, 4, 5, 5], 33), |x| cs.forward(x)));

    let mut store = ParamStore::<f64>::new();
    let cfg = CsMambaConfig { state_size: 4, ..CsMambaConfig::default() };
    let block = CsMambaBlock::new(&mut store, "blk", 4, &cfg, &mut r).expect("block");
    out.push(layer_check("CSMamba block", &store, &t(&[2, 4, 4, 4], 34), |x| block.forward(x)));

    let mut store = ParamStore::<f64>::new();
    let ssm = Ssm2d::new(&mut store, "ssm", 3, 4, false, MergeMode::Sum, &mut r).expect("ssm2d");
    out.push(layer_check("2D selective scan", &store, &t(&[1, 3, 3, 4], 35), |x| ssm.forward(x)));

    let mut store = ParamStore::<f64>::new();
    let msaa = Msaa::new(&mut store, "msaa", Some(2), 4, Some(6), &MsaaConfig::default(), &mut r).expect("msaa");
    let prev = t(&[1, 2, 8, 8], 36);
    let next = t(&[1, 6, 2, 2], 37);
    out.push(layer_check("MSAA", &store, &t(&[1, 4, 4, 4], 38), |x| msaa.forward(Some(&prev), x, Some(&next))));

    let target: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7 % 4) as u8).collect();
    let tg = target.clone();
    out.push(op_check("cross entropy", move |x| cross_entropy(&x[0], &tg).map_err(into_tensor_err), &[t(&[2, 4, 3, 3], 39)]));
    out.push(op_check("dice loss", move |x| dice_loss(&x[0], &target).map_err(into_tensor_err), &[t(&[2, 4, 3, 3], 40)]));
    out
}

fn into_tensor_err(e: cmunet::Error) -> cmunet_tensor::TensorError {
    match e {
        cmunet::Error::Tensor(t) => t,
        other => cmunet_tensor::TensorError::Contract { op: "check", msg: other.to_string() },
    }
}

/// Gradient check over the input and `GRAD_PROBES` random parameter entries.
fn layer_check<F>(name: &str, store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> CheckResult
where
    F: Fn(&Tensor<f64>) -> cmunet::Result<Tensor<f64>>,
{
    let input = op_check(&format!("{name} (input)"), |xs| f(&xs[0]).map_err(into_tensor_err), std::slice::from_ref(x));
    if !input.passed {
        return input;
    }
    let params = param_check(store, |_| f(x).map(|y| vec![y]), 0xBEEF);
    match params {
        Ok(e) => CheckResult::new(name, e.max(input.measured), GRAD_TOL),
        Err(e) => CheckResult::failed(name, e),
    }
}

/// Perturbs random parameter entries in place (restoring them afterwards) and
/// compares with backpropagated gradients of `sum_i sum(out_i * r_i)`.
/// `sum w * (plus - minus)` over all outputs, with Neumaier compensation.
fn weighted_difference(plus: &[Tensor<f64>], minus: &[Tensor<f64>], weights: &[Vec<f64>]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for ((a, b), w) in plus.iter().zip(minus).zip(weights) {
        for ((x, y), w) in a.data().iter().zip(b.data().iter()).zip(w) {
            let term = w * (x - y);
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
    }
    sum + comp
}

pub fn param_check<F>(store: &ParamStore<f64>, f: F, seed: u64) -> cmunet::Result<f64>
where
    F: Fn(&ParamStore<f64>) -> cmunet::Result<Vec<Tensor<f64>>>,
{
    let mut r = rng(seed);
    store.zero_grad();
    let outs = f(store)?;
    let weights: Vec<Vec<f64>> = outs.iter().map(|o| (0..o.numel()).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let mut loss: Option<Tensor<f64>> = None;
    for (o, w) in outs.iter().zip(&weights) {
        let term = o.mul(&Tensor::new(o.shape(), w.clone())?)?.sum();
        loss = Some(match loss {
            None => term,
            Some(l) => l.add(&term)?,
        });
    }
    loss.expect("at least one output").backward()?;

    // Perturbing replaces the parameter leaf, so take every gradient first.
    let grads: Vec<Option<Vec<f64>>> = store.params().iter().map(|p| p.grad()).collect();
    let sizes: Vec<usize> = store.params().iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..GRAD_PROBES.min(total) {
        let mut flat = r.gen_range(0..total);
        let pi = sizes.iter().position(|&s| {
            if flat < s {
                true
            } else {
                flat -= s;
                false
            }
        });
        let pi = pi.expect("index in range");
        let p = &store.params()[pi];
        let analytic = grads[pi].as_ref().map_or(0.0, |g| g[flat]);
        let orig = p.tensor().to_vec();
        let mut failure = None;
        let mut eval = |delta: f64| -> Option<Vec<Tensor<f64>>> {
            let mut v = orig.clone();
            v[flat] += delta;
            let out = p.set_data(v).map_err(cmunet::Error::from).and_then(|()| cmunet_tensor::no_grad(|| f(store)));
            out.map_err(|e| {
                failure.get_or_insert(e);
            })
            .ok()
        };
        // Some parameter gradients sit orders of magnitude below the output
        // scale; differencing outputs elementwise before a compensated
        // reduction keeps roundoff well under them.
        let mut quotient = |h: f64| match (eval(h), eval(-h)) {
            (Some(plus), Some(minus)) => weighted_difference(&plus, &minus, &weights) / (2.0 * h),
            _ => f64::NAN,
        };
        // A large initial step may straddle a ReLU or pooling kink; keep the
        // extrapolation with the smaller error estimate.
        let (numeric, _) = PARAM_STEPS
            .iter()
            .map(|&h0| ridders(&mut quotient, h0))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("at least one step");
        p.set_data(orig)?;
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}

/// The mini configuration at 64x64, scalarized over final and auxiliary logits.
pub fn model_check(seed: u64) -> CheckResult {
    let name = "end-to-end mini model 64x64";
    let cfg = ModelConfig { seed, ..ModelConfig::default() };
    let model = match CmUnet::<f64>::new(cfg) {
        Ok(m) => m,
        Err(e) => return CheckResult::failed(name, e),
    };
    let x = uniform::<f64>(&[2, 3, 64, 64], 0.0, 1.0, seed + 1);
    let res = param_check(
        &model.store,
        |_| {
            let o = model.forward(&x, Mode::Train)?;
            Ok(std::iter::once(o.final_logits).chain(o.aux_logits).collect())
        },
        seed + 2,
    );
    match res {
        Ok(e) => CheckResult::new(name, e, GRAD_TOL),
        Err(e) => CheckResult::failed(name, e),
    }
}

/// Runs a suite, printing one line per check; returns whether all passed.
pub fn report(results: &[CheckResult], started: Instant) -> bool {
    for r in results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed, {:.1}s", results.len(), failed, started.elapsed().as_secs_f64());
    failed == 0
}
