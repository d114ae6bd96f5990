//! Selective state-space scan.
//!
//! Each `(batch, channel, state)` lane runs the diagonal recurrence
//!
//! ```text
//! h_k = exp(dt_k * A) * h_{k-1} + phi(dt_k * A) * dt_k * B_k * x_k
//! y_k = <C_k, h_k> + D * x_k
//! ```
//!
//! where `phi(z) = (e^z - 1) / z` is the zero-order-hold input gain. The
//! recurrence is an affine map per step, so it composes associatively and can
//! be evaluated with a prefix scan ([`affine_scan`]).

use std::sync::atomic::{AtomicBool, Ordering};

use cmunet_tensor::{par, Element, Param, ParamStore, Tensor, TensorError};
use rand::Rng;

use crate::error::Result;

/// Below this `|dt * A|` the input gain uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// `(e^z - 1) / z`, continuous at 0.
pub fn zoh_gain<T: Element>(z: T) -> T {
    if z.abs() < T::lit(SERIES_THRESHOLD) {
        // truncation error below z^4 / 120
        T::one() + z * (T::lit(0.5) + z * (T::lit(1.0 / 6.0) + z * T::lit(1.0 / 24.0)))
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_gain`].
fn zoh_gain_deriv<T: Element>(z: T) -> T {
    if z.abs() < T::lit(0.1) {
        // sum_k (k+1) z^k / (k+2)!
        let c = [1.0 / 2.0, 1.0 / 3.0, 1.0 / 8.0, 1.0 / 30.0, 1.0 / 144.0, 1.0 / 840.0, 1.0 / 5760.0];
        c.iter().rev().fold(T::zero(), |acc, &ck| acc * z + T::lit(ck))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Zero-order-hold discretization of one diagonal entry: `(a_bar, b_bar)`.
pub fn discretize<T: Element>(a: T, b: T, delta: T) -> (T, T) {
    let z = delta * a;
    (z.exp(), zoh_gain(z) * delta * b)
}

/// [`discretize`] over one state row.
pub fn discretize_row<T: Element>(a_row: &[T], b_k: &[T], delta: T) -> (Vec<T>, Vec<T>) {
    a_row.iter().zip(b_k).map(|(&a, &b)| discretize(a, b, delta)).unzip()
}

/// One step `h -> a * h + b` of the linear recurrence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineScanElement<T> {
    pub a: T,
    pub b: T,
}

impl<T: Element> AffineScanElement<T> {
    pub fn identity() -> Self {
        Self { a: T::one(), b: T::zero() }
    }

    /// `self ∘ earlier`: apply `earlier` first.
    pub fn compose(self, earlier: Self) -> Self {
        Self { a: self.a * earlier.a, b: self.a * earlier.b + self.b }
    }

    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }
}

/// Inclusive scan `out[k] = a[k] * out[k-1] + b[k]` with `out[-1] = 0`.
///
/// The sequence is cut into `chunk`-sized blocks. Each block is reduced to a
/// single [`AffineScanElement`], the block summaries get an exclusive
/// Blelloch scan (up-sweep, then down-sweep), and every block is re-scanned
/// from its carry-in. Blocks are processed in parallel.
pub fn affine_scan<T: Element>(a: &[T], b: &[T], out: &mut [T], chunk: usize) {
    let n = a.len();
    assert!(b.len() == n && out.len() == n, "affine_scan length mismatch");
    let chunk = chunk.max(1);
    if n <= chunk {
        scan_block(a, b, out, T::zero());
        return;
    }
    let blocks = n.div_ceil(chunk);
    let summaries: Vec<AffineScanElement<T>> = par::map_range(blocks, |i| {
        let (s, e) = (i * chunk, ((i + 1) * chunk).min(n));
        (s..e).fold(AffineScanElement::identity(), |acc, k| AffineScanElement { a: a[k], b: b[k] }.compose(acc))
    });
    let carries = blelloch_exclusive(&summaries);
    par::for_each_chunk_mut(out, chunk, |i, o| {
        let s = i * chunk;
        let e = s + o.len();
        scan_block(&a[s..e], &b[s..e], o, carries[i].b);
    });
}

fn scan_block<T: Element>(a: &[T], b: &[T], out: &mut [T], mut h: T) {
    for ((o, &ak), &bk) in out.iter_mut().zip(a).zip(b) {
        h = ak * h + bk;
        *o = h;
    }
}

/// Exclusive prefix composition: entry `i` is `e[i-1] ∘ ... ∘ e[0]`.
fn blelloch_exclusive<T: Element>(elems: &[AffineScanElement<T>]) -> Vec<AffineScanElement<T>> {
    let m = elems.len().next_power_of_two();
    let mut t = elems.to_vec();
    t.resize(m, AffineScanElement::identity());
    let mut stride = 2;
    while stride <= m {
        for i in (0..m).step_by(stride) {
            let (l, r) = (i + stride / 2 - 1, i + stride - 1);
            t[r] = t[r].compose(t[l]);
        }
        stride *= 2;
    }
    t[m - 1] = AffineScanElement::identity();
    stride = m;
    while stride >= 2 {
        for i in (0..m).step_by(stride) {
            let (l, r) = (i + stride / 2 - 1, i + stride - 1);
            let left = t[l];
            t[l] = t[r];
            t[r] = left.compose(t[r]);
        }
        stride /= 2;
    }
    t.truncate(elems.len());
    t
}

/// Time block of the forward lane kernel; small enough that a block of every
/// state row stays in cache.
const LANE_BLOCK: usize = 256;

/// Block length used by the parallel reverse scan for sequences of length `len`.
pub fn scan_chunk(len: usize) -> usize {
    if par::is_deterministic() {
        256
    } else {
        256usize.max(len.div_ceil(8 * par::num_threads()))
    }
}

static FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: perturb the parallel scan's output so verification can be
/// shown to catch a broken kernel.
pub fn inject_parallel_fault(on: bool) {
    FAULT.store(on, Ordering::SeqCst);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    /// Plain step-by-step recurrence; the reference.
    Sequential,
    /// Block-wise associative scan, parallel over lanes and blocks.
    Parallel,
}

/// Per-step scan inputs: `x, delta: [B, L, D]`, `bsel, csel: [B, L, N]`.
#[derive(Clone, Debug)]
pub struct ScanInputs<T: Element> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub bsel: Tensor<T>,
    pub csel: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    l: usize,
    d: usize,
    n: usize,
}

fn dim_error(msg: String) -> crate::Error {
    TensorError::Dimension { op: "selective_scan", msg }.into()
}

impl<T: Element> ScanInputs<T> {
    fn dims(&self, a: &Tensor<T>, dskip: &Tensor<T>) -> Result<Dims> {
        let xs = self.x.shape();
        if xs.len() != 3 {
            return Err(dim_error(format!("x must be [B, L, D], got {xs:?}")));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        if a.ndim() != 2 || a.shape()[0] != d {
            return Err(dim_error(format!("A must be [{d}, N], got {:?}", a.shape())));
        }
        let n = a.shape()[1];
        if self.delta.shape() != xs {
            return Err(dim_error(format!("delta {:?} vs x {xs:?}", self.delta.shape())));
        }
        for (name, t) in [("B", &self.bsel), ("C", &self.csel)] {
            if t.shape() != [b, l, n] {
                return Err(dim_error(format!("{name} must be [{b}, {l}, {n}], got {:?}", t.shape())));
            }
        }
        if dskip.shape() != [d] {
            return Err(dim_error(format!("D must be [{d}], got {:?}", dskip.shape())));
        }
        Ok(Dims { b, l, d, n })
    }
}

/// Run the selective scan; differentiable in every input.
///
/// Both modes share the reverse-scan backward pass. Hidden states are kept
/// from the forward pass, laid out `[B*D, N, L]`.
pub fn selective_scan<T: Element>(
    inputs: &ScanInputs<T>,
    a: &Tensor<T>,
    dskip: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    let dims = inputs.dims(a, dskip)?;
    let (x, dt, bs, cs) = (inputs.x.data(), inputs.delta.data(), inputs.bsel.data(), inputs.csel.data());
    let (av, dv) = (a.data(), dskip.data());
    let (y, hs) = match mode {
        ScanMode::Sequential => forward_sequential(dims, x, dt, av, bs, cs, dv),
        ScanMode::Parallel => {
            let (mut y, hs) = forward_parallel(dims, x, dt, av, bs, cs, dv);
            if FAULT.load(Ordering::SeqCst) {
                let y0 = y[0];
                y[0] += T::lit(1e-3) * (T::one() + y0.abs());
            }
            (y, hs)
        }
    };
    let saved = (inputs.clone(), a.clone(), dskip.clone());
    Ok(Tensor::from_op(
        vec![dims.b, dims.l, dims.d],
        y,
        vec![
            inputs.x.clone(),
            inputs.delta.clone(),
            a.clone(),
            inputs.bsel.clone(),
            inputs.csel.clone(),
            dskip.clone(),
        ],
        Box::new(move |g, needs| {
            let (inp, a, dskip) = &saved;
            backward(dims, &hs, g, needs, inp, a, dskip)
        }),
    ))
}

fn forward_sequential<T: Element>(
    dm: Dims,
    x: &[T],
    dt: &[T],
    a: &[T],
    bs: &[T],
    cs: &[T],
    dskip: &[T],
) -> (Vec<T>, Vec<T>) {
    let Dims { b: nb, l, d: nd, n } = dm;
    let mut y = vec![T::zero(); nb * l * nd];
    let mut hs = vec![T::zero(); nb * nd * n * l];
    for b in 0..nb {
        for d in 0..nd {
            let lane = b * nd + d;
            let mut h = vec![T::zero(); n];
            for k in 0..l {
                let xi = (b * l + k) * nd + d;
                let si = (b * l + k) * n;
                let (ab, bb) = discretize_row(&a[d * n..(d + 1) * n], &bs[si..si + n], dt[xi]);
                let mut acc = dskip[d] * x[xi];
                for s in 0..n {
                    h[s] = ab[s] * h[s] + bb[s] * x[xi];
                    hs[(lane * n + s) * l + k] = h[s];
                    acc += cs[si + s] * h[s];
                }
                y[xi] = acc;
            }
        }
    }
    (y, hs)
}

struct LaneInputs<'a, T> {
    x: &'a [T],
    delta: &'a [T],
    /// Row of `A` for this channel.
    a: &'a [T],
    /// Selection rows `[N, L]` for this batch entry.
    bt: &'a [T],
    ct: &'a [T],
    skip: T,
}

/// One channel's scan over every state, tiled along time so a block's inputs
/// stay in cache across all states: block summaries (up-sweep), an exclusive
/// Blelloch scan of the summaries per state, then a rescan of each block from
/// its carry-in (down-sweep).
fn scan_lane<T: Element>(inp: &LaneInputs<'_, T>, chunk: usize, h: &mut [T], y: &mut [T]) {
    let (n, l) = (inp.a.len(), inp.x.len());
    let blocks = l.div_ceil(chunk);
    // The up-sweep caches each step's decay in `h` and its drive in `drive`;
    // the down-sweep overwrites `h` with states as it consumes them.
    let mut drive = vec![T::zero(); n * l];
    let mut summaries = vec![AffineScanElement::identity(); n * blocks];
    for j in 0..blocks {
        let range = j * chunk..((j + 1) * chunk).min(l);
        for s in 0..n {
            let mut acc = AffineScanElement::identity();
            for k in range.clone() {
                let (ab, bb) = discretize(inp.a[s], inp.bt[s * l + k], inp.delta[k]);
                let e = AffineScanElement { a: ab, b: bb * inp.x[k] };
                (h[s * l + k], drive[s * l + k]) = (e.a, e.b);
                acc = e.compose(acc);
            }
            summaries[s * blocks + j] = acc;
        }
    }
    let carries: Vec<AffineScanElement<T>> = summaries.chunks(blocks).flat_map(blelloch_exclusive).collect();
    for (yk, &xk) in y.iter_mut().zip(inp.x) {
        *yk = inp.skip * xk;
    }
    for j in 0..blocks {
        let range = j * chunk..((j + 1) * chunk).min(l);
        for s in 0..n {
            let mut hk = carries[s * blocks + j].b;
            for k in range.clone() {
                let i = s * l + k;
                hk = h[i] * hk + drive[i];
                h[i] = hk;
                y[k] += inp.ct[i] * hk;
            }
        }
    }
}

fn forward_parallel<T: Element>(
    dm: Dims,
    x: &[T],
    dt: &[T],
    a: &[T],
    bs: &[T],
    cs: &[T],
    dskip: &[T],
) -> (Vec<T>, Vec<T>) {
    let Dims { b: nb, l, d: nd, n } = dm;
    let chunk = LANE_BLOCK;
    // Every state row sweeps the whole sequence, so strided reads would be
    // repeated N times; gather the selection rows state-major once.
    let transpose = |src: &[T]| {
        let mut t = vec![T::zero(); nb * n * l];
        for b in 0..nb {
            for k in 0..l {
                for s in 0..n {
                    t[(b * n + s) * l + k] = src[(b * l + k) * n + s];
                }
            }
        }
        t
    };
    let (bt, ct) = (transpose(bs), transpose(cs));
    let mut hs = vec![T::zero(); nb * nd * n * l];
    let mut ylanes = vec![T::zero(); nb * nd * l];
    par::for_each_chunk2_mut(&mut hs, n * l, &mut ylanes, l, |lane, h, yl| {
        let (b, d) = (lane / nd, lane % nd);
        let xl: Vec<T> = (0..l).map(|k| x[(b * l + k) * nd + d]).collect();
        let dl: Vec<T> = (0..l).map(|k| dt[(b * l + k) * nd + d]).collect();
        let lane_in = LaneInputs { x: &xl, delta: &dl, a: &a[d * n..(d + 1) * n], bt: &bt[b * n * l..(b + 1) * n * l], ct: &ct[b * n * l..(b + 1) * n * l], skip: dskip[d] };
        scan_lane(&lane_in, chunk, h, yl);
    });
    let mut y = vec![T::zero(); nb * l * nd];
    for b in 0..nb {
        for d in 0..nd {
            let yl = &ylanes[(b * nd + d) * l..(b * nd + d + 1) * l];
            for (k, &v) in yl.iter().enumerate() {
                y[(b * l + k) * nd + d] = v;
            }
        }
    }
    (y, hs)
}

struct LaneGrads<T> {
    gx: Vec<T>,
    gdelta: Vec<T>,
    ga: Vec<T>,
    gb: Vec<T>,
    gc: Vec<T>,
    gd: T,
}

fn backward<T: Element>(
    dm: Dims,
    hs: &[T],
    gy: &[T],
    needs: &[bool],
    inp: &ScanInputs<T>,
    a: &Tensor<T>,
    dskip: &Tensor<T>,
) -> Vec<Option<Vec<T>>> {
    let Dims { b: nb, l, d: nd, n } = dm;
    let (x, dt, bs, cs) = (inp.x.data(), inp.delta.data(), inp.bsel.data(), inp.csel.data());
    let (av, dv) = (a.data(), dskip.data());
    let chunk = scan_chunk(l);

    let lanes: Vec<LaneGrads<T>> = par::map_range(nb * nd, |lane| {
        let (b, d) = (lane / nd, lane % nd);
        let h = &hs[lane * n * l..(lane + 1) * n * l];
        let mut out = LaneGrads {
            gx: vec![T::zero(); l],
            gdelta: vec![T::zero(); l],
            ga: vec![T::zero(); n],
            gb: vec![T::zero(); l * n],
            gc: vec![T::zero(); l * n],
            gd: T::zero(),
        };
        let gyl: Vec<T> = (0..l).map(|k| gy[(b * l + k) * nd + d]).collect();
        for (k, &g) in gyl.iter().enumerate() {
            let xi = (b * l + k) * nd + d;
            out.gx[k] = g * dv[d];
            out.gd += g * x[xi];
        }
        let mut decay = vec![T::zero(); l];
        let mut drive = vec![T::zero(); l];
        let mut adj = vec![T::zero(); l];
        for s in 0..n {
            let a_ds = av[d * n + s];
            let hrow = &h[s * l..(s + 1) * l];
            // adjoint recurrence runs backwards: g_k = C_k gy_k + a_{k+1} g_{k+1}
            for j in 0..l {
                let k = l - 1 - j;
                decay[j] = if j == 0 { T::zero() } else { (dt[(b * l + k + 1) * nd + d] * a_ds).exp() };
                drive[j] = cs[(b * l + k) * n + s] * gyl[k];
            }
            affine_scan(&decay, &drive, &mut adj, chunk);
            for k in 0..l {
                let xi = (b * l + k) * nd + d;
                let si = (b * l + k) * n + s;
                let g = adj[l - 1 - k];
                let hprev = if k == 0 { T::zero() } else { hrow[k - 1] };
                let (delta, bk, xk) = (dt[xi], bs[si], x[xi]);
                let z = delta * a_ds;
                let e = z.exp();
                let gain = zoh_gain(z);
                let ga = g * hprev;
                out.gdelta[k] += ga * a_ds * e + g * bk * xk * e;
                out.ga[s] += ga * delta * e + g * delta * delta * zoh_gain_deriv(z) * bk * xk;
                out.gb[k * n + s] = g * delta * gain * xk;
                out.gx[k] += g * delta * gain * bk;
                out.gc[k * n + s] = hrow[k] * gyl[k];
            }
        }
        out
    });

    let mut gx = vec![T::zero(); nb * l * nd];
    let mut gdelta = vec![T::zero(); nb * l * nd];
    let mut ga = vec![T::zero(); nd * n];
    let mut gb = vec![T::zero(); nb * l * n];
    let mut gc = vec![T::zero(); nb * l * n];
    let mut gd = vec![T::zero(); nd];
    for (lane, lg) in lanes.iter().enumerate() {
        let (b, d) = (lane / nd, lane % nd);
        for k in 0..l {
            let xi = (b * l + k) * nd + d;
            gx[xi] = lg.gx[k];
            gdelta[xi] = lg.gdelta[k];
        }
        for s in 0..n {
            ga[d * n + s] += lg.ga[s];
        }
        let bo = b * l * n;
        for (acc, &v) in gb[bo..bo + l * n].iter_mut().zip(&lg.gb) {
            *acc += v;
        }
        for (acc, &v) in gc[bo..bo + l * n].iter_mut().zip(&lg.gc) {
            *acc += v;
        }
        gd[d] += lg.gd;
    }
    vec![
        needs[0].then_some(gx),
        needs[1].then_some(gdelta),
        needs[2].then_some(ga),
        needs[3].then_some(gb),
        needs[4].then_some(gc),
        needs[5].then_some(gd),
    ]
}

/// Learned parameters of one selective-SSM layer with inner width `D` and
/// state size `N`.
///
/// `A = -exp(a_log)` stays strictly negative for any value of `a_log`.
#[derive(Clone, Debug)]
pub struct SsmParams<T: Element> {
    pub a_log: Param<T>,
    pub d: Param<T>,
    pub delta_w: Param<T>,
    pub delta_b: Param<T>,
    pub b_w: Param<T>,
    pub c_w: Param<T>,
    pub inner_dim: usize,
    pub state_size: usize,
}

/// Inverse of softplus, `ln(e^y - 1)`.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Shared `(a_log, d)` pair: `A[d, n] = -(n + 1)` and `D = 1`.
pub fn init_a_d<T: Element>(store: &mut ParamStore<T>, prefix: &str, inner: usize, state: usize) -> Result<(Param<T>, Param<T>)> {
    let a_log: Vec<T> = (0..inner * state).map(|i| T::lit(((i % state) + 1) as f64).ln()).collect();
    let a_log = store.create(&format!("{prefix}.a_log"), Tensor::new(&[inner, state], a_log)?)?;
    let d = store.create(&format!("{prefix}.d"), Tensor::ones(&[inner]))?;
    Ok((a_log, d))
}

/// Input-dependent projections `(delta_w, delta_b, b_w, c_w)`.
///
/// The delta bias is set so `softplus(bias)` is log-uniform in `[1e-3, 1e-1]`.
pub fn init_projections<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    inner: usize,
    state: usize,
    rng: &mut R,
) -> Result<[Param<T>; 4]> {
    let bound = 1.0 / (inner as f64).sqrt();
    let delta_w = store.create(&format!("{prefix}.delta_w"), Tensor::uniform(&[inner, inner], -bound, bound, rng))?;
    let bias: Vec<T> = (0..inner)
        .map(|_| {
            let dt = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            T::lit(inv_softplus(dt))
        })
        .collect();
    let delta_b = store.create(&format!("{prefix}.delta_b"), Tensor::new(&[inner], bias)?)?;
    let b_w = store.create(&format!("{prefix}.b_w"), Tensor::uniform(&[state, inner], -bound, bound, rng))?;
    let c_w = store.create(&format!("{prefix}.c_w"), Tensor::uniform(&[state, inner], -bound, bound, rng))?;
    Ok([delta_w, delta_b, b_w, c_w])
}

impl<T: Element> SsmParams<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, inner: usize, state: usize, rng: &mut R) -> Result<Self> {
        let (a_log, d) = init_a_d(store, prefix, inner, state)?;
        Self::with_shared(a_log, d, store, prefix, inner, state, rng)
    }

    /// New projections around existing `A` / `D` parameters.
    pub fn with_shared<R: Rng + ?Sized>(
        a_log: Param<T>,
        d: Param<T>,
        store: &mut ParamStore<T>,
        prefix: &str,
        inner: usize,
        state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if inner == 0 || state == 0 {
            return Err(crate::Error::Config("state size and inner width must be positive".into()));
        }
        let [delta_w, delta_b, b_w, c_w] = init_projections(store, prefix, inner, state, rng)?;
        Ok(Self { a_log, d, delta_w, delta_b, b_w, c_w, inner_dim: inner, state_size: state })
    }

    /// `A = -exp(a_log)` as a differentiable tensor.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.tensor().exp().neg()
    }

    /// `delta = softplus(x W_dt^T + b_dt)`, `B = x W_B^T`, `C = x W_C^T`.
    pub fn project(&self, x: &Tensor<T>) -> Result<ScanInputs<T>> {
        let delta = x.linear(&self.delta_w.tensor(), Some(&self.delta_b.tensor()))?.softplus();
        let bsel = x.linear(&self.b_w.tensor(), None)?;
        let csel = x.linear(&self.c_w.tensor(), None)?;
        Ok(ScanInputs { x: x.clone(), delta, bsel, csel })
    }

    /// Project and scan `x: [B, L, D]`.
    pub fn forward(&self, x: &Tensor<T>, mode: ScanMode) -> Result<Tensor<T>> {
        let inputs = self.project(x)?;
        selective_scan(&inputs, &self.a(), &self.d.tensor(), mode)
    }
}
